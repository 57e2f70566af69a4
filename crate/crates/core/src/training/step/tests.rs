use ndarray::{array, Array4};
use rand::Rng as _;

use super::*;
use crate::data::{ImageSet, SyntheticSpec};
use crate::nn::loss::kl_divergence;
use crate::nn::NetworkConfig;
use crate::rng;
use crate::schedules::coefficients_at;
use crate::training::{metrics_csv, train, TrainSetup};

fn data(n: usize) -> ImageSet<f64> {
    let spec = SyntheticSpec {
        height: 8,
        width: 8,
        n_pool: n,
        n_test: 8,
        ..SyntheticSpec::default()
    };
    spec.generate::<f64>().unwrap().0
}

fn state() -> ModelState<f64> {
    ModelState::new(NetworkConfig::new(3, 4, vec![4, 6]), 1, 0.995, 0.9, 5e-4).unwrap()
}

fn small_delta(dim: (usize, usize, usize, usize), eps: f64, seed: u64) -> Array4<f64> {
    let mut r = rng::stream(seed, "test", &[]);
    Array4::from_shape_simple_fn(dim, || r.random_range(-eps..=eps))
}

#[test]
fn convex_target_example_and_kl_oracle() {
    let clean = array![[0.9f64, 0.1]];
    let reference = array![[0.5, 0.5]];
    let t = convex_target(&clean, &reference, 0.8);
    assert!((t[[0, 0]] - 0.82).abs() < 1e-15 && (t[[0, 1]] - 0.18).abs() < 1e-15);
    let q = [0.7, 0.3];
    let oracle = 0.82 * (0.82f64 / 0.7).ln() + 0.18 * (0.18f64 / 0.3).ln();
    assert!((kl_divergence(&[0.82, 0.18], &q) - oracle).abs() < 1e-15);
}

#[test]
fn os_loss_with_alpha_one_is_the_trades_term() {
    let s = state();
    let set = data(6);
    let batch = set.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
    let tilde = small_delta(batch.pixels.dim(), 0.03, 1);
    let hat = small_delta(batch.pixels.dim(), 0.05, 2);
    let os = training_loss(&s.network, &batch, &tilde, Some((&hat, 1.0)), 2.0, 0.0, Branch::Os).unwrap();
    let std = training_loss(&s.network, &batch, &tilde, None, 2.0, 0.0, Branch::Standard).unwrap();
    assert!((os.breakdown.l_adv - std.breakdown.l_adv).abs() < 1e-9);
    assert!((os.breakdown.total - std.breakdown.total).abs() < 1e-9);
    let b = &os.breakdown;
    assert!((b.total - (b.ce_clean + b.beta * b.l_adv)).abs() < 1e-12 && b.l_adv >= 0.0);
}

#[test]
fn matching_prediction_gives_zero_kl() {
    let s = state();
    let set = data(4);
    let batch = set.batch(&[0, 1, 2, 3]).unwrap();
    let zero = Array4::zeros(batch.pixels.dim());
    let out = training_loss(&s.network, &batch, &zero, None, 3.0, 0.0, Branch::Standard).unwrap();
    assert_eq!(out.breakdown.l_adv, 0.0);
}

#[test]
fn zero_radius_awp_is_a_plain_step_bit_for_bit() {
    let set = data(8);
    let batch = set.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig {
        total_epochs: 4,
        ..TrainConfig::default()
    };
    let sched = coefficients_at(1, &cfg).unwrap();
    let with = TrainingOptions {
        awp_gamma: 0.0,
        ..TrainingOptions::default()
    };
    let without = TrainingOptions {
        use_awp: false,
        ..TrainingOptions::default()
    };
    let mut a = state();
    let mut b = state();
    let la = oaat_batch(&mut a, &batch, &sched, &cfg, &with, 0, 5).unwrap();
    let lb = oaat_batch(&mut b, &batch, &sched, &cfg, &without, 0, 5).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.network.params(), b.network.params());
    assert!(awp_step(&a.network, &batch, &Array4::zeros(batch.pixels.dim()), 0.0, true)
        .unwrap()
        .values()
        .iter()
        .all(|v| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn weight_perturbation_ascends_and_respects_the_radius() {
    let s = state();
    let set = data(8);
    let batch = set.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let tilde = small_delta(batch.pixels.dim(), 0.03, 3);
    let v = awp_step(&s.network, &batch, &tilde, 0.005, true).unwrap();
    for i in 0..v.len() {
        assert!(v.l2_norm(i) <= 0.005 * s.network.params().l2_norm(i) * (1.0 + 1e-12));
    }
    let input = (&batch.pixels + &(&tilde * 2.0)).mapv(|p| p.clamp(0.0, 1.0));
    let obj = AwpObjective::Ce {
        input: &input,
        labels: &batch.labels,
    };
    let (before, _) = awp_loss(&s.network, &obj).unwrap();
    let mut moved = s.network.clone();
    moved.params_mut().add_scaled(&v, 1.0).unwrap();
    let (after, _) = awp_loss(&moved, &obj).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn trades_without_attack_steps_has_zero_kl() {
    let set = data(8);
    let batch = set.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut s = state();
    let bd = baseline_batch(&mut s, &batch, Variant::Trades, 0.03, 0, 0.1, &TrainingOptions::default(), 0, 1).unwrap();
    assert_eq!(bd.l_adv, 0.0);
    assert_eq!(bd.total, bd.ce_clean);
}

fn toy_setup<'a>(
    cfg: &'a TrainConfig,
    opts: &'a TrainingOptions,
    train_set: &'a ImageSet<f64>,
    val: &'a ImageSet<f64>,
    variant: Variant,
) -> TrainSetup<'a, f64> {
    TrainSetup {
        config: cfg,
        options: opts,
        variant,
        network: NetworkConfig::new(3, 4, vec![4, 6]),
        train: train_set,
        val,
    }
}

#[test]
fn toy_run_covers_both_branches_and_is_reproducible() {
    let train_set = data(24);
    let val = data(8);
    let cfg = TrainConfig {
        total_epochs: 4,
        attack_steps_early: 1,
        attack_steps_late: 2,
        ..TrainConfig::default()
    };
    let opts = TrainingOptions {
        batch_size: 8,
        val_attack_steps: 2,
        ..TrainingOptions::default()
    };
    let setup = toy_setup(&cfg, &opts, &train_set, &val, Variant::Oaat);
    let a = train(&setup, None, None, &mut |_, _| Ok(())).unwrap();
    let b = train(&setup, None, None, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.metrics[0], b.metrics[0]);
    assert_eq!(a.metrics.len(), 4);
    // 3T/4 = 3, so epochs 3 and 4 are oracle-aligned
    for row in &a.metrics[2..] {
        assert!(row.n_os > 0 && row.n_oi > 0, "{row:?}");
    }
    assert_eq!(a.metrics[0].n_standard, 3);
    let csv = metrics_csv(&a.metrics);
    let lrs: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lrs.len(), 4);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let train_set = data(16);
    let val = data(8);
    let cfg = TrainConfig {
        total_epochs: 3,
        attack_steps_early: 1,
        attack_steps_late: 1,
        ..TrainConfig::default()
    };
    let opts = TrainingOptions {
        batch_size: 8,
        val_attack_steps: 1,
        ..TrainingOptions::default()
    };
    for variant in Variant::ALL {
        let setup = toy_setup(&cfg, &opts, &train_set, &val, variant);
        let full = train(&setup, None, None, &mut |_, _| Ok(())).unwrap();
        let part = train(&setup, None, Some(1), &mut |_, _| Ok(())).unwrap();
        assert!(part.interrupted);
        let rest = train(&setup, Some((part.state, part.metrics)), None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(rest.metrics, full.metrics, "{variant}");
        assert_eq!(rest.state.network.params(), full.state.network.params());
    }
}
