use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;

use super::*;
use crate::nn::{LinearModel, NetworkConfig};
use crate::rng;

fn images(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut r = rng::stream(seed, "test", &[]);
    Array4::from_shape_simple_fn(dim, || r.random_range(0.05..0.95))
}

fn batch(n: usize, seed: u64) -> ImageBatch<f64> {
    ImageBatch::new(images((n, 2, 6, 6), seed), (0..n).map(|i| i % 3).collect(), 3).unwrap()
}

fn tiny() -> Network<f64> {
    Network::new(NetworkConfig::new(2, 3, vec![3, 4]), 21).unwrap()
}

#[test]
fn tiny_model_is_small() {
    assert!(tiny().params().n_elements() <= 1000);
}

#[test]
fn linf_projection_clips_and_is_idempotent() {
    let t = ThreatModel::linf(0.05).unwrap();
    let d = Perturbation {
        delta: Array4::from_shape_vec((1, 1, 1, 2), vec![0.1, -0.2]).unwrap(),
    };
    let p = project(&d, &t).unwrap();
    assert_eq!(p.delta.as_slice().unwrap(), &[0.05, -0.05]);
    assert_eq!(project(&p, &t).unwrap(), p);
    let inside = Perturbation {
        delta: Array4::from_shape_vec((1, 1, 1, 2), vec![0.01, -0.03]).unwrap(),
    };
    assert_eq!(project(&inside, &t).unwrap(), inside);
}

#[test]
fn l2_projection_matches_normalize_and_scale() {
    let t = ThreatModel::new(Norm::L2, 0.5).unwrap();
    let raw = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, -1.0, 1.0, 1.0]).unwrap();
    let p = project(&Perturbation { delta: raw.clone() }, &t).unwrap();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert_eq!(n, 2.0);
    for (a, b) in p.delta.iter().zip(raw.iter()) {
        assert!((a - b / n * 0.5).abs() < 1e-15);
    }
}

#[test]
fn non_finite_perturbation_is_a_numeric_error() {
    let t = ThreatModel::linf(0.1).unwrap();
    let d = Perturbation {
        delta: Array4::from_elem((1, 1, 1, 1), f64::NAN),
    };
    assert!(matches!(project(&d, &t), Err(Error::Numeric(_))));
}

#[test]
fn one_step_pgd_is_fgsm_bit_for_bit() {
    let net = tiny().cast::<f32>();
    let x = images((5, 2, 6, 6), 3).mapv(|v| v as f32);
    let b = ImageBatch::new(x, vec![0, 1, 2, 0, 1], 3).unwrap();
    let t = ThreatModel::linf(8.0 / 255.0).unwrap();
    let spec = AttackSpec {
        step_size: t.eps,
        ..AttackSpec::pgd(t, 1)
    };
    let a = pgd(&net, &b, &spec, Aux::None).unwrap();
    let f = fgsm(&net, &b, &t).unwrap();
    assert_eq!(a, f);
    assert!(a.delta.iter().any(|&v| v != 0.0));
}

#[test]
fn zero_steps_return_the_initialisation() {
    let net = tiny();
    let b = batch(4, 1);
    let t = ThreatModel::linf(0.1).unwrap();
    let spec = AttackSpec {
        init: Init::Uniform { radius: 0.05 },
        seed: 9,
        ..AttackSpec::pgd(t, 0)
    };
    let d = pgd(&net, &b, &spec, Aux::None).unwrap();
    assert_eq!(d.delta, initial_delta(&b.pixels, &spec));
    assert!(d.norms(Norm::Linf).iter().all(|&n| n <= 0.05 && n > 0.0));
    let zero = pgd(&net, &b, &AttackSpec::pgd(t, 0), Aux::None).unwrap();
    assert!(zero.delta.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_model_ascent_follows_the_sign_oracle() {
    // two-class logits (−w·x, w·x) so that the binary score is w·x
    let d = 2 * 4 * 4;
    let mut r = rng::stream(4, "test", &[]);
    let w: Array1<f64> = Array1::from_shape_simple_fn(d, || r.random_range(-1.0..1.0));
    let mut weight = Array2::zeros((2, d));
    weight.row_mut(0).assign(&(-&w));
    weight.row_mut(1).assign(&w);
    let model = LinearModel::new(weight, Array1::zeros(2)).unwrap();
    let x = images((6, 2, 4, 4), 5);
    let labels = vec![0, 1, 1, 0, 1, 0];
    let b = ImageBatch::new(x, labels.clone(), 2).unwrap();
    let eps = 0.03;
    let spec = AttackSpec {
        clamp_pixel_range: false,
        ..AttackSpec::pgd(ThreatModel::linf(eps).unwrap(), 10)
    };
    let delta = pgd(&model, &b, &spec, Aux::None).unwrap().delta;
    for (i, &y) in labels.iter().enumerate() {
        let ys = if y == 1 { 1.0 } else { -1.0 };
        let row = delta.index_axis(ndarray::Axis(0), i);
        for (dv, wv) in row.iter().zip(w.iter()) {
            assert!((dv - (-ys * eps * wv.signum())).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_noise_rfgsm_is_fgsm() {
    let net = tiny();
    let b = batch(4, 2);
    let t = ThreatModel::linf(0.07).unwrap();
    assert_eq!(rfgsm(&net, &b, &t, 0.0, 3).unwrap(), fgsm(&net, &b, &t).unwrap());
    assert!(rfgsm(&net, &b, &t, 0.07, 3).is_err());
}

#[test]
fn os_attack_projection() {
    let net = tiny();
    let b = batch(4, 6);
    let spec = AttackSpec {
        init: Init::Uniform { radius: 4.0 / 255.0 },
        ..AttackSpec::pgd(ThreatModel::linf(16.0 / 255.0).unwrap(), 5)
    };
    let (hat, tilde) = os_attack(&net, &b, 24.0 / 255.0, 16.0 / 255.0, &spec, Aux::None).unwrap();
    hat.check(&b.pixels, &ThreatModel::linf(24.0 / 255.0).unwrap(), true).unwrap();
    assert!(tilde.norms(Norm::Linf).iter().all(|&n| n <= 16.0 / 255.0));
    let e = 16.0 / 255.0;
    for (t, h) in tilde.delta.iter().zip(hat.delta.iter()) {
        assert_eq!(*t, h.max(-e).min(e));
    }
    let (h2, t2) = os_attack(&net, &b, e, e, &spec, Aux::None).unwrap();
    assert_eq!(h2, t2);
    assert!(os_attack(&net, &b, 0.01, e, &spec, Aux::None).is_err());
}

#[test]
fn regularised_losses_require_their_models() {
    let net = tiny();
    let b = batch(2, 1);
    let mut spec = AttackSpec::pgd(ThreatModel::linf(0.1).unwrap(), 2);
    spec.loss = AttackLoss::CeMinusLpips;
    assert!(matches!(pgd(&net, &b, &spec, Aux::None), Err(Error::InvalidArgument(_))));
    spec.loss = AttackLoss::CeMinusDisc;
    assert!(matches!(pgd(&net, &b, &spec, Aux::None), Err(Error::InvalidArgument(_))));
}

fn disc() -> Network<f64> {
    Network::new(NetworkConfig::new(4, 1, vec![3]), 8).unwrap()
}

fn lpips() -> LpipsContext<f64> {
    LpipsContext::all_stages(Network::new(NetworkConfig::new(2, 3, vec![3, 4]), 13).unwrap()).unwrap()
}

#[test]
fn every_objective_gradient_matches_finite_differences() {
    let net = tiny();
    let ctx = lpips();
    let d = disc();
    let b = batch(3, 7);
    let delta = images((3, 2, 6, 6), 8).mapv(|v| (v - 0.5) * 0.1);
    let cases: [(AttackLoss, Aux<f64>); 4] = [
        (AttackLoss::Ce, Aux::None),
        (AttackLoss::Kl, Aux::None),
        (AttackLoss::CeMinusLpips, Aux::Lpips(&ctx)),
        (AttackLoss::CeMinusDisc, Aux::Discriminator(&d)),
    ];
    for (loss, aux) in cases {
        let (_, g) = attack_objective(&net, &b, &delta, loss, 0.7, aux).unwrap();
        let total = |dl: &Array4<f64>| attack_objective(&net, &b, dl, loss, 0.7, aux).unwrap().0.iter().sum::<f64>();
        let h = 1e-6;
        for k in [0usize, 13, 40, 77, 101, 150, 199] {
            let mut p = delta.clone();
            let mut m = delta.clone();
            p.as_slice_mut().unwrap()[k] += h;
            m.as_slice_mut().unwrap()[k] -= h;
            let fd = (total(&p) - total(&m)) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "{loss:?} [{k}]: fd {fd} vs {an}");
        }
    }
}

#[test]
fn attacks_are_deterministic_and_respect_the_ball() {
    let net = tiny();
    let ctx = lpips();
    let b = batch(4, 9);
    let t = ThreatModel::linf(0.1).unwrap();
    let spec = AttackSpec {
        loss: AttackLoss::CeMinusLpips,
        lambda: 1.0,
        init: Init::Uniform { radius: 0.1 },
        seed: 4,
        ..AttackSpec::pgd(t, 4)
    };
    let a = pgd(&net, &b, &spec, Aux::Lpips(&ctx)).unwrap();
    assert_eq!(a, pgd(&net, &b, &spec, Aux::Lpips(&ctx)).unwrap());
    a.check(&b.pixels, &t, true).unwrap();
    let l2 = ThreatModel::new(Norm::L2, 0.5).unwrap();
    let p = pgd(&net, &b, &AttackSpec::pgd(l2, 5), Aux::None).unwrap();
    p.check(&b.pixels, &l2, true).unwrap();
}

#[test]
fn square_initialisation_and_constant_model() {
    let net = tiny();
    let b = batch(4, 10);
    let t = ThreatModel::linf(0.05).unwrap();
    let one = square_attack(&net, &b, &t, &SquareConfig { n_queries: 1, ..Default::default() }).unwrap();
    one.check(&b.pixels, &t, true).unwrap();
    // stripes: every column of every channel is constant before clamping
    for i in 0..4 {
        for c in 0..2 {
            for x in 0..6 {
                let col: Vec<f64> = (0..6).map(|y| one.delta[[i, c, y, x]]).collect();
                let s = col[0].signum();
                assert!(col.iter().all(|v| v.signum() == s));
            }
        }
    }
    let constant = LinearModel::new(Array2::zeros((3, 72)), Array1::from(vec![0.0, 1.0, 0.0])).unwrap();
    let b1 = ImageBatch::new(b.pixels.clone(), vec![1, 1, 1, 1], 3).unwrap();
    let init = square_attack(&constant, &b1, &t, &SquareConfig { n_queries: 1, ..Default::default() }).unwrap();
    let long = square_attack(&constant, &b1, &t, &SquareConfig { n_queries: 50, ..Default::default() }).unwrap();
    assert_eq!(init, long);
}

#[test]
fn square_success_is_monotone_in_queries() {
    let net = tiny();
    let b = batch(12, 11);
    let t = ThreatModel::linf(0.1).unwrap();
    let mut prev = 0;
    for q in [1, 2, 5, 10, 30, 80] {
        let d = square_attack(&net, &b, &t, &SquareConfig { n_queries: q, ..Default::default() }).unwrap();
        d.check(&b.pixels, &t, true).unwrap();
        let pred = crate::nn::loss::argmax_rows(&net.predict(&(&b.pixels + &d.delta)).unwrap());
        let fooled = pred.iter().zip(&b.labels).filter(|(p, y)| p != y).count();
        assert!(fooled >= prev, "{q} queries fooled {fooled} < {prev}");
        prev = fooled;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rfgsm_stays_in_the_ball(seed in 0u64..1000, eps in 0.01f64..0.3, frac in 0.0f64..0.95) {
        let net = tiny();
        let b = batch(3, seed);
        let t = ThreatModel::linf(eps).unwrap();
        let d = rfgsm(&net, &b, &t, eps * frac, seed).unwrap();
        prop_assert!(d.check(&b.pixels, &t, true).is_ok());
    }

    #[test]
    fn projection_is_idempotent(vals in proptest::collection::vec(-2.0f64..2.0, 8), eps in 0.01f64..1.0, l2: bool) {
        let t = ThreatModel::new(if l2 { Norm::L2 } else { Norm::Linf }, eps).unwrap();
        let d = Perturbation { delta: Array4::from_shape_vec((2, 1, 2, 2), vals).unwrap() };
        let once = project(&d, &t).unwrap();
        let twice = project(&once, &t).unwrap();
        for (a, b) in once.delta.iter().zip(twice.delta.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * eps);
        }
        prop_assert!(once.check(&Array4::from_elem((2, 1, 2, 2), 0.5), &t, false).is_ok());
    }
}
