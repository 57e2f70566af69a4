use ndarray::{Array2, Array4};
use rand::Rng as _;

use super::*;
use crate::rng;

fn random_array4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut r = rng::stream(seed, "test", &[]);
    Array4::from_shape_fn(dim, |_| r.random_range(0.0..1.0))
}

fn random_array2(dim: (usize, usize), seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "test", &[]);
    Array2::from_shape_fn(dim, |_| r.random_range(-1.0..1.0))
}

fn tiny() -> Network<f64> {
    let mut net = Network::new(NetworkConfig::new(2, 3, vec![3, 4]), 11).unwrap();
    // non-trivial BN affine parameters and running statistics
    let mut r = rng::stream(5, "test", &[]);
    for i in 0..net.params().len() {
        if net.params().names()[i].contains("bn") {
            net.params_mut().get_mut(i).mapv_inplace(|v| v + r.random_range(-0.3..0.3));
        }
    }
    for i in 0..net.buffers().len() {
        net.buffers_mut()
            .get_mut(i)
            .mapv_inplace(|v| v + r.random_range(0.0..0.2));
    }
    net
}

/// Scalar probe objective: `Σ c ⊙ logits + Σ t ⊙ stage0`.
fn objective(net: &Network<f64>, x: &Array4<f64>, mode: Mode, c: &Array2<f64>, t: &Array4<f64>) -> f64 {
    let tape = net.forward(x, mode).unwrap();
    (&tape.logits * c).sum() + (tape.stage_output(0) * t).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_gradients(mode: Mode) {
    let net = tiny();
    let x = random_array4((3, 2, 5, 5), 1);
    let c = random_array2((3, 3), 2);
    let t = random_array4((3, 3, 5, 5), 3) - 0.5;
    let tape = net.forward(&x, mode).unwrap();
    let g = net.backward(&tape, Some(&c), &[(0, &t)], Want::BOTH).unwrap();
    let gx = g.input.unwrap();
    let gp = g.params.unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in [0usize, 7, 23, 49, 61, 149] {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        let fd = (objective(&net, &xp, mode, &c, &t) - objective(&net, &xm, mode, &c, &t)) / (2.0 * h);
        worst = worst.max(rel_err(fd, gx.as_slice().unwrap()[idx]));
    }
    for p in 0..net.params().len() {
        let n = net.params().get(p).len();
        for k in [0, n / 2, n - 1] {
            let mut np = net.clone();
            let mut nm = net.clone();
            np.params_mut().get_mut(p).as_slice_mut().unwrap()[k] += h;
            nm.params_mut().get_mut(p).as_slice_mut().unwrap()[k] -= h;
            let fd = (objective(&np, &x, mode, &c, &t) - objective(&nm, &x, mode, &c, &t)) / (2.0 * h);
            let an = gp.get(p).as_slice().unwrap()[k];
            let e = rel_err(fd, an);
            assert!(e < 1e-4, "{} [{k}]: fd {fd} vs {an}", net.params().names()[p]);
        }
    }
    assert!(worst < 1e-4, "input gradient rel err {worst}");
}

#[test]
fn eval_mode_gradients_match_finite_differences() {
    check_gradients(Mode::Eval);
}

#[test]
fn train_mode_gradients_match_finite_differences() {
    check_gradients(Mode::Train);
}

#[test]
fn eval_mode_is_per_sample() {
    let net = tiny();
    let x = random_array4((4, 2, 6, 6), 9);
    let full = net.predict(&x).unwrap();
    let one = net.predict(&x.slice(ndarray::s![2..3, .., .., ..]).to_owned()).unwrap();
    for j in 0..3 {
        assert!((full[[2, j]] - one[[0, j]]).abs() < 1e-12);
    }
}

#[test]
fn running_stats_move_toward_batch_stats() {
    let mut net = tiny();
    let before = net.buffers().clone();
    let x = random_array4((4, 2, 6, 6), 4);
    let tape = net.forward(&x, Mode::Train).unwrap();
    net.absorb_batch_stats(&tape);
    assert_ne!(&before, net.buffers());
    let eval = net.forward(&x, Mode::Eval).unwrap();
    let before_buf = net.buffers().clone();
    net.absorb_batch_stats(&eval);
    assert_eq!(&before_buf, net.buffers());
}

#[test]
fn wrong_channel_count_is_a_shape_error() {
    let net = tiny();
    assert!(net.predict(&Array4::zeros((1, 3, 4, 4))).is_err());
}

#[test]
fn parameter_count_of_tiny_probe_stays_small() {
    assert!(tiny().params().n_elements() < 1000);
}
