use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn check(params: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>) -> GradCheckReport {
    let cfg = GradCheckConfig {
        step: 1e-6,
        coords_per_param: 128,
        seed: 7,
    };
    gradient_check(params, cfg, build).unwrap()
}

#[test]
fn fully_connected_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let x = g.constant(t(&[2], &[1.0, 1.0]));
    let w = g.constant(t(&[1, 2], &[2.0, 3.0]));
    let b = g.constant(t(&[1], &[1.0]));
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    let x = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let w = g.constant(t(&[2, 2], &[1.0; 4]));
    assert!(matches!(g.fully_connected(x, w, None), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, id, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::filled(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, ones, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);

    let big = g.constant(Tensor::zeros(&[1, 32, 32]));
    let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let y = g.conv2d(big, k, 2, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 16, 16]);

    let k3 = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, k3, 1, 0), Err(Error::Dimension(_))));
    assert!(g.conv2d(x, k3, 1, 1).is_ok());
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 2, 5, 6], &mut rng);
    let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let (stride, pad) = (2, 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    let (oh, ow) = ((5 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1);
    assert_eq!(g.value(y).shape(), &[2, 3, oh, ow]);
    let at = |b: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= 5 || j >= 6 {
            0.0
        } else {
            x.data()[((b * 2 + c) * 5 + i as usize) * 6 + j as usize]
        }
    };
    for b in 0..2 {
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                s += k.data()[((o * 2 + c) * 3 + ki) * 3 + kj] * at(b, c, iy, ix);
                            }
                        }
                    }
                    let got = g.value(y).data()[((b * 3 + o) * oh + oy) * ow + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let same = g.upsample_nearest(x, 1).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let y = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[4.0; 4]);
    assert!(matches!(g.upsample_nearest(x, 0), Err(Error::Argument(_))));
}

#[test]
fn leaky_relu_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[4], &[2.0, -1.0, -3.0, 0.0]));
    let y = g.leaky_relu(x, 0.02);
    close(g.value(y).data(), &[2.0, -0.02, -0.06, 0.0], 1e-15);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[1.0, 0.02, 0.02, 0.02]);
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[0.0, 50.0]));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data()[0], 0.5);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!((g.grad(x).data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::filled(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));

    let x = g.constant(t(&[2, 1], &[-1.0, 1.0]));
    let mut stats = RunningStats::new(1);
    let y = g.batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats)).unwrap();
    let s = 1.0 / (1.0 + 1e-5f64).sqrt();
    close(g.value(y).data(), &[-s, s], 1e-15);
    // running stats: momentum 0.9 towards batch mean 0 and unbiased var 2
    close(&stats.mean, &[0.0], 1e-15);
    close(&stats.var, &[0.9 + 0.1 * 2.0], 1e-15);

    let x = g.constant(t(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]));
    let mut stats = RunningStats::new(1);
    let y = g.batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats)).unwrap();
    close(g.value(y).data(), g.value(x).data(), 1e-5);

    let x = g.constant(t(&[3, 2], &[0.3, -2.0, 1.5, 0.1, -0.7, 4.0]));
    let gamma2 = g.constant(Tensor::filled(&[2], 1.0));
    let beta2 = g.constant(Tensor::zeros(&[2]));
    let stats = RunningStats::new(2);
    let y = g.batch_norm(x, gamma2, beta2, BatchNormMode::Eval(&stats)).unwrap();
    // identity up to the 1/sqrt(1 + eps) factor
    close(g.value(y).data(), g.value(x).data(), 4.0 * 5e-6 + 1e-12);

    let one = g.constant(t(&[1, 2], &[0.3, 0.4]));
    let mut stats = RunningStats::new(2);
    assert!(matches!(
        g.batch_norm(one, gamma2, beta2, BatchNormMode::Train(&mut stats)),
        Err(Error::Argument(_))
    ));
}

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[0.3, 0.4]));
    let l = g.mse_loss(a, a).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let a = g.constant(t(&[2], &[0.0, 0.0]));
    let b = g.constant(t(&[2], &[1.0, 1.0]));
    let l = g.mse_loss(a, b).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let c = g.constant(t(&[3], &[1.0; 3]));
    assert!(matches!(g.mse_loss(a, c), Err(Error::Dimension(_))));

    let mut g = Graph::new();
    let w = g.param(t(&[1], &[0.0]));
    let target = g.constant(t(&[1], &[2.0]));
    let l = g.mse_loss(w, target).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).data(), &[-4.0]);
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.l2_normalize(x).unwrap();
    close(g.value(y).data(), &[0.6, 0.8], 1e-15);
    let z = g.l2_normalize(y).unwrap();
    close(g.value(z).data(), &[0.6, 0.8], 1e-15);
    let zero = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.l2_normalize(zero), Err(Error::DegenerateInput(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.0]));
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[6.0]);

    let v = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::Argument(_))));
}

#[test]
fn unreachable_and_frozen_nodes_get_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(t(&[2], &[5.0, 5.0]));
    let frozen = g.constant(t(&[2], &[3.0, 3.0]));
    let y = g.mul(x, frozen).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[3.0, 3.0]);
    assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(frozen).data(), &[0.0, 0.0]);
}

#[test]
fn second_backward_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&[2, 1, 4, 4], &mut rng));
    let k = g.param(rand_tensor(&[2, 1, 3, 3], &mut rng));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    let a = g.leaky_relu(y, 0.02);
    let target = g.constant(rand_tensor(&[2, 2, 4, 4], &mut rng));
    let l = g.mse_loss(a, target).unwrap();
    g.backward(l).unwrap();
    let once = (g.grad(x), g.grad(k), g.grad(a));
    g.backward(l).unwrap();
    for (first, now) in [(once.0, g.grad(x)), (once.1, g.grad(k)), (once.2, g.grad(a))] {
        for (p, q) in first.data().iter().zip(now.data()) {
            assert_eq!(2.0 * p, *q);
        }
    }
    g.zero_grad();
    assert_eq!(g.grad(x).max_abs(), 0.0);
}

#[test]
fn composite_conv_leaky_mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[1, 6, 6], &mut rng);
    let k = rand_tensor(&[2, 1, 3, 3], &mut rng);
    let target = rand_tensor(&[2, 3, 3], &mut rng);
    let r = check(&[x, k], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        let a = g.leaky_relu(y, 0.02);
        let tv = g.constant(target.clone());
        g.mse_loss(a, tv)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradient_check_quadratic_and_errors() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
    let r = check(std::slice::from_ref(&x), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    });
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert_eq!(r.coords_checked, 3);

    let bad = GradCheckConfig {
        step: 1.0,
        ..Default::default()
    };
    assert!(matches!(
        gradient_check(std::slice::from_ref(&x), bad, |g, v| Ok(g.sum(v[0]))),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        gradient_check(&[x], GradCheckConfig::default(), |_, v| Ok(v[0])),
        Err(Error::Argument(_))
    ));
}

#[test]
fn every_primitive_passes_gradient_check() {
    let reports = check_all_primitives(2024).unwrap();
    assert_eq!(reports.len(), 14);
    for (name, r) in &reports {
        assert!(r.coords_checked >= 100, "{name}: only {} coords", r.coords_checked);
        assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_formula(h in 1usize..12, p in 0usize..3, kh in 1usize..6, s in 1usize..4) {
        prop_assume!(kh <= h + 2 * p);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, h, h]));
        let k = g.constant(Tensor::zeros(&[2, 1, kh, kh]));
        let y = g.conv2d(x, k, s, p).unwrap();
        let want = (h + 2 * p - kh) / s + 1;
        prop_assert_eq!(g.value(y).shape(), &[2, want, want]);
    }

    #[test]
    fn l2_normalize_yields_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(n > 1e-6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v));
        let y = g.l2_normalize(x).unwrap();
        let norm = g.value(y).norm();
        prop_assert!((norm - 1.0).abs() <= 1e-12);
    }
}
