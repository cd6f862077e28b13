//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{BatchNormMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step; must lie in `[1e-8, 1e-4]`.
    pub step: f64,
    /// Maximum number of coordinates sampled per parameter.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients of a scalar loss against central
/// differences. `build` constructs the loss from leaf vars bound to
/// `params` (in order); it is re-run for every perturbed evaluation.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(params: &[Tensor], config: GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let h = config.step;
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::arg(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::arg(format!("loss must be scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (p, grad) in analytic.iter().enumerate() {
        let n = work[p].len();
        let picks = sample(&mut rng, n, config.coords_per_param.min(n));
        for idx in picks.iter() {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        coords_checked: checked,
    })
}

fn project(g: &mut Graph, y: Var) -> Result<Var> {
    // fixed distinct weights, so every output element gets its own upstream gradient
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7311).sin()).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Runs [`gradient_check`] over every graph primitive on randomized small
/// tensors (at least 100 coordinates each) and returns one report per op.
pub fn check_all_primitives(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = GradCheckConfig {
        step: 1e-6,
        coords_per_param: 128,
        seed: 7,
    };
    let check =
        |params: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| gradient_check(params, cfg, build);
    let rand_tensor = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<(&'static str, GradCheckReport)> = Vec::new();

    let x = rand_tensor(&[4, 12], &mut rng);
    let w = rand_tensor(&[9, 12], &mut rng);
    let b = rand_tensor(&[9], &mut rng);
    reports.push((
        "fully_connected",
        check(&[x, w, b], &|g, v| {
            let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[2, 2, 7, 7], &mut rng);
    let k = rand_tensor(&[3, 2, 5, 5], &mut rng);
    reports.push((
        "conv2d",
        check(&[x, k], &|g, v| {
            let y = g.conv2d(v[0], v[1], 2, 2)?;
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
    reports.push((
        "upsample_nearest",
        check(&[x], &|g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[128], &mut rng);
    reports.push((
        "leaky_relu",
        check(&[x], &|g, v| {
            let y = g.leaky_relu(v[0], 0.02);
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[128], &mut rng);
    reports.push((
        "sigmoid",
        check(&[x], &|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[5, 3, 4, 4], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    reports.push((
        "batch_norm(train)",
        check(&[x.clone(), gamma.clone(), beta.clone()], &|g, v| {
            let mut stats = RunningStats::new(3);
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train(&mut stats))?;
            project(g, y)
        })?,
    ));
    let stats = RunningStats {
        mean: vec![0.1, -0.3, 0.5],
        var: vec![0.7, 1.3, 2.0],
        momentum: 0.9,
    };
    reports.push((
        "batch_norm(eval)",
        check(&[x, gamma, beta], &|g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval(&stats))?;
            project(g, y)
        })?,
    ));

    let a = rand_tensor(&[120], &mut rng);
    let b = rand_tensor(&[120], &mut rng);
    reports.push(("mse_loss", check(&[a, b], &|g, v| g.mse_loss(v[0], v[1]))?));

    let x = rand_tensor(&[8, 16], &mut rng);
    reports.push((
        "l2_normalize",
        check(&[x], &|g, v| {
            let y = g.l2_normalize(v[0])?;
            project(g, y)
        })?,
    ));

    let a = rand_tensor(&[8, 16], &mut rng);
    let b = rand_tensor(&[8, 16], &mut rng);
    reports.push((
        "row_angle",
        check(&[a, b], &|g, v| {
            let na = g.l2_normalize(v[0])?;
            let nb = g.l2_normalize(v[1])?;
            let ang = g.row_angle(na, nb)?;
            project(g, ang)
        })?,
    ));

    let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let b = rand_tensor(&[2, 2, 4, 4], &mut rng);
    reports.push((
        "concat_channels",
        check(&[a, b], &|g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y)
        })?,
    ));

    let x = rand_tensor(&[3, 2, 5, 5], &mut rng);
    let b = rand_tensor(&[2, 5, 5], &mut rng);
    reports.push((
        "untied_bias",
        check(&[x, b], &|g, v| {
            let y = g.untied_bias(v[0], v[1])?;
            project(g, y)
        })?,
    ));

    let z = rand_tensor(&[8, 16], &mut rng);
    let w = rand_tensor(&[6, 16], &mut rng);
    let labels = [0, 1, 2, 3, 4, 5, 0, 1];
    reports.push((
        "cosine_softmax_loss",
        check(&[z, w], &|g, v| {
            let zn = g.l2_normalize(v[0])?;
            let wn = g.l2_normalize(v[1])?;
            let cos = g.fully_connected(zn, wn, None)?;
            g.cosine_softmax_loss(cos, &labels, 16.0, 0.2)
        })?,
    ));

    let a = rand_tensor(&[130], &mut rng);
    let b = rand_tensor(&[130], &mut rng);
    reports.push((
        "add/sub/mul/scale/mean/reshape",
        check(&[a, b], &|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let k = g.scale(m, -0.37);
            let r = g.reshape(k, &[10, 13])?;
            let p = project(g, r)?;
            let mm = g.mean(v[0]);
            g.add(p, mm)
        })?,
    ));

    Ok(reports)
}
