//! Layer plumbing shared by the networks: parameter initialisation and
//! binding a [`ModelWeights`] collection into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Adam, AdamConfig, BatchNormMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const LEAKY_SLOPE: f64 = 0.02;
pub const INIT_STD: f64 = 0.01;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics are stored alongside the parameters but
/// are not trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
}

pub fn trainable_names(w: &ModelWeights) -> Vec<String> {
    w.names().filter(|n| !is_buffer(n)).map(str::to_string).collect()
}

pub fn init_conv<R: Rng + ?Sized>(w: &mut ModelWeights, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut R) {
    w.insert(
        format!("{name}.kernel"),
        Tensor::randn(&[c_out, c_in, k, k], INIT_STD, rng),
    );
}

pub fn init_batch_norm(w: &mut ModelWeights, name: &str, features: usize) {
    w.insert(format!("{name}.gamma"), Tensor::filled(&[features], 1.0));
    w.insert(format!("{name}.beta"), Tensor::zeros(&[features]));
    w.insert(format!("{name}{RUNNING_MEAN}"), Tensor::zeros(&[features]));
    w.insert(format!("{name}{RUNNING_VAR}"), Tensor::filled(&[features], 1.0));
}

pub fn init_fc<R: Rng + ?Sized>(w: &mut ModelWeights, name: &str, n_out: usize, n_in: usize, rng: &mut R) {
    w.insert(format!("{name}.weight"), Tensor::randn(&[n_out, n_in], INIT_STD, rng));
}

/// A weights collection bound into one graph.
pub struct Bound<'w> {
    weights: &'w ModelWeights,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    stats: BTreeMap<String, RunningStats>,
}

impl<'w> Bound<'w> {
    /// Binds every trainable tensor; as graph params when `trainable`,
    /// otherwise as constants that never receive gradient.
    pub fn new(g: &mut Graph, weights: &'w ModelWeights, trainable: bool, mode: Mode) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in weights.iter() {
            if is_buffer(name) {
                continue;
            }
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Bound {
            weights,
            vars,
            mode,
            stats: BTreeMap::new(),
        }
    }

    /// Binds tensors to vars the caller already created, e.g. perturbed
    /// copies during gradient checking.
    pub fn from_vars(weights: &'w ModelWeights, vars: BTreeMap<String, Var>, mode: Mode) -> Self {
        Bound {
            weights,
            vars,
            mode,
            stats: BTreeMap::new(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| {
            Error::format(
                format!("weights '{}'", self.weights.tag),
                format!("missing parameter {name}"),
            )
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn running(&self, name: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.weights.get(&format!("{name}{RUNNING_MEAN}"))?.data().to_vec(),
            var: self.weights.get(&format!("{name}{RUNNING_VAR}"))?.data().to_vec(),
            momentum: 0.9,
        })
    }

    pub fn batch_norm(&mut self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let mut stats = self.running(name)?;
        let y = match self.mode {
            Mode::Train => g.batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats))?,
            Mode::Eval => g.batch_norm(x, gamma, beta, BatchNormMode::Eval(&stats))?,
        };
        if self.mode == Mode::Train {
            self.stats.insert(name.to_string(), stats);
        }
        Ok(y)
    }

    /// Bias-free convolution followed by batch norm and, when `activate`,
    /// a leaky ReLU.
    pub fn conv_bn(
        &mut self,
        g: &mut Graph,
        name: &str,
        x: Var,
        stride: usize,
        pad: usize,
        activate: bool,
    ) -> Result<Var> {
        let k = self.var(&format!("{name}.kernel"))?;
        let y = g.conv2d(x, k, stride, pad)?;
        let y = self.batch_norm(g, name, y)?;
        Ok(if activate { g.leaky_relu(y, LEAKY_SLOPE) } else { y })
    }

    pub fn fc(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        g.fully_connected(x, w, None)
    }

    /// Running-statistics updates collected during a train-mode forward.
    pub fn take_stats(&mut self) -> BTreeMap<String, RunningStats> {
        std::mem::take(&mut self.stats)
    }
}

pub fn apply_stats(w: &mut ModelWeights, stats: BTreeMap<String, RunningStats>) -> Result<()> {
    for (name, s) in stats {
        w.get_mut(&format!("{name}{RUNNING_MEAN}"))?
            .data_mut()
            .copy_from_slice(&s.mean);
        w.get_mut(&format!("{name}{RUNNING_VAR}"))?
            .data_mut()
            .copy_from_slice(&s.var);
    }
    Ok(())
}

/// Adam over the trainable tensors of one weights collection, in name order.
pub struct Trainer {
    names: Vec<String>,
    adam: Adam,
}

impl Trainer {
    pub fn new(config: AdamConfig, w: &ModelWeights) -> Result<Self> {
        let names = trainable_names(w);
        let params = names.iter().map(|n| w.get(n).cloned()).collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            adam: Adam::for_params(config, &params),
            names,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Applies gradients read from `g` for the vars bound in `vars`.
    pub fn step(&mut self, w: &mut ModelWeights, g: &Graph, vars: &BTreeMap<String, Var>) -> Result<()> {
        let grads = self
            .names
            .iter()
            .map(|n| {
                vars.get(n)
                    .map(|v| g.grad(*v))
                    .ok_or_else(|| Error::arg(format!("{n} not bound")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params: Vec<Tensor> = self.names.iter().map(|n| w.get(n).cloned()).collect::<Result<_>>()?;
        {
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            let grefs: Vec<&Tensor> = grads.iter().collect();
            self.adam.step(&mut refs, &grefs)?;
        }
        for (n, p) in self.names.iter().zip(params) {
            *w.get_mut(n)? = p;
        }
        Ok(())
    }
}
