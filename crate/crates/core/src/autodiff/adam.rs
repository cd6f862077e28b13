use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters for [`Adam`]. Defaults are the decoder settings:
/// `alpha = 1e-4`, `beta1 = 0`, `beta2 = 0.9`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Adam {
            config,
            step_count: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam tracks {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(format!(
                    "parameter {:?} / gradient {:?} / state {:?} mismatch",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let pd = p.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= alpha * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(g: f64) -> (Adam, Tensor, Tensor) {
        let p = Tensor::vector(vec![1.0]);
        let adam = Adam::for_params(AdamConfig::default(), std::slice::from_ref(&p));
        (adam, p, Tensor::vector(vec![g]))
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let (mut adam, mut p, g) = one_param(0.5);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        // m_hat = 0.5, v_hat = 0.25, delta = -1e-4 * 0.5 / (0.5 + 1e-8)
        let want = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - (1.0 - 1e-4)).abs() < 1e-11);
        assert_eq!(adam.step_count(), 1);
        assert_eq!(adam.first_moment()[0].data(), &[0.5]);
        assert!((adam.second_moment()[0].data()[0] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut adam, mut p, g) = one_param(0.0);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let (mut adam, mut p, g) = one_param(0.5);
        let before = p.data()[0];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let mid = p.data()[0];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let d1 = (mid - before).abs();
        let d2 = (p.data()[0] - mid).abs();
        assert!(d2 <= d1 * (1.0 + 1e-9), "{d2} > {d1}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut adam, mut p, _) = one_param(0.5);
        let g = Tensor::vector(vec![0.5, 0.5]);
        assert!(matches!(adam.step(&mut [&mut p], &[&g]), Err(Error::Dimension(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
