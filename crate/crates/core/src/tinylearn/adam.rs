use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::{ParamStore, Tensor2D, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor2D>,
    pub v: Vec<Tensor2D>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor2D> = params
            .tensors()
            .iter()
            .map(|p| Tensor2D::zeros(p.rows, p.cols))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: (params.len(), 1),
                right: (grads.grads.len(), 1),
            });
        }
        for (i, p) in params.tensors().iter().enumerate() {
            if let Some(g) = &grads.grads[i] {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape(),
                        right: g.shape(),
                    });
                }
            }
            if self.m[i].shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: self.m[i].shape(),
                });
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let g = grads.grads[i].as_ref().map(|g| &g.data[..]);
            for j in 0..p.data.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.check_finite("adam_step")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor2D::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = scalar_store(0.25);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let grads = Gradients {
            grads: vec![Some(Tensor2D::scalar(0.0))],
        };
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.tensors()[0].data, [0.25]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        // t=1: m = 0.1, v = 0.001, mhat = 1, vhat = 1, step = 0.1 / (1 + 1e-8).
        let mut params = scalar_store(0.0);
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(config, &params);
        let grads = Gradients {
            grads: vec![Some(Tensor2D::scalar(1.0))],
        };
        adam.step(&mut params, &grads).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.tensors()[0].data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = scalar_store(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let grads = Gradients {
            grads: vec![Some(Tensor2D::zeros(2, 1))],
        };
        assert!(matches!(
            adam.step(&mut params, &grads),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
