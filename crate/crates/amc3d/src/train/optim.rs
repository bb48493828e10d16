//! Adaptive moment optimizer with decoupled weight decay and per-group
//! hyperparameters (β₁=0.9, β₂=0.999, ε=1e-8).

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

/// Group defaults for the low-rank adapters and for queries + head.
pub const LORA_GROUP: GroupConfig = GroupConfig { lr: 1e-4, wd: 1e-5 };
pub const HEAD_GROUP: GroupConfig = GroupConfig { lr: 1e-3, wd: 1e-4 };

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupConfig {
    pub lr: f64,
    pub wd: f64,
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.wd < 0.0 {
            return Err(AmcError::Contract(format!(
                "group needs lr > 0 and wd ≥ 0, got lr={}, wd={}",
                self.lr, self.wd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ParamState<T: Scalar> {
    group: GroupConfig,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer over named parameters. Parameters must be registered with a
/// group before their first step; backbone tensors are simply never
/// registered, which is the structural freeze guarantee.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, ParamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, group: GroupConfig) -> Result<()> {
        group.validate()?;
        self.state.insert(
            name.to_string(),
            ParamState {
                group,
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn registered(&self) -> Vec<&str> {
        self.state.keys().map(|s| s.as_str()).collect()
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    /// One update over all registered parameters present in `grads`.
    /// Any non-finite gradient aborts the whole step before mutating state.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !self.state.contains_key(name) {
                return Err(AmcError::Contract(format!(
                    "gradient for unregistered parameter {name}"
                )));
            }
            if !g.all_finite() {
                return Err(AmcError::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, st) in &mut self.state {
            let Some(g) = grads.get(name) else { continue };
            let p = params.get_mut(name).ok_or_else(|| {
                AmcError::Contract(format!("registered parameter {name} missing from params"))
            })?;
            if p.shape() != g.shape() {
                return Err(AmcError::ShapeMismatch {
                    op: format!("optimizer step on {name}"),
                    lhs: format!("{:?}", p.shape()),
                    rhs: format!("{:?}", g.shape()),
                });
            }
            let (lr, wd) = (st.group.lr, st.group.wd);
            for i in 0..p.numel() {
                let gi = g.data()[i].to_f64();
                let mi = self.beta1 * st.m.data()[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * st.v.data()[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                st.m.data_mut()[i] = T::from_f64(mi);
                st.v.data_mut()[i] = T::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let x = p.data()[i].to_f64();
                let updated = x - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * wd * x;
                p.data_mut()[i] = T::from_f64(updated);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(lr: f64, wd: f64) -> (AdamW<f64>, BTreeMap<String, Tensor<f64>>) {
        let mut opt = AdamW::new();
        opt.register("w", vec![1], GroupConfig { lr, wd }).unwrap();
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(1.0f64));
        (opt, params)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let (mut opt, mut params) = single_param(1e-2, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0f64));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data(), &[1.0]);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_shrink() {
        let (mut opt, mut params) = single_param(1e-2, 0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0f64));
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn three_step_trajectory_matches_scalar_reference() {
        let (lr, wd) = (1e-1, 0.0);
        let (mut opt, mut params) = single_param(lr, wd);
        let gs = [0.5f64, -0.25, 1.0];
        // hand-rolled reference
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar(g));
            opt.step(&mut params, &grads).unwrap();
            assert!((params["w"].data()[0] - x).abs() < 1e-14, "step {t}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let (mut opt, mut params) = single_param(1e-2, 0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        assert!(opt.step(&mut params, &grads).is_err());
        assert_eq!(params["w"].data(), &[1.0]);
    }

    #[test]
    fn unregistered_gradient_is_contract_error() {
        let (mut opt, mut params) = single_param(1e-2, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("backbone.w".to_string(), Tensor::scalar(0.1f64));
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
