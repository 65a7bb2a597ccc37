//! Adam optimizer over the encoder parameters.

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel, Gradient, ParamBlocks};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter. Moments are kept as
/// `f32` so the state round-trips through a checkpoint bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamBlocks<f32>,
    pub v: ParamBlocks<f32>,
}

impl AdamState {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            step: 0,
            m: ParamBlocks::zeros(cfg),
            v: ParamBlocks::zeros(cfg),
        }
    }
}

/// Apply one bias-corrected Adam update in place.
pub fn optimizer_step(
    model: &mut EncoderModel,
    grad: &Gradient,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let shape = model.params.block_lens();
    if grad.block_lens() != shape || state.m.block_lens() != shape || state.v.block_lens() != shape
    {
        return Err(Error::Shape(format!(
            "params {:?}, gradient {:?}, moments {:?}/{:?}",
            shape,
            grad.block_lens(),
            state.m.block_lens(),
            state.v.block_lens()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let params = model.params.blocks_mut();
    let grads = grad.blocks();
    let ms = state.m.blocks_mut();
    let vs = state.v.blocks_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let gi = g[i];
            let mi = cfg.beta1 * f64::from(m[i]) + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * f64::from(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            if lr > 0.0 {
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_hash_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            out_dim: 1,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Fresh state, g = 1: m̂ = 1, v̂ = 1, step = lr / (1 + eps).
        let mut model = EncoderModel::zeros(scalar_cfg()).unwrap();
        let mut grad = Gradient::zeros(&scalar_cfg());
        grad.b2[0] = 1.0;
        let mut st = AdamState::new(&scalar_cfg());
        optimizer_step(&mut model, &grad, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert!((f64::from(model.params.b2[0]) + 0.1).abs() < 1e-7);
        // Coordinates with zero gradient stay put.
        assert_eq!(model.params.w2[0], 0.0);
    }

    #[test]
    fn zero_lr_keeps_params_but_updates_moments() {
        let mut model = EncoderModel::new(scalar_cfg(), 3).unwrap();
        let before = model.params.clone();
        let mut grad = Gradient::zeros(&scalar_cfg());
        grad.w1[0] = 0.5;
        let mut st = AdamState::new(&scalar_cfg());
        optimizer_step(&mut model, &grad, &mut st, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(model.params, before);
        assert_eq!(st.step, 1);
        assert!(st.m.w1[0] != 0.0 && st.v.w1[0] != 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = EncoderModel::zeros(scalar_cfg()).unwrap();
        let other = EncoderConfig {
            hidden_dim: 2,
            ..scalar_cfg()
        };
        let grad = Gradient::zeros(&other);
        let mut st = AdamState::new(&scalar_cfg());
        assert!(matches!(
            optimizer_step(&mut model, &grad, &mut st, 0.1, &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let cfg = EncoderConfig {
            vocab_hash_size: 4,
            embed_dim: 2,
            hidden_dim: 3,
            out_dim: 2,
        };
        let run = || {
            let mut m = EncoderModel::new(cfg, 5).unwrap();
            let mut st = AdamState::new(&cfg);
            let mut g = Gradient::zeros(&cfg);
            for step in 0..10 {
                for (i, x) in g.w2.iter_mut().enumerate() {
                    *x = ((step * 7 + i) as f64).sin();
                }
                optimizer_step(&mut m, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            }
            (m, st)
        };
        assert_eq!(run(), run());
    }
}
