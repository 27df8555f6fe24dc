use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::Model;

use super::plan::OptimizerSettings;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay on matrix-shaped parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    settings: OptimizerSettings,
    state: HashMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(settings: OptimizerSettings) -> Self {
        AdamW {
            settings,
            state: HashMap::new(),
        }
    }

    /// Applies the accumulated gradients of every trainable parameter and
    /// clears them. Trainable parameters without a gradient are skipped.
    pub fn step(&mut self, model: &mut Model, lr: f64, step: u64) -> Result<StepStats> {
        let s = self.settings.clone();
        let mut params = model.params_mut();
        let sq: f64 = params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        let clipped = s.grad_clip > 0.0 && grad_norm > s.grad_clip;
        let scale = if clipped { s.grad_clip / grad_norm } else { 1.0 };

        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                t.grad = None;
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let n = grad.len();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - s.beta1.powi(st.t as i32);
            let bc2 = 1.0 - s.beta2.powi(st.t as i32);
            let decay = if t.is_matrix() { s.weight_decay } else { 0.0 };
            let w = t.data_mut();
            for i in 0..n {
                let g = grad[i] * scale;
                st.m[i] = s.beta1 * st.m[i] + (1.0 - s.beta1) * g;
                st.v[i] = s.beta2 * st.v[i] + (1.0 - s.beta2) * g * g;
                let upd = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + s.eps);
                w[i] -= lr * (upd + decay * w[i]);
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModuleFormerConfig;

    #[test]
    fn first_step_moves_by_lr_and_skips_frozen() {
        let mut model = Model::new(ModuleFormerConfig::tiny()).unwrap();
        model.blocks[0].ln_att.bias.grad = Some(vec![0.5; 8]);
        model.blocks[0].ln_ffd.bias.requires_grad = false;
        model.blocks[0].ln_ffd.bias.grad = Some(vec![0.5; 8]);
        let before = model.clone();
        let mut opt = AdamW::new(OptimizerSettings {
            grad_clip: 0.0,
            ..OptimizerSettings::default()
        });
        let stats = opt.step(&mut model, 0.1, 0).unwrap();
        assert!((stats.grad_norm - (8.0 * 0.25f64).sqrt()).abs() < 1e-15);
        // bias-corrected first step is lr·sign(g) up to eps
        for (a, b) in model.blocks[0].ln_att.bias.data().iter().zip(before.blocks[0].ln_att.bias.data()) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
        assert_eq!(model.blocks[0].ln_ffd.bias.data(), before.blocks[0].ln_ffd.bias.data());
        assert_eq!(model.embedding, before.embedding);
        assert!(model.blocks[0].ln_att.bias.grad.is_none());
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut model = Model::new(ModuleFormerConfig::tiny()).unwrap();
        model.lm_head.grad = Some(vec![100.0; model.lm_head.numel()]);
        let mut opt = AdamW::new(OptimizerSettings::default());
        let stats = opt.step(&mut model, 1e-3, 0).unwrap();
        assert!(stats.clipped);
        model.lm_head.grad = Some(vec![f64::NAN; model.lm_head.numel()]);
        assert!(matches!(opt.step(&mut model, 1e-3, 1), Err(Error::Diverged { .. })));
    }
}
