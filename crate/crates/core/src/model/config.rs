use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

use super::tokenizer::VOCAB_SIZE;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleFormerConfig {
    pub d_emb: usize,
    pub n_layer: usize,
    /// Attention heads per layer.
    pub n_att: usize,
    pub d_att: usize,
    /// Feed-forward experts per layer.
    pub n_ffd: usize,
    pub d_ffd: usize,
    pub k_att: usize,
    pub k_ffd: usize,
    /// Router hidden width.
    pub d_rtr: usize,
    pub vocab_size: usize,
    /// Training segment length `T`.
    pub segment_length: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModuleFormerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModuleFormerConfig {
    /// Workstation-sized model used by the training experiments.
    pub fn desk() -> Self {
        ModuleFormerConfig {
            d_emb: 128,
            n_layer: 4,
            n_att: 4,
            d_att: 32,
            n_ffd: 8,
            d_ffd: 256,
            k_att: 2,
            k_ffd: 2,
            d_rtr: 64,
            vocab_size: VOCAB_SIZE,
            segment_length: 64,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// 24-layer, 32-expert, top-2 shape with a 1024-wide residual stream.
    /// Accepted for validation and parameter accounting only.
    pub fn molm_4b_k2() -> Self {
        ModuleFormerConfig {
            d_emb: 1024,
            n_layer: 24,
            n_att: 16,
            d_att: 1024,
            n_ffd: 32,
            d_ffd: 2048,
            k_att: 2,
            k_ffd: 2,
            d_rtr: 512,
            vocab_size: 50_295,
            segment_length: 512,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Very small model for unit tests and gradient checks.
    pub fn tiny() -> Self {
        ModuleFormerConfig {
            d_emb: 8,
            n_layer: 2,
            n_att: 3,
            d_att: 4,
            n_ffd: 4,
            d_ffd: 6,
            k_att: 2,
            k_ffd: 2,
            d_rtr: 4,
            vocab_size: 11,
            segment_length: 8,
            init_std: 0.3,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_emb", self.d_emb),
            ("n_layer", self.n_layer),
            ("n_att", self.n_att),
            ("d_att", self.d_att),
            ("n_ffd", self.n_ffd),
            ("d_ffd", self.d_ffd),
            ("k_att", self.k_att),
            ("k_ffd", self.k_ffd),
            ("d_rtr", self.d_rtr),
            ("vocab_size", self.vocab_size),
            ("segment_length", self.segment_length),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.k_att > self.n_att {
            return Err(config_err!("k_att = {} exceeds n_att = {}", self.k_att, self.n_att));
        }
        if self.k_ffd > self.n_ffd {
            return Err(config_err!("k_ffd = {} exceeds n_ffd = {}", self.k_ffd, self.n_ffd));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(config_err!("init_std must be positive"));
        }
        Ok(())
    }

    /// Closed-form `(total, active per token)` parameter counts.
    ///
    /// Active parameters: embeddings, output head, all norms and routers, the
    /// shared key/value projections, `k_att` heads and `k_ffd` experts.
    pub fn param_counts(&self) -> (usize, usize) {
        let d = self.d_emb;
        let norms = 2 * 2 * d;
        let routers = (d * self.d_rtr + self.n_att * self.d_rtr) + (d * self.d_rtr + self.n_ffd * self.d_rtr);
        let shared_kv = 2 * d * self.d_att;
        let head = 2 * d * self.d_att;
        let expert = 2 * d * self.d_ffd;
        let outer = self.vocab_size * d + 2 * d + d * self.vocab_size;
        let per_layer_total = norms + routers + shared_kv + self.n_att * head + self.n_ffd * expert;
        let per_layer_active = norms + routers + shared_kv + self.k_att * head + self.k_ffd * expert;
        (
            outer + self.n_layer * per_layer_total,
            outer + self.n_layer * per_layer_active,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModuleFormerConfig::desk().validate().unwrap();
        ModuleFormerConfig::tiny().validate().unwrap();
        ModuleFormerConfig::molm_4b_k2().validate().unwrap();
    }

    #[test]
    fn k_above_n_rejected() {
        let mut c = ModuleFormerConfig::desk();
        c.k_ffd = c.n_ffd + 1;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        let mut c = ModuleFormerConfig::desk();
        c.k_att = 5;
        assert!(c.validate().is_err());
        let mut c = ModuleFormerConfig::desk();
        c.d_rtr = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dense_limit_counts_everything() {
        let mut c = ModuleFormerConfig::desk();
        c.k_att = c.n_att;
        c.k_ffd = c.n_ffd;
        let (total, active) = c.param_counts();
        assert_eq!(total, active);
    }

    #[test]
    fn large_shape_is_expert_dominated() {
        let (total, active) = ModuleFormerConfig::molm_4b_k2().param_counts();
        assert!(active < total);
        // dominated by experts: 24·32·2·1024·2048 ≈ 3.2e9
        assert!(total > 3_000_000_000);
        assert!((active as f64) / (total as f64) < 0.15);
    }

    #[test]
    fn toml_round_trip() {
        let c = ModuleFormerConfig::desk();
        let s = toml::to_string(&c).unwrap();
        let back: ModuleFormerConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
