//! ModuleFormer language model: embedding, pre-norm blocks of
//! (mixture-of-attention, sparse mixture-of-experts), final norm, output head.

mod checkpoint;
mod config;
mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModuleFormerConfig;
pub use tokenizer::{byte_detokenize, byte_tokenize, PAD_ID, VOCAB_SIZE};

use crate::attention::{MoaLayer, SegmentCache, SegmentLayout};
use crate::error::{contract_err, dim_err, Result};
use crate::moe::{ExpertInit, RoutedGates, SmoeLayer, UsageStats};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        let mut gain = Tensor::filled(&[d], 1.0);
        let mut bias = Tensor::zeros(&[d]);
        gain.requires_grad = true;
        bias.requires_grad = true;
        Norm { gain, bias }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain)?;
        let b = tape.param(&self.bias)?;
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_att: Norm,
    pub moa: MoaLayer,
    pub ln_ffd: Norm,
    pub smoe: SmoeLayer,
}

/// Module counts of one block, which may differ from the config after
/// insertion or pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n_heads: usize,
    pub head_ext_rows: usize,
    pub n_experts: usize,
    pub expert_ext_rows: usize,
}

pub struct ForwardOutput {
    /// `rows × vocab`.
    pub logits: Var,
    pub att_gates: Vec<RoutedGates>,
    pub ffd_gates: Vec<RoutedGates>,
    /// One per stream, replacing the caches passed in.
    pub caches: Vec<SegmentCache>,
    pub expert_evals: Vec<usize>,
    pub head_evals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModuleFormerConfig,
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    /// `D_emb×V`.
    pub lm_head: Tensor,
    pub step: u64,
    pub tokens_seen: u64,
    /// Usage snapshot carried through checkpoints.
    pub usage: Option<UsageStats>,
}

pub fn expert_init(config: &ModuleFormerConfig) -> ExpertInit {
    ExpertInit {
        std: config.init_std,
        out_std: config.init_std / (2.0 * config.n_layer as f64).sqrt(),
    }
}

impl Model {
    /// Fresh model with every parameter drawn from the seeded generator.
    pub fn new(config: ModuleFormerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = expert_init(&config);
        let d = config.d_emb;
        let mut embedding = Tensor::randn(&[config.vocab_size, d], config.init_std, &mut rng);
        embedding.requires_grad = true;
        let blocks = (0..config.n_layer)
            .map(|_| Block {
                ln_att: Norm::new(d),
                moa: MoaLayer::new(d, config.d_att, config.n_att, config.k_att, config.d_rtr, init, &mut rng),
                ln_ffd: Norm::new(d),
                smoe: SmoeLayer::new(d, config.d_ffd, config.n_ffd, config.k_ffd, config.d_rtr, init, &mut rng),
            })
            .collect();
        let mut lm_head = Tensor::randn(&[d, config.vocab_size], config.init_std, &mut rng);
        lm_head.requires_grad = true;
        Ok(Model {
            embedding,
            blocks,
            ln_f: Norm::new(d),
            lm_head,
            step: 0,
            tokens_seen: 0,
            usage: None,
            config,
        })
    }

    pub fn layouts(&self) -> Vec<BlockLayout> {
        self.blocks
            .iter()
            .map(|b| BlockLayout {
                n_heads: b.moa.heads.len(),
                head_ext_rows: b.moa.router.a_ext.as_ref().map_or(0, Tensor::rows),
                n_experts: b.smoe.experts.len(),
                expert_ext_rows: b.smoe.router.a_ext.as_ref().map_or(0, Tensor::rows),
            })
            .collect()
    }

    pub fn experts_per_layer(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.smoe.experts.len()).collect()
    }

    pub fn empty_usage(&self) -> UsageStats {
        UsageStats::new(&self.experts_per_layer(), self.config.k_ffd)
    }

    pub fn empty_cache(&self) -> SegmentCache {
        SegmentCache::empty(self.blocks.len())
    }

    /// Runs `layout.streams` segments (stacked in `tokens`) through the
    /// model. `caches` is one entry per stream, or empty for no history.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        layout: SegmentLayout,
        caches: &[SegmentCache],
    ) -> Result<ForwardOutput> {
        if tokens.len() != layout.rows() || tokens.is_empty() {
            return Err(dim_err!("{} tokens for layout {layout:?}", tokens.len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract_err!("token {bad} outside vocabulary {}", self.config.vocab_size));
        }
        if !caches.is_empty() && caches.len() != layout.streams {
            return Err(dim_err!("{} caches for {} streams", caches.len(), layout.streams));
        }
        let emb = tape.param(&self.embedding)?;
        let mut h = tape.gather_rows(emb, tokens.to_vec())?;
        let mut new_caches = vec![SegmentCache::empty(self.blocks.len()); layout.streams];
        let mut out = ForwardOutput {
            logits: h,
            att_gates: Vec::with_capacity(self.blocks.len()),
            ffd_gates: Vec::with_capacity(self.blocks.len()),
            caches: Vec::new(),
            expert_evals: Vec::with_capacity(self.blocks.len()),
            head_evals: Vec::with_capacity(self.blocks.len()),
        };
        for (l, block) in self.blocks.iter().enumerate() {
            let layer_caches: Vec<_> = (0..layout.streams)
                .map(|b| caches.get(b).and_then(|c| c.layer(l)))
                .collect();
            let normed = block.ln_att.forward(tape, h)?;
            let att = block.moa.forward(tape, normed, layout, &layer_caches)?;
            h = tape.add(h, att.y)?;
            for (b, c) in att.caches.into_iter().enumerate() {
                new_caches[b].layers[l] = Some(c);
            }
            out.att_gates.push(att.gates);
            out.head_evals.push(att.head_evals);

            let normed = block.ln_ffd.forward(tape, h)?;
            let ffd = block.smoe.forward(tape, normed)?;
            h = tape.add(h, ffd.y)?;
            out.ffd_gates.push(ffd.gates);
            out.expert_evals.push(ffd.expert_evals);
        }
        let h = self.ln_f.forward(tape, h)?;
        let head = tape.param(&self.lm_head)?;
        out.logits = tape.matmul(h, head)?;
        out.caches = new_caches;
        Ok(out)
    }

    /// Single-stream inference: logits for `tokens` and the updated cache.
    pub fn logits(&self, tokens: &[usize], cache: Option<&SegmentCache>) -> Result<(Tensor, SegmentCache)> {
        let mut tape = Tape::new();
        let caches: Vec<SegmentCache> = cache.cloned().into_iter().collect();
        let out = self.forward(&mut tape, tokens, SegmentLayout::single(tokens.len()), &caches)?;
        let logits = tape.value(out.logits).detached();
        Ok((logits, out.caches.into_iter().next().expect("one stream")))
    }

    /// Inserted router rows `A'` of every layer that has them.
    pub fn router_extensions(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| [b.moa.router.a_ext.as_ref(), b.smoe.router.a_ext.as_ref()])
            .flatten()
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.ln_att.gain"), &b.ln_att.gain));
            out.push((format!("{p}.ln_att.bias"), &b.ln_att.bias));
            out.push((format!("{p}.moa.router.a"), &b.moa.router.a));
            out.push((format!("{p}.moa.router.b"), &b.moa.router.b));
            if let Some(e) = &b.moa.router.a_ext {
                out.push((format!("{p}.moa.router.a_ext"), e));
            }
            out.push((format!("{p}.moa.w_k"), &b.moa.w_k));
            out.push((format!("{p}.moa.w_v"), &b.moa.w_v));
            for (h, head) in b.moa.heads.iter().enumerate() {
                out.push((format!("{p}.moa.heads.{h}.w_q"), &head.w_q));
                out.push((format!("{p}.moa.heads.{h}.w_o"), &head.w_o));
            }
            out.push((format!("{p}.ln_ffd.gain"), &b.ln_ffd.gain));
            out.push((format!("{p}.ln_ffd.bias"), &b.ln_ffd.bias));
            out.push((format!("{p}.smoe.router.a"), &b.smoe.router.a));
            out.push((format!("{p}.smoe.router.b"), &b.smoe.router.b));
            if let Some(e) = &b.smoe.router.a_ext {
                out.push((format!("{p}.smoe.router.a_ext"), e));
            }
            for (e, ex) in b.smoe.experts.iter().enumerate() {
                out.push((format!("{p}.smoe.experts.{e}.w_in"), &ex.w_in));
                out.push((format!("{p}.smoe.experts.{e}.w_out"), &ex.w_out));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f.bias));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Same order and names as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.ln_att.gain"), &mut b.ln_att.gain));
            out.push((format!("{p}.ln_att.bias"), &mut b.ln_att.bias));
            out.push((format!("{p}.moa.router.a"), &mut b.moa.router.a));
            out.push((format!("{p}.moa.router.b"), &mut b.moa.router.b));
            if let Some(e) = &mut b.moa.router.a_ext {
                out.push((format!("{p}.moa.router.a_ext"), e));
            }
            out.push((format!("{p}.moa.w_k"), &mut b.moa.w_k));
            out.push((format!("{p}.moa.w_v"), &mut b.moa.w_v));
            for (h, head) in b.moa.heads.iter_mut().enumerate() {
                out.push((format!("{p}.moa.heads.{h}.w_q"), &mut head.w_q));
                out.push((format!("{p}.moa.heads.{h}.w_o"), &mut head.w_o));
            }
            out.push((format!("{p}.ln_ffd.gain"), &mut b.ln_ffd.gain));
            out.push((format!("{p}.ln_ffd.bias"), &mut b.ln_ffd.bias));
            out.push((format!("{p}.smoe.router.a"), &mut b.smoe.router.a));
            out.push((format!("{p}.smoe.router.b"), &mut b.smoe.router.b));
            if let Some(e) = &mut b.smoe.router.a_ext {
                out.push((format!("{p}.smoe.router.a_ext"), e));
            }
            for (e, ex) in b.smoe.experts.iter_mut().enumerate() {
                out.push((format!("{p}.smoe.experts.{e}.w_in"), &mut ex.w_in));
                out.push((format!("{p}.smoe.experts.{e}.w_out"), &mut ex.w_out));
            }
        }
        out.push(("ln_f.gain".to_string(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &mut self.ln_f.bias));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn expert_param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.smoe.experts)
            .map(|e| e.param_count())
            .sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for (_, t) in self.params_mut() {
            t.requires_grad = on;
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(ModuleFormerConfig::tiny()).unwrap()
    }

    #[test]
    fn param_names_unique_and_ordered_alike() {
        let mut m = tiny();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut_names: Vec<String> = m.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn closed_form_matches_tensors() {
        let m = tiny();
        assert_eq!(m.param_count(), m.config.param_counts().0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = tiny();
        let tokens = vec![1, 4, 2, 9, 0, 3];
        let (a, cache) = m.logits(&tokens, None).unwrap();
        assert_eq!(a.shape(), &[6, 11]);
        let (b, _) = m.logits(&tokens, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(0), 6);
        let (c1, _) = m.logits(&tokens, Some(&cache)).unwrap();
        let (c2, _) = m.logits(&tokens, Some(&cache)).unwrap();
        assert_eq!(c1, c2);
        assert_ne!(c1, a);
    }

    #[test]
    fn rejects_out_of_vocab_token() {
        let m = tiny();
        assert!(matches!(m.logits(&[1, 11], None), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = ModuleFormerConfig::tiny();
        c.k_ffd = c.n_ffd + 1;
        assert!(Model::new(c).is_err());
    }
}
