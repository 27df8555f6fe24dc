//! Router, top-k gating, feed-forward experts and usage statistics.
//!
//! The router computes `h(x) = A · ReLU(B x)` and a softmax over modules;
//! only the `k` most probable modules keep a nonzero gate, and the gates are
//! the raw softmax probabilities at those indices (no renormalization).

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Per-token routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Full softmax distribution, `T×N`.
    pub probs: Tensor,
    /// `T×k` module indices, each row in descending probability order.
    pub selected: Vec<usize>,
    pub top_k: usize,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_modules(&self) -> usize {
        self.probs.cols()
    }

    pub fn selected_for(&self, t: usize) -> &[usize] {
        &self.selected[t * self.top_k..(t + 1) * self.top_k]
    }

    /// Gate values `g(m|x)`: `π` at the selected indices, zero elsewhere.
    pub fn gates(&self) -> Tensor {
        let n = self.n_modules();
        let mut g = Tensor::zeros(&[self.tokens(), n]);
        for t in 0..self.tokens() {
            for &m in self.selected_for(t) {
                g.data_mut()[t * n + m] = self.probs.get(t, m);
            }
        }
        g
    }

    /// Token rows routed to each module, ascending.
    pub fn rows_per_module(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_modules()];
        for t in 0..self.tokens() {
            for &m in self.selected_for(t) {
                rows[m].push(t);
            }
        }
        rows
    }
}

/// Decision plus the tape node holding `π`, for losses and gate weights.
#[derive(Debug, Clone)]
pub struct RoutedGates {
    pub decision: GateDecision,
    pub probs: Var,
    /// `B x` before the ReLU.
    pub pre_activation: Var,
}

impl RoutedGates {
    /// Column of gate values for the rows routed to `module`.
    pub fn gate_column(&self, tape: &mut Tape, module: usize, rows: &[usize]) -> Result<Var> {
        let n = self.decision.n_modules();
        tape.gather_elems(self.probs, rows.iter().map(|&r| r * n + module).collect())
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// Module embeddings `A`, `N×D_rtr`.
    pub a: Tensor,
    /// Input projection `B`, stored `D_emb×D_rtr` for row-vector inputs.
    pub b: Tensor,
    /// Embeddings `A'` of inserted modules, `N_new×D_rtr`.
    pub a_ext: Option<Tensor>,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(n: usize, d_emb: usize, d_rtr: usize, std: f64, rng: &mut R) -> Self {
        let mut a = Tensor::randn(&[n, d_rtr], std, rng);
        let mut b = Tensor::randn(&[d_emb, d_rtr], std, rng);
        a.requires_grad = true;
        b.requires_grad = true;
        Router { a, b, a_ext: None }
    }

    pub fn n_modules(&self) -> usize {
        self.a.rows() + self.a_ext.as_ref().map_or(0, Tensor::rows)
    }

    pub fn n_base(&self) -> usize {
        self.a.rows()
    }

    pub fn d_rtr(&self) -> usize {
        self.a.cols()
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel() + self.a_ext.as_ref().map_or(0, Tensor::numel)
    }

    /// Router logits `[A; A'] · ReLU(B x)` for every row of `x`.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.logits_and_projection(tape, x).map(|(l, _)| l)
    }

    fn logits_and_projection(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let b = tape.param(&self.b)?;
        let a = tape.param(&self.a)?;
        let proj = tape.matmul(x, b)?;
        let hidden = tape.relu(proj)?;
        let base = tape.matmul_nt(hidden, a)?;
        let logits = match &self.a_ext {
            None => base,
            Some(ext) => {
                let e = tape.param(ext)?;
                let extra = tape.matmul_nt(hidden, e)?;
                tape.concat_cols(base, extra)?
            }
        };
        Ok((logits, proj))
    }

    pub fn route(&self, tape: &mut Tape, x: Var, k: usize) -> Result<RoutedGates> {
        let n = self.n_modules();
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k {k} must lie in 1..={n}")));
        }
        let (logits, pre_activation) = self.logits_and_projection(tape, x)?;
        let probs = tape.softmax(logits, 1)?;
        let pt = tape.value(probs).detached();
        let mut selected = Vec::with_capacity(pt.rows() * k);
        for t in 0..pt.rows() {
            selected.extend(top_k_indices(pt.row(t), k));
        }
        Ok(RoutedGates {
            decision: GateDecision {
                probs: pt,
                selected,
                top_k: k,
            },
            probs,
            pre_activation,
        })
    }

    /// Appends `n_new` rows to `A'` at `scale` and freezes `A` and `B`.
    pub fn extend<R: Rng + ?Sized>(&mut self, n_new: usize, scale: f64, rng: &mut R) {
        if n_new == 0 {
            return;
        }
        let d = self.d_rtr();
        let fresh = Tensor::randn(&[n_new, d], scale, rng);
        let mut ext = match self.a_ext.take() {
            None => fresh,
            Some(old) => {
                let rows = old.rows() + n_new;
                let mut data = old.into_data();
                data.extend_from_slice(fresh.data());
                Tensor::new(vec![rows, d], data).expect("consistent width")
            }
        };
        ext.requires_grad = true;
        self.a_ext = Some(ext);
        self.a.requires_grad = false;
        self.b.requires_grad = false;
    }

    /// Deletes module rows (indices over the concatenated `[A; A']`).
    pub fn remove_modules(&mut self, drop: &[usize]) -> Result<()> {
        let base = self.n_base();
        let (in_base, in_ext): (Vec<usize>, Vec<usize>) = drop.iter().partition(|&&m| m < base);
        if !in_base.is_empty() {
            if in_base.len() >= base {
                return Err(contract_err!("cannot remove every base router row"));
            }
            self.a = self.a.without_rows(&in_base)?;
        }
        if !in_ext.is_empty() {
            let ext = self.a_ext.as_ref().ok_or_else(|| dim_err!("no extension rows"))?;
            let local: Vec<usize> = in_ext.iter().map(|m| m - base).collect();
            self.a_ext = if local.len() == ext.rows() {
                None
            } else {
                Some(ext.without_rows(&local)?)
            };
        }
        Ok(())
    }
}

/// Initialization scales for freshly created experts.
#[derive(Debug, Clone, Copy)]
pub struct ExpertInit {
    pub std: f64,
    /// Std of the projection back into the residual stream.
    pub out_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfdExpert {
    /// `D_emb×D_ffd`.
    pub w_in: Tensor,
    /// `D_ffd×D_emb`.
    pub w_out: Tensor,
}

impl FfdExpert {
    pub fn new<R: Rng + ?Sized>(d_emb: usize, d_ffd: usize, init: ExpertInit, rng: &mut R) -> Self {
        let mut w_in = Tensor::randn(&[d_emb, d_ffd], init.std, rng);
        let mut w_out = Tensor::randn(&[d_ffd, d_emb], init.out_std, rng);
        w_in.requires_grad = true;
        w_out.requires_grad = true;
        FfdExpert { w_in, w_out }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w_in = tape.param(&self.w_in)?;
        let w_out = tape.param(&self.w_out)?;
        let h = tape.matmul(x, w_in)?;
        let h = tape.gelu(h)?;
        tape.matmul(h, w_out)
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.w_in.requires_grad = on;
        self.w_out.requires_grad = on;
    }

    pub fn param_count(&self) -> usize {
        self.w_in.numel() + self.w_out.numel()
    }
}

#[derive(Debug, Clone)]
pub struct SmoeOutput {
    pub y: Var,
    pub gates: RoutedGates,
    /// Expert invocations, one per (token, selected expert).
    pub expert_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoeLayer {
    pub router: Router,
    pub experts: Vec<FfdExpert>,
    pub top_k: usize,
}

impl SmoeLayer {
    pub fn new<R: Rng + ?Sized>(
        d_emb: usize,
        d_ffd: usize,
        n_experts: usize,
        top_k: usize,
        d_rtr: usize,
        init: ExpertInit,
        rng: &mut R,
    ) -> Self {
        let router = Router::new(n_experts, d_emb, d_rtr, init.std, rng);
        let experts = (0..n_experts)
            .map(|_| FfdExpert::new(d_emb, d_ffd, init, rng))
            .collect();
        SmoeLayer {
            router,
            experts,
            top_k,
        }
    }

    pub fn d_ffd(&self) -> usize {
        self.experts[0].w_in.cols()
    }

    /// Sparse dispatch: rows are grouped per expert, each expert runs once
    /// on its group and results are scattered back weighted by the gate.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<SmoeOutput> {
        let gates = self.router.route(tape, x, self.top_k)?;
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        let mut parts = Vec::new();
        let mut evals = 0;
        for (m, idx) in gates.decision.rows_per_module().into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            evals += idx.len();
            let xg = tape.gather_rows(x, idx.clone())?;
            let out = self.experts[m].forward(tape, xg)?;
            let w = gates.gate_column(tape, m, &idx)?;
            parts.push((out, w, idx));
        }
        let y = tape.mix_rows(rows, cols, parts)?;
        Ok(SmoeOutput {
            y,
            gates,
            expert_evals: evals,
        })
    }

    /// Appends `n_new` experts, extends the router with `A'` and freezes
    /// every pre-existing expert together with `A` and `B`.
    pub fn insert_experts<R: Rng + ?Sized>(
        &mut self,
        n_new: usize,
        init: ExpertInit,
        router_scale: f64,
        rng: &mut R,
    ) {
        if n_new == 0 {
            return;
        }
        let (d_emb, d_ffd) = (self.experts[0].w_in.rows(), self.d_ffd());
        for e in &mut self.experts {
            e.set_trainable(false);
        }
        self.router.extend(n_new, router_scale, rng);
        for _ in 0..n_new {
            self.experts.push(FfdExpert::new(d_emb, d_ffd, init, rng));
        }
    }

    /// Removes experts whose max-normalized frequency is below `tau`
    /// (experts never selected always go). Returns the surviving original
    /// indices in order.
    pub fn prune_experts(&mut self, layer: usize, usage: &LayerUsage, tau: f64) -> Result<Vec<usize>> {
        let keep = survivors(usage, tau)?;
        if usage.counts.len() != self.experts.len() {
            return Err(dim_err!(
                "usage covers {} experts, layer {layer} has {}",
                usage.counts.len(),
                self.experts.len()
            ));
        }
        if keep.len() < self.top_k {
            return Err(Error::PruneRefused {
                layer,
                remaining: keep.len(),
                k: self.top_k,
            });
        }
        let drop: Vec<usize> = (0..self.experts.len()).filter(|m| !keep.contains(m)).collect();
        if drop.is_empty() {
            return Ok(keep);
        }
        self.router.remove_modules(&drop)?;
        let mut i = 0;
        self.experts.retain(|_| {
            let k = keep.contains(&i);
            i += 1;
            k
        });
        Ok(keep)
    }

    pub fn param_count(&self) -> usize {
        self.router.param_count() + self.experts.iter().map(FfdExpert::param_count).sum::<usize>()
    }
}

/// Survivor set for threshold `tau` under max-normalization.
pub fn survivors(usage: &LayerUsage, tau: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(contract_err!("pruning threshold {tau} outside [0, 1)"));
    }
    if usage.tokens == 0 {
        return Err(contract_err!("usage statistics cover no tokens"));
    }
    let normed = usage.max_normalized();
    Ok((0..usage.counts.len())
        .filter(|&m| usage.counts[m] > 0 && normed[m] >= tau)
        .collect())
}

/// Selection counts of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub counts: Vec<u64>,
    pub tokens: u64,
    pub top_k: usize,
}

impl LayerUsage {
    pub fn new(n_modules: usize, top_k: usize) -> Self {
        LayerUsage {
            counts: vec![0; n_modules],
            tokens: 0,
            top_k,
        }
    }

    /// `f_m / max_m f_m`.
    pub fn max_normalized(&self) -> Vec<f64> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / max as f64).collect()
    }

    /// Share of all selections going to each module (sums to 1).
    pub fn distribution(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Fraction of tokens that selected each module.
    pub fn frequency(&self) -> Vec<f64> {
        if self.tokens == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.tokens as f64).collect()
    }

    /// Entropy (nats) of the selection distribution.
    pub fn entropy(&self) -> f64 {
        -self.distribution().iter().map(|&p| crate::numerics::xlogx(p)).sum::<f64>()
    }
}

/// Per-layer module selection counts over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub layers: Vec<LayerUsage>,
}

impl UsageStats {
    pub fn new(modules_per_layer: &[usize], top_k: usize) -> Self {
        UsageStats {
            layers: modules_per_layer
                .iter()
                .map(|&n| LayerUsage::new(n, top_k))
                .collect(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.tokens)
    }

    pub fn accumulate(&mut self, layer: usize, gate: &GateDecision) -> Result<()> {
        let usage = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| contract_err!("layer {layer} not tracked"))?;
        if gate.n_modules() != usage.counts.len() {
            return Err(contract_err!(
                "gate over {} modules fed to stats of {} modules",
                gate.n_modules(),
                usage.counts.len()
            ));
        }
        for &m in &gate.selected {
            usage.counts[m] += 1;
        }
        usage.tokens += gate.tokens() as u64;
        Ok(())
    }

    /// Counter merge for partitioned accumulation.
    pub fn merge(&mut self, other: &UsageStats) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(contract_err!("merging stats of different depth"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.counts.len() != b.counts.len() {
                return Err(contract_err!("merging stats of different width"));
            }
            a.counts.iter_mut().zip(&b.counts).for_each(|(x, y)| *x += y);
            a.tokens += b.tokens;
        }
        Ok(())
    }

    pub fn mean_entropy(&self) -> f64 {
        self.layers.iter().map(LayerUsage::entropy).sum::<f64>() / self.layers.len().max(1) as f64
    }

    /// Tab-separated `layer module count tokens normalized_frequency`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("layer\tmodule\tcount\ttokens\tnormalized_frequency\n");
        for (l, usage) in self.layers.iter().enumerate() {
            for (m, (c, f)) in usage.counts.iter().zip(usage.max_normalized()).enumerate() {
                let _ = writeln!(s, "{l}\t{m}\t{c}\t{}\t{f:.6}", usage.tokens);
            }
        }
        s
    }
}
