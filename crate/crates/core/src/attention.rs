//! Stick-breaking self-attention and the mixture-of-attention-heads layer.
//!
//! For a query at position `t`, each earlier or current key `i` "matches"
//! with probability `β_{i,t} = σ(k_i · q_t)`. Mass is handed out from the
//! most recent position backwards:
//!
//! ```text
//! p_{i,t} = β_{i,t} · Π_{i<j≤t} (1 - β_{j,t})
//! ```
//!
//! computed in log space as `exp(log β_{i,t} + Σ_{j>i} log(1 - β_{j,t}))`.
//! Whatever mass is left over attends to nothing. Keys and values of the
//! previous segment may be prepended as constants.

use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::moe::{ExpertInit, GateDecision, RoutedGates, Router};
use crate::numerics::{self, log_sigmoid, sigmoid, CustomOp, Tape, Tensor, Var};

/// Head routing outcome; same structure as the feed-forward router's.
pub type AttentionGate = GateDecision;

/// Keys and values of one layer for the previous segment of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub keys: Tensor,
    pub values: Tensor,
}

impl KvCache {
    pub fn positions(&self) -> usize {
        self.keys.rows()
    }
}

/// Per-layer caches of one stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentCache {
    pub layers: Vec<Option<KvCache>>,
}

impl SegmentCache {
    pub fn empty(n_layer: usize) -> Self {
        SegmentCache {
            layers: vec![None; n_layer],
        }
    }

    pub fn layer(&self, l: usize) -> Option<&KvCache> {
        self.layers.get(l).and_then(Option::as_ref)
    }

    /// Cached length of layer `l` (0 before the first segment).
    pub fn len(&self, l: usize) -> usize {
        self.layer(l).map_or(0, KvCache::positions)
    }
}

/// Replaces (never appends) the cache with detached copies of the keys and
/// values of the segment just processed.
pub fn update_cache(_previous: Option<KvCache>, keys: &Tensor, values: &Tensor) -> KvCache {
    KvCache {
        keys: keys.detached(),
        values: values.detached(),
    }
}

/// `streams` contiguous segments of `seg_len` rows each, stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub streams: usize,
    pub seg_len: usize,
}

impl SegmentLayout {
    pub fn single(seg_len: usize) -> Self {
        SegmentLayout { streams: 1, seg_len }
    }

    pub fn rows(&self) -> usize {
        self.streams * self.seg_len
    }
}

/// Stick-breaking weights of one query over its `n` visible logits,
/// oldest first. Writes `p` and returns nothing; `beta` receives `σ(z)`.
fn stick_breaking_row(logits: &[f64], p: &mut [f64], beta: &mut [f64]) {
    let mut tail = 0.0;
    for j in (0..logits.len()).rev() {
        let z = logits[j];
        p[j] = (log_sigmoid(z) + tail).exp();
        beta[j] = sigmoid(z);
        tail += log_sigmoid(-z);
    }
}

/// Attention distribution `p` of shape `T×N` for queries `q: T×D_att`
/// against keys `k: N×D_att`. Query row `t` sits at absolute position
/// `causal_offset + t` and sees keys `0..=causal_offset + t`; later entries
/// are exactly zero.
pub fn stick_breaking_weights(q: &Tensor, k: &Tensor, causal_offset: usize) -> Result<Tensor> {
    if !q.is_matrix() || !k.is_matrix() || q.cols() != k.cols() {
        return Err(dim_err!(
            "stick-breaking queries {:?} and keys {:?} must share width",
            q.shape(),
            k.shape()
        ));
    }
    let (t_len, n) = (q.rows(), k.rows());
    if causal_offset + t_len > n {
        return Err(dim_err!(
            "{t_len} queries at offset {causal_offset} need {} keys, got {n}",
            causal_offset + t_len
        ));
    }
    let mut out = vec![0.0; t_len * n];
    let mut logits = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for t in 0..t_len {
        let visible = causal_offset + t + 1;
        for (i, z) in logits[..visible].iter_mut().enumerate() {
            *z = numerics::dot(k.row(i), q.row(t));
        }
        stick_breaking_row(&logits[..visible], &mut out[t * n..t * n + visible], &mut beta[..visible]);
    }
    Tensor::new(vec![t_len, n], out)
}

/// Which constant cache and which current rows each query row sees.
struct AttendPlan {
    layout: SegmentLayout,
    caches: Vec<Option<Arc<KvCache>>>,
    /// `(stream, position in segment)` per query row.
    queries: Vec<(usize, usize)>,
}

impl AttendPlan {
    fn visible(&self, r: usize) -> (usize, usize, usize) {
        let (b, t) = self.queries[r];
        let cached = self.caches[b].as_ref().map_or(0, |c| c.positions());
        (b, cached, t + 1)
    }
}

struct StickBreakingAttend {
    plan: AttendPlan,
    /// Offsets into `probs`/`betas` per query row.
    offsets: Vec<usize>,
    probs: Vec<f64>,
    betas: Vec<f64>,
}

impl CustomOp for StickBreakingAttend {
    fn name(&self) -> &'static str {
        "stick_breaking_attend"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = q.cols();
        let seg = self.plan.layout.seg_len;
        let (dq_slot, rest) = grads.split_at_mut(1);
        let (dk_slot, dv_slot) = rest.split_at_mut(1);
        let mut dq = dq_slot[0].as_mut();
        let mut dk = dk_slot[0].as_mut();
        let mut dv = dv_slot[0].as_mut();
        let mut dz = Vec::new();
        for r in 0..q.rows() {
            let (b, cached, current) = self.plan.visible(r);
            let n = cached + current;
            let p = &self.probs[self.offsets[r]..self.offsets[r] + n];
            let beta = &self.betas[self.offsets[r]..self.offsets[r] + n];
            let da = &g[r * d..(r + 1) * d];
            let cache = self.plan.caches[b].as_deref();
            let key = |i: usize| -> &[f64] {
                if i < cached {
                    cache.expect("cached rows imply a cache").keys.row(i)
                } else {
                    k.row(b * seg + i - cached)
                }
            };
            let val = |i: usize| -> &[f64] {
                if i < cached {
                    cache.expect("cached rows imply a cache").values.row(i)
                } else {
                    v.row(b * seg + i - cached)
                }
            };
            // s_i = p_i · (da · v_i); dz_i = s_i (1 - β_i) - β_i Σ_{i'<i} s_i'
            dz.clear();
            dz.resize(n, 0.0);
            let mut prefix = 0.0;
            for i in 0..n {
                let s = p[i] * numerics::dot(da, val(i));
                dz[i] = s * (1.0 - beta[i]) - beta[i] * prefix;
                prefix += s;
            }
            if let Some(dv) = dv.as_deref_mut() {
                for i in cached..n {
                    let row = b * seg + i - cached;
                    numerics::axpy(p[i], da, &mut dv[row * d..(row + 1) * d]);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                let dq_row = &mut dq[r * d..(r + 1) * d];
                for (i, &z) in dz.iter().enumerate() {
                    numerics::axpy(z, key(i), dq_row);
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                let q_row = q.row(r);
                for i in cached..n {
                    let row = b * seg + i - cached;
                    numerics::axpy(dz[i], q_row, &mut dk[row * d..(row + 1) * d]);
                }
            }
        }
    }
}

/// Stick-breaking read-out `Σ_i p_{i,t} v_i` for every query row.
///
/// `keys`/`values` hold the current segments (`layout.rows()` rows);
/// `caches[b]` is prepended, gradient-free, to stream `b`.
fn stick_breaking_attend(
    tape: &mut Tape,
    q: Var,
    keys: Var,
    values: Var,
    plan: AttendPlan,
) -> Result<Var> {
    let (qt, kt, vt) = (tape.value(q), tape.value(keys), tape.value(values));
    let d = qt.cols();
    if kt.cols() != d || vt.cols() != d || kt.rows() != plan.layout.rows() || vt.rows() != kt.rows() {
        return Err(dim_err!(
            "attend: q {:?}, k {:?}, v {:?} under {:?}",
            qt.shape(),
            kt.shape(),
            vt.shape(),
            plan.layout
        ));
    }
    if qt.rows() != plan.queries.len() {
        return Err(dim_err!("attend: {} query rows but {} positions", qt.rows(), plan.queries.len()));
    }
    let seg = plan.layout.seg_len;
    let mut offsets = Vec::with_capacity(qt.rows());
    let mut total = 0;
    for r in 0..qt.rows() {
        let (b, t) = plan.queries[r];
        if b >= plan.layout.streams || t >= seg {
            return Err(dim_err!("query ({b}, {t}) outside {:?}", plan.layout));
        }
        if let Some(c) = &plan.caches[b] {
            if c.keys.cols() != d || c.values.cols() != d {
                return Err(dim_err!("cache width {} differs from head width {d}", c.keys.cols()));
            }
        }
        offsets.push(total);
        let (_, cached, current) = plan.visible(r);
        total += cached + current;
    }
    let mut probs = vec![0.0; total];
    let mut betas = vec![0.0; total];
    let mut out = vec![0.0; qt.rows() * d];
    let mut logits = Vec::new();
    for r in 0..qt.rows() {
        let (b, cached, current) = plan.visible(r);
        let n = cached + current;
        let q_row = qt.row(r);
        logits.clear();
        if let Some(c) = &plan.caches[b] {
            logits.extend((0..cached).map(|i| numerics::dot(c.keys.row(i), q_row)));
        }
        logits.extend((0..current).map(|i| numerics::dot(kt.row(b * seg + i), q_row)));
        let span = offsets[r]..offsets[r] + n;
        stick_breaking_row(&logits, &mut probs[span.clone()], &mut betas[span.clone()]);
        let p = &probs[span];
        let o = &mut out[r * d..(r + 1) * d];
        if let Some(c) = &plan.caches[b] {
            for i in 0..cached {
                numerics::axpy(p[i], c.values.row(i), o);
            }
        }
        for i in 0..current {
            numerics::axpy(p[cached + i], vt.row(b * seg + i), o);
        }
    }
    let value = Tensor::new(vec![qt.rows(), d], out)?;
    let op = StickBreakingAttend {
        plan,
        offsets,
        probs,
        betas,
    };
    tape.custom(vec![q, keys, values], value, Box::new(op))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StickBreakingHead {
    /// Query projection, `D_emb×D_att`.
    pub w_q: Tensor,
    /// Output projection, stored `D_att×D_emb` for row-vector inputs.
    pub w_o: Tensor,
}

impl StickBreakingHead {
    pub fn new<R: Rng + ?Sized>(d_emb: usize, d_att: usize, init: ExpertInit, rng: &mut R) -> Self {
        let mut w_q = Tensor::randn(&[d_emb, d_att], init.std, rng);
        let mut w_o = Tensor::randn(&[d_att, d_emb], init.out_std, rng);
        w_q.requires_grad = true;
        w_o.requires_grad = true;
        StickBreakingHead { w_q, w_o }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.w_q.requires_grad = on;
        self.w_o.requires_grad = on;
    }

    pub fn param_count(&self) -> usize {
        self.w_q.numel() + self.w_o.numel()
    }
}

#[derive(Debug, Clone)]
pub struct MoaOutput {
    pub y: Var,
    pub gates: RoutedGates,
    /// Per-stream replacement caches built from this segment.
    pub caches: Vec<KvCache>,
    pub head_evals: usize,
}

/// Mixture of stick-breaking heads sharing one key and one value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MoaLayer {
    pub router: Router,
    /// `D_emb×D_att`, shared by every head.
    pub w_k: Tensor,
    /// `D_emb×D_att`, shared by every head.
    pub w_v: Tensor,
    pub heads: Vec<StickBreakingHead>,
    pub top_k: usize,
}

fn check_caches(caches: &[Option<&KvCache>], layout: SegmentLayout) -> Result<()> {
    if caches.len() != layout.streams {
        return Err(dim_err!("{} caches for {} streams", caches.len(), layout.streams));
    }
    Ok(())
}

impl MoaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        d_emb: usize,
        d_att: usize,
        n_heads: usize,
        top_k: usize,
        d_rtr: usize,
        init: ExpertInit,
        rng: &mut R,
    ) -> Self {
        let router = Router::new(n_heads, d_emb, d_rtr, init.std, rng);
        let mut w_k = Tensor::randn(&[d_emb, d_att], init.std, rng);
        let mut w_v = Tensor::randn(&[d_emb, d_att], init.std, rng);
        w_k.requires_grad = true;
        w_v.requires_grad = true;
        let heads = (0..n_heads)
            .map(|_| StickBreakingHead::new(d_emb, d_att, init, rng))
            .collect();
        MoaLayer {
            router,
            w_k,
            w_v,
            heads,
            top_k,
        }
    }

    pub fn d_att(&self) -> usize {
        self.w_k.cols()
    }

    fn head_rows(
        &self,
        tape: &mut Tape,
        m: usize,
        x: Var,
        rows: &[usize],
        kv: (Var, Var),
        layout: SegmentLayout,
        caches: &[Option<Arc<KvCache>>],
    ) -> Result<Var> {
        let head = &self.heads[m];
        let w_q = tape.param(&head.w_q)?;
        let w_o = tape.param(&head.w_o)?;
        let xg = tape.gather_rows(x, rows.to_vec())?;
        let q = tape.matmul(xg, w_q)?;
        let plan = AttendPlan {
            layout,
            caches: caches.to_vec(),
            queries: rows.iter().map(|&r| (r / layout.seg_len, r % layout.seg_len)).collect(),
        };
        let a = stick_breaking_attend(tape, q, kv.0, kv.1, plan)?;
        tape.matmul(a, w_o)
    }

    fn shared_kv(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let w_k = tape.param(&self.w_k)?;
        let w_v = tape.param(&self.w_v)?;
        Ok((tape.matmul(x, w_k)?, tape.matmul(x, w_v)?))
    }

    /// Output of head `m` alone on a single segment `x: T×D_emb`.
    pub fn head_forward(&self, tape: &mut Tape, m: usize, x: Var, cache: Option<&KvCache>) -> Result<Var> {
        if m >= self.heads.len() {
            return Err(dim_err!("head {m} of {}", self.heads.len()));
        }
        let layout = SegmentLayout::single(tape.value(x).rows());
        let kv = self.shared_kv(tape, x)?;
        let rows: Vec<usize> = (0..layout.seg_len).collect();
        let caches = vec![cache.cloned().map(Arc::new)];
        self.head_rows(tape, m, x, &rows, kv, layout, &caches)
    }

    /// Routes every token to its top-k heads and mixes their outputs by gate.
    /// Shared keys and values are computed once regardless of selection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        layout: SegmentLayout,
        caches: &[Option<&KvCache>],
    ) -> Result<MoaOutput> {
        check_caches(caches, layout)?;
        let xt = tape.value(x);
        if xt.rows() != layout.rows() {
            return Err(dim_err!("{} rows for {:?}", xt.rows(), layout));
        }
        let cols = xt.cols();
        if self.top_k > self.heads.len() {
            return Err(Error::Config(format!(
                "k_att {} exceeds {} heads",
                self.top_k,
                self.heads.len()
            )));
        }
        let gates = self.router.route(tape, x, self.top_k)?;
        let kv = self.shared_kv(tape, x)?;
        let shared: Vec<Option<Arc<KvCache>>> = caches.iter().map(|c| c.cloned().map(Arc::new)).collect();
        let mut parts = Vec::new();
        let mut evals = 0;
        for (m, idx) in gates.decision.rows_per_module().into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            evals += idx.len();
            let out = self.head_rows(tape, m, x, &idx, kv, layout, &shared)?;
            let w = gates.gate_column(tape, m, &idx)?;
            parts.push((out, w, idx));
        }
        let y = tape.mix_rows(layout.rows(), cols, parts)?;

        let (kt, vt) = (tape.value(kv.0), tape.value(kv.1));
        let seg = layout.seg_len;
        let new_caches = (0..layout.streams)
            .map(|b| {
                let rows: Vec<usize> = (b * seg..(b + 1) * seg).collect();
                let keys = kt.select_rows(&rows)?;
                let values = vt.select_rows(&rows)?;
                Ok(update_cache(caches[b].cloned(), &keys, &values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoaOutput {
            y,
            gates,
            caches: new_caches,
            head_evals: evals,
        })
    }

    /// Adds heads with router extension `A'`, freezing existing heads, the
    /// shared projections and the base router.
    pub fn insert_heads<R: Rng + ?Sized>(&mut self, n_new: usize, init: ExpertInit, router_scale: f64, rng: &mut R) {
        if n_new == 0 {
            return;
        }
        let (d_emb, d_att) = (self.w_k.rows(), self.d_att());
        for h in &mut self.heads {
            h.set_trainable(false);
        }
        self.w_k.requires_grad = false;
        self.w_v.requires_grad = false;
        self.router.extend(n_new, router_scale, rng);
        for _ in 0..n_new {
            self.heads.push(StickBreakingHead::new(d_emb, d_att, init, rng));
        }
    }

    pub fn param_count(&self) -> usize {
        self.router.param_count()
            + self.w_k.numel()
            + self.w_v.numel()
            + self.heads.iter().map(StickBreakingHead::param_count).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_is_sigmoid() {
        let q = Tensor::from_rows(&[&[0.0, 1.0]]);
        let k = Tensor::from_rows(&[&[3.0, 0.0]]);
        let p = stick_breaking_weights(&q, &k, 0).unwrap();
        assert!((p.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn half_betas_give_geometric_weights() {
        // k·q = 0 everywhere → β = 1/2
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::zeros(&[3, 2]);
        let p = stick_breaking_weights(&q, &k, 0).unwrap();
        let last = p.row(2);
        assert!((last[0] - 0.125).abs() < 1e-15);
        assert!((last[1] - 0.25).abs() < 1e-15);
        assert!((last[2] - 0.5).abs() < 1e-15);
        assert_eq!(p.row(0)[1], 0.0);
        assert_eq!(p.row(0)[2], 0.0);
    }

    #[test]
    fn saturated_betas_attend_current_token() {
        let q = Tensor::from_rows(&[&[100.0], &[100.0], &[100.0]]);
        let k = Tensor::from_rows(&[&[100.0], &[100.0], &[100.0]]);
        let p = stick_breaking_weights(&q, &k, 0).unwrap();
        for t in 0..3 {
            assert!((p.row(t)[t] - 1.0).abs() < 1e-15);
            assert!(p.row(t)[..t].iter().all(|&v| v < 1e-300));
        }
    }

    #[test]
    fn offset_must_fit() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::zeros(&[4, 2]);
        assert!(stick_breaking_weights(&q, &k, 1).is_ok());
        assert!(matches!(stick_breaking_weights(&q, &k, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn cache_replaced_not_appended() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = update_cache(None, &Tensor::randn(&[4, 2], 1.0, &mut rng), &Tensor::zeros(&[4, 2]));
        assert_eq!(first.positions(), 4);
        let k2 = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let second = update_cache(Some(first), &k2, &Tensor::zeros(&[4, 2]));
        assert_eq!(second.positions(), 4);
        assert_eq!(second.keys, k2);
    }

    #[test]
    fn moa_rejects_k_above_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = ExpertInit { std: 0.1, out_std: 0.1 };
        let mut layer = MoaLayer::new(4, 2, 2, 2, 2, init, &mut rng);
        layer.top_k = 3;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let err = layer.forward(&mut tape, x, SegmentLayout::single(3), &[None]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn forward_emits_one_cache_per_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = ExpertInit { std: 0.3, out_std: 0.3 };
        let layer = MoaLayer::new(4, 3, 3, 2, 2, init, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[10, 4], 1.0, &mut rng)).unwrap();
        let layout = SegmentLayout { streams: 2, seg_len: 5 };
        let out = layer.forward(&mut tape, x, layout, &[None, None]).unwrap();
        assert_eq!(out.caches.len(), 2);
        assert!(out.caches.iter().all(|c| c.positions() == 5));
        assert_eq!(out.head_evals, 2 * 10);
        assert_eq!(tape.value(out.y).shape(), &[10, 4]);
    }
}
