//! Self-checks behind the `check` subcommand: stick-breaking identities,
//! gradient checks, sparse/dense agreement, loss extremes and checkpoint
//! round trips, on small randomly initialized components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{stick_breaking_weights, MoaLayer, SegmentLayout};
use crate::error::Result;
use crate::model::{byte_detokenize, byte_tokenize, load_checkpoint, save_checkpoint, Model, ModuleFormerConfig};
use crate::moe::{ExpertInit, SmoeLayer};
use crate::moe::RoutedGates;
use crate::numerics::{
    finite_difference_check, finite_difference_check_params, finite_difference_check_piecewise, Coords, PiecewiseCheck,
    Tape, Tensor, Var,
};
use crate::objectives::{concentration_loss, concentration_loss_value, mi_loss, mi_loss_value, routing_regularization};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-4;

fn outcome(name: &'static str, value: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: value < tol,
        detail: format!("worst {value:.3e} (tolerance {tol:.0e})"),
    }
}

fn failed(name: &'static str, e: crate::Error) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: false,
        detail: e.to_string(),
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Worst `|Σ_{t-κ≤i≤t} p_i - (1 - Π (1-β_j))|` over `instances` random
/// `(β, t, κ)` draws.
pub fn mass_identity_error(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.random_range(1..64);
        let kappa = rng.random_range(0..t);
        let betas: Vec<f64> = (0..t).map(|_| rng.random_range(0.001..0.999)).collect();
        // one-dimensional keys against a unit query give logits ln(β/(1-β))
        let keys = Tensor::new(vec![t, 1], betas.iter().map(|b| (b / (1.0 - b)).ln()).collect())?;
        let q = Tensor::from_rows(&[&[1.0]]);
        let p = stick_breaking_weights(&q, &keys, t - 1)?;
        let lo = t - 1 - kappa;
        let mass: f64 = p.row(0)[lo..].iter().sum();
        let survive: f64 = betas[lo..].iter().map(|b| 1.0 - b).product();
        worst = worst.max((mass - (1.0 - survive)).abs());
    }
    Ok(worst)
}

/// Direct product form `p_{i,t} = β_i Π_{i<j≤t} (1-β_j)`.
pub fn stick_breaking_direct(q: &Tensor, k: &Tensor) -> Tensor {
    let (t_len, n) = (q.rows(), k.rows());
    let mut out = Tensor::zeros(&[t_len, n]);
    for t in 0..t_len {
        let visible = n - t_len + t + 1;
        let beta: Vec<f64> = (0..visible)
            .map(|i| {
                let z: f64 = k.row(i).iter().zip(q.row(t)).map(|(a, b)| a * b).sum();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        for i in 0..visible {
            let mut p = beta[i];
            for b in &beta[i + 1..] {
                p *= 1.0 - b;
            }
            out.data_mut()[t * n + i] = p;
        }
    }
    out
}

/// Worst difference between the log-space weights and the direct product
/// on a random causal segment of length `1..=max_len`.
pub fn log_direct_error(seed: u64, max_len: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=max_len);
    let d = rng.random_range(1..6);
    let q = randn(&[t, d], 1.0, &mut rng);
    let k = randn(&[t, d], 1.0, &mut rng);
    Ok(stick_breaking_weights(&q, &k, 0)?.max_abs_diff(&stick_breaking_direct(&q, &k)))
}

/// The discrete state of a routed objective: the router's ReLU pattern and
/// the selected module set of every token. Equal signatures mean the same
/// smooth piece.
#[derive(PartialEq)]
struct Piece {
    active: Vec<bool>,
    selected: Vec<Vec<usize>>,
}

fn piece<'a>(tape: &Tape, gates: impl IntoIterator<Item = &'a RoutedGates>) -> Piece {
    let mut p = Piece {
        active: Vec::new(),
        selected: Vec::new(),
    };
    for g in gates {
        p.active.extend(tape.value(g.pre_activation).data().iter().map(|&v| v > 0.0));
        let d = &g.decision;
        for t in 0..d.tokens() {
            let mut sel = d.selected_for(t).to_vec();
            sel.sort_unstable();
            p.selected.push(sel);
        }
    }
    p
}

/// Worst error, refusing when more than a tenth of the coordinates had to
/// be skipped for straddling a routing switch.
fn piecewise_worst(c: PiecewiseCheck) -> Result<f64> {
    if c.skipped * 10 > c.checked + c.skipped {
        return Err(crate::error::contract_err!(
            "{} of {} coordinates straddle a routing switch",
            c.skipped,
            c.checked + c.skipped
        ));
    }
    Ok(c.worst)
}

fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

pub fn smoe_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ExpertInit { std: 0.5, out_std: 0.5 };
    let layer = SmoeLayer::new(6, 5, 4, 2, 3, init, &mut rng);
    let x = randn(&[5, 6], 1.0, &mut rng);
    let r = randn(&[5, 6], 1.0, &mut rng);
    let c = finite_difference_check_piecewise(
        &(layer, x),
        |(l, x)| {
            let mut v = vec![&mut l.router.a, &mut l.router.b];
            for e in &mut l.experts {
                v.push(&mut e.w_in);
                v.push(&mut e.w_out);
            }
            v.push(x);
            v
        },
        |(l, x), tape| {
            let xv = tape.param(x)?;
            let out = l.forward(tape, xv)?;
            weighted_sum(tape, out.y, &r)
        },
        |(l, x)| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let g = l.router.route(&mut tape, xv, l.top_k)?;
            Ok(piece(&tape, [&g]))
        },
        FD_EPS,
        Coords::All,
    )?;
    piecewise_worst(c)
}

pub fn moa_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ExpertInit { std: 0.5, out_std: 0.5 };
    let layer = MoaLayer::new(6, 4, 3, 2, 3, init, &mut rng);
    let x = randn(&[6, 6], 1.0, &mut rng);
    let r = randn(&[6, 6], 1.0, &mut rng);
    let c = finite_difference_check_piecewise(
        &(layer, x),
        |(l, x)| {
            let mut v = vec![&mut l.router.a, &mut l.router.b, &mut l.w_k, &mut l.w_v];
            for h in &mut l.heads {
                v.push(&mut h.w_q);
                v.push(&mut h.w_o);
            }
            v.push(x);
            v
        },
        |(l, x), tape| {
            let xv = tape.param(x)?;
            let out = l.forward(tape, xv, SegmentLayout { streams: 2, seg_len: 3 }, &[None, None])?;
            weighted_sum(tape, out.y, &r)
        },
        |(l, x)| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let g = l.router.route(&mut tape, xv, l.top_k)?;
            Ok(piece(&tape, [&g]))
        },
        FD_EPS,
        Coords::All,
    )?;
    piecewise_worst(c)
}

pub fn head_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ExpertInit { std: 0.5, out_std: 0.5 };
    let layer = MoaLayer::new(5, 4, 1, 1, 2, init, &mut rng);
    let x = randn(&[4, 5], 1.0, &mut rng);
    let r = randn(&[4, 5], 1.0, &mut rng);
    finite_difference_check_params(
        &(layer, x),
        |(l, x)| {
            let h = &mut l.heads[0];
            vec![&mut l.w_k, &mut l.w_v, &mut h.w_q, &mut h.w_o, x]
        },
        |(l, x), tape| {
            let xv = tape.param(x)?;
            let y = l.head_forward(tape, 0, xv, None)?;
            weighted_sum(tape, y, &r)
        },
        FD_EPS,
        Coords::All,
    )
}

pub fn mi_gradient_error(seed: u64) -> Result<f64> {
    let logits = randn(&[7, 4], 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
    finite_difference_check(
        |t, z| {
            let p = t.softmax(z, 1)?;
            mi_loss(t, p)
        },
        &logits,
        FD_EPS,
    )
}

pub fn concentration_gradient_error(seed: u64) -> Result<f64> {
    let logits = randn(&[7, 4], 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
    finite_difference_check(
        |t, z| {
            let p = t.softmax(z, 1)?;
            concentration_loss(t, p)
        },
        &logits,
        FD_EPS,
    )
}

pub fn routing_reg_gradient_error(seed: u64) -> Result<f64> {
    let a_ext = randn(&[2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    finite_difference_check_params(
        &a_ext,
        |a| vec![a],
        |a, t| routing_regularization(t, Some(a)),
        FD_EPS,
        Coords::All,
    )
}

/// End-to-end check on a 2-layer model of desk width with a random 8-token
/// batch, sampling a few coordinates of every parameter tensor.
pub fn model_gradient_error(seed: u64) -> Result<f64> {
    let mut config = ModuleFormerConfig::desk();
    config.n_layer = 2;
    config.seed = seed;
    model_gradient_error_with(config, seed)
}

fn model_gradient_error_with(config: ModuleFormerConfig, seed: u64) -> Result<f64> {
    let v = config.vocab_size;
    let model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..8).map(|_| rng.random_range(0..v)).collect();
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..v)).collect();
    let c = finite_difference_check_piecewise(
        &model,
        |m| m.params_mut().into_iter().map(|(_, t)| t).collect(),
        |m, tape| {
            let out = m.forward(tape, &tokens, SegmentLayout::single(8), &[])?;
            tape.cross_entropy(out.logits, &targets)
        },
        |m| {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &tokens, SegmentLayout::single(8), &[])?;
            Ok(piece(&tape, out.att_gates.iter().chain(&out.ffd_gates)))
        },
        FD_EPS,
        Coords::Sample { n: 6, seed },
    )?;
    piecewise_worst(c)
}

#[cfg(test)]
pub(crate) fn tiny_model_gradient_error(seed: u64) -> Result<f64> {
    let mut config = ModuleFormerConfig::tiny();
    config.seed = seed;
    model_gradient_error_with(config, seed)
}

/// `max |sparse - dense|` for both layer types, and whether the expert
/// counter equals `k·tokens`.
pub fn sparse_dense_error(seed: u64) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ExpertInit { std: 0.5, out_std: 0.5 };
    let smoe = SmoeLayer::new(6, 5, 5, 2, 3, init, &mut rng);
    let moa = MoaLayer::new(6, 4, 4, 2, 3, init, &mut rng);
    let x = randn(&[7, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = smoe.forward(&mut tape, xv)?;
    let counted = out.expert_evals == 2 * 7;
    let gates = out.gates.decision.gates();
    let sparse = tape.value(out.y).clone();
    // dense oracle: Σ_m g_m(x) E_m(x) over all modules
    let mut dense = vec![0.0; 7 * 6];
    for (m, e) in smoe.experts.iter().enumerate() {
        let full = e.forward(&mut tape, xv)?;
        let full = tape.value(full);
        for t in 0..7 {
            for c in 0..6 {
                dense[t * 6 + c] += gates.get(t, m) * full.get(t, c);
            }
        }
    }
    let mut worst = sparse.max_abs_diff(&Tensor::new(vec![7, 6], dense)?);

    let out = moa.forward(&mut tape, xv, SegmentLayout::single(7), &[None])?;
    let gates = out.gates.decision.gates();
    let sparse = tape.value(out.y).clone();
    let mut dense = vec![0.0; 7 * 6];
    for m in 0..moa.heads.len() {
        let full = moa.head_forward(&mut tape, m, xv, None)?;
        let full = tape.value(full);
        for t in 0..7 {
            for c in 0..6 {
                dense[t * 6 + c] += gates.get(t, m) * full.get(t, c);
            }
        }
    }
    worst = worst.max(sparse.max_abs_diff(&Tensor::new(vec![7, 6], dense)?));
    Ok((worst, counted && out.head_evals == 2 * 7))
}

pub fn loss_extremes_error() -> Result<f64> {
    let n = 4;
    let uniform = Tensor::filled(&[6, n], 0.25);
    let mut balanced = Tensor::zeros(&[8, n]);
    let mut single = Tensor::zeros(&[8, n]);
    for r in 0..8 {
        balanced.data_mut()[r * n + r % n] = 1.0;
        single.data_mut()[r * n] = 1.0;
    }
    let ln_n = (n as f64).ln();
    let errs = [
        mi_loss_value(&uniform)?.abs(),
        (mi_loss_value(&balanced)? + ln_n).abs(),
        concentration_loss_value(&single)?.abs(),
        (concentration_loss_value(&uniform)? - ln_n).abs(),
    ];
    Ok(errs.into_iter().fold(0.0, f64::max))
}

pub fn checkpoint_round_trip() -> Result<bool> {
    let model = Model::new(ModuleFormerConfig::tiny())?;
    let dir = std::env::temp_dir().join(format!("moduleformer-check-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    let path = dir.join("roundtrip.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path);
    let _ = std::fs::remove_dir_all(&dir);
    let back = back?;
    let tokens = [1, 5, 2, 9, 3];
    Ok(back == model && back.logits(&tokens, None)?.0 == model.logits(&tokens, None)?.0)
}

type SeededCheck = fn(u64) -> Result<f64>;

/// Gradient checks by name, each run per seed.
pub const GRADIENT_CHECKS: [(&str, SeededCheck); 7] = [
    ("stick-breaking head", head_gradient_error),
    ("mixture-of-attention layer", moa_gradient_error),
    ("mixture-of-experts layer", smoe_gradient_error),
    ("mutual-information loss", mi_gradient_error),
    ("concentration loss", concentration_gradient_error),
    ("routing regularization", routing_reg_gradient_error),
    ("2-layer model", model_gradient_error),
];

fn worst_over(seeds: u64, f: impl Fn(u64) -> Result<f64>) -> Result<f64> {
    (0..seeds).try_fold(0.0f64, |w, s| Ok(w.max(f(s)?)))
}

fn push(out: &mut Vec<CheckOutcome>, name: &'static str, r: Result<f64>, tol: f64) {
    out.push(match r {
        Ok(v) => outcome(name, v, tol),
        Err(e) => failed(name, e),
    });
}

/// Runs every check over `seeds` seeds where randomized.
pub fn run_checks(seeds: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    push(&mut out, "stick-breaking mass identity", worst_over(seeds, |s| mass_identity_error(s, 200)), 1e-10);
    push(&mut out, "log-space equals direct product", worst_over(seeds, |s| log_direct_error(s, 64)), 1e-10);
    for (name, f) in GRADIENT_CHECKS {
        push(&mut out, name, worst_over(seeds, f), GRAD_TOL);
    }
    let sd = (0..seeds).try_fold((0.0f64, true), |(w, ok), s| {
        sparse_dense_error(s).map(|(v, c)| (w.max(v), ok && c))
    });
    out.push(match sd {
        Ok((v, counted)) => CheckOutcome {
            name: "sparse dispatch equals dense mixture",
            passed: v < 1e-12 && counted,
            detail: format!("max diff {v:.3e}, evaluation counter {}", if counted { "exact" } else { "wrong" }),
        },
        Err(e) => failed("sparse dispatch equals dense mixture", e),
    });
    push(&mut out, "router loss extremes", loss_extremes_error(), 1e-12);
    out.push(match checkpoint_round_trip() {
        Ok(ok) => CheckOutcome {
            name: "checkpoint round trip",
            passed: ok,
            detail: if ok { "bit-exact".into() } else { "mismatch".into() },
        },
        Err(e) => failed("checkpoint round trip", e),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seeds);
    let blob: Vec<u8> = (0..1024).map(|_| rng.random()).collect();
    let ok = byte_detokenize(&byte_tokenize(&blob)) == blob;
    out.push(CheckOutcome {
        name: "byte tokenizer round trip",
        passed: ok,
        detail: "1 KiB random blob".into(),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients() {
        for seed in 0..3 {
            assert!(tiny_model_gradient_error(seed).unwrap() < GRAD_TOL);
        }
    }

    #[test]
    fn all_checks_pass() {
        for c in run_checks(2) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
