//! Training objectives.
//!
//! All router losses take the full softmax distribution `π(m|x)` of a batch
//! (`|X|×N`), with `p(m) = mean_x π(m|x)`:
//!
//! * mutual-information balance: `Σ_m p(m) log p(m) - mean_x Σ_m π log π`
//! * load concentration: `H(m) = -Σ_m p(m) log p(m)`
//! * routing regularization: `‖A'‖²` over inserted router rows

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::numerics::{Tape, Tensor, Var};

const ROW_SUM_TOL: f64 = 1e-6;

pub fn lm_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

fn check_distribution(tape: &Tape, pi: Var) -> Result<()> {
    let t = tape.value(pi);
    if !t.is_matrix() {
        return Err(contract_err!("routing distribution must be |X|×N, got {:?}", t.shape()));
    }
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || t.row(r).iter().any(|&v| v < 0.0) {
            return Err(contract_err!("row {r} of routing distribution sums to {s}"));
        }
    }
    Ok(())
}

/// `Σ_m p(m) log p(m)` of the batch marginal, i.e. `-H(m)`.
fn neg_marginal_entropy(tape: &mut Tape, pi: Var) -> Result<Var> {
    let marginal = tape.mean_rows(pi)?;
    let terms = tape.xlogx(marginal)?;
    tape.sum(terms)
}

pub fn mi_loss(tape: &mut Tape, pi: Var) -> Result<Var> {
    check_distribution(tape, pi)?;
    let neg_h_m = neg_marginal_entropy(tape, pi)?;
    let n_rows = tape.value(pi).rows() as f64;
    let terms = tape.xlogx(pi)?;
    let total = tape.sum(terms)?;
    let neg_h_cond = tape.scale(total, 1.0 / n_rows)?;
    // -H(m) + H(m|x), with neg_h_cond = -H(m|x)
    tape.sub(neg_h_m, neg_h_cond)
}

pub fn concentration_loss(tape: &mut Tape, pi: Var) -> Result<Var> {
    check_distribution(tape, pi)?;
    let neg_h = neg_marginal_entropy(tape, pi)?;
    tape.scale(neg_h, -1.0)
}

pub fn routing_regularization(tape: &mut Tape, a_ext: Option<&Tensor>) -> Result<Var> {
    let a_ext = a_ext.ok_or_else(|| contract_err!("routing regularization needs inserted router rows"))?;
    let v = tape.param(a_ext)?;
    tape.sum_squares(v)
}

/// Value-only wrappers for reporting and oracles.
pub fn mi_loss_value(pi: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(pi.detached())?;
    let l = mi_loss(&mut tape, v)?;
    Ok(tape.value(l).item())
}

pub fn concentration_loss_value(pi: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(pi.detached())?;
    let l = concentration_loss(&mut tape, v)?;
    Ok(tape.value(l).item())
}

/// Which auxiliary objectives a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    FinetuneConcentrate,
    ContinualInsert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mi: f64,
    pub concentration: f64,
    pub routing_reg: f64,
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights {
        mi: 0.0,
        concentration: 0.0,
        routing_reg: 0.0,
    };

    /// Routing-regularization presets for the continual setting.
    pub const ROUTING_REG_PRESETS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

    pub fn pretrain() -> Self {
        LossWeights {
            mi: 0.3,
            ..Self::NONE
        }
    }

    pub fn finetune() -> Self {
        LossWeights {
            concentration: 0.001,
            ..Self::NONE
        }
    }

    pub fn continual(reg: f64) -> Self {
        LossWeights {
            routing_reg: reg,
            ..Self::NONE
        }
    }

    /// Each auxiliary term is only allowed in the mode that owns it.
    pub fn validate(&self, mode: TrainMode) -> Result<()> {
        for (name, w) in [
            ("mi", self.mi),
            ("concentration", self.concentration),
            ("routing_reg", self.routing_reg),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_err!("loss weight {name} = {w} must be finite and nonnegative"));
            }
        }
        let conflicts = [
            (self.mi > 0.0 && mode != TrainMode::Pretrain, "mi weight outside pretraining"),
            (
                self.concentration > 0.0 && mode != TrainMode::FinetuneConcentrate,
                "concentration weight outside concentration finetuning",
            ),
            (
                self.routing_reg > 0.0 && mode != TrainMode::ContinualInsert,
                "routing regularization outside continual insertion",
            ),
        ];
        match conflicts.iter().find(|(bad, _)| *bad) {
            Some((_, why)) => Err(config_err!("{why} ({mode:?})")),
            None => Ok(()),
        }
    }
}

/// Scalar components of one objective evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lm_loss: f64,
    pub mi_loss: Vec<f64>,
    pub concentration_loss: Vec<f64>,
    pub routing_reg: f64,
    pub total: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl LossReport {
    /// `lm + w_mi·mean(L_MI) + w_conc·mean(L_entropy) + w_reg·L_reg`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.lm_loss
            + w.mi * mean(&self.mi_loss)
            + w.concentration * mean(&self.concentration_loss)
            + w.routing_reg * self.routing_reg
    }
}

/// Taped total objective over the per-layer router distributions.
///
/// Auxiliary terms with zero weight are still evaluated for the report but
/// kept off the gradient path.
pub fn total_loss(
    tape: &mut Tape,
    lm: Var,
    router_probs: &[Var],
    a_ext: &[&Tensor],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        lm_loss: tape.value(lm).item(),
        ..Default::default()
    };
    let mut total = lm;
    let layers = router_probs.len().max(1) as f64;
    for &pi in router_probs {
        let mi = mi_loss(tape, pi)?;
        report.mi_loss.push(tape.value(mi).item());
        if weights.mi > 0.0 {
            let scaled = tape.scale(mi, weights.mi / layers)?;
            total = tape.add(total, scaled)?;
        }
        let conc = concentration_loss(tape, pi)?;
        report.concentration_loss.push(tape.value(conc).item());
        if weights.concentration > 0.0 {
            let scaled = tape.scale(conc, weights.concentration / layers)?;
            total = tape.add(total, scaled)?;
        }
    }
    for ext in a_ext {
        let reg = routing_regularization(tape, Some(ext))?;
        report.routing_reg += tape.value(reg).item();
        if weights.routing_reg > 0.0 {
            let scaled = tape.scale(reg, weights.routing_reg)?;
            total = tape.add(total, scaled)?;
        }
    }
    report.total = tape.value(total).item();
    Ok((total, report))
}
