//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

use super::{Tape, Tensor, Var};

/// Gradients smaller than this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most `n` coordinates per input, drawn with `seed`.
    Sample { n: usize, seed: u64 },
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract_err!("finite-difference eps {eps} outside [1e-7, 1e-3]"));
    }
    Ok(())
}

/// Central difference `D(h) = (f(h) - f(-h)) / 2h` refined by one Richardson
/// step, `(4 D(ε/2) - D(ε)) / 3`, with `f` evaluated at the perturbation.
/// Truncation error is `O(ε⁴)`, so moderate steps stay accurate on sharply
/// curved objectives without roundoff dominating small gradients.
fn derivative(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = central(eps)?;
    let fine = central(eps / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Worst relative error over all coordinates between the tape gradient of a
/// scalar `f(x)` and its finite-difference estimate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        Coords::All,
    )
}

/// Multi-input form of [`finite_difference_check`].
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .map(|x| {
            let mut t = x.detached();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = inputs
            .iter()
            .map(|x| t.constant(x.detached()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.iter().map(Tensor::detached).collect();
    for (which, x) in xs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).map(<[f64]>::to_vec);
        let picked: Vec<usize> = match coords {
            Coords::All => (0..x.numel()).collect(),
            Coords::Sample { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9E37));
                let n = n.min(x.numel());
                sample(&mut rng, x.numel(), n).into_vec()
            }
        };
        for i in picked {
            let orig = x.data()[i];
            let numeric = derivative(
                |h| {
                    work[which].data_mut()[i] = orig + h;
                    eval(&work)
                },
                eps,
            )?;
            work[which].data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check over the parameters of a structure that binds its
/// own tensors with [`Tape::param`], such as a layer or a whole model.
///
/// `tensors` lists the tensors to check, always in the same order; `loss`
/// builds the scalar objective. Every listed tensor is treated as tracked.
pub fn finite_difference_check_params<S, T, L>(
    subject: &S,
    tensors: T,
    loss: L,
    eps: f64,
    coords: Coords,
) -> Result<f64>
where
    S: Clone,
    T: Fn(&mut S) -> Vec<&mut Tensor>,
    L: Fn(&S, &mut Tape) -> Result<Var>,
{
    finite_difference_check_piecewise(subject, tensors, loss, |_| Ok(()), eps, coords).map(|c| c.worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecewiseCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed into another piece.
    pub skipped: usize,
}

/// [`finite_difference_check_params`] for piecewise-smooth objectives.
/// `piece` names the smooth piece a point lies in (for routed layers, the
/// top-k selection); coordinates whose `±ε` perturbation changes it straddle
/// a jump and are skipped rather than compared.
pub fn finite_difference_check_piecewise<S, T, L, K, P>(
    subject: &S,
    tensors: T,
    loss: L,
    piece: K,
    eps: f64,
    coords: Coords,
) -> Result<PiecewiseCheck>
where
    S: Clone,
    T: Fn(&mut S) -> Vec<&mut Tensor>,
    L: Fn(&S, &mut Tape) -> Result<Var>,
    K: Fn(&S) -> Result<P>,
    P: PartialEq,
{
    check_eps(eps)?;
    let mut s = subject.clone();
    for t in tensors(&mut s) {
        t.requires_grad = true;
        t.grad = None;
    }
    let mut tape = Tape::new();
    let out = loss(&s, &mut tape)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = tensors(&mut s)
        .into_iter()
        .map(|t| {
            tape.accumulate_into(t);
            t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);
    let home = piece(&s)?;

    let eval = |s: &S| -> Result<f64> {
        let mut t = Tape::new();
        let out = loss(s, &mut t)?;
        Ok(t.value(out).item())
    };
    let mut report = PiecewiseCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (which, grad) in analytic.iter().enumerate() {
        let picked: Vec<usize> = match coords {
            Coords::All => (0..grad.len()).collect(),
            Coords::Sample { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9E37));
                sample(&mut rng, grad.len(), n.min(grad.len())).into_vec()
            }
        };
        for i in picked {
            let orig = tensors(&mut s)[which].data()[i];
            let mut same = true;
            let numeric = derivative(
                |h| {
                    tensors(&mut s)[which].data_mut()[i] = orig + h;
                    same &= piece(&s)? == home;
                    eval(&s)
                },
                eps,
            )?;
            tensors(&mut s)[which].data_mut()[i] = orig;
            if !same {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            report.worst = report.worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // power-of-two eps and small integers keep every step exact
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.0, 5.0, -7.0]]);
        let err = finite_difference_check(|t, v| t.sum(v), &x, 2f64.powi(-17)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|t, v| t.sum(v), &x, 1e-2).is_err());
        assert!(finite_difference_check(|t, v| t.sum(v), &x, 1e-9).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl super::super::CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
                if let Some(d) = grads[0].as_mut() {
                    d.iter_mut().for_each(|v| *v += 3.0 * g[0]);
                }
            }
        }
        let x = Tensor::vector(vec![0.5, 1.5]).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let s: f64 = t.value(v).data().iter().map(|a| a * a).sum();
                t.custom(vec![v], Tensor::scalar(s), Box::new(Wrong))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[derive(Clone)]
    struct Quadratic {
        w: Tensor,
    }

    #[test]
    fn parameter_form_matches_known_gradient() {
        let q = Quadratic {
            w: Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]),
        };
        let err = finite_difference_check_params(
            &q,
            |q| vec![&mut q.w],
            |q, tape| {
                let w = tape.param(&q.w)?;
                let sq = tape.mul(w, w)?;
                tape.sum(sq)
            },
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
