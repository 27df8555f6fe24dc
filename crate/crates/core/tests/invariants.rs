use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moduleformer::attention::stick_breaking_weights;
use moduleformer::diagnostics::stick_breaking_direct;
use moduleformer::lifecycle::{OptimizerSettings, ScheduleKind};
use moduleformer::moe::{survivors, LayerUsage, Router};
use moduleformer::numerics::{log_sigmoid, softmax, Tape, Tensor};
use moduleformer::objectives::{concentration_loss_value, mi_loss_value, routing_regularization};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn distribution_rows(rows: usize, n: usize) -> impl Strategy<Value = Tensor> {
    matrix(rows, n, 6.0).prop_map(|z| softmax(&z, 1).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(z in matrix(5, 7, 1e3)) {
        let p = softmax(&z, 1).unwrap();
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_pair_partitions_unity(z in -30.0f64..30.0) {
        prop_assert!((log_sigmoid(z).exp() + log_sigmoid(-z).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stick_breaking_is_a_causal_subdistribution(
        (t, d) in (1usize..24, 1usize..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[t, d], 2.0, &mut rng);
        let k = Tensor::randn(&[t, d], 2.0, &mut rng);
        let p = stick_breaking_weights(&q, &k, 0).unwrap();
        for row in 0..t {
            let r = p.row(row);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!(r[row + 1..].iter().all(|&v| v == 0.0));
            prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
        prop_assert!(p.max_abs_diff(&stick_breaking_direct(&q, &k)) < 1e-10);
    }

    #[test]
    fn stick_mass_grows_with_context(betas in prop::collection::vec(0.05f64..0.95, 2..40)) {
        // the query always sits at the newest key; older keys add mass
        let mut last = 0.0;
        for n in 1..=betas.len() {
            let window = &betas[betas.len() - n..];
            let k = Tensor::new(vec![n, 1], window.iter().map(|b| (b / (1.0 - b)).ln()).collect()).unwrap();
            let p = stick_breaking_weights(&Tensor::from_rows(&[&[1.0]]), &k, n - 1).unwrap();
            let mass: f64 = p.row(0).iter().sum();
            // strict until the remaining stick falls below rounding
            prop_assert!(mass > last || (last > 1.0 - 1e-12 && mass >= last - 1e-15));
            last = mass;
        }
    }

    #[test]
    fn gates_are_a_top_k_subdistribution(
        (n, k) in (1usize..7).prop_flat_map(|n| (Just(n), 1..=n)),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let router = Router::new(n, 6, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[9, 6], 1.0, &mut rng)).unwrap();
        let g = router.route(&mut tape, x, k).unwrap().decision.gates();
        for t in 0..9 {
            let row = g.row(t);
            prop_assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), k);
            let s: f64 = row.iter().sum();
            prop_assert!(s > 0.0 && s <= 1.0 + 1e-12);
            if k == n {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(s < 1.0);
            }
        }
    }

    #[test]
    fn router_losses_stay_in_bounds(p in distribution_rows(10, 5)) {
        let ln_n = 5f64.ln();
        let mi = mi_loss_value(&p).unwrap();
        let conc = concentration_loss_value(&p).unwrap();
        prop_assert!((-ln_n - 1e-12..=ln_n + 1e-12).contains(&mi));
        prop_assert!((-1e-12..=ln_n + 1e-12).contains(&conc));
    }

    #[test]
    fn survivors_shrink_as_tau_grows(
        counts in prop::collection::vec(0u64..50, 2..10),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let usage = LayerUsage { tokens: counts.iter().sum::<u64>().div_ceil(2), counts, top_k: 2 };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let big = survivors(&usage, lo).unwrap();
        let small = survivors(&usage, hi).unwrap();
        prop_assert!(small.iter().all(|m| big.contains(m)));
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(
        lr_max in 1e-5f64..1e-2,
        ratio in 0.0f64..1.0,
        budget in 1u64..1_000_000,
        warm_frac in 0.0f64..0.5,
        at in 0.0f64..1.2,
    ) {
        let o = OptimizerSettings {
            lr_max,
            lr_min: lr_max * ratio,
            warmup_tokens: (budget as f64 * warm_frac) as u64,
            ..OptimizerSettings::default()
        };
        let tokens = (budget as f64 * at) as u64;
        let lr = o.lr_at(tokens, budget);
        prop_assert!(lr >= o.lr_min - 1e-15 && lr <= o.lr_max + 1e-15);
        prop_assert!((o.lr_at(o.warmup_tokens, budget) - lr_max).abs() < 1e-15);
        prop_assert!((o.lr_at(budget, budget) - o.lr_min).abs() <= 1e-12 * lr_max || o.warmup_tokens == budget);
        let constant = OptimizerSettings { schedule: ScheduleKind::Constant, warmup_tokens: 0, ..o };
        prop_assert_eq!(constant.lr_at(tokens, budget), lr_max);
    }

    #[test]
    fn routing_reg_scales_quadratically(a in matrix(2, 3, 2.0), c in 1.01f64..5.0) {
        let value = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = routing_regularization(&mut tape, Some(t)).unwrap();
            tape.value(v).item()
        };
        let mut scaled = a.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= c);
        let (base, big) = (value(&a), value(&scaled));
        prop_assume!(base > 1e-9);
        prop_assert!(big > base);
        prop_assert!((big / base - c * c).abs() < 1e-9);
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let grads = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let mut x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        x.requires_grad = true;
        let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let xv = tape.leaf(x).unwrap();
        let wv = tape.constant(w).unwrap();
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.gelu(h).unwrap();
        let p = tape.softmax(h, 1).unwrap();
        let l = tape.cross_entropy(p, &[0, 2, 1, 0]).unwrap();
        tape.backward(l).unwrap();
        tape.grad(xv).unwrap().to_vec()
    };
    assert_eq!(grads(), grads());
}

#[test]
fn loss_extremes_are_exact() {
    let n = 4;
    let uniform = Tensor::filled(&[6, n], 0.25);
    let mut balanced = Tensor::zeros(&[8, n]);
    let mut one_hot = Tensor::zeros(&[8, n]);
    for r in 0..8 {
        balanced.data_mut()[r * n + r % n] = 1.0;
        one_hot.data_mut()[r * n + 1] = 1.0;
    }
    let ln_n = (n as f64).ln();
    assert!(mi_loss_value(&uniform).unwrap().abs() < 1e-12);
    assert!((mi_loss_value(&balanced).unwrap() + ln_n).abs() < 1e-12);
    assert!(concentration_loss_value(&one_hot).unwrap().abs() < 1e-12);
    assert!((concentration_loss_value(&uniform).unwrap() - ln_n).abs() < 1e-12);
}
