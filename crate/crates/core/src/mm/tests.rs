use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{log_likelihood, sample_dataset, CovariateSampler};

fn spec(k: usize, m: usize, p: usize, d: usize) -> ModelSpec {
    ModelSpec::new(k, m, p, d).unwrap()
}

fn random_theta(spec: ModelSpec, scale: f64, rng: &mut ChaCha8Rng) -> Theta {
    let flat: Vec<f64> = (0..spec.gate_len() + spec.experts_len())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Theta::from_flat(spec, &flat).unwrap()
}

fn random_data(spec: ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let x: Vec<f64> = (0..n * spec.p).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(1..=spec.m)).collect();
    Dataset::new(spec.p, spec.m, x, &y).unwrap()
}

#[test]
fn bound_factor_examples() {
    let (a, a_inv) = bound_factor(1).unwrap();
    assert!((a[(0, 0)] - 0.25).abs() < 1e-15);
    assert!((a_inv[(0, 0)] - 4.0).abs() < 1e-15);
    let (a, _) = bound_factor(2).unwrap();
    assert!((a[(0, 0)] - 0.5).abs() < 1e-15);
    assert!((a[(0, 1)] + 0.25).abs() < 1e-15);
    assert!(bound_factor(0).is_err());
}

#[test]
fn bound_factor_inverse_and_spectrum() {
    for q in 1..=6 {
        let (a, a_inv) = bound_factor(q).unwrap();
        let num = a.clone().try_inverse().unwrap();
        assert!((num - &a_inv).amax() < 1e-12);
        let eig = SymmetricEigen::new(a).eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 0.25).abs() < 1e-12);
        for v in &ev[1..] {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }
}

#[test]
fn bound_dominates_softmax_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for q in 1..=5 {
        let (a, _) = bound_factor(q).unwrap();
        for _ in 0..200 {
            let w: Vec<f64> = (0..=q).map(|_| -rng.random::<f64>().ln()).collect();
            let total: f64 = w.iter().sum();
            let p: Vec<f64> = w[..q].iter().map(|v| v / total).collect();
            let h = DMatrix::from_fn(q, q, |i, j| f64::from(u8::from(i == j)) * p[i] - p[i] * p[j]);
            let min = SymmetricEigen::new(&a - h).eigenvalues.min();
            assert!(min >= -1e-12, "q={q} min={min}");
        }
    }
}

#[test]
fn stats_examples() {
    let data = Dataset::new(1, 2, vec![2.0], &[1]).unwrap();
    let resp = Responsibilities::new(2, vec![0.25, 0.75]).unwrap();
    assert_eq!(gate_stats(&resp, &data, 1).unwrap(), vec![0.25, 0.5]);
    // Expert 1 block (class 1) and expert 2 block.
    assert_eq!(expert_stats(&resp, &data, 1).unwrap(), vec![0.25, 0.5, 0.75, 1.5]);

    let data = Dataset::new(1, 2, vec![2.0], &[2]).unwrap();
    assert_eq!(expert_stats(&resp, &data, 1).unwrap(), vec![0.0; 4]);

    let short = Dataset::new(1, 2, vec![], &[]).unwrap();
    assert!(gate_stats(&resp, &short, 1).is_err());
}

#[test]
fn stats_are_additive_over_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = spec(3, 3, 2, 2);
    let theta = random_theta(s, 1.0, &mut rng);
    let data = random_data(s, 40, &mut rng);
    let resp = responsibilities(&theta, &data).unwrap();
    let whole = SufficientStats::compute(&resp, &data, 2).unwrap();
    let (a_idx, b_idx): (Vec<usize>, Vec<usize>) = (0..40).partition(|i| i % 3 == 0);
    let part = |idx: &[usize]| {
        let sub = data.subset(idx);
        let r = responsibilities(&theta, &sub).unwrap();
        SufficientStats::compute(&r, &sub, 2).unwrap()
    };
    let (a, b) = (part(&a_idx), part(&b_idx));
    for (w, (x, y)) in whole.s.iter().zip(a.s.iter().zip(&b.s)) {
        assert!((w - x - y).abs() < 1e-12);
    }
    for (w, (x, y)) in whole.r.iter().zip(a.r.iter().zip(&b.r)) {
        assert!((w - x - y).abs() < 1e-12);
    }
}

#[test]
fn responsibilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = spec(4, 3, 1, 2);
    let theta = random_theta(s, 3.0, &mut rng);
    let data = random_data(s, 25, &mut rng);
    let resp = responsibilities(&theta, &data).unwrap();
    for n in 0..25 {
        let total: f64 = resp.row(n).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut plus = at.to_vec();
            let mut minus = at.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn loglik_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let s = spec(rng.random_range(1..4), rng.random_range(2..4), rng.random_range(1..3), rng.random_range(1..3));
        let theta = random_theta(s, 1.0, &mut rng);
        let data = random_data(s, 30, &mut rng);
        let g = loglik_gradient(&theta, &data).unwrap();
        let fd = central_difference(
            |v| log_likelihood(&Theta::from_flat(s, v).unwrap(), &data).unwrap(),
            &theta.to_flat(),
            1e-5,
        );
        let scale = fd.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / scale < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn lse_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = spec(3, 4, 2, 1);
    let theta = random_theta(s, 1.0, &mut rng);
    let data = random_data(s, 20, &mut rng);
    let q = s.lifted_len();
    let lifted = data.lifted(s.d).into_owned();

    let gate = gate_lse_grad(&theta, &data).unwrap();
    let g_of = |w: &[f64]| {
        let t = Theta::from_parts(s, w.to_vec(), theta.experts().to_vec()).unwrap();
        (0..data.len())
            .map(|n| {
                let mut sc = vec![0.0; s.k - 1];
                t.gate_scores(&lifted[n * q..(n + 1) * q], &mut sc);
                log1p_sum_exp(&sc)
            })
            .sum::<f64>()
    };
    for (a, b) in gate.iter().zip(central_difference(g_of, theta.gate(), 1e-6)) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
    }

    let resp = responsibilities(&theta, &data).unwrap();
    let experts = expert_lse_grad(&theta, &resp, &data).unwrap();
    let e_of = |v: &[f64]| {
        let t = Theta::from_parts(s, theta.gate().to_vec(), v.to_vec()).unwrap();
        (0..data.len())
            .map(|n| {
                (0..s.k)
                    .map(|k| {
                        let mut sc = vec![0.0; s.m - 1];
                        t.expert_scores(k, &lifted[n * q..(n + 1) * q], &mut sc);
                        resp.get(n, k) * log1p_sum_exp(&sc)
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    let fd = central_difference(e_of, theta.experts(), 1e-6);
    let flat: Vec<f64> = experts.concat();
    for (a, b) in flat.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn surrogate_is_tangent_majorizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..30 {
        let s = spec(rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..3), rng.random_range(1..3));
        let anchor = random_theta(s, 2.0, &mut rng);
        let theta = random_theta(s, 2.0, &mut rng);
        let data = random_data(s, 30, &mut rng);
        let at_anchor = surrogate_value(&anchor, &anchor, &data).unwrap();
        assert!((at_anchor + log_likelihood(&anchor, &data).unwrap()).abs() < 1e-9);
        let gap = surrogate_value(&theta, &anchor, &data).unwrap() + log_likelihood(&theta, &data).unwrap();
        assert!(gap >= -1e-9, "gap {gap}");
    }
}

#[test]
fn mm_step_minimizes_the_surrogate() {
    // With no ridge the update is the exact minimizer, so the surrogate's
    // gradient vanishes there.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let s = spec(rng.random_range(2..4), rng.random_range(2..4), 1, 1);
        let anchor = random_theta(s, 1.0, &mut rng);
        let data = random_data(s, 40, &mut rng);
        let opts = FitOptions { ridge: 0.0, ..FitOptions::default() };
        let next = mm_step(&anchor, &data, &opts).unwrap();
        let grad = central_difference(
            |v| surrogate_value(&Theta::from_flat(s, v).unwrap(), &anchor, &data).unwrap(),
            &next.to_flat(),
            1e-4,
        );
        for g in grad {
            assert!(g.abs() < 1e-5, "surrogate gradient {g}");
        }
        assert!(
            surrogate_value(&next, &anchor, &data).unwrap() <= surrogate_value(&anchor, &anchor, &data).unwrap() + 1e-12
        );
    }
}

#[test]
fn mm_ascends_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let s = spec(rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..3), rng.random_range(1..3));
        let theta0 = random_theta(s, 2.0, &mut rng);
        let data = random_data(s, 60, &mut rng);
        let opts = FitOptions { max_iters: 50, tol: Some(1e-300), ..FitOptions::default() };
        let (_, trace) = fit_mm(&theta0, &data, &opts).unwrap();
        assert_eq!(trace.loglik.len(), trace.iters + 1);
        assert!(trace.max_decrease() <= 1e-10, "{}", trace.max_decrease());
    }
}

#[test]
fn symmetric_data_is_a_fixed_point() {
    let data = Dataset::new(1, 2, vec![-1.0, 1.0, -1.0, 1.0], &[1, 1, 2, 2]).unwrap();
    let theta = Theta::zeros(spec(2, 2, 1, 1));
    let next = mm_step(&theta, &data, &FitOptions::default()).unwrap();
    assert!(next.to_flat().iter().all(|v| v.abs() < 1e-14));
    let (fit, trace) = fit_mm(&theta, &data, &FitOptions::default()).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.iters, 1);
    assert!(fit.to_flat().iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn degenerate_expert_is_left_alone() {
    // All responsibility sits on expert 1, so expert 2's block is frozen.
    let mut theta = Theta::zeros(spec(2, 2, 1, 1));
    theta.set_gate_coef(0, 0, 0, 60.0);
    theta.set_expert_coef(0, 1, 1, 0, 0.3);
    let data = Dataset::new(1, 2, vec![0.5, -0.5, 1.0], &[1, 2, 1]).unwrap();
    let next = mm_step(&theta, &data, &FitOptions::default()).unwrap();
    assert_eq!(next.expert_block(1), theta.expert_block(1));
    assert!(next.is_finite());
}

#[test]
fn singular_curvature_without_ridge() {
    // Every covariate is zero, so the slope direction has no curvature.
    let data = Dataset::new(1, 2, vec![0.0; 4], &[1, 2, 1, 2]).unwrap();
    let theta = Theta::zeros(spec(2, 2, 1, 1));
    let strict = FitOptions { ridge: 0.0, ..FitOptions::default() };
    assert!(matches!(mm_step(&theta, &data, &strict), Err(Error::SingularCurvature { .. })));
    let (fit, trace) = fit_mm(&theta, &data, &FitOptions::default()).unwrap();
    assert!(fit.is_finite());
    assert!(trace.max_decrease() <= 1e-10);
}

#[test]
fn fit_recovers_truth_approximately() {
    let truth = crate::experiment::benchmark_truth();
    let data = sample_dataset(&truth, 5000, CovariateSampler::StandardNormal, 17);
    let init = init_perturbed_truth(&truth, 0.5, 0, 3).unwrap();
    let (fit, trace) = fit_mm(&init, &data, &FitOptions::default()).unwrap();
    assert!(trace.max_decrease() <= 1e-10);
    assert!(trace.final_loglik() >= log_likelihood(&truth, &data).unwrap() - 1e-6);
    assert!(parameter_distance(&fit, &truth).unwrap() < 5.0);
}

#[test]
fn gradient_baseline_runs_fixed_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = spec(2, 2, 1, 1);
    let theta0 = random_theta(s, 0.5, &mut rng);
    let data = random_data(s, 50, &mut rng);
    let (_, trace) = fit_gradient_baseline(&theta0, &data, 0.1, 7).unwrap();
    assert_eq!(trace.iters, 7);
    assert_eq!(trace.loglik.len(), 8);
    assert!(fit_gradient_baseline(&theta0, &data, 0.0, 3).is_err());
    let (_, one) = fit_gradient_baseline(&theta0, &data, 0.1, 0).unwrap();
    assert_eq!(one.loglik.len(), 1);
}

#[test]
fn fit_is_deterministic() {
    let truth = crate::experiment::benchmark_truth();
    let data = sample_dataset(&truth, 3000, CovariateSampler::StandardNormal, 1);
    let init = init_perturbed_truth(&truth, 1.0, 1, 2).unwrap();
    let opts = FitOptions { max_iters: 30, ..FitOptions::default() };
    let a = fit_mm(&init, &data, &opts).unwrap();
    let b = fit_mm(&init, &data, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn curvature_bundle_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = spec(3, 3, 1, 2);
    let theta = random_theta(s, 1.0, &mut rng);
    let data = random_data(s, 10, &mut rng);
    let resp = responsibilities(&theta, &data).unwrap();
    let cb = CurvatureBundle::compute(&resp, &data, &s, 0.0).unwrap();
    assert_eq!(cb.xtx.nrows(), 3);
    assert_eq!(cb.gate_curv_factor.nrows(), 2);
    assert_eq!(cb.expert_curv.len(), 3);
    assert_eq!(cb.expert_curv[0].nrows(), 6);
}

#[test]
fn options_validation() {
    assert!(FitOptions { ridge: -1.0, ..FitOptions::default() }.validate().is_err());
    assert!(FitOptions { tol: Some(0.0), ..FitOptions::default() }.validate().is_err());
    assert!(FitOptions { max_iters: 0, ..FitOptions::default() }.validate().is_err());
    assert_eq!(FitOptions::default().effective_tol(1000), 1e-5);
}
