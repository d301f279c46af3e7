use proptest::prelude::*;

use sgmlmoe::diagnostics::{rate_slope, voronoi_assign};
use sgmlmoe::mixing::{dissimilarity, from_theta, merge_pair, Atom, MixingMeasure};
use sgmlmoe::selection::{criterion_scores, Criterion};
use sgmlmoe::{fit_mm, log_likelihood, predict_proba, Dataset, FitOptions, ModelSpec, Theta};

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (1usize..=4, 2usize..=4, 1usize..=2, 1usize..=2).prop_map(|(k, m, p, d)| ModelSpec::new(k, m, p, d).unwrap())
}

fn theta_strategy() -> impl Strategy<Value = Theta> {
    spec_strategy().prop_flat_map(|s| {
        prop::collection::vec(-3.0f64..3.0, s.gate_len() + s.experts_len())
            .prop_map(move |flat| Theta::from_flat(s, &flat).unwrap())
    })
}

fn data_for(spec: ModelSpec, n: usize, seed: u64) -> Dataset {
    let mut state = seed.wrapping_add(1);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let x: Vec<f64> = (0..n * spec.p).map(|_| 4.0 * next() - 2.0).collect();
    let y: Vec<usize> = (0..n).map(|_| 1 + (next() * spec.m as f64) as usize % spec.m).collect();
    Dataset::new(spec.p, spec.m, x, &y).unwrap()
}

fn atom_strategy(m: usize, slope_len: usize) -> impl Strategy<Value = Atom> {
    (
        0.01f64..1.0,
        prop::collection::vec(-5.0f64..5.0, slope_len),
        prop::collection::vec(-5.0f64..5.0, m - 1),
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, slope_len), m - 1),
    )
        .prop_map(|(pi, g, b, s)| Atom::new(pi, g, b, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_form_a_distribution(theta in theta_strategy(), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let x = &x[..theta.spec().p];
        let p = predict_proba(&theta, x).unwrap();
        prop_assert_eq!(p.len(), theta.spec().m);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn theta_json_round_trip(theta in theta_strategy()) {
        let text = serde_json::to_string(&theta).unwrap();
        let back: Theta = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, theta);
    }

    #[test]
    fn measure_weights_sum_to_one(theta in theta_strategy()) {
        let g = from_theta(&theta);
        prop_assert_eq!(g.len(), theta.spec().k);
        prop_assert!((g.total_weight() - 1.0).abs() < 1e-12);
        let back = g.to_theta().unwrap();
        let a = predict_proba(&theta, &vec![0.7; theta.spec().p]).unwrap();
        let b = predict_proba(&back, &vec![0.7; theta.spec().p]).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dissimilarity_is_symmetric_and_merge_conserves_mass(
        a in atom_strategy(3, 2),
        b in atom_strategy(3, 2),
    ) {
        let d = dissimilarity(&a, &b);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, dissimilarity(&b, &a));
        prop_assert_eq!(dissimilarity(&a, &a), 0.0);
        let c = merge_pair(&a, &b);
        prop_assert!((c.pi - (a.pi + b.pi)).abs() < 1e-15);
        // The barycenter lies between the two parents coordinate-wise.
        for ((u, v), w) in a.location().iter().zip(b.location()).zip(c.location()) {
            prop_assert!(w >= u.min(v) - 1e-12 && w <= u.max(v) + 1e-12);
        }
    }

    #[test]
    fn voronoi_assignment_is_brute_force_nearest(
        fitted in prop::collection::vec(atom_strategy(2, 1), 1..6),
        truth in prop::collection::vec(atom_strategy(2, 1), 1..4),
    ) {
        let spec = sgmlmoe::mixing::MeasureSpec { m: 2, p: 1, d: 1 };
        let g = MixingMeasure::new(spec, fitted).unwrap();
        let g0 = MixingMeasure::new(spec, truth).unwrap();
        let a = voronoi_assign(&g, &g0).unwrap();
        for (i, atom) in g.atoms.iter().enumerate() {
            let dist = |t: &Atom| -> f64 {
                atom.location().iter().zip(t.location()).map(|(u, v)| (u - v).powi(2)).sum()
            };
            let mut best = 0;
            for k in 1..g0.len() {
                if dist(&g0.atoms[k]) < dist(&g0.atoms[best]) {
                    best = k;
                }
            }
            prop_assert_eq!(a.cell_of[i], best);
            prop_assert!(a.cells[best].contains(&i));
        }
    }

    #[test]
    fn rate_slope_recovers_power_laws(b in -2.0f64..2.0, c in 0.01f64..100.0) {
        let pts: Vec<(f64, f64)> = [100.0, 316.0, 1000.0, 3162.0, 10000.0]
            .iter()
            .map(|&n: &f64| (n, c * n.powf(b)))
            .collect();
        let fit = rate_slope(&pts).unwrap();
        prop_assert!((fit.slope - b).abs() < 1e-12);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-10);
    }

    #[test]
    fn sweep_scores_ignore_input_order(seed in 0u64..1000, rot in 0usize..3) {
        let base = ModelSpec::new(1, 2, 1, 1).unwrap();
        let data = data_for(base, 60, seed);
        let fits: Vec<Theta> = (1..=3)
            .map(|k| {
                let spec = base.with_experts(k);
                let flat: Vec<f64> = (0..spec.gate_len() + spec.experts_len())
                    .map(|i| ((i as u64 * 31 + seed) % 7) as f64 / 7.0 - 0.5)
                    .collect();
                Theta::from_flat(spec, &flat).unwrap()
            })
            .collect();
        let mut shuffled = fits.clone();
        shuffled.rotate_left(rot);
        for c in [Criterion::Aic, Criterion::Bic, Criterion::Icl] {
            prop_assert_eq!(
                criterion_scores(&fits, &data, c).unwrap(),
                criterion_scores(&shuffled, &data, c).unwrap()
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mm_never_decreases_the_likelihood(theta in theta_strategy(), seed in 0u64..1000, extrapolate in any::<bool>()) {
        let data = data_for(*theta.spec(), 80, seed);
        let opts = FitOptions { tol: Some(1e-300), max_iters: 25, extrapolate, ..FitOptions::default() };
        let (fitted, trace) = fit_mm(&theta, &data, &opts).unwrap();
        prop_assert!(trace.max_decrease() <= 1e-10);
        prop_assert_eq!(trace.loglik.len(), trace.iters + 1);
        let last = *trace.loglik.last().unwrap();
        prop_assert!((last - log_likelihood(&fitted, &data).unwrap()).abs() <= 1e-9 * last.abs().max(1.0));
    }
}
