//! Starting points for the MM iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fit_mm, FitOptions};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, Theta};

/// Perturbs `theta_true` coordinate-wise by `noise * N(0, 1)`.
///
/// With `extra_experts > 0` the model is over-specified: each extra expert is
/// a copy of the first true expert (gate block and expert block), inserted
/// just before the reference expert so that the reference keeps its meaning.
/// The noise is applied to the extra experts as well.
pub fn init_perturbed_truth(
    theta_true: &Theta,
    noise: f64,
    extra_experts: usize,
    seed: u64,
) -> Result<Theta> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid("noise level must be finite and non-negative"));
    }
    let spec0 = *theta_true.spec();
    let spec = spec0.with_experts(spec0.k + extra_experts);
    let q = spec.lifted_len();

    let template_gate: Vec<f64> = if spec0.k > 1 {
        theta_true.gate_block(0).to_vec()
    } else {
        vec![0.0; q]
    };
    let template_expert = theta_true.expert_block(0).to_vec();

    let mut gate = Vec::with_capacity(spec.gate_len());
    gate.extend_from_slice(theta_true.gate());
    for _ in 0..extra_experts {
        gate.extend_from_slice(&template_gate);
    }

    let mut experts = Vec::with_capacity(spec.experts_len());
    for k in 0..spec0.k - 1 {
        experts.extend_from_slice(theta_true.expert_block(k));
    }
    for _ in 0..extra_experts {
        experts.extend_from_slice(&template_expert);
    }
    experts.extend_from_slice(theta_true.expert_block(spec0.k - 1));

    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in gate.iter_mut().chain(experts.iter_mut()) {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Theta::from_parts(spec, gate, experts)
}

/// Lloyd's k-means with k-means++ seeding on the covariate rows.
///
/// Returns cluster labels in `0..k`, or `None` if a cluster ended up empty.
pub fn kmeans(data: &Dataset, k: usize, seed: u64, max_iter: usize) -> Option<Vec<usize>> {
    let n = data.len();
    let p = data.p();
    if k == 0 || n < k {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = vec![data.x_row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(data.x_row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(data.x_row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(data.x_row(i), centers.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let row = data.x_row(i);
            let best = (0..k)
                .min_by(|&a, &b| dist2(row, &centers[a]).total_cmp(&dist2(row, &centers[b])))
                .unwrap();
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(data.x_row(i)) {
                *s += x;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for j in 0..p {
                centers[c][j] = sums[c][j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Some(labels)
}

/// Data-driven start: k-means on the covariates, then one multinomial-logistic
/// expert per cluster (a few MM steps on that cluster's rows). Gate
/// intercepts are the log cluster proportions relative to the reference
/// expert; gate slopes start at zero.
///
/// Empty clusters trigger up to five re-seeded k-means runs. If clusters are
/// still empty, rows are split into `K` contiguous index ranges.
pub fn init_from_clustering(data: &Dataset, spec: &ModelSpec, seed: u64) -> Result<Theta> {
    spec.validate()?;
    data.check_spec(spec)?;
    let k = spec.k;
    let n = data.len();
    if n == 0 {
        return Ok(Theta::zeros(*spec));
    }

    let labels = (0..=5u64)
        .find_map(|attempt| kmeans(data, k, seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)), 100))
        .unwrap_or_else(|| fallback_partition(n, k));

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    let one = spec.with_experts(1);
    let local_opts = FitOptions {
        tol: None,
        max_iters: 25,
        ridge: 1e-6,
        record_trace: false,
        extrapolate: false,
    };
    let mut theta = Theta::zeros(*spec);
    let counts: Vec<f64> = members.iter().map(|m| m.len().max(1) as f64).collect();
    for (c, rows) in members.iter().enumerate() {
        let sub = data.subset(rows);
        let (fit, _) = fit_mm(&Theta::zeros(one), &sub, &local_opts)?;
        theta.expert_block_mut(c).copy_from_slice(fit.expert_block(0));
        if c + 1 < k {
            theta.set_gate_coef(c, 0, 0, (counts[c] / counts[k - 1]).ln());
        }
    }
    Ok(theta)
}

/// Contiguous index ranges; every cluster gets a row whenever `n >= k`.
fn fallback_partition(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n.max(1)).map(|c| c.min(k - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expert_probs, CovariateSampler};

    fn truth() -> Theta {
        crate::experiment::benchmark_truth()
    }

    #[test]
    fn zero_noise_is_identity() {
        let t = truth();
        assert_eq!(init_perturbed_truth(&t, 0.0, 0, 3).unwrap(), t);
    }

    #[test]
    fn extra_expert_copies_first_expert_template() {
        let t = truth();
        let over = init_perturbed_truth(&t, 0.0, 1, 3).unwrap();
        assert_eq!(over.spec().k, 3);
        // Inserted before the reference expert, i.e. at 0-based index 1.
        assert_eq!(over.gate_coef(1, 0, 0), 0.0);
        assert_eq!(over.gate_coef(1, 1, 0), 8.0);
        assert_eq!(over.expert_coef(0, 1, 0, 0), 10.0);
        assert_eq!(over.expert_coef(0, 1, 1, 0), 20.0);
        // The reference expert is still the true reference expert.
        assert_eq!(over.expert_block(2), t.expert_block(1));
    }

    #[test]
    fn perturbation_is_seeded() {
        let t = truth();
        let a = init_perturbed_truth(&t, 0.5, 2, 11).unwrap();
        let b = init_perturbed_truth(&t, 0.5, 2, 11).unwrap();
        let c = init_perturbed_truth(&t, 0.5, 2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(init_perturbed_truth(&t, -1.0, 0, 1).is_err());
    }

    #[test]
    fn single_cluster_is_pooled_fit() {
        let t = truth();
        let data = crate::model::sample_dataset(&t, 300, CovariateSampler::StandardNormal, 5);
        let spec = t.spec().with_experts(1);
        let init = init_from_clustering(&data, &spec, 1).unwrap();
        assert!(init.gate().is_empty());
        let opts = FitOptions {
            max_iters: 25,
            ridge: 1e-6,
            ..FitOptions::default()
        };
        let (pooled, _) = fit_mm(&Theta::zeros(spec), &data, &opts).unwrap();
        assert_eq!(init, pooled);
    }

    #[test]
    fn clustering_init_is_deterministic() {
        let t = truth();
        let data = crate::model::sample_dataset(&t, 400, CovariateSampler::StandardNormal, 9);
        let spec = t.spec().with_experts(3);
        let a = init_from_clustering(&data, &spec, 4).unwrap();
        let b = init_from_clustering(&data, &spec, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_blobs_are_recovered() {
        // Blob A around -4 with labels mostly 1, blob B around +4 mostly 2.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..400 {
            let left = i % 2 == 0;
            let centre = if left { -4.0 } else { 4.0 };
            x.push(centre + rng.sample::<f64, _>(StandardNormal));
            let flip = rng.random::<f64>() < 0.04;
            y.push(if left != flip { 1 } else { 2 });
        }
        let data = Dataset::new(1, 2, x, &y).unwrap();
        let spec = ModelSpec::new(2, 2, 1, 1).unwrap();
        let init = init_from_clustering(&data, &spec, 8).unwrap();
        // One expert should speak for each blob, in either order.
        let p1 = |k: usize, at: f64| expert_probs(&init, &[at], k).unwrap()[0];
        let straight = p1(0, -4.0).min(1.0 - p1(1, 4.0));
        let swapped = p1(1, -4.0).min(1.0 - p1(0, 4.0));
        assert!(straight.max(swapped) > 0.8, "{straight} {swapped}");
        assert!(init.gate_coef(0, 0, 0).abs() < 0.2);
    }

    #[test]
    fn kmeans_reports_impossible_partitions() {
        let data = Dataset::new(1, 2, vec![0.0, 1.0], &[1, 2]).unwrap();
        assert!(kmeans(&data, 3, 0, 10).is_none());
        assert_eq!(fallback_partition(2, 3), vec![0, 1]);
    }
}
