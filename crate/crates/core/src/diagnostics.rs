//! Comparing a fitted mixing measure with a reference one: Voronoi cells,
//! the Voronoi loss, an averaged total-variation distance, and log-log rate
//! fits over sample sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{density_of_measure, MixingMeasure};
use crate::model::CovariateSampler;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// Fitted atom index -> true atom index.
    pub cell_of: Vec<usize>,
    /// True atom index -> fitted atom indices, ascending.
    pub cells: Vec<Vec<usize>>,
}

impl VoronoiAssignment {
    pub fn overfit_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&k| self.cells[k].len() > 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellContribution {
    pub true_index: usize,
    pub members: Vec<usize>,
    /// `|sum_{i in cell} pi_i - pi0_k|`.
    pub mass_error: f64,
    /// Linear term (singleton cells only).
    pub linear: f64,
    /// Quadratic term (over-covered cells only).
    pub quadratic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiLossReport {
    pub d_v: f64,
    pub d_e: f64,
    pub per_cell: Vec<CellContribution>,
    pub overfit_cells: Vec<usize>,
    pub assignment: VoronoiAssignment,
}

fn check_same_spec(g: &MixingMeasure, g0: &MixingMeasure) -> Result<()> {
    g.validate()?;
    g0.validate()?;
    if g.spec != g0.spec {
        return Err(Error::dims(format!(
            "measures differ in (M, P, D): {:?} vs {:?}",
            g.spec, g0.spec
        )));
    }
    Ok(())
}

fn euclid2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Assigns each fitted atom to the nearest true atom in Euclidean distance on
/// the atom locations (weights excluded). Ties go to the lowest true index.
pub fn voronoi_assign(g: &MixingMeasure, g0: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_same_spec(g, g0)?;
    let truth: Vec<Vec<f64>> = g0.atoms.iter().map(|a| a.location()).collect();
    let mut cells = vec![Vec::new(); g0.len()];
    let cell_of: Vec<usize> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let loc = a.location();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, t) in truth.iter().enumerate() {
                let d = euclid2(&loc, t);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            cells[best].push(i);
            best
        })
        .collect();
    Ok(VoronoiAssignment { cell_of, cells })
}

/// Per-class differences `(|dw|, |db_m|, |ds_m|)` between fitted atom `i`
/// and true atom `k`; returns the gate norm and one pair per class.
fn differences(g: &MixingMeasure, g0: &MixingMeasure, i: usize, k: usize) -> (f64, Vec<(f64, f64)>) {
    let a = &g.atoms[i];
    let b = &g0.atoms[k];
    let gate = euclid2(&a.gate_slope, &b.gate_slope).sqrt();
    let per_class = (0..g.spec.m - 1)
        .map(|c| {
            let db = (a.expert_intercepts[c] - b.expert_intercepts[c]).abs();
            let ds = euclid2(&a.expert_slopes[c], &b.expert_slopes[c]).sqrt();
            (db, ds)
        })
        .collect();
    (gate, per_class)
}

/// Voronoi loss `D_V` and its exact-fit part `D_E`.
///
/// Every cell contributes its mass discrepancy. Singleton cells add, for each
/// free class `m`, `pi_i (|dw| + |db_m| + |ds_m|)`; over-covered cells add the
/// squared version for each member. Empty cells contribute mass only.
pub fn voronoi_loss(g: &MixingMeasure, g0: &MixingMeasure) -> Result<VoronoiLossReport> {
    let assignment = voronoi_assign(g, g0)?;
    let mut per_cell = Vec::with_capacity(g0.len());
    let (mut d_e, mut quad_total) = (0.0, 0.0);
    for (k, members) in assignment.cells.iter().enumerate() {
        let mass: f64 = members.iter().map(|&i| g.atoms[i].pi).sum();
        let mass_error = (mass - g0.atoms[k].pi).abs();
        let (mut linear, mut quadratic) = (0.0, 0.0);
        if members.len() == 1 {
            let i = members[0];
            let (gate, classes) = differences(g, g0, i, k);
            for (db, ds) in classes {
                linear += g.atoms[i].pi * (gate + db + ds);
            }
        } else {
            for &i in members {
                let (gate, classes) = differences(g, g0, i, k);
                for (db, ds) in classes {
                    quadratic += g.atoms[i].pi * (gate * gate + db * db + ds * ds);
                }
            }
        }
        d_e += mass_error + linear;
        quad_total += quadratic;
        per_cell.push(CellContribution {
            true_index: k,
            members: members.clone(),
            mass_error,
            linear,
            quadratic,
        });
    }
    Ok(VoronoiLossReport {
        d_v: d_e + quad_total,
        d_e,
        per_cell,
        overfit_cells: assignment.overfit_cells(),
        assignment,
    })
}

/// Euclidean error of each fitted atom's location against its matched true
/// atom (gate slope and every expert intercept and slope).
pub fn component_errors(g: &MixingMeasure, g0: &MixingMeasure, assignment: &VoronoiAssignment) -> Vec<f64> {
    g.atoms
        .iter()
        .zip(&assignment.cell_of)
        .map(|(a, &k)| euclid2(&a.location(), &g0.atoms[k].location()).sqrt())
        .collect()
}

/// Average over the rows of `x` (row-major, `P` columns) of
/// `1/2 sum_m |s_G(m|x) - s_G0(m|x)|`.
pub fn tv_discrepancy(g: &MixingMeasure, g0: &MixingMeasure, x: &[f64]) -> Result<f64> {
    check_same_spec(g, g0)?;
    let p = g.spec.p;
    if x.is_empty() || !x.len().is_multiple_of(p) {
        return Err(Error::invalid("need at least one complete covariate row"));
    }
    let n = x.len() / p;
    let total = crate::math::chunked_sum(n, |i| {
        let row = &x[i * p..(i + 1) * p];
        let a = density_of_measure(g, row).expect("row length checked");
        let b = density_of_measure(g0, row).expect("row length checked");
        0.5 * a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>()
    });
    Ok((total / n as f64).clamp(0.0, 1.0))
}

/// [`tv_discrepancy`] on `n` seeded draws from `sampler`.
pub fn tv_discrepancy_mc(
    g: &MixingMeasure,
    g0: &MixingMeasure,
    n: usize,
    sampler: CovariateSampler,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * g.spec.p).map(|_| sampler.draw(&mut rng)).collect();
    tv_discrepancy(g, g0, &x)
}

/// Regular one-dimensional grid of `n` points on `[lo, hi]`, as rows for
/// [`tv_discrepancy`] when `P = 1`.
pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Least-squares line through `(ln N, ln metric)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn rate_slope(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::invalid(format!(
            "a rate fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, v)| !(n > 0.0) || !(v > 0.0) || !n.is_finite() || !v.is_finite()) {
        return Err(Error::invalid("rate fit needs positive, finite sample sizes and metrics"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate fit needs at least two distinct sample sizes"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: points.to_vec(),
    })
}
