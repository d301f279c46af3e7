//! Mixing measures, atom dissimilarities, barycentric merges and the
//! agglomerative merge chain behind the dendrogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, log_softmax_with_reference, log_sum_exp};
use crate::model::{slope_features, Dataset, ModelSpec, Theta};

/// Dimensions shared by all atoms of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureSpec {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

impl MeasureSpec {
    pub fn slope_len(&self) -> usize {
        self.p * self.d
    }
}

/// One weighted parameter point. Slopes follow the degree-major order of
/// [`slope_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "AtomRepr", try_from = "AtomRepr")]
pub struct Atom {
    pub pi: f64,
    pub gate_slope: Vec<f64>,
    /// Always `ln(pi)`; not serialized.
    pub gate_intercept: f64,
    pub expert_intercepts: Vec<f64>,
    pub expert_slopes: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AtomRepr {
    pi: f64,
    gate_slope: Vec<f64>,
    expert_intercepts: Vec<f64>,
    expert_slopes: Vec<Vec<f64>>,
}

impl From<Atom> for AtomRepr {
    fn from(a: Atom) -> Self {
        AtomRepr {
            pi: a.pi,
            gate_slope: a.gate_slope,
            expert_intercepts: a.expert_intercepts,
            expert_slopes: a.expert_slopes,
        }
    }
}

impl TryFrom<AtomRepr> for Atom {
    type Error = Error;

    fn try_from(r: AtomRepr) -> Result<Self> {
        Atom::new(r.pi, r.gate_slope, r.expert_intercepts, r.expert_slopes)
    }
}

impl Atom {
    pub fn new(
        pi: f64,
        gate_slope: Vec<f64>,
        expert_intercepts: Vec<f64>,
        expert_slopes: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !(pi > 0.0) || !pi.is_finite() {
            return Err(Error::invalid(format!("atom weight must be positive, got {pi}")));
        }
        if expert_intercepts.len() != expert_slopes.len() {
            return Err(Error::dims("expert intercepts and slopes differ in class count"));
        }
        Ok(Atom {
            pi,
            gate_slope,
            gate_intercept: pi.ln(),
            expert_intercepts,
            expert_slopes,
        })
    }

    /// Parameters without the weight: `(gate slope, {intercept_m, slope_m})`.
    pub fn location(&self) -> Vec<f64> {
        let mut v = self.gate_slope.clone();
        for (b, s) in self.expert_intercepts.iter().zip(&self.expert_slopes) {
            v.push(*b);
            v.extend_from_slice(s);
        }
        v
    }

    fn log_expert(&self, phi: &[f64], out: &mut [f64]) {
        let scores: Vec<f64> = self
            .expert_intercepts
            .iter()
            .zip(&self.expert_slopes)
            .map(|(b, s)| b + dot(s, phi))
            .collect();
        log_softmax_with_reference(&scores, out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    pub spec: MeasureSpec,
    pub atoms: Vec<Atom>,
}

impl MixingMeasure {
    pub fn new(spec: MeasureSpec, atoms: Vec<Atom>) -> Result<Self> {
        let g = MixingMeasure { spec, atoms };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec.m < 2 || self.spec.p == 0 || self.spec.d == 0 {
            return Err(Error::invalid("measure needs M >= 2 and positive P, D"));
        }
        if self.atoms.is_empty() {
            return Err(Error::invalid("a mixing measure needs at least one atom"));
        }
        let pd = self.spec.slope_len();
        for (i, a) in self.atoms.iter().enumerate() {
            if !(a.pi > 0.0) || !a.pi.is_finite() {
                return Err(Error::invalid(format!("atom {i} has non-positive weight")));
            }
            let ok = a.gate_slope.len() == pd
                && a.expert_intercepts.len() == self.spec.m - 1
                && a.expert_slopes.len() == self.spec.m - 1
                && a.expert_slopes.iter().all(|s| s.len() == pd);
            if !ok {
                return Err(Error::dims(format!("atom {i} does not match M={}, P*D={pd}", self.spec.m)));
            }
            if !a.location().iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("atom {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.pi).sum()
    }

    /// Rescales weights to sum to one (a common gate-intercept shift).
    pub fn normalized(&self) -> MixingMeasure {
        let total = self.total_weight();
        let mut g = self.clone();
        for a in &mut g.atoms {
            a.pi /= total;
            a.gate_intercept = a.pi.ln();
        }
        g
    }

    /// Parameterization with the last atom as reference expert. The density is
    /// preserved exactly up to rounding.
    pub fn to_theta(&self) -> Result<Theta> {
        self.validate()?;
        let MeasureSpec { m, p, d } = self.spec;
        let spec = ModelSpec::new(self.atoms.len(), m, p, d)?;
        let mut theta = Theta::zeros(spec);
        let reference = self.atoms.last().unwrap();
        for (k, a) in self.atoms.iter().enumerate() {
            if k + 1 < self.atoms.len() {
                theta.set_gate_coef(k, 0, 0, a.gate_intercept - reference.gate_intercept);
                for deg in 0..d {
                    for j in 0..p {
                        let i = deg * p + j;
                        theta.set_gate_coef(k, deg + 1, j, a.gate_slope[i] - reference.gate_slope[i]);
                    }
                }
            }
            for c in 0..m - 1 {
                theta.set_expert_coef(c, k, 0, 0, a.expert_intercepts[c]);
                for deg in 0..d {
                    for j in 0..p {
                        theta.set_expert_coef(c, k, deg + 1, j, a.expert_slopes[c][deg * p + j]);
                    }
                }
            }
        }
        Ok(theta)
    }
}

/// Mixing measure induced by `theta`, with weights normalized to sum to one.
///
/// Gate and expert scores split into an intercept (sum of the degree-0
/// coefficients over covariates) and a degree-major slope stack. The
/// reference expert becomes an atom with zero slope and zero intercept
/// before normalization.
pub fn from_theta(theta: &Theta) -> MixingMeasure {
    let ModelSpec { k, m, p, d } = *theta.spec();
    let slope_of = |coef: &dyn Fn(usize, usize) -> f64| {
        let mut v = vec![0.0; p * d];
        for deg in 0..d {
            for j in 0..p {
                v[deg * p + j] = coef(deg + 1, j);
            }
        }
        v
    };
    let intercepts: Vec<f64> = (0..k - 1)
        .map(|kk| (0..p).map(|j| theta.gate_coef(kk, 0, j)).sum())
        .collect();
    let mut log_pi = vec![0.0; k];
    log_softmax_with_reference(&intercepts, &mut log_pi);

    let atoms = (0..k)
        .map(|kk| {
            let gate_slope = if kk + 1 < k {
                slope_of(&|deg, j| theta.gate_coef(kk, deg, j))
            } else {
                vec![0.0; p * d]
            };
            let expert_intercepts = (0..m - 1)
                .map(|c| (0..p).map(|j| theta.expert_coef(c, kk, 0, j)).sum())
                .collect();
            let expert_slopes = (0..m - 1)
                .map(|c| slope_of(&|deg, j| theta.expert_coef(c, kk, deg, j)))
                .collect();
            Atom {
                pi: log_pi[kk].exp(),
                gate_slope,
                gate_intercept: log_pi[kk],
                expert_intercepts,
                expert_slopes,
            }
        })
        .collect();
    MixingMeasure {
        spec: MeasureSpec { m, p, d },
        atoms,
    }
}

pub(crate) fn log_density_of_measure(g: &MixingMeasure, phi: &[f64], out: &mut [f64]) {
    let kk = g.atoms.len();
    let m = g.spec.m;
    let log_gate: Vec<f64> = g
        .atoms
        .iter()
        .map(|a| a.pi.ln() + dot(&a.gate_slope, phi))
        .collect();
    let norm = log_sum_exp(&log_gate);
    let mut le = vec![0.0; m];
    let mut terms = vec![vec![0.0; kk]; m];
    for (i, a) in g.atoms.iter().enumerate() {
        a.log_expert(phi, &mut le);
        for c in 0..m {
            terms[c][i] = log_gate[i] - norm + le[c];
        }
    }
    for c in 0..m {
        out[c] = log_sum_exp(&terms[c]);
    }
}

/// Class probabilities `s_G(. | x)`.
pub fn density_of_measure(g: &MixingMeasure, x_row: &[f64]) -> Result<Vec<f64>> {
    if x_row.len() != g.spec.p {
        return Err(Error::dims(format!(
            "covariate row has length {}, expected {}",
            x_row.len(),
            g.spec.p
        )));
    }
    let phi = slope_features(x_row, g.spec.d);
    let mut out = vec![0.0; g.spec.m];
    log_density_of_measure(g, &phi, &mut out);
    Ok(out.into_iter().map(f64::exp).collect())
}

/// Empirical mean `1/N sum_n log s_G(y_n | x_n)`.
pub fn mean_log_likelihood(g: &MixingMeasure, data: &Dataset) -> Result<f64> {
    if data.p() != g.spec.p || data.n_classes() != g.spec.m {
        return Err(Error::dims("dataset does not match the measure's M and P"));
    }
    if data.is_empty() {
        return Err(Error::invalid("mean log-likelihood of an empty dataset"));
    }
    let total = crate::math::chunked_sum(data.len(), |n| {
        let phi = slope_features(data.x_row(n), g.spec.d);
        let mut out = vec![0.0; g.spec.m];
        log_density_of_measure(g, &phi, &mut out);
        out[data.label(n) - 1]
    });
    Ok(total / data.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `pi_a pi_b / (pi_a + pi_b)` times the squared Euclidean distance between
/// the atom locations (gate slope, expert intercepts and slopes).
pub fn dissimilarity(a: &Atom, b: &Atom) -> f64 {
    let w = a.pi * b.pi / (a.pi + b.pi);
    let mut d2 = sq_dist(&a.gate_slope, &b.gate_slope);
    for c in 0..a.expert_intercepts.len() {
        d2 += sq_dist(&a.expert_slopes[c], &b.expert_slopes[c]);
        d2 += (a.expert_intercepts[c] - b.expert_intercepts[c]).powi(2);
    }
    w * d2
}

/// Weight-averaged merge of two atoms.
pub fn merge_pair(a: &Atom, b: &Atom) -> Atom {
    let pi = a.pi + b.pi;
    let wb = b.pi / pi;
    // Written as a step from `a` towards `b` so equal parameters stay exact.
    let bary = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(u, v)| u + wb * (v - u)).collect()
    };
    Atom {
        pi,
        gate_slope: bary(&a.gate_slope, &b.gate_slope),
        gate_intercept: pi.ln(),
        expert_intercepts: bary(&a.expert_intercepts, &b.expert_intercepts),
        expert_slopes: a
            .expert_slopes
            .iter()
            .zip(&b.expert_slopes)
            .map(|(x, y)| bary(x, y))
            .collect(),
    }
}

/// Greedy agglomeration from `K` atoms down to two (or one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeChain {
    /// Measures with `K, K-1, ..` atoms.
    pub levels: Vec<MixingMeasure>,
    /// `heights[i]`: dissimilarity of the pair merged when leaving `levels[i]`.
    pub heights: Vec<f64>,
    /// 0-based atom indices merged when leaving `levels[i]`; the merged atom
    /// takes the first index and the second is removed.
    pub merged_pairs: Vec<(usize, usize)>,
    /// Mean log-likelihood of each level on the supplied data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logliks: Option<Vec<f64>>,
}

impl MergeChain {
    /// Number of atoms at `levels[i]`.
    pub fn level_size(&self, i: usize) -> usize {
        self.levels[i].len()
    }

    /// Level with `kappa` atoms, if recorded.
    pub fn level(&self, kappa: usize) -> Option<&MixingMeasure> {
        self.levels.iter().find(|g| g.len() == kappa)
    }

    /// Height recorded when leaving the level with `kappa` atoms.
    pub fn height(&self, kappa: usize) -> Option<f64> {
        self.levels
            .iter()
            .position(|g| g.len() == kappa)
            .and_then(|i| self.heights.get(i).copied())
    }
}

/// Closest pair `(i, j)` with `i < j`; ties go to the lexicographically
/// smallest pair.
pub fn closest_pair(g: &MixingMeasure) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..g.atoms.len() {
        for j in i + 1..g.atoms.len() {
            let d = dissimilarity(&g.atoms[i], &g.atoms[j]);
            if best.is_none_or(|(_, _, b)| d < b) {
                best = Some((i, j, d));
            }
        }
    }
    best
}

/// Builds the merge chain down to two atoms; with `include_single` the
/// one-atom level is recorded too. Every level from `K` to 2 carries a
/// height (the two-atom level's height is its single pairwise
/// dissimilarity). With data, each recorded level also gets its mean
/// log-likelihood.
pub fn build_chain(
    g: &MixingMeasure,
    data: Option<&Dataset>,
    include_single: bool,
) -> Result<MergeChain> {
    g.validate()?;
    if g.len() < 2 {
        return Err(Error::TooFewAtoms(g.len()));
    }
    let mut levels = vec![g.clone()];
    let mut heights = Vec::new();
    let mut merged_pairs = Vec::new();
    let mut current = g.clone();
    while current.len() >= 2 {
        let (i, j, h) = closest_pair(&current).expect("at least two atoms");
        heights.push(h);
        merged_pairs.push((i, j));
        let merged = merge_pair(&current.atoms[i], &current.atoms[j]);
        current.atoms[i] = merged;
        current.atoms.remove(j);
        if current.len() >= 2 || include_single {
            levels.push(current.clone());
        }
    }
    let logliks = match data {
        Some(d) => Some(
            levels
                .iter()
                .map(|lvl| mean_log_likelihood(lvl, d))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(MergeChain {
        levels,
        heights,
        merged_pairs,
        logliks,
    })
}
