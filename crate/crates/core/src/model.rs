//! Model definition: dimensions, the identifiable parameterization, class
//! probabilities, the observed-data log-likelihood and a synthetic sampler.
//!
//! The last expert's gate coefficients and every expert's last-class
//! coefficients are fixed at zero and never stored. Gate coefficients are laid
//! out as `(K-1)` blocks of `P(D+1)` entries; expert coefficients as `K` blocks
//! `c_k`, each holding `(M-1)` class rows of `P(D+1)` entries. Inside a block
//! the ordering follows the lifted features: `p`-major, then degree.
//!
//! Expert indices are 0-based in the Rust API. Class labels are 1-based
//! (`1..=M`) wherever they enter or leave the crate (datasets, CSV files,
//! [`class_indicator`]) and 0-based in internal storage.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{chunked_sum, dot, log_softmax_in_place, log_sum_exp};

/// Model dimensions: experts `K`, classes `M`, covariates `P`, polynomial degree `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

impl ModelSpec {
    pub fn new(k: usize, m: usize, p: usize, d: usize) -> Result<Self> {
        let spec = ModelSpec { k, m, p, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.d == 0 {
            return Err(Error::invalid(format!(
                "K, P and D must be positive (got K={}, P={}, D={})",
                self.k, self.p, self.d
            )));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!("M must be at least 2 (got {})", self.m)));
        }
        Ok(())
    }

    /// Length of a lifted feature row, `P(D+1)`.
    pub fn lifted_len(&self) -> usize {
        self.p * (self.d + 1)
    }

    /// Length of the slope-only feature map, `PD`.
    pub fn slope_len(&self) -> usize {
        self.p * self.d
    }

    pub fn gate_len(&self) -> usize {
        (self.k - 1) * self.lifted_len()
    }

    /// Length of one expert block `c_k`.
    pub fn expert_block_len(&self) -> usize {
        (self.m - 1) * self.lifted_len()
    }

    pub fn experts_len(&self) -> usize {
        self.k * self.expert_block_len()
    }

    pub fn with_experts(&self, k: usize) -> Self {
        ModelSpec { k, ..*self }
    }
}

/// Identifiable SGMLMoE parameters. Serialized in the nested form of
/// [`crate::io::ThetaJson`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::io::ThetaJson", try_from = "crate::io::ThetaJson")]
pub struct Theta {
    spec: ModelSpec,
    gate: Vec<f64>,
    experts: Vec<f64>,
}

impl Theta {
    pub fn zeros(spec: ModelSpec) -> Self {
        Theta {
            spec,
            gate: vec![0.0; spec.gate_len()],
            experts: vec![0.0; spec.experts_len()],
        }
    }

    /// Builds a parameter set from flat gate and expert vectors in the
    /// crate's block layout.
    pub fn from_parts(spec: ModelSpec, gate: Vec<f64>, experts: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if gate.len() != spec.gate_len() {
            return Err(Error::dims(format!(
                "gate has {} coefficients, expected {}",
                gate.len(),
                spec.gate_len()
            )));
        }
        if experts.len() != spec.experts_len() {
            return Err(Error::dims(format!(
                "experts have {} coefficients, expected {}",
                experts.len(),
                spec.experts_len()
            )));
        }
        if gate.iter().chain(&experts).any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Theta { spec, gate, experts })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn gate(&self) -> &[f64] {
        &self.gate
    }

    pub fn experts(&self) -> &[f64] {
        &self.experts
    }

    pub(crate) fn gate_mut(&mut self) -> &mut [f64] {
        &mut self.gate
    }

    fn lifted_index(&self, d: usize, p: usize) -> usize {
        p * (self.spec.d + 1) + d
    }

    /// Gate coefficient `omega_{k,d,p}` (0-based `k < K-1`).
    pub fn gate_coef(&self, k: usize, d: usize, p: usize) -> f64 {
        self.gate[k * self.spec.lifted_len() + self.lifted_index(d, p)]
    }

    pub fn set_gate_coef(&mut self, k: usize, d: usize, p: usize, value: f64) {
        let i = k * self.spec.lifted_len() + self.lifted_index(d, p);
        self.gate[i] = value;
    }

    /// Expert coefficient `upsilon_{m,k,d,p}` (0-based `m < M-1`, `k < K`).
    pub fn expert_coef(&self, m: usize, k: usize, d: usize, p: usize) -> f64 {
        self.experts[self.expert_row_offset(k, m) + self.lifted_index(d, p)]
    }

    pub fn set_expert_coef(&mut self, m: usize, k: usize, d: usize, p: usize, value: f64) {
        let i = self.expert_row_offset(k, m) + self.lifted_index(d, p);
        self.experts[i] = value;
    }

    fn expert_row_offset(&self, k: usize, m: usize) -> usize {
        (k * (self.spec.m - 1) + m) * self.spec.lifted_len()
    }

    /// Gate block of free expert `k`.
    pub fn gate_block(&self, k: usize) -> &[f64] {
        let q = self.spec.lifted_len();
        &self.gate[k * q..(k + 1) * q]
    }

    /// Expert block `c_k`.
    pub fn expert_block(&self, k: usize) -> &[f64] {
        let b = self.spec.expert_block_len();
        &self.experts[k * b..(k + 1) * b]
    }

    pub(crate) fn expert_block_mut(&mut self, k: usize) -> &mut [f64] {
        let b = self.spec.expert_block_len();
        &mut self.experts[k * b..(k + 1) * b]
    }

    /// Flat parameter vector: gate coefficients followed by expert coefficients.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.gate.clone();
        v.extend_from_slice(&self.experts);
        v
    }

    pub fn from_flat(spec: ModelSpec, flat: &[f64]) -> Result<Self> {
        let g = spec.gate_len();
        if flat.len() != g + spec.experts_len() {
            return Err(Error::dims(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                g + spec.experts_len()
            )));
        }
        Theta::from_parts(spec, flat[..g].to_vec(), flat[g..].to_vec())
    }

    pub fn n_params(&self) -> usize {
        self.gate.len() + self.experts.len()
    }

    /// Gate scores `w_k(x)` for `k < K-1` given a lifted row.
    pub(crate) fn gate_scores(&self, xhat: &[f64], out: &mut [f64]) {
        let q = self.spec.lifted_len();
        for (k, o) in out.iter_mut().enumerate().take(self.spec.k - 1) {
            *o = dot(&self.gate[k * q..(k + 1) * q], xhat);
        }
    }

    /// Expert scores `v_{m,k}(x)` for `m < M-1`.
    pub(crate) fn expert_scores(&self, k: usize, xhat: &[f64], out: &mut [f64]) {
        let q = self.spec.lifted_len();
        let block = self.expert_block(k);
        for (m, o) in out.iter_mut().enumerate().take(self.spec.m - 1) {
            *o = dot(&block[m * q..(m + 1) * q], xhat);
        }
    }

    /// Log gate probabilities for a lifted row (length `K`).
    pub(crate) fn log_gate(&self, xhat: &[f64], out: &mut [f64]) {
        let kf = self.spec.k - 1;
        self.gate_scores(xhat, &mut out[..kf]);
        log_softmax_in_place(out);
    }

    /// Log class probabilities of expert `k` for a lifted row (length `M`).
    pub(crate) fn log_expert(&self, k: usize, xhat: &[f64], out: &mut [f64]) {
        let mf = self.spec.m - 1;
        self.expert_scores(k, xhat, &mut out[..mf]);
        log_softmax_in_place(out);
    }

    /// `log s_theta(y | x)` for a lifted row and 0-based label.
    pub(crate) fn log_density_lifted(&self, xhat: &[f64], y: usize) -> f64 {
        let (k, m) = (self.spec.k, self.spec.m);
        let mut lg = vec![0.0; k];
        let mut le = vec![0.0; m];
        self.log_gate(xhat, &mut lg);
        let terms: Vec<f64> = (0..k)
            .map(|j| {
                self.log_expert(j, xhat, &mut le);
                lg[j] + le[y]
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn is_finite(&self) -> bool {
        self.gate.iter().chain(&self.experts).all(|v| v.is_finite())
    }
}

/// Covariates (`N x P`, row-major) and labels, stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    p: usize,
    n_classes: usize,
    x: Vec<f64>,
    y: Vec<usize>,
    lifted: Option<(usize, Vec<f64>)>,
}

impl Dataset {
    /// Builds a dataset from row-major covariates and 1-based labels in `1..=m`.
    pub fn new(p: usize, n_classes: usize, x: Vec<f64>, labels: &[usize]) -> Result<Self> {
        let y = labels
            .iter()
            .map(|&l| {
                if l == 0 || l > n_classes {
                    Err(Error::OutOfRange {
                        what: "label",
                        index: l,
                        lo: 1,
                        hi: n_classes,
                    })
                } else {
                    Ok(l - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_zero_based(p, n_classes, x, y)
    }

    pub(crate) fn from_zero_based(
        p: usize,
        n_classes: usize,
        x: Vec<f64>,
        y: Vec<usize>,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("covariate dimension must be positive"));
        }
        if n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if x.len() != p * y.len() {
            return Err(Error::dims(format!(
                "{} covariate values for {} rows of dimension {}",
                x.len(),
                y.len(),
                p
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariates must be finite"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::OutOfRange {
                what: "label",
                index: bad + 1,
                lo: 1,
                hi: n_classes,
            });
        }
        Ok(Dataset {
            p,
            n_classes,
            x,
            y,
            lifted: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, n: usize) -> &[f64] {
        &self.x[n * self.p..(n + 1) * self.p]
    }

    /// 1-based label of row `n`.
    pub fn label(&self, n: usize) -> usize {
        self.y[n] + 1
    }

    /// 1-based labels of all rows.
    pub fn labels(&self) -> Vec<usize> {
        self.y.iter().map(|l| l + 1).collect()
    }

    pub(crate) fn label0(&self, n: usize) -> usize {
        self.y[n]
    }

    /// Caches the lifted design for degree `d`.
    pub fn with_lifted(mut self, d: usize) -> Self {
        let data = self.compute_lifted(d);
        self.lifted = Some((d, data));
        self
    }

    /// Lifted design (`N x P(D+1)`, row-major), borrowed from the cache when
    /// it was built for the same degree.
    pub fn lifted(&self, d: usize) -> Cow<'_, [f64]> {
        match &self.lifted {
            Some((deg, data)) if *deg == d => Cow::Borrowed(data),
            _ => Cow::Owned(self.compute_lifted(d)),
        }
    }

    fn compute_lifted(&self, d: usize) -> Vec<f64> {
        let q = self.p * (d + 1);
        let mut out = vec![0.0; self.len() * q];
        for n in 0..self.len() {
            lift_into(self.x_row(n), d, &mut out[n * q..(n + 1) * q]);
        }
        out
    }

    pub(crate) fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.p != spec.p {
            return Err(Error::dims(format!(
                "dataset has P={} but the model expects P={}",
                self.p, spec.p
            )));
        }
        if self.n_classes != spec.m {
            return Err(Error::dims(format!(
                "dataset has M={} but the model expects M={}",
                self.n_classes, spec.m
            )));
        }
        Ok(())
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
            y.push(self.y[i]);
        }
        Dataset {
            p: self.p,
            n_classes: self.n_classes,
            x,
            y,
            lifted: None,
        }
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.p != other.p || self.n_classes != other.n_classes {
            return Err(Error::dims("cannot concatenate datasets of different shapes"));
        }
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset::from_zero_based(self.p, self.n_classes, x, y)
    }

    /// Z-scores every covariate column in place; returns `(mean, sd)` per column.
    pub fn standardize(&mut self) -> Vec<(f64, f64)> {
        let n = self.len().max(1) as f64;
        let mut stats = Vec::with_capacity(self.p);
        for j in 0..self.p {
            let mean = (0..self.len()).map(|i| self.x[i * self.p + j]).sum::<f64>() / n;
            let var = (0..self.len())
                .map(|i| (self.x[i * self.p + j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                self.x[i * self.p + j] = (self.x[i * self.p + j] - mean) / sd;
            }
            stats.push((mean, sd));
        }
        self.lifted = None;
        stats
    }
}

pub(crate) fn lift_into(x_row: &[f64], d: usize, out: &mut [f64]) {
    for (p, &xp) in x_row.iter().enumerate() {
        let base = p * (d + 1);
        let mut pow = 1.0;
        for slot in &mut out[base..=base + d] {
            *slot = pow;
            pow *= xp;
        }
    }
}

/// Polynomial lifting `[x_1^0..x_1^D, .., x_P^0..x_P^D]`.
pub fn lift_features(x_row: &[f64], d: usize) -> Result<Vec<f64>> {
    if x_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariates must be finite"));
    }
    let mut out = vec![0.0; x_row.len() * (d + 1)];
    lift_into(x_row, d, &mut out);
    Ok(out)
}

/// Non-constant feature map `[x^1, .., x^D]` stacked degree-major
/// (`x_1..x_P` at degree 1, then degree 2, ...), length `PD`.
pub fn slope_features(x_row: &[f64], d: usize) -> Vec<f64> {
    let p = x_row.len();
    let mut out = vec![0.0; p * d];
    for (j, &xj) in x_row.iter().enumerate() {
        let mut pow = xj;
        for deg in 0..d {
            out[deg * p + j] = pow;
            pow *= xj;
        }
    }
    out
}

fn checked_lift(theta: &Theta, x_row: &[f64]) -> Result<Vec<f64>> {
    if x_row.len() != theta.spec.p {
        return Err(Error::dims(format!(
            "covariate row has length {}, expected {}",
            x_row.len(),
            theta.spec.p
        )));
    }
    lift_features(x_row, theta.spec.d)
}

/// Gate probabilities `g_k(x)`, `k = 1..K`.
pub fn gate_probs(theta: &Theta, x_row: &[f64]) -> Result<Vec<f64>> {
    let xhat = checked_lift(theta, x_row)?;
    let mut lg = vec![0.0; theta.spec.k];
    theta.log_gate(&xhat, &mut lg);
    Ok(lg.into_iter().map(f64::exp).collect())
}

/// Class probabilities of expert `k` (0-based).
pub fn expert_probs(theta: &Theta, x_row: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= theta.spec.k {
        return Err(Error::OutOfRange {
            what: "expert",
            index: k,
            lo: 0,
            hi: theta.spec.k - 1,
        });
    }
    let xhat = checked_lift(theta, x_row)?;
    let mut le = vec![0.0; theta.spec.m];
    theta.log_expert(k, &xhat, &mut le);
    Ok(le.into_iter().map(f64::exp).collect())
}

/// Mixture class probabilities `s_theta(. | x)`.
pub fn predict_proba(theta: &Theta, x_row: &[f64]) -> Result<Vec<f64>> {
    let xhat = checked_lift(theta, x_row)?;
    Ok(predict_proba_lifted(theta, &xhat))
}

pub(crate) fn predict_proba_lifted(theta: &Theta, xhat: &[f64]) -> Vec<f64> {
    let (k, m) = (theta.spec.k, theta.spec.m);
    let mut lg = vec![0.0; k];
    theta.log_gate(xhat, &mut lg);
    let mut le = vec![0.0; m];
    let mut out = vec![0.0; m];
    for (j, &lgj) in lg.iter().enumerate() {
        theta.log_expert(j, xhat, &mut le);
        for (o, &l) in out.iter_mut().zip(&le) {
            *o += (lgj + l).exp();
        }
    }
    out
}

/// Observed-data log-likelihood `sum_n log s_theta(y_n | x_n)`.
pub fn log_likelihood(theta: &Theta, data: &Dataset) -> Result<f64> {
    data.check_spec(&theta.spec)?;
    let q = theta.spec.lifted_len();
    let lifted = data.lifted(theta.spec.d);
    Ok(chunked_sum(data.len(), |n| {
        theta.log_density_lifted(&lifted[n * q..(n + 1) * q], data.label0(n))
    }))
}

/// Distribution of each covariate coordinate in [`sample_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSampler {
    #[default]
    StandardNormal,
    Normal {
        mean: f64,
        sd: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
}

impl CovariateSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateSampler::StandardNormal => rng.sample(StandardNormal),
            CovariateSampler::Normal { mean, sd } => {
                mean + sd * rng.sample::<f64, _>(StandardNormal)
            }
            CovariateSampler::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

/// Draws `n` i.i.d. rows: covariates from `sampler`, labels from
/// `predict_proba(theta, x)`. Deterministic for a fixed seed.
pub fn sample_dataset(theta: &Theta, n: usize, sampler: CovariateSampler, seed: u64) -> Dataset {
    let spec = theta.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * spec.p);
    let mut y = Vec::with_capacity(n);
    let mut xhat = vec![0.0; spec.lifted_len()];
    for _ in 0..n {
        let start = x.len();
        for _ in 0..spec.p {
            x.push(sampler.draw(&mut rng));
        }
        lift_into(&x[start..], spec.d, &mut xhat);
        let probs = predict_proba_lifted(theta, &xhat);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = spec.m - 1;
        for (c, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        y.push(label);
    }
    Dataset::from_zero_based(spec.p, spec.m, x, y).expect("sampled data is well-formed")
}

/// Class indicator `1(z, l)` for 1-based labels `z, l` in `1..=M`.
///
/// Evaluated as an equality test. It agrees with the Lagrange-type polynomial
/// `prod_{q != l}(z - q) / ((z-1)! (M-z)! (-1)^(M-z))` on all label pairs.
pub fn class_indicator(z: usize, l: usize, m: usize) -> Result<u8> {
    for v in [z, l] {
        if v == 0 || v > m {
            return Err(Error::OutOfRange {
                what: "label",
                index: v,
                lo: 1,
                hi: m,
            });
        }
    }
    Ok(u8::from(z == l))
}
