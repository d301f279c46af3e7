//! Batch minorization-maximization fitting.
//!
//! Each iteration computes posterior responsibilities at the current iterate,
//! forms the gate and expert sufficient statistics, and minimizes a quadratic
//! surrogate of the negative log-likelihood in closed form. The surrogate
//! combines the responsibility (Jensen) bound with the uniform log-sum-exp
//! curvature bound `A_q = 3/4 I - 11^T / (2q)`, lifted through the features
//! by a Kronecker product. Exact minimization of a tangent majorizer makes the
//! log-likelihood non-decreasing along the iterates.
//!
//! A plain full-batch gradient-ascent baseline lives here too, for
//! benchmarking against the MM iterates.

mod init;
#[cfg(test)]
mod tests;

pub use init::{init_from_clustering, init_perturbed_truth, kmeans};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{chunked_reduce, log1p_sum_exp, log_sum_exp, softmax_free};
use crate::model::{Dataset, ModelSpec, Theta};

/// Expert blocks whose total responsibility falls below this are frozen for
/// the iteration.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Upper limit of the automatic ridge escalation (relative to the mean diagonal).
pub const MAX_RIDGE: f64 = 1e-2;
/// Largest step multiple tried by [`FitOptions::extrapolate`].
const MAX_EXTRAPOLATION: f64 = 1024.0;

/// Posterior weights `tau_{n,k}`, row-major `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    tau: Vec<f64>,
}

impl Responsibilities {
    pub fn new(k: usize, tau: Vec<f64>) -> Result<Self> {
        if k == 0 || !tau.len().is_multiple_of(k) {
            return Err(Error::dims(format!(
                "{} responsibilities cannot form rows of {} experts",
                tau.len(),
                k
            )));
        }
        Ok(Responsibilities { k, tau })
    }

    pub fn n(&self) -> usize {
        self.tau.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.tau[n * self.k..(n + 1) * self.k]
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.tau[n * self.k + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.tau
    }

    /// Entropy `-sum_{n,k} tau log tau` (with `0 log 0 = 0`).
    pub fn entropy(&self) -> f64 {
        -self
            .tau
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.ln())
            .sum::<f64>()
    }
}

/// Aggregated design statistics `s = sum_n s_n` and `r = sum_n r_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s: Vec<f64>,
    /// `K` blocks `r_k`, each `(M-1) P(D+1)` long.
    pub r: Vec<f64>,
}

impl SufficientStats {
    pub fn compute(resp: &Responsibilities, data: &Dataset, degree: usize) -> Result<Self> {
        Ok(SufficientStats {
            s: gate_stats(resp, data, degree)?,
            r: expert_stats(resp, data, degree)?,
        })
    }

    pub fn r_block(&self, k: usize, block_len: usize) -> &[f64] {
        &self.r[k * block_len..(k + 1) * block_len]
    }
}

/// Curvature matrices of the quadratic surrogate at one iterate.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    /// Gram matrix `sum_n xhat_n xhat_n^T`.
    pub xtx: DMatrix<f64>,
    /// `A_{K-1}`; empty when `K = 1`.
    pub gate_curv_factor: DMatrix<f64>,
    /// `B_{M-1,k} = A_{M-1} (x) sum_n tau_{n,k} xhat_n xhat_n^T`, one per expert.
    pub expert_curv: Vec<DMatrix<f64>>,
    pub ridge: f64,
}

impl CurvatureBundle {
    pub fn compute(resp: &Responsibilities, data: &Dataset, spec: &ModelSpec, ridge: f64) -> Result<Self> {
        check_resp(resp, data, spec)?;
        let q = spec.lifted_len();
        let lifted = data.lifted(spec.d);
        let mut xtx = DMatrix::zeros(q, q);
        let mut grams = vec![DMatrix::zeros(q, q); spec.k];
        for n in 0..data.len() {
            let xh = DVector::from_column_slice(&lifted[n * q..(n + 1) * q]);
            let outer = &xh * xh.transpose();
            for (k, g) in grams.iter_mut().enumerate() {
                *g += &outer * resp.get(n, k);
            }
            xtx += outer;
        }
        let gate_curv_factor = if spec.k > 1 {
            bound_factor(spec.k - 1)?.0
        } else {
            DMatrix::zeros(0, 0)
        };
        let a_m = bound_factor(spec.m - 1)?.0;
        let expert_curv = grams.iter().map(|g| a_m.kronecker(g)).collect();
        Ok(CurvatureBundle {
            xtx,
            gate_curv_factor,
            expert_curv,
            ridge,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Absolute log-likelihood increment at which to stop. `None` selects
    /// `1e-8 * N`.
    #[serde(default)]
    pub tol: Option<f64>,
    pub max_iters: usize,
    /// Ridge relative to the mean diagonal of each curvature matrix. Zero
    /// disables regularization and turns singular curvature into an error.
    pub ridge: f64,
    /// Keep a snapshot of every iterate in the trace.
    #[serde(default)]
    pub record_trace: bool,
    /// After each MM update, try the doubled steps `theta + 2^j (next - theta)`
    /// and keep the best one that raises the log-likelihood. Ascent stays
    /// monotone; flat directions are traversed in fewer iterations.
    #[serde(default)]
    pub extrapolate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: None,
            max_iters: 1000,
            ridge: 1e-8,
            record_trace: false,
            extrapolate: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return Err(Error::invalid("tolerance must be positive"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::invalid("ridge must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn effective_tol(&self, n: usize) -> f64 {
        self.tol.unwrap_or(1e-8 * n.max(1) as f64)
    }
}

/// An automatic ridge increase after a failed factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeEvent {
    pub iter: usize,
    pub block: String,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTrace {
    /// `L(theta^(t))` for `t = 0..=iters`.
    pub loglik: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_path: Option<Vec<Theta>>,
    pub iters: usize,
    pub converged: bool,
    #[serde(default)]
    pub ridge_events: Vec<RidgeEvent>,
}

impl FitTrace {
    pub fn final_loglik(&self) -> f64 {
        self.loglik.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Largest single-step decrease of the log-likelihood (zero if none).
    pub fn max_decrease(&self) -> f64 {
        self.loglik
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

fn check_resp(resp: &Responsibilities, data: &Dataset, spec: &ModelSpec) -> Result<()> {
    if resp.n() != data.len() || resp.k() != spec.k {
        return Err(Error::dims(format!(
            "responsibilities are {}x{}, expected {}x{}",
            resp.n(),
            resp.k(),
            data.len(),
            spec.k
        )));
    }
    Ok(())
}

/// Posterior responsibilities `tau_{n,k} ∝ g_k(x_n) e_k(y_n; x_n)`.
pub fn responsibilities(theta: &Theta, data: &Dataset) -> Result<Responsibilities> {
    let spec = *theta.spec();
    data.check_spec(&spec)?;
    let q = spec.lifted_len();
    let lifted = data.lifted(spec.d);
    let mut tau = vec![0.0; data.len() * spec.k];
    let mut lg = vec![0.0; spec.k];
    let mut le = vec![0.0; spec.m];
    let mut la = vec![0.0; spec.k];
    for n in 0..data.len() {
        let xh = &lifted[n * q..(n + 1) * q];
        theta.log_gate(xh, &mut lg);
        for k in 0..spec.k {
            theta.log_expert(k, xh, &mut le);
            la[k] = lg[k] + le[data.label0(n)];
        }
        let lse = log_sum_exp(&la);
        for k in 0..spec.k {
            tau[n * spec.k + k] = (la[k] - lse).exp();
        }
    }
    Responsibilities::new(spec.k, tau)
}

/// Gate design statistic `s = sum_n [tau_{n,k} xhat_n]_{k < K}`.
pub fn gate_stats(resp: &Responsibilities, data: &Dataset, degree: usize) -> Result<Vec<f64>> {
    if resp.n() != data.len() {
        return Err(Error::dims("responsibilities and data differ in length"));
    }
    let q = data.p() * (degree + 1);
    let lifted = data.lifted(degree);
    let kf = resp.k().saturating_sub(1);
    let mut s = vec![0.0; kf * q];
    for n in 0..data.len() {
        let xh = &lifted[n * q..(n + 1) * q];
        for k in 0..kf {
            let t = resp.get(n, k);
            for (sv, &x) in s[k * q..(k + 1) * q].iter_mut().zip(xh) {
                *sv += t * x;
            }
        }
    }
    Ok(s)
}

/// Expert design statistic `r = sum_n r_n`; sample `n` contributes
/// `tau_{n,k} xhat_n` to class block `y_n` of expert `k`, and nothing when
/// `y_n` is the reference class.
pub fn expert_stats(resp: &Responsibilities, data: &Dataset, degree: usize) -> Result<Vec<f64>> {
    if resp.n() != data.len() {
        return Err(Error::dims("responsibilities and data differ in length"));
    }
    let q = data.p() * (degree + 1);
    let mf = data.n_classes() - 1;
    let lifted = data.lifted(degree);
    let mut r = vec![0.0; resp.k() * mf * q];
    for n in 0..data.len() {
        let y = data.label0(n);
        if y == mf {
            continue;
        }
        let xh = &lifted[n * q..(n + 1) * q];
        for k in 0..resp.k() {
            let t = resp.get(n, k);
            let off = (k * mf + y) * q;
            for (rv, &x) in r[off..off + q].iter_mut().zip(xh) {
                *rv += t * x;
            }
        }
    }
    Ok(r)
}

/// Curvature factor `A_q = 3/4 I - 11^T/(2q)` and its closed-form inverse
/// `4/3 I + 8/(3q) 11^T`.
pub fn bound_factor(q: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if q == 0 {
        return Err(Error::invalid("bound factor size must be positive"));
    }
    let qf = q as f64;
    let a = DMatrix::from_fn(q, q, |i, j| {
        let off = -1.0 / (2.0 * qf);
        if i == j {
            0.75 + off
        } else {
            off
        }
    });
    let a_inv = DMatrix::from_fn(q, q, |i, j| {
        let off = 8.0 / (3.0 * qf);
        if i == j {
            4.0 / 3.0 + off
        } else {
            off
        }
    });
    Ok((a, a_inv))
}

/// `sum_n grad g_n(w)` with `g_n(w) = log(1 + sum_{k<K} exp(w_k(x_n)))`.
pub fn gate_lse_grad(theta: &Theta, data: &Dataset) -> Result<Vec<f64>> {
    let spec = *theta.spec();
    data.check_spec(&spec)?;
    let q = spec.lifted_len();
    let kf = spec.k - 1;
    let lifted = data.lifted(spec.d);
    let mut grad = vec![0.0; kf * q];
    let mut scores = vec![0.0; kf];
    let mut w = vec![0.0; kf];
    for n in 0..data.len() {
        let xh = &lifted[n * q..(n + 1) * q];
        theta.gate_scores(xh, &mut scores);
        softmax_free(&scores, &mut w);
        for k in 0..kf {
            for (g, &x) in grad[k * q..(k + 1) * q].iter_mut().zip(xh) {
                *g += w[k] * x;
            }
        }
    }
    Ok(grad)
}

/// Per expert `k`: `sum_n tau_{n,k} grad e_n(c_k)` with
/// `e_n(c_k) = log(1 + sum_{m<M} exp(v_{m,k}(x_n)))`.
pub fn expert_lse_grad(
    theta: &Theta,
    resp: &Responsibilities,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    let spec = *theta.spec();
    data.check_spec(&spec)?;
    check_resp(resp, data, &spec)?;
    let q = spec.lifted_len();
    let mf = spec.m - 1;
    let lifted = data.lifted(spec.d);
    let mut grads = vec![vec![0.0; mf * q]; spec.k];
    let mut scores = vec![0.0; mf];
    let mut w = vec![0.0; mf];
    for n in 0..data.len() {
        let xh = &lifted[n * q..(n + 1) * q];
        for (k, grad) in grads.iter_mut().enumerate() {
            let t = resp.get(n, k);
            if t == 0.0 {
                continue;
            }
            theta.expert_scores(k, xh, &mut scores);
            softmax_free(&scores, &mut w);
            for m in 0..mf {
                for (g, &x) in grad[m * q..(m + 1) * q].iter_mut().zip(xh) {
                    *g += t * w[m] * x;
                }
            }
        }
    }
    Ok(grads)
}

/// `u^T A_q u` without forming `A_q`.
fn bound_quadratic(u: &[f64]) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    let q = u.len() as f64;
    let sum: f64 = u.iter().sum();
    let sq: f64 = u.iter().map(|v| v * v).sum();
    0.75 * sq - sum * sum / (2.0 * q)
}

/// Value of the quadratic MM surrogate of `-L(theta)` built at `anchor`
/// (no ridge). It upper-bounds `-L(theta)` everywhere and equals
/// `-L(anchor)` at `theta = anchor`.
pub fn surrogate_value(theta: &Theta, anchor: &Theta, data: &Dataset) -> Result<f64> {
    let spec = *anchor.spec();
    if theta.spec() != &spec {
        return Err(Error::dims("theta and anchor have different shapes"));
    }
    data.check_spec(&spec)?;
    let q = spec.lifted_len();
    let (k, m) = (spec.k, spec.m);
    let lifted = data.lifted(spec.d);
    Ok(crate::math::chunked_sum(data.len(), |n| {
        let xh = &lifted[n * q..(n + 1) * q];
        let y = data.label0(n);

        let mut lg = vec![0.0; k];
        anchor.log_gate(xh, &mut lg);
        let mut le_all = vec![0.0; k * m];
        let mut la = vec![0.0; k];
        for j in 0..k {
            anchor.log_expert(j, xh, &mut le_all[j * m..(j + 1) * m]);
            la[j] = lg[j] + le_all[j * m + y];
        }
        let lse = log_sum_exp(&la);
        let tau: Vec<f64> = la.iter().map(|&a| (a - lse).exp()).collect();

        let mut total: f64 = tau.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();

        // Gate: linear statistic term plus quadratic bound of g_n.
        let mut w_new = vec![0.0; k - 1];
        let mut w_old = vec![0.0; k - 1];
        theta.gate_scores(xh, &mut w_new);
        anchor.gate_scores(xh, &mut w_old);
        let u: Vec<f64> = w_new.iter().zip(&w_old).map(|(a, b)| a - b).collect();
        total -= tau.iter().zip(&w_new).map(|(t, w)| t * w).sum::<f64>();
        total += log1p_sum_exp(&w_old);
        total += (0..k - 1).map(|j| lg[j].exp() * u[j]).sum::<f64>();
        total += 0.5 * bound_quadratic(&u);

        // Experts.
        let mut v_new = vec![0.0; m - 1];
        let mut v_old = vec![0.0; m - 1];
        for j in 0..k {
            theta.expert_scores(j, xh, &mut v_new);
            anchor.expert_scores(j, xh, &mut v_old);
            let z: Vec<f64> = v_new.iter().zip(&v_old).map(|(a, b)| a - b).collect();
            let le = &le_all[j * m..(j + 1) * m];
            let mut part = log1p_sum_exp(&v_old);
            part += (0..m - 1).map(|c| le[c].exp() * z[c]).sum::<f64>();
            part += 0.5 * bound_quadratic(&z);
            if y < m - 1 {
                part -= v_new[y];
            }
            total += tau[j] * part;
        }
        total
    }))
}

/// Fused per-iteration quantities: log-likelihood at the current iterate, the
/// surrogate gradients at the anchor (`s - grad g`, `r_k - grad e_k`) and the
/// responsibility-weighted Gram matrices.
struct EStep {
    loglik: f64,
    gate_resid: Vec<f64>,
    expert_resid: Vec<f64>,
    expert_gram: Vec<f64>,
    tau_sum: Vec<f64>,
    entropy: f64,
    // Per-row scratch, not merged.
    lg: Vec<f64>,
    le_all: Vec<f64>,
    la: Vec<f64>,
}

impl EStep {
    fn zeros(spec: &ModelSpec) -> Self {
        let q = spec.lifted_len();
        EStep {
            loglik: 0.0,
            gate_resid: vec![0.0; spec.gate_len()],
            expert_resid: vec![0.0; spec.experts_len()],
            expert_gram: vec![0.0; spec.k * q * q],
            tau_sum: vec![0.0; spec.k],
            entropy: 0.0,
            lg: vec![0.0; spec.k],
            le_all: vec![0.0; spec.k * spec.m],
            la: vec![0.0; spec.k],
        }
    }

    fn merge(&mut self, other: EStep) {
        self.loglik += other.loglik;
        self.entropy += other.entropy;
        for (a, b) in [
            (&mut self.gate_resid, other.gate_resid),
            (&mut self.expert_resid, other.expert_resid),
            (&mut self.expert_gram, other.expert_gram),
            (&mut self.tau_sum, other.tau_sum),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn e_step(theta: &Theta, data: &Dataset, lifted: &[f64]) -> EStep {
    let spec = *theta.spec();
    let (k, m, q) = (spec.k, spec.m, spec.lifted_len());
    let mf = m - 1;
    chunked_reduce(
        data.len(),
        || EStep::zeros(&spec),
        |acc, n| {
            let EStep {
                loglik,
                gate_resid,
                expert_resid,
                expert_gram,
                tau_sum,
                entropy,
                lg,
                le_all,
                la,
            } = acc;
            let xh = &lifted[n * q..(n + 1) * q];
            let y = data.label0(n);
            theta.log_gate(xh, lg);
            for j in 0..k {
                theta.log_expert(j, xh, &mut le_all[j * m..(j + 1) * m]);
                la[j] = lg[j] + le_all[j * m + y];
            }
            let lse = log_sum_exp(la);
            *loglik += lse;
            for j in 0..k {
                let log_t = la[j] - lse;
                let t = log_t.exp();
                if t > 0.0 {
                    *entropy -= t * log_t;
                }
                tau_sum[j] += t;
                if j < k - 1 {
                    let c = t - lg[j].exp();
                    for (r, &x) in gate_resid[j * q..(j + 1) * q].iter_mut().zip(xh) {
                        *r += c * x;
                    }
                }
                if t == 0.0 {
                    continue;
                }
                let le = &le_all[j * m..(j + 1) * m];
                for (c, &lc) in le[..mf].iter().enumerate() {
                    let coef = t * (f64::from(u8::from(c == y)) - lc.exp());
                    let off = (j * mf + c) * q;
                    for (r, &x) in expert_resid[off..off + q].iter_mut().zip(xh) {
                        *r += coef * x;
                    }
                }
                let gram = &mut expert_gram[j * q * q..(j + 1) * q * q];
                for a in 0..q {
                    let ta = t * xh[a];
                    for b in 0..q {
                        gram[a * q + b] += ta * xh[b];
                    }
                }
            }
        },
        EStep::merge,
    )
}

fn gram_matrix(lifted: &[f64], q: usize) -> DMatrix<f64> {
    let n = lifted.len().checked_div(q).unwrap_or(0);
    let flat = chunked_reduce(
        n,
        || vec![0.0; q * q],
        |acc, i| {
            let xh = &lifted[i * q..(i + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    acc[a * q + b] += xh[a] * xh[b];
                }
            }
        },
        |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        },
    );
    DMatrix::from_row_slice(q, q, &flat)
}

/// Cholesky factorization with a trace-scaled ridge, escalated by x10 up to
/// [`MAX_RIDGE`] when the factorization fails or is numerically singular.
/// With `ridge == 0` a failure is reported as [`Error::SingularCurvature`].
fn factor_with_ridge(
    mat: &DMatrix<f64>,
    ridge: f64,
    block: &str,
    iter: usize,
    events: &mut Vec<RidgeEvent>,
) -> Result<Cholesky<f64, Dyn>> {
    let dim = mat.nrows();
    let mean_diag = mat.trace() / dim.max(1) as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut rel = ridge;
    loop {
        let mut reg = mat.clone();
        for i in 0..dim {
            reg[(i, i)] += rel * scale;
        }
        if let Some(ch) = Cholesky::new(reg) {
            let diag = ch.l_dirty().diagonal();
            let max = diag.iter().copied().fold(0.0_f64, f64::max);
            let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
            if max > 0.0 && (min / max).powi(2) > 1e-15 {
                return Ok(ch);
            }
        }
        if ridge == 0.0 {
            return Err(Error::SingularCurvature { block: block.to_string() });
        }
        rel *= 10.0;
        if rel > MAX_RIDGE * (1.0 + 1e-12) {
            return Err(Error::SingularCurvature { block: block.to_string() });
        }
        events.push(RidgeEvent {
            iter,
            block: block.to_string(),
            ridge: rel,
        });
    }
}

/// Iteration-independent part of the gate solve: `(X^T X + lambda I)^{-1}`
/// and `A_{K-1}^{-1}`.
struct GateSolver {
    gram_inv: DMatrix<f64>,
    a_inv: DMatrix<f64>,
}

impl GateSolver {
    fn new(spec: &ModelSpec, lifted: &[f64], ridge: f64, events: &mut Vec<RidgeEvent>) -> Result<Option<Self>> {
        if spec.k < 2 {
            return Ok(None);
        }
        let q = spec.lifted_len();
        let gram = gram_matrix(lifted, q);
        let ch = factor_with_ridge(&gram, ridge, "gate", 0, events)?;
        Ok(Some(GateSolver {
            gram_inv: ch.inverse(),
            a_inv: bound_factor(spec.k - 1)?.1,
        }))
    }

    /// `(A^{-1} (x) G^{-1}) resid` for `resid` stacked as `(K-1)` blocks.
    fn apply(&self, resid: &[f64], q: usize) -> Vec<f64> {
        let kf = self.a_inv.nrows();
        let r = DMatrix::from_row_slice(kf, q, resid);
        let delta = &self.a_inv * r * &self.gram_inv;
        let mut out = vec![0.0; kf * q];
        for i in 0..kf {
            for j in 0..q {
                out[i * q + j] = delta[(i, j)];
            }
        }
        out
    }
}

fn update(
    theta: &Theta,
    est: &EStep,
    gate: Option<&GateSolver>,
    a_m: &DMatrix<f64>,
    ridge: f64,
    iter: usize,
    events: &mut Vec<RidgeEvent>,
) -> Result<Theta> {
    let spec = *theta.spec();
    let q = spec.lifted_len();
    let bl = spec.expert_block_len();
    let mut next = theta.clone();
    if let Some(gs) = gate {
        let delta = gs.apply(&est.gate_resid, q);
        for (w, d) in next.gate_mut().iter_mut().zip(delta) {
            *w += d;
        }
    }
    for k in 0..spec.k {
        if est.tau_sum[k] < DEGENERATE_MASS {
            continue;
        }
        let gram = DMatrix::from_row_slice(q, q, &est.expert_gram[k * q * q..(k + 1) * q * q]);
        let curv = a_m.kronecker(&gram);
        let ch = factor_with_ridge(&curv, ridge, &format!("expert {}", k + 1), iter, events)?;
        let rhs = DVector::from_column_slice(&est.expert_resid[k * bl..(k + 1) * bl]);
        let delta = ch.solve(&rhs);
        for (c, d) in next.expert_block_mut(k).iter_mut().zip(delta.iter()) {
            *c += d;
        }
    }
    Ok(next)
}

/// One MM iteration: the closed-form minimizer of the surrogate built at `theta`.
pub fn mm_step(theta: &Theta, data: &Dataset, opts: &FitOptions) -> Result<Theta> {
    opts.validate()?;
    let spec = *theta.spec();
    data.check_spec(&spec)?;
    let lifted = data.lifted(spec.d);
    let mut events = Vec::new();
    let gate = GateSolver::new(&spec, &lifted, opts.ridge, &mut events)?;
    let est = e_step(theta, data, &lifted);
    let a_m = bound_factor(spec.m - 1)?.0;
    update(theta, &est, gate.as_ref(), &a_m, opts.ridge, 0, &mut events)
}

/// Runs MM iterations until the absolute log-likelihood increment drops to
/// the tolerance or `max_iters` updates have been made.
pub fn fit_mm(theta0: &Theta, data: &Dataset, opts: &FitOptions) -> Result<(Theta, FitTrace)> {
    opts.validate()?;
    let spec = *theta0.spec();
    data.check_spec(&spec)?;
    let tol = opts.effective_tol(data.len());
    let lifted = data.lifted(spec.d);
    let mut trace = FitTrace::default();
    let gate = GateSolver::new(&spec, &lifted, opts.ridge, &mut trace.ridge_events)?;
    let a_m = bound_factor(spec.m - 1)?.0;
    if opts.record_trace {
        trace.theta_path = Some(vec![theta0.clone()]);
    }
    let mut theta = theta0.clone();
    let mut est = e_step(&theta, data, &lifted);
    trace.loglik.push(est.loglik);
    for t in 0..opts.max_iters {
        let mut next = update(&theta, &est, gate.as_ref(), &a_m, opts.ridge, t + 1, &mut trace.ridge_events)?;
        let mut next_est = e_step(&next, data, &lifted);
        if opts.extrapolate {
            let base = theta.to_flat();
            let step: Vec<f64> = next.to_flat().iter().zip(&base).map(|(a, b)| a - b).collect();
            let mut alpha = 2.0;
            while alpha <= MAX_EXTRAPOLATION {
                let flat: Vec<f64> = base.iter().zip(&step).map(|(b, s)| b + alpha * s).collect();
                let Ok(cand) = Theta::from_flat(spec, &flat) else { break };
                let cand_est = e_step(&cand, data, &lifted);
                if !(cand_est.loglik > next_est.loglik) {
                    break;
                }
                next = cand;
                next_est = cand_est;
                alpha *= 2.0;
            }
        }
        let increment = next_est.loglik - est.loglik;
        theta = next;
        est = next_est;
        trace.loglik.push(est.loglik);
        trace.iters = t + 1;
        if let Some(path) = trace.theta_path.as_mut() {
            path.push(theta.clone());
        }
        if increment.abs() <= tol {
            trace.converged = true;
            break;
        }
    }
    Ok((theta, trace))
}

/// Gradient of the log-likelihood, flattened as in [`Theta::to_flat`].
pub fn loglik_gradient(theta: &Theta, data: &Dataset) -> Result<Vec<f64>> {
    data.check_spec(theta.spec())?;
    let lifted = data.lifted(theta.spec().d);
    let est = e_step(theta, data, &lifted);
    let mut g = est.gate_resid;
    g.extend(est.expert_resid);
    Ok(g)
}

/// Responsibilities entropy `-sum tau log tau` at `theta`.
pub fn responsibility_entropy(theta: &Theta, data: &Dataset) -> Result<f64> {
    data.check_spec(theta.spec())?;
    let lifted = data.lifted(theta.spec().d);
    Ok(e_step(theta, data, &lifted).entropy)
}

/// Plain full-batch gradient ascent on the average log-likelihood `L / N`
/// with a fixed step. Runs exactly `iters` steps; there is no monotonicity
/// guarantee. The trace keeps every iterate.
pub fn fit_gradient_baseline(
    theta0: &Theta,
    data: &Dataset,
    step: f64,
    iters: usize,
) -> Result<(Theta, FitTrace)> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("gradient step must be positive and finite"));
    }
    let spec = *theta0.spec();
    data.check_spec(&spec)?;
    let lifted = data.lifted(spec.d);
    let scale = step / data.len().max(1) as f64;
    let mut flat = theta0.to_flat();
    let mut trace = FitTrace {
        theta_path: Some(Vec::with_capacity(iters + 1)),
        ..FitTrace::default()
    };
    let mut theta = theta0.clone();
    for t in 0..=iters {
        let est = e_step(&theta, data, &lifted);
        trace.loglik.push(est.loglik);
        if let Some(path) = trace.theta_path.as_mut() {
            path.push(theta.clone());
        }
        if t == iters {
            break;
        }
        for (p, g) in flat
            .iter_mut()
            .zip(est.gate_resid.iter().chain(&est.expert_resid))
        {
            *p += scale * g;
        }
        theta = Theta::from_flat(spec, &flat)
            .map_err(|_| Error::invalid("gradient ascent diverged; reduce the step"))?;
        trace.iters = t + 1;
    }
    Ok((theta, trace))
}

/// `|| theta_a - theta_b ||_F` over all stored coefficients.
pub fn parameter_distance(a: &Theta, b: &Theta) -> Result<f64> {
    if a.spec() != b.spec() {
        return Err(Error::dims("parameter sets have different shapes"));
    }
    let fa = a.to_flat();
    let fb = b.to_flat();
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}
