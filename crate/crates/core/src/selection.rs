//! Choosing the number of experts: DSC along a merge chain, and AIC, BIC or
//! ICL across a sweep of separately fitted models.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MergeChain;
use crate::mm::{fit_mm, init_from_clustering, responsibility_entropy, FitOptions, FitTrace};
use crate::model::{log_likelihood, Dataset, ModelSpec, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Dsc,
    Aic,
    Bic,
    /// Entropy-penalized BIC: `BIC + 2 EN(tau)`.
    Icl,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Dsc, Criterion::Aic, Criterion::Bic, Criterion::Icl];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Dsc => "dsc",
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
            Criterion::Icl => "icl",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsc" => Ok(Criterion::Dsc),
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            "icl" => Ok(Criterion::Icl),
            other => Err(Error::invalid(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Per-candidate inputs of a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetail {
    pub kappa: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    /// Mean log-likelihood for DSC, total log-likelihood for the sweep criteria.
    pub loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub criterion: Criterion,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub chosen_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_n: Option<f64>,
    pub details: Vec<CandidateDetail>,
}

/// Index of the smallest score; ties go to the first (smallest `kappa` once
/// candidates are sorted ascending).
fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// `DSC(kappa) = -(h(kappa) + omega * mean_loglik(kappa))` for every chain
/// level with at least two atoms. `omega` defaults to `ln N`.
pub fn dsc_scores(chain: &MergeChain, n: usize, omega: Option<f64>) -> Result<SelectionReport> {
    let logliks = chain.logliks.as_ref().ok_or(Error::MissingLogliks)?;
    if n < 2 && omega.is_none() {
        return Err(Error::invalid("DSC needs N >= 2 for the default weight ln N"));
    }
    let omega = omega.unwrap_or((n as f64).ln());
    if !omega.is_finite() {
        return Err(Error::invalid("DSC weight must be finite"));
    }
    let mut rows: Vec<CandidateDetail> = chain
        .levels
        .iter()
        .enumerate()
        .filter(|(i, lvl)| lvl.len() >= 2 && *i < chain.heights.len())
        .map(|(i, lvl)| CandidateDetail {
            kappa: lvl.len(),
            height: Some(chain.heights[i]),
            loglik: logliks[i],
            param_count: None,
            entropy: None,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::TooFewAtoms(chain.levels.first().map_or(0, |l| l.len())));
    }
    rows.sort_by_key(|r| r.kappa);
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| -(r.height.unwrap() + omega * r.loglik))
        .collect();
    let best = argmin(&scores);
    Ok(SelectionReport {
        criterion: Criterion::Dsc,
        candidates: rows.iter().map(|r| r.kappa).collect(),
        chosen_k: rows[best].kappa,
        scores,
        omega_n: Some(omega),
        details: rows,
    })
}

/// Free parameters under the reference-expert and reference-class
/// conventions: `(K-1) P(D+1) + K (M-1) P(D+1)`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.gate_len() + spec.experts_len()
}

/// Scores fitted models of different sizes on the same data with AIC, BIC or
/// ICL. The log-likelihood and responsibility entropy are recomputed at each
/// fitted parameter set.
pub fn criterion_scores(fits: &[Theta], data: &Dataset, criterion: Criterion) -> Result<SelectionReport> {
    if criterion == Criterion::Dsc {
        return Err(Error::invalid("DSC scores a merge chain; use dsc_scores"));
    }
    if fits.is_empty() {
        return Err(Error::invalid("no fitted models to score"));
    }
    let n = data.len() as f64;
    let mut rows = fits
        .iter()
        .map(|theta| {
            let l = log_likelihood(theta, data)?;
            let entropy = if criterion == Criterion::Icl {
                Some(responsibility_entropy(theta, data)?)
            } else {
                None
            };
            Ok(CandidateDetail {
                kappa: theta.spec().k,
                height: None,
                loglik: l,
                param_count: Some(param_count(theta.spec())),
                entropy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.kappa);
    if rows.windows(2).any(|w| w[0].kappa == w[1].kappa) {
        return Err(Error::invalid("each expert count may appear only once in a sweep"));
    }
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| {
            let p = r.param_count.unwrap() as f64;
            match criterion {
                Criterion::Aic => 2.0 * p - 2.0 * r.loglik,
                Criterion::Bic => p * n.ln() - 2.0 * r.loglik,
                Criterion::Icl => p * n.ln() - 2.0 * r.loglik + 2.0 * r.entropy.unwrap(),
                Criterion::Dsc => unreachable!(),
            }
        })
        .collect();
    let best = argmin(&scores);
    Ok(SelectionReport {
        criterion,
        candidates: rows.iter().map(|r| r.kappa).collect(),
        chosen_k: rows[best].kappa,
        scores,
        omega_n: None,
        details: rows,
    })
}

/// Fits `kappa = 1..=k_max` experts, each from [`init_from_clustering`] with
/// the same seed. Fits run in parallel; results are in `kappa` order.
pub fn sweep_fit(
    data: &Dataset,
    template: &ModelSpec,
    k_max: usize,
    opts: &FitOptions,
    seed: u64,
) -> Result<Vec<(Theta, FitTrace)>> {
    if k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let spec = template.with_experts(k);
            let init = init_from_clustering(data, &spec, seed)?;
            fit_mm(&init, data, opts)
        })
        .collect()
}
