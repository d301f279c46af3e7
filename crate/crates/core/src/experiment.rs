//! Synthetic experiment drivers: the two-expert benchmark truth, Voronoi
//! rate experiments over a grid of sample sizes, and replicated
//! expert-count selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{component_errors, rate_slope, voronoi_loss, RateFit};
use crate::error::{Error, Result};
use crate::mixing::{build_chain, from_theta};
use crate::mm::{fit_mm, init_from_clustering, init_perturbed_truth, FitOptions};
use crate::model::{sample_dataset, CovariateSampler, ModelSpec, Theta};
use crate::selection::{criterion_scores, dsc_scores, sweep_fit, Criterion};

/// Two experts, two classes, one covariate, degree one.
///
/// Gate: the free expert has score `8x`. Experts: class-1 logits `10 + 20x`
/// (first expert) and `-10 + 20x` (reference expert).
pub fn benchmark_truth() -> Theta {
    let mut t = Theta::zeros(ModelSpec { k: 2, m: 2, p: 1, d: 1 });
    t.set_gate_coef(0, 1, 0, 8.0);
    t.set_expert_coef(0, 0, 0, 0, 10.0);
    t.set_expert_coef(0, 0, 1, 0, 20.0);
    t.set_expert_coef(0, 1, 0, 0, -10.0);
    t.set_expert_coef(0, 1, 1, 0, 20.0);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Truth plus `noise * N(0,1)`; extra experts copy the first true expert.
    PerturbedTruth { noise: f64 },
    Cluster,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::PerturbedTruth { noise: 0.5 }
    }
}

impl InitScheme {
    pub fn initialize(
        &self,
        truth: &Theta,
        k_fit: usize,
        data: &crate::model::Dataset,
        seed: u64,
    ) -> Result<Theta> {
        match *self {
            InitScheme::PerturbedTruth { noise } => {
                let k0 = truth.spec().k;
                if k_fit < k0 {
                    return Err(Error::invalid(format!(
                        "perturbed-truth init needs K >= {k0}, got {k_fit}"
                    )));
                }
                init_perturbed_truth(truth, noise, k_fit - k0, seed)
            }
            InitScheme::Cluster => init_from_clustering(data, &truth.spec().with_experts(k_fit), seed),
        }
    }
}

/// Sample sizes are `round(10^e)` for each exponent in `log10_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateExperimentConfig {
    #[serde(default = "benchmark_truth")]
    pub truth: Theta,
    pub k_fit: usize,
    pub log10_n: Vec<f64>,
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "rate_fit_options")]
    pub fit: FitOptions,
    #[serde(default)]
    pub sampler: CovariateSampler,
}

/// Defaults for the rate experiments.
pub fn rate_fit_options() -> FitOptions {
    FitOptions {
        tol: None,
        max_iters: 5000,
        ridge: 1e-8,
        record_trace: false,
        extrapolate: false,
    }
}

impl RateExperimentConfig {
    pub fn sample_sizes(&self) -> Vec<usize> {
        self.log10_n.iter().map(|e| 10f64.powf(*e).round() as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_fit < 1 {
            return Err(Error::invalid("k_fit must be positive"));
        }
        if self.seeds == 0 {
            return Err(Error::invalid("need at least one seed"));
        }
        if self.log10_n.len() < 3 {
            return Err(Error::invalid("a rate fit needs at least 3 sample sizes"));
        }
        if self.sample_sizes().iter().any(|&n| n < 2) {
            return Err(Error::invalid("sample sizes must be at least 2"));
        }
        self.fit.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seed for replicate `s` at grid point `i`.
pub fn job_seed(base: u64, grid_index: usize, replicate: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((replicate as u64) << 20)
        .wrapping_add(grid_index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    pub seed: u64,
    pub d_v: f64,
    pub d_e: f64,
    /// Error of each fitted atom against its matched true atom.
    pub component_errors: Vec<f64>,
    /// True atom matched by each fitted atom.
    pub cell_of: Vec<usize>,
    pub loglik: f64,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRate {
    pub component: usize,
    /// Share of runs in which this fitted atom sat in an over-covered cell.
    pub overfit_share: f64,
    pub fit: Option<RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateExperimentResult {
    pub records: Vec<RateRecord>,
    /// Median `D_V` per sample size.
    pub median_d_v: Vec<(usize, f64)>,
    pub d_v_fit: RateFit,
    pub components: Vec<ComponentRate>,
}

impl RateExperimentResult {
    /// Components that sat in an over-covered cell in most runs.
    pub fn overfit_components(&self) -> Vec<&ComponentRate> {
        self.components.iter().filter(|c| c.overfit_share > 0.5).collect()
    }

    /// `rates.csv`: one row per run with the per-component errors.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let k = self.records.first().map_or(0, |r| r.component_errors.len());
        let mut header = vec!["n", "seed", "d_v", "d_e", "loglik", "iters", "converged"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for i in 0..k {
            header.push(format!("err_{}", i + 1));
        }
        for i in 0..k {
            header.push(format!("cell_{}", i + 1));
        }
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.n.to_string(),
                    r.seed.to_string(),
                    format!("{:?}", r.d_v),
                    format!("{:?}", r.d_e),
                    format!("{:?}", r.loglik),
                    r.iters.to_string(),
                    r.converged.to_string(),
                ];
                row.extend(r.component_errors.iter().map(|e| format!("{e:?}")));
                row.extend(r.cell_of.iter().map(|c| (c + 1).to_string()));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        crate::io::csv_bytes(&header, &rows)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One (sample size, replicate) job: sample, initialize, fit, compare.
pub fn rate_job(cfg: &RateExperimentConfig, grid_index: usize, replicate: usize) -> Result<RateRecord> {
    let n = cfg.sample_sizes()[grid_index];
    let seed = job_seed(cfg.base_seed, grid_index, replicate);
    let data = sample_dataset(&cfg.truth, n, cfg.sampler, seed).with_lifted(cfg.truth.spec().d);
    let init = cfg.init.initialize(&cfg.truth, cfg.k_fit, &data, seed ^ 0xA5A5_5A5A)?;
    let (theta, trace) = fit_mm(&init, &data, &cfg.fit)?;
    let g = from_theta(&theta);
    let g0 = from_theta(&cfg.truth);
    let report = voronoi_loss(&g, &g0)?;
    Ok(RateRecord {
        n,
        seed,
        d_v: report.d_v,
        d_e: report.d_e,
        component_errors: component_errors(&g, &g0, &report.assignment),
        cell_of: report.assignment.cell_of.clone(),
        loglik: trace.final_loglik(),
        iters: trace.iters,
        converged: trace.converged,
    })
}

/// Runs every `(N, seed)` job in parallel, then fits log-log slopes to the
/// per-N medians of `D_V` and of each fitted component's error.
pub fn run_rate_experiment(cfg: &RateExperimentConfig) -> Result<RateExperimentResult> {
    cfg.validate()?;
    let sizes = cfg.sample_sizes();
    let jobs: Vec<(usize, usize)> = (0..sizes.len())
        .flat_map(|i| (0..cfg.seeds).map(move |s| (i, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(i, s)| rate_job(cfg, i, s))
        .collect::<Result<Vec<_>>>()?;

    let per_n = |f: &dyn Fn(&RateRecord) -> f64| -> Vec<(usize, f64)> {
        sizes
            .iter()
            .map(|&n| {
                let mut v: Vec<f64> = records.iter().filter(|r| r.n == n).map(f).collect();
                (n, median(&mut v))
            })
            .collect()
    };
    let median_d_v = per_n(&|r| r.d_v);
    let points: Vec<(f64, f64)> = median_d_v.iter().map(|&(n, v)| (n as f64, v)).collect();
    let d_v_fit = rate_slope(&points)?;

    let overfit_runs = |r: &RateRecord, i: usize| r.cell_of.iter().filter(|&&c| c == r.cell_of[i]).count() > 1;
    let components = (0..cfg.k_fit)
        .map(|i| {
            let share = records.iter().filter(|r| overfit_runs(r, i)).count() as f64 / records.len() as f64;
            let med = per_n(&|r| r.component_errors[i]);
            let pts: Vec<(f64, f64)> = med.iter().map(|&(n, v)| (n as f64, v)).collect();
            ComponentRate {
                component: i,
                overfit_share: share,
                fit: rate_slope(&pts).ok(),
            }
        })
        .collect();
    Ok(RateExperimentResult {
        records,
        median_d_v,
        d_v_fit,
        components,
    })
}

/// Expert counts chosen by each criterion on one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub n: usize,
    pub dsc: usize,
    pub aic: usize,
    pub bic: usize,
    pub icl: usize,
}

impl ReplicateRow {
    pub fn chosen(&self, c: Criterion) -> usize {
        match c {
            Criterion::Dsc => self.dsc,
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
            Criterion::Icl => self.icl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExperimentConfig {
    #[serde(default = "benchmark_truth")]
    pub truth: Theta,
    pub k_fit: usize,
    pub n: usize,
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "rate_fit_options")]
    pub fit: FitOptions,
    /// DSC weight; `ln N` when absent.
    #[serde(default)]
    pub omega: Option<f64>,
}

/// One replicate: DSC on the merge chain of a single `k_fit` fit, and
/// AIC/BIC/ICL on a `1..=k_fit` sweep of clustering-initialized fits.
pub fn selection_replicate(cfg: &SelectionExperimentConfig, replicate: usize) -> Result<ReplicateRow> {
    let seed = job_seed(cfg.base_seed, cfg.n, replicate);
    let data = sample_dataset(&cfg.truth, cfg.n, CovariateSampler::StandardNormal, seed).with_lifted(cfg.truth.spec().d);
    let init = cfg.init.initialize(&cfg.truth, cfg.k_fit, &data, seed ^ 0xA5A5_5A5A)?;
    let (theta, _) = fit_mm(&init, &data, &cfg.fit)?;
    let chain = build_chain(&from_theta(&theta), Some(&data), false)?;
    let dsc = dsc_scores(&chain, cfg.n, cfg.omega)?.chosen_k;

    let sweep = sweep_fit(&data, cfg.truth.spec(), cfg.k_fit, &cfg.fit, seed)?;
    let fits: Vec<Theta> = sweep.into_iter().map(|(t, _)| t).collect();
    let pick = |c| criterion_scores(&fits, &data, c).map(|r| r.chosen_k);
    Ok(ReplicateRow {
        replicate,
        seed,
        n: cfg.n,
        dsc,
        aic: pick(Criterion::Aic)?,
        bic: pick(Criterion::Bic)?,
        icl: pick(Criterion::Icl)?,
    })
}

pub fn run_selection_experiment(cfg: &SelectionExperimentConfig) -> Result<Vec<ReplicateRow>> {
    if cfg.replicates == 0 || cfg.n < 2 {
        return Err(Error::invalid("need at least one replicate and N >= 2"));
    }
    cfg.fit.validate()?;
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| selection_replicate(cfg, r))
        .collect()
}

/// Number of replicates in which `criterion` chose `k`.
pub fn correct_count(rows: &[ReplicateRow], criterion: Criterion, k: usize) -> usize {
    rows.iter().filter(|r| r.chosen(criterion) == k).count()
}
