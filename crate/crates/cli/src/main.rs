//! `sgmlmoe` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use sgmlmoe::experiment::{
    benchmark_truth, run_rate_experiment, run_selection_experiment, InitScheme, RateExperimentConfig,
    SelectionExperimentConfig,
};
use sgmlmoe::io::{csv_bytes, read_dataset_csv, read_json, write_atomic, write_dataset_csv, write_json};
use sgmlmoe::mixing::{build_chain, from_theta, MergeChain, MixingMeasure};
use sgmlmoe::mm::{fit_gradient_baseline, init_from_clustering, init_perturbed_truth, parameter_distance};
use sgmlmoe::selection::{criterion_scores, dsc_scores, sweep_fit, Criterion};
use sgmlmoe::{fit_mm, sample_dataset, CovariateSampler, Dataset, FitOptions, ModelSpec, Theta};

/// Exit status for usage errors (clap uses the same value).
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SCHEMA: u8 = 4;

#[derive(Parser, Debug, Serialize)]
#[command(name = "sgmlmoe", version, about = "Fit and select softmax-gated multinomial-logistic mixtures of experts")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs and the run.json manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (0 lets rayon decide).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum Command {
    /// Sample a dataset from a parameter file (or the built-in benchmark truth).
    Simulate(SimulateArgs),
    /// Fit a model to a CSV dataset with the MM algorithm.
    Fit(FitArgs),
    /// Build the merge chain of a fitted mixing measure.
    Dendrogram(DendrogramArgs),
    /// Choose the number of experts with DSC, AIC, BIC or ICL.
    Select(SelectArgs),
    /// Run a Voronoi-loss rate experiment from a TOML or JSON config.
    Rates(RatesArgs),
    /// Compare MM against plain gradient ascent on one dataset.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Serialize)]
struct TruthSource {
    /// Parameter JSON of the generating model; defaults to the two-expert benchmark.
    #[arg(long)]
    truth: Option<PathBuf>,
}

impl TruthSource {
    fn load(&self) -> Result<Theta> {
        match &self.truth {
            Some(p) => Ok(read_json(p)?),
            None => Ok(benchmark_truth()),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    truth: TruthSource,
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Output CSV (relative paths resolve against --out-dir).
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize, Clone)]
struct DataArgs {
    /// Dataset CSV with header x1..xP,y.
    #[arg(long)]
    data: PathBuf,
    /// Number of classes; inferred from the labels when omitted.
    #[arg(long)]
    m: Option<usize>,
    /// Z-score every covariate before fitting.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug, Serialize, Clone)]
struct FitOpts {
    /// Absolute log-likelihood increment at which to stop (default 1e-8 * N).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Relative ridge added to the curvature matrices.
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
    /// Try doubled MM steps and keep any that raise the likelihood.
    #[arg(long)]
    extrapolate: bool,
}

impl FitOpts {
    fn options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            ridge: self.ridge,
            record_trace: false,
            extrapolate: self.extrapolate,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum InitKind {
    Cluster,
    File,
    PerturbedTruth,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of experts.
    #[arg(long)]
    k: usize,
    /// Polynomial degree of the lifted features.
    #[arg(long, default_value_t = 1)]
    degree: usize,
    #[arg(long, value_enum, default_value_t = InitKind::Cluster)]
    init: InitKind,
    /// Starting parameters for `--init file`.
    #[arg(long)]
    init_file: Option<PathBuf>,
    #[command(flatten)]
    truth: TruthSource,
    /// Noise scale for `--init perturbed-truth`.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[command(flatten)]
    fit: FitOpts,
    /// Output file prefix inside --out-dir.
    #[arg(long, default_value = "")]
    prefix: String,
}

#[derive(Args, Debug, Serialize)]
struct DendrogramArgs {
    /// Mixing-measure JSON (as written by `fit`).
    #[arg(long)]
    measure: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Also record the one-atom level.
    #[arg(long)]
    include_single: bool,
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    /// dsc, aic, bic or icl.
    criterion: String,
    /// Dataset CSV (required unless --replicate is given).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    standardize: bool,
    /// dsc: one fitted mixing measure JSON.
    #[arg(long)]
    measure: Option<PathBuf>,
    /// dsc: a fitted parameter JSON (alternative to --measure).
    #[arg(long)]
    model: Option<PathBuf>,
    /// aic/bic/icl: directory of parameter JSON files, one per K.
    #[arg(long)]
    sweep_dir: Option<PathBuf>,
    /// aic/bic/icl: fit K = 1..=k_max with clustering init, then score.
    #[arg(long)]
    k_max: Option<usize>,
    /// DSC weight (default ln N).
    #[arg(long)]
    omega: Option<f64>,
    /// Replicate mode: simulate S datasets and record every criterion's choice.
    #[arg(long)]
    replicate: Option<usize>,
    /// Replicate mode: sample size.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Replicate mode: experts in the over-specified fit.
    #[arg(long, default_value_t = 4)]
    k_fit: usize,
    #[command(flatten)]
    truth: TruthSource,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args, Debug, Serialize)]
struct RatesArgs {
    /// Experiment config (.toml or .json).
    #[arg(long)]
    config: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Optimizer {
    Mm,
    Grad,
}

#[derive(Args, Debug, Serialize)]
struct BenchmarkArgs {
    /// Dataset CSV; when omitted N rows are simulated from the truth.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[command(flatten)]
    truth: TruthSource,
    /// Rows to simulate when no CSV is given.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Optimizer::Mm, Optimizer::Grad])]
    optimizers: Vec<Optimizer>,
    /// Iterations per optimizer.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    /// Gradient-ascent step on the mean log-likelihood.
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Noise of the perturbed-truth starting point.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn classify(err: anyhow::Error) -> Failure {
    let mut code = EXIT_SCHEMA;
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            code = EXIT_IO;
            break;
        }
        if let Some(e) = cause.downcast_ref::<sgmlmoe::Error>() {
            code = match e {
                sgmlmoe::Error::Io(_) => EXIT_IO,
                sgmlmoe::Error::Csv(c) if c.is_io_error() => EXIT_IO,
                _ => EXIT_SCHEMA,
            };
            break;
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            code = EXIT_USAGE;
            break;
        }
    }
    Failure { code, err }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Collects the files a run wrote plus extra manifest fields.
struct Run<'a> {
    cli: &'a Cli,
    outputs: Vec<PathBuf>,
    extra: BTreeMap<String, Value>,
}

impl<'a> Run<'a> {
    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.cli.out_dir.join(name)
        }
    }

    fn json<T: Serialize>(&mut self, name: impl AsRef<Path>, value: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, value).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p);
        Ok(())
    }

    fn bytes(&mut self, name: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p);
        Ok(())
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn manifest(&self) -> Result<()> {
        let value = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.cli,
            "outputs": self.outputs,
            "extra": self.extra,
        });
        write_json(&self.cli.out_dir.join("run.json"), &value)?;
        Ok(())
    }
}

fn load_data(args: &DataArgs, run: &mut Run) -> Result<Dataset> {
    load_csv(&args.data, args.m, args.standardize, run)
}

fn load_csv(path: &Path, m: Option<usize>, standardize: bool, run: &mut Run) -> Result<Dataset> {
    let loaded = read_dataset_csv(path, m).with_context(|| format!("reading {}", path.display()))?;
    if let Some(map) = &loaded.label_map {
        run.extra.insert("label_map".into(), json!(map));
    }
    let mut data = loaded.data;
    if standardize {
        let stats = data.standardize();
        run.extra.insert("standardization".into(), json!(stats));
    }
    Ok(data)
}

fn cmd_simulate(a: &SimulateArgs, run: &mut Run) -> Result<()> {
    let truth = a.truth.load()?;
    let data = sample_dataset(&truth, a.n, CovariateSampler::StandardNormal, run.cli.seed);
    let p = run.path(&a.out);
    write_dataset_csv(&p, &data).with_context(|| format!("writing {}", p.display()))?;
    run.outputs.push(p);
    run.note(format!("sampled {} rows", a.n));
    Ok(())
}

fn cmd_fit(a: &FitArgs, run: &mut Run) -> Result<()> {
    let data = load_data(&a.data, run)?;
    let spec = ModelSpec::new(a.k, data.n_classes(), data.p(), a.degree)?;
    let init = match a.init {
        InitKind::Cluster => init_from_clustering(&data, &spec, run.cli.seed)?,
        InitKind::File => {
            let path = a.init_file.as_ref().ok_or_else(|| usage("--init file needs --init-file"))?;
            let t: Theta = read_json(path)?;
            if *t.spec() != spec {
                return Err(sgmlmoe::Error::Schema(format!(
                    "initial parameters have spec {:?}, data and flags give {:?}",
                    t.spec(),
                    spec
                ))
                .into());
            }
            t
        }
        InitKind::PerturbedTruth => {
            let truth = a.truth.load()?;
            let s = truth.spec();
            if (s.m, s.p, s.d) != (spec.m, spec.p, spec.d) || s.k > spec.k {
                return Err(sgmlmoe::Error::Schema(format!(
                    "truth spec {s:?} is incompatible with the requested fit {spec:?}"
                ))
                .into());
            }
            init_perturbed_truth(&truth, a.noise, spec.k - s.k, run.cli.seed)?
        }
    };
    let (theta, trace) = fit_mm(&init, &data, &a.fit.options())?;
    run.note(format!(
        "{} iterations, log-likelihood {:.6}, converged {}",
        trace.iters,
        trace.final_loglik(),
        trace.converged
    ));
    let measure = from_theta(&theta);
    run.json(format!("{}model.json", a.prefix), &theta)?;
    run.json(format!("{}trace.json", a.prefix), &trace)?;
    run.json(format!("{}measure.json", a.prefix), &measure)?;
    Ok(())
}

fn dendrogram_csv(chain: &MergeChain) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = chain
        .merged_pairs
        .iter()
        .zip(&chain.heights)
        .enumerate()
        .map(|(i, (&(a, b), h))| {
            vec![
                chain.level_size(i).to_string(),
                (a + 1).to_string(),
                (b + 1).to_string(),
                format!("{h:?}"),
            ]
        })
        .collect();
    Ok(csv_bytes(&["level", "merged_i", "merged_j", "height"], &rows)?)
}

fn cmd_dendrogram(a: &DendrogramArgs, run: &mut Run) -> Result<()> {
    let measure: MixingMeasure = read_json(&a.measure)?;
    let data = load_data(&a.data, run)?;
    let chain = build_chain(&measure, Some(&data), a.include_single)?;
    run.json("chain.json", &chain)?;
    run.bytes("dendrogram.csv", &dendrogram_csv(&chain)?)?;
    Ok(())
}

fn read_sweep_dir(dir: &Path) -> Result<Vec<Theta>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut fits = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        // Non-parameter JSON (traces, measures, manifests) is skipped.
        if let Ok(t) = serde_json::from_str::<Theta>(&text) {
            fits.push(t);
        }
    }
    if fits.is_empty() {
        return Err(usage(format!("no parameter JSON files in {}", dir.display())));
    }
    Ok(fits)
}

fn cmd_select(a: &SelectArgs, run: &mut Run) -> Result<()> {
    let criterion: Criterion = a.criterion.parse().map_err(|e: sgmlmoe::Error| usage(e.to_string()))?;
    if let Some(s) = a.replicate {
        return select_replicates(a, s, run);
    }
    let path = a.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    let data = load_csv(path, a.m, a.standardize, run)?;
    let report = match criterion {
        Criterion::Dsc => {
            let measure = match (&a.measure, &a.model) {
                (Some(p), _) => read_json::<MixingMeasure>(p)?,
                (None, Some(p)) => from_theta(&read_json::<Theta>(p)?),
                (None, None) => return Err(usage("dsc needs --measure or --model")),
            };
            let chain = build_chain(&measure, Some(&data), false)?;
            run.json("chain.json", &chain)?;
            dsc_scores(&chain, data.len(), a.omega)?
        }
        c => {
            let fits = match (&a.sweep_dir, a.k_max) {
                (Some(dir), _) => read_sweep_dir(dir)?,
                (None, Some(k_max)) => {
                    let spec = ModelSpec::new(1, data.n_classes(), data.p(), 1)?;
                    let sweep = sweep_fit(&data, &spec, k_max, &a.fit.options(), run.cli.seed)?;
                    let fits: Vec<Theta> = sweep.into_iter().map(|(t, _)| t).collect();
                    for t in &fits {
                        run.json(format!("model_k{}.json", t.spec().k), t)?;
                    }
                    fits
                }
                (None, None) => return Err(usage(format!("{c} needs --sweep-dir or --k-max"))),
            };
            criterion_scores(&fits, &data, c)?
        }
    };
    run.note(format!("{} chose K = {}", report.criterion, report.chosen_k));
    run.json("selection.json", &report)?;
    Ok(())
}

fn select_replicates(a: &SelectArgs, s: usize, run: &mut Run) -> Result<()> {
    let mut fit = sgmlmoe::experiment::rate_fit_options();
    fit.ridge = a.fit.ridge;
    fit.max_iters = a.fit.max_iters.max(fit.max_iters);
    fit.tol = a.fit.tol.or(fit.tol);
    let cfg = SelectionExperimentConfig {
        truth: a.truth.load()?,
        k_fit: a.k_fit,
        n: a.n,
        replicates: s,
        base_seed: run.cli.seed,
        init: InitScheme::default(),
        fit,
        omega: a.omega,
    };
    let rows = run_selection_experiment(&cfg)?;
    let mut out = Vec::new();
    for c in Criterion::ALL {
        for r in &rows {
            out.push(vec![
                c.to_string(),
                r.replicate.to_string(),
                r.seed.to_string(),
                r.n.to_string(),
                r.chosen(c).to_string(),
            ]);
        }
    }
    let k0 = cfg.truth.spec().k;
    let counts: BTreeMap<String, usize> = Criterion::ALL
        .iter()
        .map(|&c| (c.to_string(), sgmlmoe::experiment::correct_count(&rows, c, k0)))
        .collect();
    run.note(format!("correct selections out of {s}: {counts:?}"));
    run.extra.insert("correct_counts".into(), json!(counts));
    run.bytes("selection_replicates.csv", &csv_bytes(&["criterion", "replicate", "seed", "n", "chosen_k"], &out)?)?;
    Ok(())
}

fn cmd_rates(a: &RatesArgs, run: &mut Run) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = match a.config.extension().and_then(|e| e.to_str()) {
        Some("json") => RateExperimentConfig::from_json(&text)?,
        _ => RateExperimentConfig::from_toml(&text)?,
    };
    let result = run_rate_experiment(&cfg)?;
    run.note(format!("D_V slope {:.3} (r2 {:.3})", result.d_v_fit.slope, result.d_v_fit.r2));
    run.bytes("rates.csv", &result.to_csv()?)?;
    let slopes = json!({
        "median_d_v": result.median_d_v,
        "d_v": result.d_v_fit,
        "components": result.components,
    });
    run.json("slopes.json", &slopes)?;
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs, run: &mut Run) -> Result<()> {
    let truth = a.truth.load()?;
    let (data, known_truth) = match &a.data {
        Some(p) => (load_csv(p, a.m, false, run)?, a.truth.truth.is_some()),
        None => (sample_dataset(&truth, a.n, CovariateSampler::StandardNormal, run.cli.seed), true),
    };
    if data.p() != truth.spec().p || data.n_classes() != truth.spec().m {
        bail!(sgmlmoe::Error::Schema("dataset does not match the truth spec".into()));
    }
    let init = init_perturbed_truth(&truth, a.noise, 0, run.cli.seed ^ 1)?;
    let mut rows = Vec::new();
    for &opt in &a.optimizers {
        let (path, trace) = match opt {
            Optimizer::Mm => {
                let opts = FitOptions {
                    tol: Some(f64::MIN_POSITIVE),
                    max_iters: a.budget.max(1),
                    record_trace: true,
                    ..FitOptions::default()
                };
                let (_, trace) = fit_mm(&init, &data, &opts)?;
                (trace.theta_path.clone().unwrap_or_default(), trace)
            }
            Optimizer::Grad => {
                let (_, trace) = fit_gradient_baseline(&init, &data, a.step, a.budget.max(1))?;
                (trace.theta_path.clone().unwrap_or_default(), trace)
            }
        };
        let name = match opt {
            Optimizer::Mm => "mm",
            Optimizer::Grad => "grad",
        };
        for (t, ll) in trace.loglik.iter().enumerate() {
            let err = match (known_truth, path.get(t)) {
                (true, Some(th)) => format!("{:?}", parameter_distance(th, &truth)?),
                _ => String::new(),
            };
            rows.push(vec![name.to_string(), t.to_string(), format!("{ll:?}"), err]);
        }
    }
    run.bytes("benchmark.csv", &csv_bytes(&["optimizer", "iteration", "loglik", "param_error"], &rows)?)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // A second initialization in the same process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut run = Run {
        cli,
        outputs: Vec::new(),
        extra: BTreeMap::new(),
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, &mut run)?,
        Command::Fit(a) => cmd_fit(a, &mut run)?,
        Command::Dendrogram(a) => cmd_dendrogram(a, &mut run)?,
        Command::Select(a) => cmd_select(a, &mut run)?,
        Command::Rates(a) => cmd_rates(a, &mut run)?,
        Command::Benchmark(a) => cmd_benchmark(a, &mut run)?,
    }
    run.manifest()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = classify(e);
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
