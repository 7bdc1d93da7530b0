//! Command-line front end: synthetic data generation, preprocessing,
//! ordering/pattern export, training, prediction, and metric evaluation.
//!
//! All file formats are diff-able: CSV with a header row for data, JSON for
//! configuration, model artifacts, and metrics. Every subcommand is
//! bit-reproducible given the same config and seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    neighbor_pattern, reduced_ancestors, reverse_maximin_order, variant_patterns,
    full_ancestor_column, Metric, OrderedDesign, PatternVariant,
};
use crate::kernels::{covariance_submatrix, KernelFamily, KernelSpec, MeanSpec};
use crate::linalg::SparseLowerColumns;
use crate::model::{Dataset, LikelihoodSpec};
use crate::oracle;
use crate::par;
use crate::predict::{
    build_prediction_model, latent_marginals, response_log_density, response_mean, SummaryMode,
};
use crate::vi::{train, Problem, TrainConfig, TrainTrace, VariationalState};

/// Dense sampling guard for `simulate`.
const SIMULATE_GUARD: usize = 20_000;

/// Reduced-mode prediction variances kick in above this many test points.
const REDUCED_MODE_THRESHOLD: usize = 2_000;

/// Flat run configuration. A JSON document loaded via `--config`; individual
/// command-line flags override single fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub kernel: KernelFamily,
    pub variance: f64,
    /// Simulation/initial length-scales; empty means `init_length_scale`
    /// repeated per dimension.
    pub length_scales: Vec<f64>,
    pub likelihood: LikelihoodFamily,
    /// Noise scale of the likelihood (unused for bernoulli-logit).
    pub noise: f64,
    pub mean: f64,
    pub rho: f64,
    pub pattern: PatternName,
    /// Conditioning-set size for the global pattern.
    pub global_m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<usize>,
    pub mc_samples: usize,
    pub eval_mc_samples: usize,
    pub warmup_epochs: usize,
    pub train_length_scales: bool,
    pub train_variance: bool,
    pub train_noise: bool,
    pub init_length_scale: f64,
    pub init_variance: f64,
    pub init_noise2: f64,
    pub moment_init: bool,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            n: 500,
            d: 2,
            seed: 0,
            kernel: KernelFamily::Matern15,
            variance: 1.0,
            length_scales: Vec::new(),
            likelihood: LikelihoodFamily::Gaussian,
            noise: 0.1,
            mean: 0.0,
            rho: 2.0,
            pattern: PatternName::NearestNeighbor,
            global_m: 30,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_milestones: t.lr_milestones.clone(),
            mc_samples: t.mc_samples,
            eval_mc_samples: t.eval_mc_samples,
            warmup_epochs: t.warmup_epochs,
            train_length_scales: t.train_length_scales,
            train_variance: t.train_variance,
            train_noise: t.train_noise,
            init_length_scale: t.init_length_scale,
            init_variance: t.init_variance,
            init_noise2: t.init_noise2,
            moment_init: t.moment_init,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodFamily {
    Gaussian,
    StudentT,
    BernoulliLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PatternName {
    NearestNeighbor,
    Diagonal,
    Global,
}

impl RunConfig {
    fn likelihood_spec(&self) -> Result<LikelihoodSpec> {
        let spec = match self.likelihood {
            LikelihoodFamily::Gaussian => LikelihoodSpec::gaussian(self.noise),
            LikelihoodFamily::StudentT => LikelihoodSpec::StudentT2 { scale: self.noise },
            LikelihoodFamily::BernoulliLogit => LikelihoodSpec::BernoulliLogit,
        };
        spec.validate(0)?;
        Ok(spec)
    }

    fn variant(&self) -> PatternVariant {
        match self.pattern {
            PatternName::NearestNeighbor => PatternVariant::NearestNeighbor { rho: self.rho },
            PatternName::Diagonal => PatternVariant::Diagonal { rho: self.rho },
            PatternName::Global => PatternVariant::Global { m: self.global_m },
        }
    }

    fn sim_length_scales(&self) -> Vec<f64> {
        if self.length_scales.is_empty() {
            vec![self.init_length_scale; self.d]
        } else {
            self.length_scales.clone()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_milestones: self.lr_milestones.clone(),
            mc_samples: self.mc_samples,
            eval_mc_samples: self.eval_mc_samples,
            seed: self.seed,
            warmup_epochs: self.warmup_epochs,
            train_length_scales: self.train_length_scales,
            train_variance: self.train_variance,
            train_noise: self.train_noise,
            init_length_scale: self.init_length_scale,
            init_variance: self.init_variance,
            init_noise2: self.init_noise2,
            anchor: None,
            moment_init: self.moment_init,
            ..TrainConfig::default()
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dklgp", version, about = "Sparse inverse Cholesky variational inference for latent Gaussian processes")]
pub struct Cli {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Cap the worker thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed governing all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a latent field exactly from N(0, K) and responses from the
    /// likelihood; writes a CSV plus a provenance sidecar.
    Simulate(SimulateArgs),
    /// Standardize covariates to [0,1], drop near-constant columns, and
    /// enforce a minimum input separation.
    Preprocess(PreprocessArgs),
    /// Export the reverse-maximin ordering and sparsity patterns with
    /// set-size statistics.
    Order(OrderArgs),
    /// Train the variational posterior and write a model artifact.
    Train(TrainArgs),
    /// Predict latent means and variances at test inputs.
    Predict(PredictArgs),
    /// Compare predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_enum)]
    pub likelihood: Option<LikelihoodFamily>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub variance: Option<f64>,
    /// Comma-separated per-dimension length-scales.
    #[arg(long, value_delimiter = ',')]
    pub length_scales: Option<Vec<f64>>,
    /// Output CSV path; a `<path>.meta.json` sidecar records the seed.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop standardized columns below this standard deviation.
    #[arg(long, default_value_t = 0.01)]
    pub min_sd: f64,
    /// Drop rows closer than this to an earlier kept row.
    #[arg(long, default_value_t = 0.001)]
    pub min_sep: f64,
}

#[derive(Args, Debug)]
pub struct OrderArgs {
    /// CSV of inputs; mutually exclusive with --uniform.
    #[arg(long, conflicts_with = "uniform")]
    pub input: Option<PathBuf>,
    /// Sample n uniform points on the unit hypercube instead of reading a
    /// file.
    #[arg(long)]
    pub uniform: bool,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Also average full-ancestor sizes over this many sampled columns.
    #[arg(long)]
    pub sample_full: Option<usize>,
    /// Output directory for ordering.csv, s.txt, reduced.txt, stats.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training CSV with columns x1..xd and y.
    #[arg(long)]
    pub data: PathBuf,
    /// Model artifact output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Hold out a test fraction and write those rows here before training.
    #[arg(long)]
    pub holdout_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub pattern: Option<PatternName>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum)]
    pub likelihood: Option<LikelihoodFamily>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model artifact from `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Test CSV with columns x1..xd.
    #[arg(long)]
    pub test: PathBuf,
    /// Predictions CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Variance mode; default is exact below 2,000 test points, reduced
    /// above.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Truth CSV aligned row-for-row with the predictions; latent metrics
    /// need an `f` column, response metrics a `y` column.
    #[arg(long)]
    pub truth: PathBuf,
    /// Model artifact; supplies the likelihood and phase timings.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Metrics JSON output path; metrics are also printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Wall-clock seconds per pipeline phase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseSeconds {
    pub order: f64,
    pub train: f64,
    pub predict: f64,
}

/// Evaluation output. Latent metrics are omitted when the truth file has no
/// `f` column, response metrics when it has no `y` column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_latent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll_latent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_response: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll_response: Option<f64>,
    pub elbo_first: Option<f64>,
    pub elbo_last: Option<f64>,
    pub elbo_best: Option<f64>,
    pub seconds: PhaseSeconds,
}

/// Serialized trained model. Scale lengths are recomputed on load, so the
/// artifact stays valid JSON (the last scale is infinite).
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub kernel: KernelSpec,
    pub mean: f64,
    pub likelihood: LikelihoodSpec,
    pub pattern: PatternName,
    pub rho: f64,
    pub global_m: usize,
    /// Inputs in design (reverse-maximin) order.
    pub points: Vec<Vec<f64>>,
    /// Original row of each ordered point.
    pub perm: Vec<usize>,
    /// Ordering metric length-scales; absent means Euclidean.
    pub metric_scales: Option<Vec<f64>>,
    /// Responses in design order.
    pub y: Vec<f64>,
    pub nu: Vec<f64>,
    /// Posterior factor rows per column; diagonal slots of `v_vals` hold log
    /// values.
    pub v_rows: Vec<Vec<usize>>,
    pub v_vals: Vec<Vec<f64>>,
    pub trace: TrainTrace,
    pub seconds: PhaseSeconds,
}

/// Entry point used by the binary: parses arguments, runs, and maps errors
/// to exit codes (2 for configuration/I/O problems, 3 for numerical
/// failures).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::ShapeMismatch(_) => 2,
        Error::NotPositiveDefinite { .. }
        | Error::SingularDiagonal(_)
        | Error::DuplicatePoints(_, _)
        | Error::SizeGuard { .. }
        | Error::Column { .. } => 3,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        par::set_threads(t);
    }
    let mut cfg = match &cli.config {
        Some(path) => serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0,1), got {}",
            cfg.test_fraction
        )));
    }
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Preprocess(a) => preprocess(a),
        Command::Order(a) => order(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

// ---------------------------------------------------------------- simulate

fn simulate(mut cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(l) = a.likelihood {
        cfg.likelihood = l;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.variance {
        cfg.variance = v;
    }
    if let Some(ls) = a.length_scales {
        cfg.length_scales = ls;
    }
    let (n, d) = (cfg.n, cfg.d);
    if n == 0 || d == 0 {
        return Err(Error::Config("simulate needs n >= 1 and d >= 1".into()));
    }
    if n > SIMULATE_GUARD {
        return Err(Error::SizeGuard {
            n,
            guard: SIMULATE_GUARD,
        });
    }
    let ls = cfg.sim_length_scales();
    if ls.len() != d {
        return Err(Error::Config(format!(
            "{} length-scales for d = {d}",
            ls.len()
        )));
    }
    let mut spec = KernelSpec::new(cfg.kernel, cfg.variance, ls)?;
    spec.rq_shape = 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let idx: Vec<usize> = (0..n).collect();
    let k = covariance_submatrix(&spec, &points, &idx)?;
    let l = oracle::chol(n, k.entries())?;
    let z: Vec<f64> = (0..n)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let mut f = vec![cfg.mean; n];
    for i in 0..n {
        for j in 0..=i {
            f[i] += l[i * n + j] * z[j];
        }
    }
    let y: Vec<f64> = match cfg.likelihood {
        LikelihoodFamily::Gaussian => f
            .iter()
            .map(|&fi| fi + cfg.noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
        LikelihoodFamily::StudentT => {
            let t2 = rand_distr::StudentT::new(2.0)
                .map_err(|e| Error::Config(format!("student-t sampler: {e}")))?;
            f.iter().map(|&fi| fi + cfg.noise * rng.sample::<f64, _>(t2)).collect()
        }
        LikelihoodFamily::BernoulliLogit => f
            .iter()
            .map(|&fi| {
                let p = 1.0 / (1.0 + (-fi).exp());
                if rng.gen_bool(p) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };

    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("f".into());
    header.push("y".into());
    let rows = (0..n).map(|i| {
        let mut row = points[i].clone();
        row.push(f[i]);
        row.push(y[i]);
        row
    });
    write_csv(&a.out, &header, rows)?;
    let meta = serde_json::json!({
        "command": "simulate",
        "seed": cfg.seed,
        "n": n,
        "d": d,
        "kernel": spec,
        "likelihood": cfg.likelihood,
        "noise": cfg.noise,
        "mean": cfg.mean,
    });
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

// -------------------------------------------------------------- preprocess

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let (header, rows) = read_csv(&a.input)?;
    let cols = ColumnMap::new(&header)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty input file".into()));
    }

    // standardize each covariate to [0,1], then drop flat columns
    let mut kept_cols = Vec::new();
    let mut standardized: Vec<Vec<f64>> = Vec::new();
    for (slot, &c) in cols.x.iter().enumerate() {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        let col: Vec<f64> = rows.iter().map(|r| (r[c] - lo) / (hi - lo)).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        if sd < a.min_sd {
            continue;
        }
        kept_cols.push(slot);
        standardized.push(col);
    }
    if standardized.is_empty() {
        return Err(Error::Config(
            "preprocessing dropped every covariate column".into(),
        ));
    }

    // greedy row filter enforcing the minimum separation
    let dcount = standardized.len();
    let mut kept_rows: Vec<usize> = Vec::new();
    for i in 0..n {
        let ok = kept_rows.iter().all(|&j| {
            let mut s = 0.0;
            for col in &standardized {
                let d = col[i] - col[j];
                s += d * d;
            }
            s.sqrt() >= a.min_sep
        });
        if ok {
            kept_rows.push(i);
        }
    }

    let mut header_out: Vec<String> = (1..=dcount).map(|j| format!("x{j}")).collect();
    if cols.f.is_some() {
        header_out.push("f".into());
    }
    if cols.y.is_some() {
        header_out.push("y".into());
    }
    let out_rows = kept_rows.iter().map(|&i| {
        let mut row: Vec<f64> = standardized.iter().map(|col| col[i]).collect();
        if let Some(c) = cols.f {
            row.push(rows[i][c]);
        }
        if let Some(c) = cols.y {
            row.push(rows[i][c]);
        }
        row
    });
    write_csv(&a.out, &header_out, out_rows)?;
    let meta = serde_json::json!({
        "command": "preprocess",
        "input_rows": n,
        "kept_rows": kept_rows.len(),
        "input_columns": cols.x.len(),
        "kept_columns": kept_cols.iter().map(|&s| s + 1).collect::<Vec<_>>(),
        "min_sd": a.min_sd,
        "min_sep": a.min_sep,
    });
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

// ------------------------------------------------------------------- order

fn order(mut cfg: RunConfig, a: OrderArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    let points: Vec<Vec<f64>> = match (&a.input, a.uniform) {
        (Some(path), false) => {
            let (header, rows) = read_csv(path)?;
            let cols = ColumnMap::new(&header)?;
            rows.iter()
                .map(|r| cols.x.iter().map(|&c| r[c]).collect())
                .collect()
        }
        (None, true) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..cfg.n)
                .map(|_| (0..cfg.d).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect()
        }
        _ => {
            return Err(Error::Config(
                "order needs exactly one of --input or --uniform".into(),
            ))
        }
    };
    let metric = if cfg.length_scales.is_empty() {
        Metric::euclidean()
    } else {
        Metric::scaled(cfg.length_scales.clone())
    };
    fs::create_dir_all(&a.out)?;

    let t0 = Instant::now();
    let design = reverse_maximin_order(&points, &metric, None)?;
    let sp = neighbor_pattern(&design, cfg.rho);
    let reduced = reduced_ancestors(&design, cfg.rho);
    let seconds = t0.elapsed().as_secs_f64();

    let n = design.len();
    let mut w = BufWriter::new(fs::File::create(a.out.join("ordering.csv"))?);
    writeln!(w, "position,row,scale")?;
    for i in 0..n {
        // the last scale is infinite; emit it as the text "inf"
        let s = if design.scales[i].is_finite() {
            format!("{}", design.scales[i])
        } else {
            "inf".into()
        };
        writeln!(w, "{},{},{}", i + 1, design.perm[i] + 1, s)?;
    }
    w.flush()?;
    sp.write_text(BufWriter::new(fs::File::create(a.out.join("s.txt"))?))?;
    reduced.write_text(BufWriter::new(fs::File::create(a.out.join("reduced.txt"))?))?;

    let mean_full = match a.sample_full {
        Some(k) if k > 0 => {
            let step = (n / k.min(n)).max(1);
            let sample: Vec<usize> = (0..n).step_by(step).take(k).collect();
            let sizes = par::map_indexed(sample.len(), |t| {
                full_ancestor_column(&sp, &sp, sample[t]).len()
            });
            Some(sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
        }
        _ => None,
    };
    let stats = serde_json::json!({
        "n": n,
        "d": points[0].len(),
        "rho": cfg.rho,
        "mean_s": sp.mean_col_size(),
        "mean_reduced": reduced.mean_col_size(),
        "mean_full": mean_full,
        "seconds": seconds,
    });
    let text = serde_json::to_string_pretty(&stats)?;
    fs::write(a.out.join("stats.json"), &text)?;
    println!("{text}");
    Ok(())
}

// ------------------------------------------------------------------- train

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(p) = a.pattern {
        cfg.pattern = p;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    if let Some(l) = a.likelihood {
        cfg.likelihood = l;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.test_fraction {
        cfg.test_fraction = v;
    }

    let (header, rows) = read_csv(&a.data)?;
    let cols = ColumnMap::new(&header)?;
    let ycol = cols
        .y
        .ok_or_else(|| Error::Config("training data needs a y column".into()))?;

    // optional uniform holdout split, drawn before training
    let train_rows: Vec<usize> = match &a.holdout_out {
        Some(path) => {
            let n = rows.len();
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51e5_0a7e);
            idx.shuffle(&mut rng);
            let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
            let n_test = n_test.clamp(1, n - 1);
            let mut test: Vec<usize> = idx[..n_test].to_vec();
            let mut train: Vec<usize> = idx[n_test..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            write_csv(path, &header, test.iter().map(|&i| rows[i].clone()))?;
            train
        }
        None => (0..rows.len()).collect(),
    };
    let inputs: Vec<Vec<f64>> = train_rows
        .iter()
        .map(|&i| cols.x.iter().map(|&c| rows[i][c]).collect())
        .collect();
    let y: Vec<f64> = train_rows.iter().map(|&i| rows[i][ycol]).collect();
    let likelihood = cfg.likelihood_spec()?;
    let data = Dataset::new(inputs, y, likelihood)?;
    // full-batch fallback for small problems
    cfg.batch_size = cfg.batch_size.min(data.len());

    let t_order = Instant::now();
    let init_ls = vec![cfg.init_length_scale; cols.x.len()];
    let _ = Problem::new(
        &data,
        cfg.kernel,
        MeanSpec { constant: cfg.mean },
        cfg.variant(),
        &init_ls,
        None,
    )?;
    let seconds_order = t_order.elapsed().as_secs_f64();

    let t_train = Instant::now();
    let (pr, state, trace) = train(&data, cfg.kernel, MeanSpec { constant: cfg.mean }, &cfg.train_config())?;
    let seconds_train = t_train.elapsed().as_secs_f64();

    let artifact = artifact_from(&pr, &state, trace, &cfg, seconds_order, seconds_train);
    fs::write(&a.out, serde_json::to_string(&artifact)?)?;
    eprintln!(
        "trained {} points in {:.2}s; final epoch ELBO estimate {:.4}",
        pr.len(),
        seconds_train,
        artifact.trace.elbo.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn artifact_from(
    pr: &Problem,
    state: &VariationalState,
    trace: TrainTrace,
    cfg: &RunConfig,
    seconds_order: f64,
    seconds_train: f64,
) -> ModelArtifact {
    let n = pr.len();
    let kernel = state.kernel(pr.family);
    let likelihood = if pr.likelihood.has_scale() {
        pr.likelihood.with_scale(state.log_noise2.exp().sqrt())
    } else {
        pr.likelihood.clone()
    };
    ModelArtifact {
        kernel,
        mean: pr.mean.constant,
        likelihood,
        pattern: cfg.pattern,
        rho: cfg.rho,
        global_m: cfg.global_m,
        points: pr.design.points.clone(),
        perm: pr.design.perm.clone(),
        metric_scales: pr.design.metric.scales.clone(),
        y: pr.y.clone(),
        nu: state.nu.clone(),
        v_rows: (0..n).map(|i| state.v.col_rows(i).to_vec()).collect(),
        v_vals: (0..n).map(|i| state.v.col_vals(i).to_vec()).collect(),
        trace,
        seconds: PhaseSeconds {
            order: seconds_order,
            train: seconds_train,
            predict: 0.0,
        },
    }
}

/// Rebuild the problem and state from an artifact. Scale lengths are
/// recomputed from the stored ordering.
fn restore(artifact: &ModelArtifact) -> Result<(Problem, VariationalState)> {
    let n = artifact.points.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty model artifact".into()));
    }
    let metric = Metric {
        scales: artifact.metric_scales.clone(),
    };
    let mut scales = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.dist(&artifact.points[i], &artifact.points[j]);
            if d < scales[i] {
                scales[i] = d;
            }
        }
    }
    let design = OrderedDesign {
        points: artifact.points.clone(),
        perm: artifact.perm.clone(),
        scales,
        metric,
    };
    let variant = match artifact.pattern {
        PatternName::NearestNeighbor => PatternVariant::NearestNeighbor { rho: artifact.rho },
        PatternName::Diagonal => PatternVariant::Diagonal { rho: artifact.rho },
        PatternName::Global => PatternVariant::Global {
            m: artifact.global_m,
        },
    };
    let (sp, sq) = variant_patterns(&design, variant);
    let reduced = match variant {
        PatternVariant::NearestNeighbor { rho } => reduced_ancestors(&design, rho),
        // diagonal and global posteriors have no off-pattern ancestors
        _ => sq.clone(),
    };
    let pr = Problem {
        design,
        y: artifact.y.clone(),
        likelihood: artifact.likelihood.clone(),
        family: artifact.kernel.family,
        mean: MeanSpec {
            constant: artifact.mean,
        },
        variant,
        sp,
        sq,
        reduced,
    };
    let v = SparseLowerColumns::new(n, artifact.v_rows.clone(), artifact.v_vals.clone())?;
    let log_noise2 = if artifact.likelihood.has_scale() {
        let tau = artifact.likelihood.tau(0);
        (tau * tau).ln()
    } else {
        0.0
    };
    let state = VariationalState {
        nu: artifact.nu.clone(),
        v,
        log_length_scales: artifact.kernel.length_scales.iter().map(|l| l.ln()).collect(),
        log_variance: artifact.kernel.variance.ln(),
        log_noise2,
    };
    Ok((pr, state))
}

// ----------------------------------------------------------------- predict

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let artifact: ModelArtifact = serde_json::from_str(&fs::read_to_string(&a.model)?)?;
    let (pr, state) = restore(&artifact)?;
    let (header, rows) = read_csv(&a.test)?;
    let cols = ColumnMap::new(&header)?;
    if cols.x.len() != pr.design.dim() {
        return Err(Error::ShapeMismatch(format!(
            "test file has {} covariates, model has {}",
            cols.x.len(),
            pr.design.dim()
        )));
    }
    let test_points: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.x.iter().map(|&c| r[c]).collect())
        .collect();
    let mode = match a.mode.as_deref() {
        Some("exact") => SummaryMode::Exact,
        Some("reduced") => SummaryMode::Reduced,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown mode {other:?}; expected exact or reduced"
            )))
        }
        None => {
            if test_points.len() > REDUCED_MODE_THRESHOLD {
                SummaryMode::Reduced
            } else {
                SummaryMode::Exact
            }
        }
    };
    let rho = a.rho.unwrap_or(artifact.rho);

    let t0 = Instant::now();
    let model = build_prediction_model(&pr, &state, &test_points, rho)?;
    let marginals = latent_marginals(&model, mode)?;
    let seconds_predict = t0.elapsed().as_secs_f64();

    // back to original row order
    let m = test_points.len();
    let mut by_row = vec![(0.0, 0.0); m];
    for (i, &mv) in marginals.iter().enumerate() {
        by_row[model.test_perm[i]] = mv;
    }
    let d = pr.design.dim();
    let mut header_out: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header_out.push("mean".into());
    header_out.push("variance".into());
    header_out.push("response_mean".into());
    let out_rows = (0..m).map(|r| {
        let (mean, var) = by_row[r];
        let mut row = test_points[r].clone();
        row.push(mean);
        row.push(var);
        row.push(response_mean(&pr.likelihood, mean, var));
        row
    });
    write_csv(&a.out, &header_out, out_rows)?;
    let meta = serde_json::json!({
        "command": "predict",
        "model": a.model,
        "mode": match mode { SummaryMode::Exact => "exact", SummaryMode::Reduced => "reduced" },
        "rho": rho,
        "n_test": m,
        "seconds_predict": seconds_predict,
    });
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (pheader, prows) = read_csv(&a.predictions)?;
    let (theader, trows) = read_csv(&a.truth)?;
    if prows.len() != trows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows vs {} truth rows",
            prows.len(),
            trows.len()
        )));
    }
    if prows.is_empty() {
        return Err(Error::ShapeMismatch("no rows to evaluate".into()));
    }
    let mean_c = find_col(&pheader, "mean")?;
    let var_c = find_col(&pheader, "variance")?;
    let rmean_c = find_col(&pheader, "response_mean").ok();
    let tcols = ColumnMap::new(&theader)?;

    let artifact: Option<ModelArtifact> = match &a.model {
        Some(path) => Some(serde_json::from_str(&fs::read_to_string(path)?)?),
        None => None,
    };
    let n = prows.len() as f64;

    let (mut rmse_latent, mut nll_latent) = (None, None);
    if let Some(fc) = tcols.f {
        let mut se = 0.0;
        let mut nll = 0.0;
        for (p, t) in prows.iter().zip(&trows) {
            let (m, v, f) = (p[mean_c], p[var_c], t[fc]);
            if !(v > 0.0) {
                return Err(Error::Config(format!("non-positive variance {v}")));
            }
            se += (m - f) * (m - f);
            nll += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (f - m) * (f - m) / v);
        }
        rmse_latent = Some((se / n).sqrt());
        nll_latent = Some(nll / n);
    }

    let (mut rmse_response, mut nll_response) = (None, None);
    if let (Some(yc), Some(art)) = (tcols.y, &artifact) {
        let mut nll = 0.0;
        let mut se = 0.0;
        for (p, t) in prows.iter().zip(&trows) {
            let (m, v, y) = (p[mean_c], p[var_c], t[yc]);
            nll -= response_log_density(&art.likelihood, m, v, y);
            let rm = match rmean_c {
                Some(c) => p[c],
                None => response_mean(&art.likelihood, m, v),
            };
            se += (rm - y) * (rm - y);
        }
        rmse_response = Some((se / n).sqrt());
        nll_response = Some(nll / n);
    }

    let mut seconds = PhaseSeconds::default();
    let (mut elbo_first, mut elbo_last, mut elbo_best) = (None, None, None);
    if let Some(art) = &artifact {
        seconds.order = art.seconds.order;
        seconds.train = art.seconds.train;
        elbo_first = art.trace.elbo.first().copied();
        elbo_last = art.trace.elbo.last().copied();
        elbo_best = art
            .trace
            .elbo
            .iter()
            .copied()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    }
    let meta_path = sidecar_path(&a.predictions);
    if let Ok(text) = fs::read_to_string(&meta_path) {
        if let Ok(meta) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(s) = meta.get("seconds_predict").and_then(|v| v.as_f64()) {
                seconds.predict = s;
            }
        }
    }

    let report = MetricsReport {
        rmse_latent,
        nll_latent,
        rmse_response,
        nll_response,
        elbo_first,
        elbo_last,
        elbo_best,
        seconds,
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

// ------------------------------------------------------------- file layer

/// Sidecar metadata path: `<file>.meta.json` next to the file.
fn sidecar_path(p: &Path) -> PathBuf {
    let mut name = p.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    p.with_file_name(name)
}

/// Recognized data columns: covariates x1..xd (contiguous, in order),
/// optional latent f and response y.
struct ColumnMap {
    x: Vec<usize>,
    f: Option<usize>,
    y: Option<usize>,
}

impl ColumnMap {
    fn new(header: &[String]) -> Result<Self> {
        let mut x = Vec::new();
        let mut f = None;
        let mut y = None;
        for (c, name) in header.iter().enumerate() {
            let name = name.trim();
            if name == "f" {
                f = Some(c);
            } else if name == "y" {
                y = Some(c);
            } else if name == format!("x{}", x.len() + 1) {
                x.push(c);
            } else if name == "mean" || name == "variance" || name == "response_mean" {
                // prediction files reuse the reader; handled by position
            } else {
                return Err(Error::Config(format!(
                    "unrecognized column {name:?}; expected x1..xd, f, y"
                )));
            }
        }
        if x.is_empty() {
            return Err(Error::Config("no covariate columns x1..xd found".into()));
        }
        Ok(ColumnMap { x, f, y })
    }
}

fn find_col(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Config(format!("missing column {name:?}")))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad numeric field {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "row with {} fields under a {}-column header",
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}
