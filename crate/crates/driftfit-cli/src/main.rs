//! `driftfit` — covariate shift adaptation from the command line.
//!
//! Subcommands: `simulate` draws synthetic shifted datasets, `fit` runs one
//! estimator and writes coefficient/prediction tables, `ratio` dumps density
//! ratio diagnostics, and `bench` reproduces the replication study.
//!
//! Exit codes: 0 success, 2 malformed input, 3 estimation failure.

mod csvio;
mod manifest;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use driftfit::datamodel::{EstimatorConfig, LabeledDataset, UnlabeledDataset};
use driftfit::density_ratio::{ulsif_cv, ulsif_fit, DensityRatioModel};
use driftfit::drcsa::{dr_fit, scsa_fit, sdb_fit, DrFitResult};
use driftfit::inference::{
    confidence_interval, estimate_covariance, hc_sandwich, pointwise_se, SandwichCovariance,
};
use driftfit::models::{
    krr_fit_auto, ols_fit, wls_fit, Basis, KrrModel, ModelKind, ModelSpec, OptimSettings,
    ParametricModel,
};
use driftfit::numkit::{median_pairwise_distance, RngStream};
use driftfit::simbench::{
    format_g17, records_csv, run_benchmark, summarize, summary_csv, CovStructure, Method,
    SimDesign, SimModel,
};

use csvio::{format_g17 as g17, hidden_csv, labeled_csv, read_labeled, read_unlabeled, unlabeled_csv};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "driftfit", version, about = "Doubly robust covariate shift adaptation")]
struct Cli {
    /// Worker threads for parallel sections (fallback: DRIFTFIT_THREADS, then logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one estimator to train/test CSVs; writes beta.csv and predictions.csv.
    Fit(FitArgs),
    /// Draw a synthetic covariate-shift dataset; writes train/test/hidden CSVs.
    Simulate(SimArgs),
    /// Run the replication benchmark; writes records.csv and summary.csv.
    Bench(BenchArgs),
    /// Density-ratio diagnostics; writes ratio.csv and ratio_params.json.
    Ratio(RatioArgs),
}

#[derive(Parser)]
struct FitArgs {
    /// Train CSV with header y,x1,...,xd.
    #[arg(long)]
    train: PathBuf,
    /// Test CSV with header x1,...,xd.
    #[arg(long)]
    test: PathBuf,
    /// Estimator: ols | wls | np | dr | sdb | scsa.
    #[arg(long)]
    method: String,
    /// Feature map: affine | quad2d | comma-separated monomials like "1,x1,x1^2,x1*x2".
    #[arg(long, default_value = "affine")]
    basis: String,
    /// Link of the parametric model: identity | logistic.
    #[arg(long, default_value = "identity")]
    link: String,
    /// Ratio exponent for scsa (overrides the config value).
    #[arg(long)]
    alpha: Option<f64>,
    /// Cross-fitting fold count (overrides the config value).
    #[arg(long)]
    xi: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimator configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct SimArgs {
    /// Regression truth: 1 (quadratic + Gaussian noise) | 2 (logistic + Bernoulli).
    #[arg(long)]
    model: u8,
    /// Covariate covariance: indep | corr.
    #[arg(long, default_value = "indep")]
    cov: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct BenchArgs {
    #[arg(long)]
    model: u8,
    #[arg(long, default_value = "indep")]
    cov: String,
    /// Number of replications.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Comma-separated methods (ols, wls, np, dr, wls_cf, csa_np_cf, dr_nocf, csa_np, sdb, scsa).
    #[arg(long, default_value = "ols,wls,np,dr")]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct RatioArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Kernel bandwidth (absolute); selected by cross-validation when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    /// Ridge penalty; selected by cross-validation when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure carrying the documented exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult = Result<(), Failure>;

fn input_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn estimation_error(error: anyhow::Error) -> Failure {
    Failure { code: 3, error }
}

/// Library errors split into the two documented exit classes: numerical
/// failures are estimation errors, everything else is malformed input.
fn classify(error: driftfit::Error) -> Failure {
    match &error {
        driftfit::Error::NotPositiveDefinite { .. } | driftfit::Error::NoConvergence { .. } => {
            estimation_error(error.into())
        }
        _ => input_error(error.into()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("DRIFTFIT_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global().ok();
    }
    let outcome = match cli.command {
        Cmd::Fit(args) => run_fit(args),
        Cmd::Simulate(args) => run_simulate(args),
        Cmd::Bench(args) => run_bench(args),
        Cmd::Ratio(args) => run_ratio(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<EstimatorConfig, Failure> {
    match path {
        None => Ok(EstimatorConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))
                .map_err(input_error)?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid config JSON in {}", p.display()))
                .map_err(input_error)
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .map_err(input_error)
}

fn write_file(out: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::write(out.join(name), contents)
        .with_context(|| format!("cannot write {}", out.join(name).display()))
        .map_err(input_error)
}

fn parse_cov(token: &str) -> Result<CovStructure, Failure> {
    match token.to_ascii_lowercase().as_str() {
        "indep" => Ok(CovStructure::IndepX),
        "corr" => Ok(CovStructure::CorrX),
        other => Err(input_error(anyhow!(
            "unknown covariance structure '{other}' (use indep|corr)"
        ))),
    }
}

fn parse_model(id: u8) -> Result<SimModel, Failure> {
    match id {
        1 => Ok(SimModel::Model1),
        2 => Ok(SimModel::Model2),
        other => Err(input_error(anyhow!("unknown model '{other}' (use 1|2)"))),
    }
}

enum FittedMethod {
    Parametric {
        model: ParametricModel,
        cov: SandwichCovariance,
    },
    Nonparametric(KrrModel),
}

fn fit_dr_family(
    method: &str,
    train: &LabeledDataset,
    test: &UnlabeledDataset,
    config: &EstimatorConfig,
    spec: &ModelSpec,
    stream: &RngStream,
) -> driftfit::Result<DrFitResult> {
    match method {
        "dr" => dr_fit(train, test, config, spec, stream),
        "sdb" => sdb_fit(train, test, config, spec, stream),
        _ => scsa_fit(train, test, config, spec, stream),
    }
}

fn run_fit(args: FitArgs) -> CliResult {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(alpha) = args.alpha {
        config.scsa_alpha = alpha;
    }
    if let Some(xi) = args.xi {
        config.xi = xi;
    }
    config.validate().map_err(|e| input_error(e.into()))?;

    let train = read_labeled(&args.train).map_err(input_error)?;
    let test = read_unlabeled(&args.test).map_err(input_error)?;
    if train.dim() != test.dim() {
        return Err(input_error(anyhow!(
            "train has {} covariates but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let basis = Basis::parse(&args.basis, train.dim()).map_err(|e| input_error(e.into()))?;
    let kind = match args.link.to_ascii_lowercase().as_str() {
        "identity" => ModelKind::LinearBasis,
        "logistic" => ModelKind::Logistic,
        other => {
            return Err(input_error(anyhow!("unknown link '{other}' (use identity|logistic)")))
        }
    };
    let spec = ModelSpec::new(kind, basis);
    let stream = RngStream::new(args.seed);
    let opt = OptimSettings {
        tol: config.optimizer_tol,
        max_iter: config.optimizer_max_iter,
    };

    let method = args.method.to_ascii_lowercase();
    let fitted = match method.as_str() {
        "ols" => {
            let model = ols_fit(&train, &spec, &opt).map_err(classify)?;
            let cov = hc_sandwich(&train, &model, None).map_err(classify)?;
            FittedMethod::Parametric { model, cov }
        }
        "wls" => {
            let ratio = driftfit::density_ratio::ulsif_fit_auto(
                &train.covariates_only(),
                &test,
                &config.ulsif_sigma_grid,
                &config.ulsif_lambda_grid,
                config.ratio_clip,
                &stream.derive(1),
            )
            .map_err(classify)?;
            let weights: Vec<f64> = (0..train.n()).map(|i| ratio.predict(train.row(i))).collect();
            let model = wls_fit(&train, &spec, &weights, &opt).map_err(classify)?;
            let cov = hc_sandwich(&train, &model, Some(&weights)).map_err(classify)?;
            FittedMethod::Parametric { model, cov }
        }
        "np" => {
            let model = krr_fit_auto(
                &train,
                &config.krr_sigma_grid,
                &config.krr_lambda_grid,
                &stream.derive(1),
            )
            .map_err(classify)?;
            FittedMethod::Nonparametric(model)
        }
        "dr" | "sdb" | "scsa" => {
            let fit =
                fit_dr_family(&method, &train, &test, &config, &spec, &stream).map_err(classify)?;
            let cov = estimate_covariance(&fit, &train, &test).map_err(classify)?;
            FittedMethod::Parametric {
                model: fit.model,
                cov,
            }
        }
        other => return Err(input_error(anyhow!("unknown method '{other}'"))),
    };

    ensure_out_dir(&args.out)?;
    let mut beta_csv = String::from("coordinate,estimate,se,ci_lo,ci_hi\n");
    let mut pred_csv = String::from("prediction,se,ci_lo,ci_hi\n");
    match &fitted {
        FittedMethod::Parametric { model, cov } => {
            let names = model.spec.basis.term_names(train.dim());
            let se = cov.standard_errors();
            for (j, name) in names.iter().enumerate() {
                let (lo, hi) = confidence_interval(model.beta[j], se[j], 0.95);
                beta_csv.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    g17(model.beta[j]),
                    g17(se[j]),
                    g17(lo),
                    g17(hi)
                ));
            }
            for j in 0..test.m() {
                let x = test.row(j);
                let pred = model.predict(x);
                let se = pointwise_se(cov, model, x);
                let (lo, hi) = confidence_interval(pred, se, 0.95);
                pred_csv.push_str(&format!("{},{},{},{}\n", g17(pred), g17(se), g17(lo), g17(hi)));
            }
        }
        FittedMethod::Nonparametric(model) => {
            for j in 0..test.m() {
                pred_csv.push_str(&format!("{},,,\n", g17(model.predict(test.row(j)))));
            }
        }
    }
    write_file(&args.out, "beta.csv", &beta_csv)?;
    write_file(&args.out, "predictions.csv", &pred_csv)?;

    RunManifest::new("fit", &config, args.seed)
        .arg("method", &method)
        .arg("basis", &args.basis)
        .arg("link", &args.link)
        .arg("xi", config.xi)
        .input(&args.train)
        .and_then(|m| m.input(&args.test))
        .map_err(input_error)?
        .write(&args.out)
        .map_err(input_error)?;
    Ok(())
}

fn run_simulate(args: SimArgs) -> CliResult {
    let model = parse_model(args.model)?;
    let cov = parse_cov(&args.cov)?;
    let mut design = SimDesign::new(model, cov);
    design.n = args.n;
    design.m = args.m;
    design.seed = args.seed;
    // Replication 0 of the benchmark schedule, so simulate and bench agree.
    let stream = RngStream::with_stream(args.seed, 0).derive(0xDA7A);
    let (train, test, hidden, _) = driftfit::simbench::generate(&design, &stream).map_err(classify)?;
    ensure_out_dir(&args.out)?;
    write_file(&args.out, "train.csv", &labeled_csv(&train))?;
    write_file(&args.out, "test.csv", &unlabeled_csv(&test))?;
    write_file(&args.out, "test_hidden.csv", &hidden_csv(&hidden))?;
    RunManifest::new("simulate", &EstimatorConfig::default(), args.seed)
        .arg("model", args.model)
        .arg("cov", &args.cov)
        .arg("n", args.n)
        .arg("m", args.m)
        .write(&args.out)
        .map_err(input_error)?;
    Ok(())
}

fn run_bench(args: BenchArgs) -> CliResult {
    let config = load_config(args.config.as_deref())?;
    config.validate().map_err(|e| input_error(e.into()))?;
    let model = parse_model(args.model)?;
    let cov = parse_cov(&args.cov)?;
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(Method::parse)
        .collect::<driftfit::Result<_>>()
        .map_err(|e| input_error(e.into()))?;
    let mut design = SimDesign::new(model, cov);
    design.replications = args.reps;
    design.seed = args.seed;
    let out = run_benchmark(&design, &methods, &config).map_err(classify)?;

    for failure in &out.failures {
        log::warn!(
            "replication {} {}/{} failed: {}",
            failure.replication,
            failure.method.name(),
            failure.spec.name(),
            failure.message
        );
    }
    let completed: std::collections::BTreeSet<usize> =
        out.records.iter().map(|r| r.replication).collect();
    if completed.is_empty() {
        return Err(estimation_error(anyhow!(
            "every replication failed ({} cell failures)",
            out.failures.len()
        )));
    }

    ensure_out_dir(&args.out)?;
    write_file(&args.out, "records.csv", &records_csv(&out.records))?;
    let cells = summarize(&out.records, &methods);
    write_file(&args.out, "summary.csv", &summary_csv(&design, &methods, &cells))?;
    RunManifest::new("bench", &config, args.seed)
        .arg("model", args.model)
        .arg("cov", &args.cov)
        .arg("reps", args.reps)
        .arg("methods", &args.methods)
        .write(&args.out)
        .map_err(input_error)?;
    Ok(())
}

fn run_ratio(args: RatioArgs) -> CliResult {
    let config = load_config(args.config.as_deref())?;
    config.validate().map_err(|e| input_error(e.into()))?;
    let train = read_labeled(&args.train).map_err(input_error)?;
    let test = read_unlabeled(&args.test).map_err(input_error)?;
    if train.dim() != test.dim() {
        return Err(input_error(anyhow!(
            "train has {} covariates but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let train_x = train.covariates_only();
    let stream = RngStream::new(args.seed);
    let model = fit_ratio_with_choices(&train_x, &test, &config, args.sigma, args.lambda, &stream)
        .map_err(classify)?;

    ensure_out_dir(&args.out)?;
    let mut ratio_csv = String::from("r_hat\n");
    for i in 0..train_x.m() {
        ratio_csv.push_str(&format_g17(model.predict(train_x.row(i))));
        ratio_csv.push('\n');
    }
    write_file(&args.out, "ratio.csv", &ratio_csv)?;
    let (_, centers, _) = model.centers();
    let params = serde_json::json!({
        "sigma": model.sigma(),
        "lambda": model.lambda(),
        "centers": centers,
    });
    write_file(&args.out, "ratio_params.json", &(params.to_string() + "\n"))?;
    RunManifest::new("ratio", &config, args.seed)
        .input(&args.train)
        .and_then(|m| m.input(&args.test))
        .map_err(input_error)?
        .write(&args.out)
        .map_err(input_error)?;
    Ok(())
}

/// Pin, select, or cross-validate the uLSIF hyperparameters depending on which
/// of `--sigma` / `--lambda` were given (both are absolute values).
fn fit_ratio_with_choices(
    train_x: &UnlabeledDataset,
    test: &UnlabeledDataset,
    config: &EstimatorConfig,
    sigma: Option<f64>,
    lambda: Option<f64>,
    stream: &RngStream,
) -> driftfit::Result<DensityRatioModel> {
    let b = 100.min(test.m());
    let sigma_grid: Vec<f64> = match sigma {
        Some(s) => vec![s],
        None => {
            let mut pooled = train_x.covariates().to_vec();
            pooled.extend_from_slice(test.covariates());
            let med = median_pairwise_distance(&pooled, train_x.m() + test.m(), train_x.dim());
            config.ulsif_sigma_grid.iter().map(|s| s * med).collect()
        }
    };
    let lambda_grid: Vec<f64> = match lambda {
        Some(l) => vec![l],
        None => config.ulsif_lambda_grid.clone(),
    };
    let (s, l) = if sigma_grid.len() == 1 && lambda_grid.len() == 1 {
        (sigma_grid[0], lambda_grid[0])
    } else {
        ulsif_cv(
            train_x,
            test,
            &sigma_grid,
            &lambda_grid,
            2,
            config.ratio_clip,
            &stream.derive(1),
        )?
    };
    ulsif_fit(train_x, test, s, l, b, config.ratio_clip, &stream.derive(2))
}
