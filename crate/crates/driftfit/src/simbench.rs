//! Data-generating processes and the replication harness for the simulation
//! benchmark.
//!
//! Each replication draws fresh train/test means from `Uniform[−1,1]²`,
//! samples two-dimensional normal covariates around them, generates outcomes
//! from one of two regression truths (a quadratic with Gaussian noise, or a
//! logistic probability with Bernoulli outcomes), fits every requested
//! method under misspecified and correctly specified bases, and scores mean
//! squared error against the hidden test outcomes. Replications run
//! concurrently, each on its own `(seed, replication-index)` random stream,
//! so results are independent of scheduling.

use rayon::prelude::*;

use crate::datamodel::{make_fold_plan, EstimatorConfig, LabeledDataset, UnlabeledDataset};
use crate::density_ratio::ulsif_fit_auto;
use crate::drcsa::{
    dr_fit, fit_with_options, scsa_fit, sdb_fit, FitOptions, NuisanceOverride, Variant,
};
use crate::models::{krr_fit_auto, ols_fit, wls_fit, Basis, ModelKind, ModelSpec, OptimSettings};
use crate::numkit::{sample_mvnormal, Matrix, RngStream, Vector};
use crate::{Error, Result};
use std::sync::Arc;

/// Regression truth of the data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimModel {
    /// Quadratic mean `b0 + b1·x1 + b2·x1² + b3·x2 + b4·x2² + 2·b5·x1·x2`
    /// with standard normal noise.
    Model1,
    /// `f0(x) = 1/(1 + exp(b0 + b1·x1 + b2·x2))`, outcomes Bernoulli(f0).
    Model2,
}

/// Covariance of the two-dimensional covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovStructure {
    /// Identity.
    IndepX,
    /// Unit variances with 0.1 off-diagonal.
    CorrX,
}

impl CovStructure {
    pub fn matrix(&self) -> Matrix {
        match self {
            CovStructure::IndepX => Matrix::identity(2, 2),
            CovStructure::CorrX => Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]),
        }
    }
}

/// Simulation design: sizes, seed, and the true coefficients.
///
/// The quadratic truth uses a common coefficient value on every term. The
/// misspecified error floor scales with its square, so this value sets the
/// scale of every misspecified cell; the default 0.5 puts the oracle
/// projection floor near 3.0 against a noise floor of 1.0.
#[derive(Debug, Clone)]
pub struct SimDesign {
    pub model: SimModel,
    pub cov: CovStructure,
    pub n: usize,
    pub m: usize,
    pub replications: usize,
    pub seed: u64,
    pub beta_true: Vec<f64>,
}

pub const MODEL1_COMMON_COEF: f64 = 0.5;

impl SimDesign {
    pub fn new(model: SimModel, cov: CovStructure) -> Self {
        let beta_true = match model {
            SimModel::Model1 => vec![MODEL1_COMMON_COEF; 6],
            SimModel::Model2 => vec![0.0, 2.0, 3.0],
        };
        Self {
            model,
            cov,
            n: 1000,
            m: 500,
            replications: 100,
            seed: 0,
            beta_true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.model {
            SimModel::Model1 => 6,
            SimModel::Model2 => 3,
        };
        if self.beta_true.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "beta_true needs {expected} coefficients, got {}",
                self.beta_true.len()
            )));
        }
        if self.n < 2 || self.m < 2 {
            return Err(Error::InvalidConfig("need n >= 2 and m >= 2".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        Ok(())
    }
}

/// The true regression function of a generated replication.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub model: SimModel,
    pub beta: Vec<f64>,
}

impl SimTruth {
    pub fn f0(&self, x: &[f64]) -> f64 {
        let b = &self.beta;
        match self.model {
            SimModel::Model1 => {
                b[0] + b[1] * x[0]
                    + b[2] * x[0] * x[0]
                    + b[3] * x[1]
                    + b[4] * x[1] * x[1]
                    + 2.0 * b[5] * x[0] * x[1]
            }
            SimModel::Model2 => {
                let u = b[0] + b[1] * x[0] + b[2] * x[1];
                1.0 / (1.0 + u.exp())
            }
        }
    }
}

/// Draw one replication: train data, test covariates, the hidden test
/// outcomes used for scoring, and the truth.
pub fn generate(
    design: &SimDesign,
    stream: &RngStream,
) -> Result<(LabeledDataset, UnlabeledDataset, Vec<f64>, SimTruth)> {
    design.validate()?;
    let mut rng = stream.rng();
    let cov = design.cov.matrix();
    let uniform = |r: &mut rand_chacha::ChaCha8Rng| -> f64 { rand::Rng::random::<f64>(r) * 2.0 - 1.0 };
    let theta = Vector::from_vec(vec![uniform(&mut rng), uniform(&mut rng)]);
    let theta_test = Vector::from_vec(vec![uniform(&mut rng), uniform(&mut rng)]);
    let truth = SimTruth {
        model: design.model,
        beta: design.beta_true.clone(),
    };

    let train_draws = sample_mvnormal(&mut rng, &theta, &cov, design.n)?;
    let mut x = Vec::with_capacity(design.n * 2);
    for v in &train_draws {
        x.push(v[0]);
        x.push(v[1]);
    }
    let y: Vec<f64> = train_draws
        .iter()
        .map(|v| draw_outcome(&truth, &[v[0], v[1]], &mut rng))
        .collect();

    let test_draws = sample_mvnormal(&mut rng, &theta_test, &cov, design.m)?;
    let mut xt = Vec::with_capacity(design.m * 2);
    for v in &test_draws {
        xt.push(v[0]);
        xt.push(v[1]);
    }
    let hidden: Vec<f64> = test_draws
        .iter()
        .map(|v| draw_outcome(&truth, &[v[0], v[1]], &mut rng))
        .collect();

    Ok((
        LabeledDataset::new(x, y, design.n, 2)?,
        UnlabeledDataset::new(xt, design.m, 2)?,
        hidden,
        truth,
    ))
}

fn draw_outcome(truth: &SimTruth, x: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    match truth.model {
        SimModel::Model1 => {
            let eps: f64 = StandardNormal.sample(rng);
            truth.f0(x) + eps
        }
        SimModel::Model2 => f64::from(rand::Rng::random::<f64>(rng) < truth.f0(x)),
    }
}

/// Mean squared error of predictions against the hidden outcomes.
pub fn evaluate_mse(predictions: &[f64], hidden: &[f64]) -> Result<f64> {
    if predictions.len() != hidden.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: hidden.len(),
        });
    }
    let m = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(hidden)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / m)
}

/// Estimators the benchmark can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ols,
    Wls,
    Np,
    Dr,
    WlsCf,
    CsaNpCf,
    DrNoCf,
    CsaNp,
    Sdb,
    Scsa,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Ols,
        Method::Wls,
        Method::Np,
        Method::Dr,
        Method::WlsCf,
        Method::CsaNpCf,
        Method::DrNoCf,
        Method::CsaNp,
        Method::Sdb,
        Method::Scsa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Wls => "wls",
            Method::Np => "np",
            Method::Dr => "dr",
            Method::WlsCf => "wls_cf",
            Method::CsaNpCf => "csa_np_cf",
            Method::DrNoCf => "dr_nocf",
            Method::CsaNp => "csa_np",
            Method::Sdb => "sdb",
            Method::Scsa => "scsa",
        }
    }

    pub fn parse(token: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == token.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{token}'")))
    }

    /// Specification cells this method runs: the nonparametric baseline has no
    /// parametric basis, everything else runs misspecified and correct.
    pub fn specs(&self) -> &'static [SpecTag] {
        match self {
            Method::Np => &[SpecTag::Na],
            _ => &[SpecTag::Misspecified, SpecTag::Correct],
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Method::Ols => 1,
            Method::Wls => 2,
            Method::Np => 3,
            Method::Dr => 4,
            Method::WlsCf => 5,
            Method::CsaNpCf => 6,
            Method::DrNoCf => 7,
            Method::CsaNp => 8,
            Method::Sdb => 9,
            Method::Scsa => 10,
        }
    }
}

/// Model specification cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecTag {
    Misspecified,
    Correct,
    Na,
}

impl SpecTag {
    pub fn name(&self) -> &'static str {
        match self {
            SpecTag::Misspecified => "misspecified",
            SpecTag::Correct => "correct",
            SpecTag::Na => "na",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            SpecTag::Misspecified => 0,
            SpecTag::Correct => 1,
            SpecTag::Na => 2,
        }
    }
}

fn model_spec_for(model: SimModel, spec: SpecTag) -> ModelSpec {
    match (model, spec) {
        (_, SpecTag::Misspecified) | (_, SpecTag::Na) => {
            ModelSpec::new(ModelKind::LinearBasis, Basis::Affine)
        }
        (SimModel::Model1, SpecTag::Correct) => ModelSpec::new(ModelKind::LinearBasis, Basis::Quad2d),
        (SimModel::Model2, SpecTag::Correct) => ModelSpec::new(ModelKind::Logistic, Basis::Affine),
    }
}

/// One scored cell of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: Method,
    pub spec: SpecTag,
    pub replication: usize,
    pub mse: f64,
    pub seed: u64,
}

/// A cell that failed to fit; the run continues.
#[derive(Debug, Clone)]
pub struct CellFailure {
    pub method: Method,
    pub spec: SpecTag,
    pub replication: usize,
    pub message: String,
}

/// Raw benchmark output.
#[derive(Debug, Clone, Default)]
pub struct BenchOutput {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<CellFailure>,
}

/// Aggregated cell: mean and standard deviation of the MSEs.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub method: Method,
    pub spec: SpecTag,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

fn predictions_for(
    method: Method,
    spec_tag: SpecTag,
    train: &LabeledDataset,
    test: &UnlabeledDataset,
    config: &EstimatorConfig,
    model: SimModel,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let spec = model_spec_for(model, spec_tag);
    let opt = OptimSettings {
        tol: config.optimizer_tol,
        max_iter: config.optimizer_max_iter,
    };
    let predict_all = |m: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        (0..test.m()).map(|j| m(test.row(j))).collect()
    };
    match method {
        Method::Ols => {
            let fit = ols_fit(train, &spec, &opt)?;
            Ok(predict_all(&|x| fit.predict(x)))
        }
        Method::Wls => {
            let ratio = ulsif_fit_auto(
                &train.covariates_only(),
                test,
                &config.ulsif_sigma_grid,
                &config.ulsif_lambda_grid,
                config.ratio_clip,
                &stream.derive(1),
            )?;
            let weights: Vec<f64> = (0..train.n()).map(|i| ratio.predict(train.row(i))).collect();
            let fit = wls_fit(train, &spec, &weights, &opt)?;
            Ok(predict_all(&|x| fit.predict(x)))
        }
        Method::Np => {
            let fit = krr_fit_auto(
                train,
                &config.krr_sigma_grid,
                &config.krr_lambda_grid,
                &stream.derive(1),
            )?;
            Ok(predict_all(&|x| fit.predict(x)))
        }
        Method::WlsCf => {
            // Importance weighting with cross-fitted weights: fold-ℓ samples
            // are weighted by the ratio fitted on the complement folds. The
            // per-fold scale keeps the weighted risk equal to the fold-summed
            // objective when fold sizes differ.
            let plan = make_fold_plan(train.n(), test.m(), config.xi, &stream.derive(2))?;
            let mut weights = vec![0.0; train.n()];
            for l in 0..plan.xi() {
                let fit_train = train.subset(&plan.train_complement(l)).covariates_only();
                let fit_test = test.subset(&plan.test_complement(l));
                let ratio = ulsif_fit_auto(
                    &fit_train,
                    &fit_test,
                    &config.ulsif_sigma_grid,
                    &config.ulsif_lambda_grid,
                    config.ratio_clip,
                    &stream.derive(3 + l as u64),
                )?;
                let fold = plan.train_fold(l);
                let scale = (train.n() as f64 / plan.xi() as f64) / fold.len() as f64;
                for &i in fold {
                    weights[i] = ratio.predict(train.row(i)) * scale;
                }
            }
            if !weights.iter().any(|w| *w > 0.0) {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let fit = wls_fit(train, &spec, &weights, &opt)?;
            Ok(predict_all(&|x| fit.predict(x)))
        }
        Method::Dr | Method::Sdb | Method::Scsa | Method::CsaNpCf | Method::DrNoCf | Method::CsaNp => {
            let zero_ratio = || {
                Some(NuisanceOverride::Shared(
                    Arc::new(|_: &[f64]| 0.0) as crate::drcsa::SharedFn
                ))
            };
            let fit = match method {
                Method::Dr => dr_fit(train, test, config, &spec, stream)?,
                Method::Sdb => sdb_fit(train, test, config, &spec, stream)?,
                Method::Scsa => scsa_fit(train, test, config, &spec, stream)?,
                Method::CsaNpCf => fit_with_options(
                    train,
                    test,
                    config,
                    &spec,
                    Variant::Dr,
                    &FitOptions {
                        ratio_override: zero_ratio(),
                        ..FitOptions::default()
                    },
                    stream,
                )?,
                Method::DrNoCf => fit_with_options(
                    train,
                    test,
                    config,
                    &spec,
                    Variant::Dr,
                    &FitOptions {
                        no_cross_fit: true,
                        ..FitOptions::default()
                    },
                    stream,
                )?,
                Method::CsaNp => fit_with_options(
                    train,
                    test,
                    config,
                    &spec,
                    Variant::Dr,
                    &FitOptions {
                        no_cross_fit: true,
                        ratio_override: zero_ratio(),
                        ..FitOptions::default()
                    },
                    stream,
                )?,
                _ => unreachable!(),
            };
            Ok(predict_all(&|x| fit.model.predict(x)))
        }
    }
}

/// Run one replication of the benchmark; deterministic in
/// `(design.seed, replication)` alone.
pub fn run_replication(
    design: &SimDesign,
    methods: &[Method],
    config: &EstimatorConfig,
    replication: usize,
) -> (Vec<BenchRecord>, Vec<CellFailure>) {
    let rep_stream = RngStream::with_stream(design.seed, replication as u64);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let (train, test, hidden, _truth) = match generate(design, &rep_stream.derive(0xDA7A)) {
        Ok(data) => data,
        Err(e) => {
            for &method in methods {
                for &spec in method.specs() {
                    failures.push(CellFailure {
                        method,
                        spec,
                        replication,
                        message: format!("data generation failed: {e}"),
                    });
                }
            }
            return (records, failures);
        }
    };
    for &method in methods {
        for &spec in method.specs() {
            let cell_stream = rep_stream.derive(0x4D00 + method.salt() * 4 + spec.salt());
            match predictions_for(method, spec, &train, &test, config, design.model, &cell_stream)
                .and_then(|preds| evaluate_mse(&preds, &hidden))
            {
                Ok(mse) => records.push(BenchRecord {
                    method,
                    spec,
                    replication,
                    mse,
                    seed: rep_stream.stream(),
                }),
                Err(e) => failures.push(CellFailure {
                    method,
                    spec,
                    replication,
                    message: e.to_string(),
                }),
            }
        }
    }
    (records, failures)
}

/// Run the full benchmark; replications execute in parallel, each on its own
/// stream, and the output order is independent of scheduling.
pub fn run_benchmark(
    design: &SimDesign,
    methods: &[Method],
    config: &EstimatorConfig,
) -> Result<BenchOutput> {
    design.validate()?;
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let per_rep: Vec<(Vec<BenchRecord>, Vec<CellFailure>)> = (0..design.replications)
        .into_par_iter()
        .map(|rep| run_replication(design, methods, config, rep))
        .collect();
    let mut out = BenchOutput::default();
    for (records, failures) in per_rep {
        out.records.extend(records);
        out.failures.extend(failures);
    }
    Ok(out)
}

/// Aggregate records into per-cell mean and (sample) standard deviation,
/// in the method/spec order of `methods`.
pub fn summarize(records: &[BenchRecord], methods: &[Method]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &method in methods {
        for &spec in method.specs() {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.spec == spec)
                .map(|r| r.mse)
                .collect();
            let count = values.len();
            let (mean, sd) = if count == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = values.iter().sum::<f64>() / count as f64;
                let sd = if count > 1 {
                    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (count as f64 - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
                (mean, sd)
            };
            cells.push(CellSummary {
                method,
                spec,
                mean,
                sd,
                count,
            });
        }
    }
    cells
}

/// Serialize a float with 17 significant digits (round-trippable).
pub fn format_g17(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// `records.csv`: one record per row, replication-major order.
pub fn records_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("method,spec,replication,mse,seed\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method.name(),
            r.spec.name(),
            r.replication,
            format_g17(r.mse),
            r.seed
        ));
    }
    out
}

/// `summary.csv`: one mean row and one sd row per design cell, with one value
/// column per method×spec cell.
pub fn summary_csv(design: &SimDesign, methods: &[Method], cells: &[CellSummary]) -> String {
    let model = match design.model {
        SimModel::Model1 => "model1",
        SimModel::Model2 => "model2",
    };
    let cov = match design.cov {
        CovStructure::IndepX => "indep",
        CovStructure::CorrX => "corr",
    };
    let mut header = String::from("model,cov,stat");
    for &method in methods {
        for &spec in method.specs() {
            let col = match spec {
                SpecTag::Na => method.name().to_string(),
                SpecTag::Misspecified => format!("{}_mis", method.name()),
                SpecTag::Correct => format!("{}_cor", method.name()),
            };
            header.push(',');
            header.push_str(&col);
        }
    }
    header.push('\n');
    let mut mean_row = format!("{model},{cov},mean");
    let mut sd_row = format!("{model},{cov},sd");
    for cell in cells {
        mean_row.push(',');
        mean_row.push_str(&format_g17(cell.mean));
        sd_row.push(',');
        sd_row.push_str(&format_g17(cell.sd));
    }
    mean_row.push('\n');
    sd_row.push('\n');
    header + &mean_row + &sd_row
}
