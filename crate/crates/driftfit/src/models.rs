//! Parametric regression models `g_β` (linear-in-basis and logistic) with
//! analytic first and second derivatives, OLS/WLS fits of both kinds, and the
//! Gaussian-kernel ridge regressor used as the nonparametric estimate of
//! `E[Y | X = x]`.
//!
//! Both kinds minimize squared risks: the logistic fits use damped Newton on
//! the (weighted) squared error, not the likelihood, so that every estimator
//! in the crate targets the same family of risk functionals.

use crate::datamodel::{partition_indices, LabeledDataset};
use crate::density_ratio::gaussian_kernel;
use crate::numkit::{median_pairwise_distance, solve_spd, Matrix, RngStream, Vector};
use crate::optim::minimize_damped_newton;
use crate::{Error, Result};

/// Covariate-to-feature map `Z: ℝ^d → ℝ^k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Basis {
    /// `(1, x_1, …, x_d)`.
    Affine,
    /// The six quadratic terms in two covariates: `(1, x1, x1², x2, x2², x1·x2)`.
    Quad2d,
    /// Explicit monomial list; each entry holds one exponent per covariate.
    Monomials(Vec<Vec<u32>>),
}

impl Basis {
    /// Feature dimension `k` for input dimension `d`.
    pub fn k(&self, d: usize) -> usize {
        match self {
            Basis::Affine => d + 1,
            Basis::Quad2d => 6,
            Basis::Monomials(terms) => terms.len(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Basis::Affine => Ok(()),
            Basis::Quad2d if d == 2 => Ok(()),
            Basis::Quad2d => Err(Error::InvalidConfig(format!(
                "quad2d basis needs d = 2, got d = {d}"
            ))),
            Basis::Monomials(terms) => {
                if terms.is_empty() {
                    return Err(Error::InvalidConfig("monomial basis must be non-empty".into()));
                }
                for t in terms {
                    if t.len() != d {
                        return Err(Error::InvalidConfig(format!(
                            "monomial exponent vector has length {}, expected {d}",
                            t.len()
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Evaluate `Z(x)`.
    pub fn features(&self, x: &[f64]) -> Vector {
        match self {
            Basis::Affine => {
                let mut z = Vector::zeros(x.len() + 1);
                z[0] = 1.0;
                for (i, v) in x.iter().enumerate() {
                    z[i + 1] = *v;
                }
                z
            }
            Basis::Quad2d => Vector::from_vec(vec![
                1.0,
                x[0],
                x[0] * x[0],
                x[1],
                x[1] * x[1],
                x[0] * x[1],
            ]),
            Basis::Monomials(terms) => Vector::from_fn(terms.len(), |t, _| {
                terms[t]
                    .iter()
                    .zip(x)
                    .map(|(&p, &v)| v.powi(p as i32))
                    .product()
            }),
        }
    }

    /// Human-readable term names, used for coefficient tables.
    pub fn term_names(&self, d: usize) -> Vec<String> {
        let monomial_name = |t: &[u32]| -> String {
            let factors: Vec<String> = t
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0)
                .map(|(i, &p)| {
                    if p == 1 {
                        format!("x{}", i + 1)
                    } else {
                        format!("x{}^{}", i + 1, p)
                    }
                })
                .collect();
            if factors.is_empty() {
                "1".to_string()
            } else {
                factors.join("*")
            }
        };
        match self {
            Basis::Affine => {
                let mut names = vec!["1".to_string()];
                names.extend((1..=d).map(|i| format!("x{i}")));
                names
            }
            Basis::Quad2d => ["1", "x1", "x1^2", "x2", "x2^2", "x1*x2"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Basis::Monomials(terms) => terms.iter().map(|t| monomial_name(t)).collect(),
        }
    }

    /// Parse `"affine"`, `"quad2d"`, or a comma-separated monomial list such
    /// as `"1,x1,x2,x1*x2,x1^2"` (covariate dimension `d` fixes the exponent
    /// vector length).
    pub fn parse(text: &str, d: usize) -> Result<Basis> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("affine") {
            return Ok(Basis::Affine);
        }
        if t.eq_ignore_ascii_case("quad2d") {
            let b = Basis::Quad2d;
            b.validate(d)?;
            return Ok(b);
        }
        let mut terms = Vec::new();
        for raw in t.split(',') {
            let term = raw.trim();
            if term.is_empty() {
                return Err(Error::InvalidConfig(format!("empty monomial in basis '{text}'")));
            }
            let mut exps = vec![0u32; d];
            if term != "1" {
                for factor in term.split('*') {
                    let f = factor.trim();
                    let (var, pow) = match f.split_once('^') {
                        Some((v, p)) => {
                            let pow: u32 = p.trim().parse().map_err(|_| {
                                Error::InvalidConfig(format!("bad exponent in '{f}'"))
                            })?;
                            (v.trim(), pow)
                        }
                        None => (f, 1),
                    };
                    let idx: usize = var
                        .strip_prefix('x')
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::InvalidConfig(format!("bad factor '{f}'")))?;
                    if idx == 0 || idx > d {
                        return Err(Error::InvalidConfig(format!(
                            "variable x{idx} out of range for d = {d}"
                        )));
                    }
                    exps[idx - 1] += pow;
                }
            }
            terms.push(exps);
        }
        Ok(Basis::Monomials(terms))
    }
}

/// Link of the parametric model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `g_β(x) = Zᵀ(x) β`.
    LinearBasis,
    /// `g_β(x) = 1 / (1 + exp(−Zᵀ(x) β))`; output increases in `Zᵀβ`.
    Logistic,
}

/// The parametric class: a link plus a feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub basis: Basis,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, basis: Basis) -> Self {
        Self { kind, basis }
    }

    pub fn k(&self, d: usize) -> usize {
        self.basis.k(d)
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// A fitted parametric model `g_β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    pub spec: ModelSpec,
    pub beta: Vector,
}

impl ParametricModel {
    pub fn new(spec: ModelSpec, beta: Vector) -> Self {
        Self { spec, beta }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let u = self.spec.basis.features(x).dot(&self.beta);
        match self.spec.kind {
            ModelKind::LinearBasis => u,
            ModelKind::Logistic => sigmoid(u),
        }
    }

    /// `∂g_β(x)/∂β`.
    pub fn grad(&self, x: &[f64]) -> Vector {
        let z = self.spec.basis.features(x);
        match self.spec.kind {
            ModelKind::LinearBasis => z,
            ModelKind::Logistic => {
                let s = sigmoid(z.dot(&self.beta));
                z * (s * (1.0 - s))
            }
        }
    }

    /// `(∂²g_β(x)/∂β∂βᵀ) · v`; identically zero for the linear kind.
    pub fn hess_contract(&self, x: &[f64], v: &Vector) -> Vector {
        let z = self.spec.basis.features(x);
        match self.spec.kind {
            ModelKind::LinearBasis => Vector::zeros(z.len()),
            ModelKind::Logistic => {
                let s = sigmoid(z.dot(&self.beta));
                let curvature = s * (1.0 - s) * (1.0 - 2.0 * s);
                let zv = z.dot(v);
                z * (curvature * zv)
            }
        }
    }
}

/// Stopping rules for the iterative fits.
#[derive(Debug, Clone, Copy)]
pub struct OptimSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

/// Minimizer of the unweighted empirical squared risk.
pub fn ols_fit(data: &LabeledDataset, spec: &ModelSpec, opt: &OptimSettings) -> Result<ParametricModel> {
    let weights = vec![1.0; data.n()];
    wls_fit(data, spec, &weights, opt)
}

/// Minimizer of the weighted empirical squared risk
/// `(1/n) Σ_i w_i (Y_i − g_β(X_i))²`. Linear kind solves the normal equations
/// `ZᵀWZ β = ZᵀWY`; the logistic kind runs damped Newton from β = 0.
pub fn wls_fit(
    data: &LabeledDataset,
    spec: &ModelSpec,
    weights: &[f64],
    opt: &OptimSettings,
) -> Result<ParametricModel> {
    spec.basis.validate(data.dim())?;
    if weights.len() != data.n() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: data.n(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidData("weights must be finite and >= 0".into()));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::InvalidData("at least one weight must be positive".into()));
    }
    let n = data.n();
    let k = spec.k(data.dim());
    let features: Vec<Vector> = (0..n).map(|i| spec.basis.features(data.row(i))).collect();
    let y = data.y();

    match spec.kind {
        ModelKind::LinearBasis => {
            let mut ztwz = Matrix::zeros(k, k);
            let mut ztwy = Vector::zeros(k);
            for i in 0..n {
                ztwz.ger(weights[i], &features[i], &features[i], 1.0);
                ztwy += &features[i] * (weights[i] * y[i]);
            }
            let beta = solve_spd(&ztwz, &ztwy)?;
            Ok(ParametricModel::new(spec.clone(), beta))
        }
        ModelKind::Logistic => {
            let value = |beta: &Vector| -> f64 {
                let mut risk = 0.0;
                for i in 0..n {
                    let r = y[i] - sigmoid(features[i].dot(beta));
                    risk += weights[i] * r * r;
                }
                risk / n as f64
            };
            let gradient = |beta: &Vector| -> Vector {
                let mut g = Vector::zeros(k);
                for i in 0..n {
                    let u = features[i].dot(beta);
                    let s = sigmoid(u);
                    let sp = s * (1.0 - s);
                    g += &features[i] * (-2.0 / n as f64 * weights[i] * (y[i] - s) * sp);
                }
                g
            };
            let hessian = |beta: &Vector| -> Matrix {
                let mut h = Matrix::zeros(k, k);
                for i in 0..n {
                    let u = features[i].dot(beta);
                    let s = sigmoid(u);
                    let sp = s * (1.0 - s);
                    let spp = sp * (1.0 - 2.0 * s);
                    let coeff = 2.0 / n as f64 * weights[i] * (sp * sp - (y[i] - s) * spp);
                    h.ger(coeff, &features[i], &features[i], 1.0);
                }
                h
            };
            let out = minimize_damped_newton(Vector::zeros(k), value, gradient, hessian, opt.tol, opt.max_iter);
            if !out.converged {
                return Err(Error::NoConvergence {
                    iterations: out.iterations,
                    grad_norm: out.grad_norm,
                    best_beta: out.beta.as_slice().to_vec(),
                });
            }
            Ok(ParametricModel::new(spec.clone(), out.beta))
        }
    }
}

/// Gaussian-kernel ridge regressor: dual weights solve `(K + λ n I) α = Y`.
#[derive(Debug, Clone)]
pub struct KrrModel {
    x: Vec<f64>,
    n: usize,
    d: usize,
    alpha: Vector,
    sigma: f64,
    lambda: f64,
}

impl KrrModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        (0..self.n)
            .map(|i| self.alpha[i] * gaussian_kernel(x, &self.x[i * self.d..(i + 1) * self.d], self.sigma))
            .sum()
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Fit kernel ridge regression with bandwidth `sigma` and ridge `lambda`.
pub fn krr_fit(data: &LabeledDataset, sigma: f64, lambda: f64) -> Result<KrrModel> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = data.n();
    let d = data.dim();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        gram[(i, i)] = 1.0 + lambda * n as f64;
        for j in (i + 1)..n {
            let kij = gaussian_kernel(data.row(i), data.row(j), sigma);
            gram[(i, j)] = kij;
            gram[(j, i)] = kij;
        }
    }
    let y = Vector::from_column_slice(data.y());
    let alpha = solve_spd(&gram, &y)?;
    Ok(KrrModel {
        x: data.covariates().to_vec(),
        n,
        d,
        alpha,
        sigma,
        lambda,
    })
}

/// Grid cross-validation for KRR by held-out mean squared error. Ties prefer
/// larger lambda, then larger sigma. `sigma_grid` is absolute here.
pub fn krr_cv(
    data: &LabeledDataset,
    sigma_grid: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    if sigma_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("cv grids must be non-empty".into()));
    }
    if folds < 2 || data.n() < folds {
        return Err(Error::TooFewSamples {
            needed: folds.max(2),
            got: data.n(),
        });
    }
    let plan = partition_indices(data.n(), folds, &stream.derive(0x6B72));
    let all: Vec<usize> = (0..data.n()).collect();
    let mut splits = Vec::with_capacity(folds);
    for fold in &plan {
        let fit_idx: Vec<usize> = all.iter().copied().filter(|i| fold.binary_search(i).is_err()).collect();
        splits.push((data.subset(&fit_idx), data.subset(fold)));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &sigma in sigma_grid {
        for &lambda in lambda_grid {
            let mut mse = 0.0;
            for (fit, eval) in &splits {
                let model = krr_fit(fit, sigma, lambda)?;
                let fold_mse: f64 = (0..eval.n())
                    .map(|i| {
                        let e = eval.y()[i] - model.predict(eval.row(i));
                        e * e
                    })
                    .sum::<f64>()
                    / eval.n() as f64;
                mse += fold_mse;
            }
            mse /= folds as f64;
            let better = match best {
                None => true,
                Some((bm, bs, bl)) => {
                    mse < bm || (mse == bm && (lambda > bl || (lambda == bl && sigma > bs)))
                }
            };
            if better {
                best = Some((mse, sigma, lambda));
            }
        }
    }
    let (_, sigma, lambda) = best.expect("non-empty grid");
    Ok((sigma, lambda))
}

/// Fit KRR with data-driven hyperparameters: `sigma_scale_grid` entries are
/// multiples of the median pairwise distance of the training covariates, and
/// the `(sigma, lambda)` pair is selected by two-fold cross-validation
/// (skipped when both grids are singletons).
pub fn krr_fit_auto(
    data: &LabeledDataset,
    sigma_scale_grid: &[f64],
    lambda_grid: &[f64],
    stream: &RngStream,
) -> Result<KrrModel> {
    let med = median_pairwise_distance(data.covariates(), data.n(), data.dim());
    let sigma_grid: Vec<f64> = sigma_scale_grid.iter().map(|s| s * med).collect();
    let (sigma, lambda) = if sigma_grid.len() == 1 && lambda_grid.len() == 1 {
        (sigma_grid[0], lambda_grid[0])
    } else {
        krr_cv(data, &sigma_grid, lambda_grid, 2, &stream.derive(0xB1))?
    };
    krr_fit(data, sigma, lambda)
}
