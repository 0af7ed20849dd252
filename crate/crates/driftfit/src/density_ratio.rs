//! Density-ratio estimation `r̂(x) ≈ q(x)/p(x)` by unconstrained least-squares
//! importance fitting (uLSIF) over a Gaussian kernel basis.
//!
//! The estimator minimizes the empirical squared-error surrogate
//! `(1/2n) Σ_i s(X_i)² − (1/m) Σ_j s(X̃_j) + (λ/2)·‖θ‖²` over linear-in-basis
//! functions `s(x) = θᵀφ(x)`, which reduces to the normal equations
//! `(Ĥ + λI) θ = ĥ` with `Ĥ = (1/n) Σ_i φ(X_i)φᵀ(X_i)` over the train
//! covariates and `ĥ = (1/m) Σ_j φ(X̃_j)` over the test covariates.
//! Predictions are clamped to `[0, clip]`: the lower clamp is the usual
//! non-negativity correction, the upper clamp enforces a bounded ratio.

use rand::seq::index::sample as sample_indices;

use crate::datamodel::{make_fold_plan, UnlabeledDataset};
use crate::numkit::{median_pairwise_distance, solve_spd, Matrix, RngStream, Vector};
use crate::{Error, Result};

/// Gaussian kernel `exp(−‖x−c‖² / (2σ²))`.
pub fn gaussian_kernel(x: &[f64], c: &[f64], sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    debug_assert_eq!(x.len(), c.len());
    let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Fitted uLSIF model: kernel centers, coefficients, and the clip bound.
#[derive(Debug, Clone)]
pub struct DensityRatioModel {
    centers: Vec<f64>,
    b: usize,
    d: usize,
    theta: Vector,
    sigma: f64,
    lambda: f64,
    clip: f64,
}

impl DensityRatioModel {
    /// `clamp(θᵀφ(x), 0, clip)`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        let mut s = 0.0;
        for k in 0..self.b {
            let c = &self.centers[k * self.d..(k + 1) * self.d];
            s += self.theta[k] * gaussian_kernel(x, c, self.sigma);
        }
        s.clamp(0.0, self.clip)
    }

    pub fn centers(&self) -> (&[f64], usize, usize) {
        (&self.centers, self.b, self.d)
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    #[cfg(test)]
    pub(crate) fn from_parts(centers: Vec<f64>, b: usize, d: usize, theta: Vector, sigma: f64, clip: f64) -> Self {
        Self { centers, b, d, theta, sigma, lambda: 0.0, clip }
    }
}

fn basis_row(x: &[f64], centers: &[f64], b: usize, d: usize, sigma: f64) -> Vector {
    Vector::from_fn(b, |k, _| gaussian_kernel(x, &centers[k * d..(k + 1) * d], sigma))
}

/// Fit uLSIF with `b` kernel centers sampled without replacement from the test
/// covariates. `train` holds the covariates of the labeled sample.
pub fn ulsif_fit(
    train: &UnlabeledDataset,
    test: &UnlabeledDataset,
    sigma: f64,
    lambda: f64,
    b: usize,
    clip: f64,
    stream: &RngStream,
) -> Result<DensityRatioModel> {
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            what: "ulsif covariate dimension",
            expected: train.dim(),
            got: test.dim(),
        });
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    if b == 0 || b > test.m() {
        return Err(Error::InvalidConfig(format!(
            "center count must satisfy 1 <= b <= m, got b={b}, m={}",
            test.m()
        )));
    }
    let d = train.dim();
    let mut rng = stream.rng();
    let mut chosen: Vec<usize> = sample_indices(&mut rng, test.m(), b).into_vec();
    chosen.sort_unstable();
    let mut centers = Vec::with_capacity(b * d);
    for &j in &chosen {
        centers.extend_from_slice(test.row(j));
    }

    let n = train.m();
    let mut h_mat = Matrix::zeros(b, b);
    for i in 0..n {
        let phi = basis_row(train.row(i), &centers, b, d, sigma);
        h_mat.ger(1.0 / n as f64, &phi, &phi, 1.0);
    }
    let mut h_vec = Vector::zeros(b);
    for j in 0..test.m() {
        h_vec += basis_row(test.row(j), &centers, b, d, sigma) / test.m() as f64;
    }
    let mut a = h_mat;
    for k in 0..b {
        a[(k, k)] += lambda;
    }
    let theta = solve_spd(&a, &h_vec)?;
    Ok(DensityRatioModel {
        centers,
        b,
        d,
        theta,
        sigma,
        lambda,
        clip,
    })
}

/// Empirical uLSIF objective `(1/2)·mean[s²] over train − mean[s] over test`,
/// evaluated with clamped predictions.
pub fn ulsif_objective(
    model: &DensityRatioModel,
    train: &UnlabeledDataset,
    test: &UnlabeledDataset,
) -> f64 {
    let sq: f64 = (0..train.m())
        .map(|i| {
            let s = model.predict(train.row(i));
            s * s
        })
        .sum::<f64>()
        / train.m() as f64;
    let lin: f64 = (0..test.m()).map(|j| model.predict(test.row(j))).sum::<f64>() / test.m() as f64;
    0.5 * sq - lin
}

/// Grid cross-validation for `(sigma, lambda)` by the held-out uLSIF objective,
/// averaged over a joint fold split of both samples. Ties prefer the smoother
/// model: larger lambda, then larger sigma. `sigma_grid` is absolute here.
pub fn ulsif_cv(
    train: &UnlabeledDataset,
    test: &UnlabeledDataset,
    sigma_grid: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    clip: f64,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    if sigma_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("cv grids must be non-empty".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidConfig("cv needs folds >= 2".into()));
    }
    let plan = make_fold_plan(train.m(), test.m(), folds, &stream.derive(0xC5))?;
    // One fitting split and one center draw per fold, shared across the whole
    // grid so candidates are compared on identical data.
    let mut splits = Vec::with_capacity(folds);
    for l in 0..folds {
        let fit_train = train.subset(&plan.train_complement(l));
        let fit_test = test.subset(&plan.test_complement(l));
        let eval_train = train.subset(plan.train_fold(l));
        let eval_test = test.subset(plan.test_fold(l));
        let center_stream = stream.derive(0xCE00 + l as u64);
        splits.push((fit_train, fit_test, eval_train, eval_test, center_stream));
    }
    let mut best: Option<(f64, f64, f64)> = None; // (objective, sigma, lambda)
    for &sigma in sigma_grid {
        for &lambda in lambda_grid {
            let mut obj = 0.0;
            for (fit_train, fit_test, eval_train, eval_test, center_stream) in &splits {
                let b = 100.min(fit_test.m());
                let model = ulsif_fit(fit_train, fit_test, sigma, lambda, b, clip, center_stream)?;
                obj += ulsif_objective(&model, eval_train, eval_test);
            }
            obj /= folds as f64;
            let better = match best {
                None => true,
                Some((bo, bs, bl)) => {
                    obj < bo || (obj == bo && (lambda > bl || (lambda == bl && sigma > bs)))
                }
            };
            if better {
                best = Some((obj, sigma, lambda));
            }
        }
    }
    let (_, sigma, lambda) = best.expect("non-empty grid");
    Ok((sigma, lambda))
}

/// Fit uLSIF with data-driven hyperparameters: `sigma_scale_grid` entries are
/// multiples of the median pairwise distance of the pooled covariates, and the
/// `(sigma, lambda)` pair is selected by two-fold cross-validation (skipped
/// when both grids are singletons). Centers default to `min(100, m)`.
pub fn ulsif_fit_auto(
    train: &UnlabeledDataset,
    test: &UnlabeledDataset,
    sigma_scale_grid: &[f64],
    lambda_grid: &[f64],
    clip: f64,
    stream: &RngStream,
) -> Result<DensityRatioModel> {
    let mut pooled = train.covariates().to_vec();
    pooled.extend_from_slice(test.covariates());
    let med = median_pairwise_distance(&pooled, train.m() + test.m(), train.dim());
    let sigma_grid: Vec<f64> = sigma_scale_grid.iter().map(|s| s * med).collect();
    let (sigma, lambda) = if sigma_grid.len() == 1 && lambda_grid.len() == 1 {
        (sigma_grid[0], lambda_grid[0])
    } else {
        ulsif_cv(train, test, &sigma_grid, lambda_grid, 2, clip, &stream.derive(0xA1))?
    };
    let b = 100.min(test.m());
    ulsif_fit(train, test, sigma, lambda, b, clip, &stream.derive(0xA2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_sample(stream: &RngStream, n: usize, d: usize, shift: f64) -> UnlabeledDataset {
        let mut rng = stream.rng();
        let x: Vec<f64> = (0..n * d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) + shift)
            .collect();
        UnlabeledDataset::new(x, n, d).unwrap()
    }

    #[test]
    fn kernel_at_center_is_one() {
        assert_abs_diff_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7), 1.0);
    }

    #[test]
    fn kernel_analytic_value() {
        // ‖x−c‖² = 2σ² gives e⁻¹.
        let sigma = 1.5;
        let x = [0.0];
        let c = [(2.0f64).sqrt() * sigma];
        assert_abs_diff_eq!(
            gaussian_kernel(&x, &c, sigma),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kernel_monotone_in_sigma() {
        let x = [0.0, 0.0];
        let c = [3.0, -1.0];
        let mut prev = 0.0;
        for sigma in [0.5, 1.0, 2.0, 4.0, 8.0, 1e3] {
            let v = gaussian_kernel(&x, &c, sigma);
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 0.999);
    }

    #[test]
    fn single_center_matches_scalar_normal_equation() {
        let train = UnlabeledDataset::new(vec![0.0, 1.0], 2, 1).unwrap();
        let test = UnlabeledDataset::new(vec![0.5, 2.0], 2, 1).unwrap();
        let (sigma, lambda) = (0.8, 0.05);
        let model = ulsif_fit(&train, &test, sigma, lambda, 1, 50.0, &RngStream::new(3)).unwrap();
        // Recompute the scalar normal equation by hand from the chosen center.
        let (centers, _, _) = model.centers();
        let c = [centers[0]];
        let k = |x: f64| gaussian_kernel(&[x], &c, sigma);
        let h11 = 0.5 * (k(0.0) * k(0.0) + k(1.0) * k(1.0));
        let h1 = 0.5 * (k(0.5) + k(2.0));
        assert_abs_diff_eq!(model.theta()[0], h1 / (h11 + lambda), epsilon = 1e-12);
    }

    #[test]
    fn ridge_dominated_limit_predicts_zero() {
        let stream = RngStream::new(11);
        let train = normal_sample(&stream.derive(1), 60, 1, 0.0);
        let test = normal_sample(&stream.derive(2), 60, 1, 0.0);
        let model = ulsif_fit(&train, &test, 1.0, 1e6, 40, 50.0, &stream.derive(3)).unwrap();
        for j in 0..test.m() {
            assert!(model.predict(test.row(j)) < 1e-3);
        }
    }

    #[test]
    fn normal_equation_residual_small() {
        let stream = RngStream::new(21);
        let train = normal_sample(&stream.derive(1), 200, 2, 0.0);
        let test = normal_sample(&stream.derive(2), 150, 2, 0.4);
        let sigma = median_pairwise_distance(train.covariates(), train.m(), 2);
        let model = ulsif_fit(&train, &test, sigma, 0.01, 80, 50.0, &stream.derive(3)).unwrap();
        // Rebuild Ĥ and ĥ from scratch and check ‖(Ĥ+λI)θ − ĥ‖∞.
        let (centers, b, d) = model.centers();
        let mut h_mat = Matrix::zeros(b, b);
        for i in 0..train.m() {
            let phi = basis_row(train.row(i), centers, b, d, sigma);
            h_mat.ger(1.0 / train.m() as f64, &phi, &phi, 1.0);
        }
        let mut h_vec = Vector::zeros(b);
        for j in 0..test.m() {
            h_vec += basis_row(test.row(j), centers, b, d, sigma) / test.m() as f64;
        }
        let resid = (&h_mat * model.theta() + model.theta() * model.lambda() - h_vec).amax();
        assert!(resid <= 1e-8, "residual {resid}");
    }

    #[test]
    fn theta_norm_monotone_in_lambda() {
        let stream = RngStream::new(31);
        let train = normal_sample(&stream.derive(1), 150, 1, 0.0);
        let test = normal_sample(&stream.derive(2), 150, 1, 0.3);
        let mut prev = f64::INFINITY;
        for lambda in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let model =
                ulsif_fit(&train, &test, 0.9, lambda, 60, 50.0, &stream.derive(3)).unwrap();
            let norm = model.theta().norm();
            assert!(norm <= prev + 1e-12, "lambda {lambda}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn identical_samples_predict_near_one() {
        // p = q with the true ratio 1; a wide kernel and dense centers keep
        // even the tail samples covered.
        let stream = RngStream::new(41);
        let train = normal_sample(&stream.derive(1), 500, 1, 0.0);
        let test = train.clone();
        let sigma = 3.0 * median_pairwise_distance(train.covariates(), train.m(), 1);
        let model = ulsif_fit(&train, &test, sigma, 1e-3, 200, 50.0, &stream.derive(2)).unwrap();
        for i in 0..train.m() {
            let r = model.predict(train.row(i));
            assert!((r - 1.0).abs() <= 0.15, "prediction {r} at sample {i}");
        }
    }

    #[test]
    fn cv_single_element_grids() {
        let stream = RngStream::new(51);
        let train = normal_sample(&stream.derive(1), 40, 1, 0.0);
        let test = normal_sample(&stream.derive(2), 40, 1, 0.0);
        let got = ulsif_cv(&train, &test, &[0.7], &[0.2], 2, 50.0, &stream.derive(3)).unwrap();
        assert_eq!(got, (0.7, 0.2));
    }

    #[test]
    fn cv_prefers_reasonable_bandwidth_on_clusters() {
        // Two well-separated 1D clusters with a shifted test mixture; a kernel
        // 100x wider than the median distance can only fit a constant ratio
        // and scores worse on the held-out objective.
        let stream = RngStream::new(61);
        let mut rng = stream.derive(1).rng();
        let mut draw = |center: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| center + 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let nt = 200;
        // Interleave the clusters so contiguous index splits stay balanced.
        let a = draw(0.0, nt);
        let b = draw(10.0, nt);
        let train_x: Vec<f64> = a.iter().zip(&b).flat_map(|(u, v)| [*u, *v]).collect();
        let c = draw(0.0, nt);
        let d = draw(10.0, 3 * nt);
        let mut test_x = Vec::with_capacity(4 * nt);
        for i in 0..nt {
            test_x.push(c[i]);
            test_x.extend_from_slice(&d[3 * i..3 * i + 3]);
        }
        let train = UnlabeledDataset::new(train_x, 2 * nt, 1).unwrap();
        let test = UnlabeledDataset::new(test_x, 4 * nt, 1).unwrap();
        let sigma_star = median_pairwise_distance(train.covariates(), train.m(), 1);
        let grid = [sigma_star, 100.0 * sigma_star];
        let lambda = 0.1;

        // Independent ordering check on a hand-made half/half split.
        let first_tr: Vec<usize> = (0..nt).collect();
        let second_tr: Vec<usize> = (nt..2 * nt).collect();
        let first_te: Vec<usize> = (0..2 * nt).collect();
        let second_te: Vec<usize> = (2 * nt..4 * nt).collect();
        let mut objectives = Vec::new();
        for &sigma in &grid {
            let model = ulsif_fit(
                &train.subset(&first_tr),
                &test.subset(&first_te),
                sigma,
                lambda,
                100,
                50.0,
                &stream.derive(7),
            )
            .unwrap();
            objectives
                .push(ulsif_objective(&model, &train.subset(&second_tr), &test.subset(&second_te)));
        }
        assert!(objectives[0] < objectives[1], "narrow kernel should win: {objectives:?}");

        let (sigma, _) = ulsif_cv(&train, &test, &grid, &[lambda], 2, 50.0, &stream.derive(8)).unwrap();
        assert_abs_diff_eq!(sigma, sigma_star);
    }

    #[test]
    fn cv_degenerate_identical_samples() {
        let stream = RngStream::new(71);
        let train = normal_sample(&stream.derive(1), 200, 1, 0.0);
        let test = train.clone();
        let sigma0 = median_pairwise_distance(train.covariates(), train.m(), 1);
        let sigmas: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|s| s * sigma0).collect();
        let lambdas = [1e-3, 1e-2, 1e-1, 1.0];
        // All grid points fit near-constant ratios, so held-out objectives
        // cluster tightly.
        let plan_stream = stream.derive(9);
        let first: Vec<usize> = (0..100).collect();
        let second: Vec<usize> = (100..200).collect();
        let mut objectives = Vec::new();
        for &sigma in &sigmas {
            for &lambda in &lambdas {
                let model = ulsif_fit(
                    &train.subset(&first),
                    &test.subset(&first),
                    sigma,
                    lambda,
                    80,
                    50.0,
                    &plan_stream,
                )
                .unwrap();
                objectives.push(ulsif_objective(&model, &train.subset(&second), &test.subset(&second)));
            }
        }
        let max = objectives.iter().cloned().fold(f64::MIN, f64::max);
        let min = objectives.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min <= 0.1, "objective spread {}", max - min);
        ulsif_cv(&train, &test, &sigmas, &lambdas, 2, 50.0, &stream.derive(10)).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn predictions_respect_clamp(
            theta in proptest::collection::vec(-200.0f64..200.0, 1..6),
            x in proptest::collection::vec(-5.0f64..5.0, 2),
            clip in 1.0f64..80.0,
        ) {
            let b = theta.len();
            let mut rng = RngStream::new(99).rng();
            let centers: Vec<f64> = (0..b * 2).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let model = DensityRatioModel::from_parts(centers, b, 2, Vector::from_vec(theta), 1.0, clip);
            let r = model.predict(&x);
            prop_assert!((0.0..=clip).contains(&r));
        }
    }

    #[test]
    fn zero_theta_and_clamp_examples() {
        // θ=0 → 0; θᵀφ negative → 0; θᵀφ above clip → clip.
        let center = vec![0.0];
        let zero = DensityRatioModel::from_parts(center.clone(), 1, 1, Vector::from_vec(vec![0.0]), 1.0, 50.0);
        assert_eq!(zero.predict(&[0.3]), 0.0);
        let neg = DensityRatioModel::from_parts(center.clone(), 1, 1, Vector::from_vec(vec![-0.3]), 1.0, 50.0);
        assert_eq!(neg.predict(&[0.0]), 0.0);
        let big = DensityRatioModel::from_parts(center, 1, 1, Vector::from_vec(vec![120.0]), 1.0, 50.0);
        assert_eq!(big.predict(&[0.0]), 50.0);
    }
}
