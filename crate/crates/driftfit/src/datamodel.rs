//! Datasets, fold plans, and estimator configuration — the shared vocabulary
//! of the estimation pipeline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numkit::RngStream;
use crate::{Error, Result};

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!("{what} contains NaN/Inf")));
    }
    Ok(())
}

/// Labeled train sample `{(Y_i, X_i)}`: covariates row-major, one outcome per row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    x: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    d: usize,
}

impl LabeledDataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidData("dataset needs n >= 1 and d >= 1".into()));
        }
        if x.len() != n * d {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: n * d,
            });
        }
        if y.len() != n {
            return Err(Error::LengthMismatch {
                left: y.len(),
                right: n,
            });
        }
        check_finite(&x, "covariates")?;
        check_finite(&y, "outcomes")?;
        Ok(Self { x, y, n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    /// Copy of the rows (and outcomes) at `indices`.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        LabeledDataset {
            x,
            y,
            n: indices.len(),
            d: self.d,
        }
    }

    /// The covariates alone, as an unlabeled view-copy.
    pub fn covariates_only(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            x: self.x.clone(),
            m: self.n,
            d: self.d,
        }
    }
}

/// Unlabeled test sample `{X̃_j}`: covariates only, row-major.
#[derive(Debug, Clone)]
pub struct UnlabeledDataset {
    x: Vec<f64>,
    m: usize,
    d: usize,
}

impl UnlabeledDataset {
    pub fn new(x: Vec<f64>, m: usize, d: usize) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidData("dataset needs m >= 1 and d >= 1".into()));
        }
        if x.len() != m * d {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: m * d,
            });
        }
        check_finite(&x, "covariates")?;
        Ok(Self { x, m, d })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn subset(&self, indices: &[usize]) -> UnlabeledDataset {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        for &j in indices {
            x.extend_from_slice(self.row(j));
        }
        UnlabeledDataset {
            x,
            m: indices.len(),
            d: self.d,
        }
    }
}

/// Partition `0..n` into `k` sorted folds by a seeded uniform permutation.
/// Fold sizes differ by at most one; leftovers go to the lowest-numbered folds.
pub fn partition_indices(n: usize, k: usize, stream: &RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for l in 0..k {
        let size = base + usize::from(l < extra);
        let mut fold: Vec<usize> = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    folds
}

/// ξ-fold joint partition of train and test indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    xi: usize,
    train_folds: Vec<Vec<usize>>,
    test_folds: Vec<Vec<usize>>,
    seed: (u64, u64),
}

impl FoldPlan {
    pub fn xi(&self) -> usize {
        self.xi
    }

    pub fn train_fold(&self, l: usize) -> &[usize] {
        &self.train_folds[l]
    }

    pub fn test_fold(&self, l: usize) -> &[usize] {
        &self.test_folds[l]
    }

    /// Union of the other train folds: the indices `D_(-l)` is fitted on.
    pub fn train_complement(&self, l: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .train_folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != l)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn test_complement(&self, l: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .test_folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != l)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Fold id of train index `i`.
    pub fn train_fold_of(&self, i: usize) -> usize {
        self.train_folds
            .iter()
            .position(|f| f.binary_search(&i).is_ok())
            .expect("index outside plan")
    }

    /// Degenerate single-fold plan used when cross-fitting is disabled:
    /// everything is both fitting and evaluation data.
    pub fn single_fold(n: usize, m: usize) -> Self {
        FoldPlan {
            xi: 1,
            train_folds: vec![(0..n).collect()],
            test_folds: vec![(0..m).collect()],
            seed: (0, 0),
        }
    }
}

/// Build a ξ-fold plan: independent uniform permutations of the train and test
/// index ranges, chopped into near-equal blocks. Deterministic in `(n, m, xi, stream)`.
pub fn make_fold_plan(n: usize, m: usize, xi: usize, stream: &RngStream) -> Result<FoldPlan> {
    if xi < 2 {
        return Err(Error::InvalidConfig(format!("fold count must be >= 2, got {xi}")));
    }
    if n < xi {
        return Err(Error::TooFewSamples { needed: xi, got: n });
    }
    if m < xi {
        return Err(Error::TooFewSamples { needed: xi, got: m });
    }
    Ok(FoldPlan {
        xi,
        train_folds: partition_indices(n, xi, &stream.derive(0x7261_696e)),
        test_folds: partition_indices(m, xi, &stream.derive(0x7465_7374)),
        seed: (stream.seed(), stream.stream()),
    })
}

fn default_xi() -> usize {
    2
}
fn default_ratio_clip() -> f64 {
    50.0
}
fn default_optimizer_tol() -> f64 {
    1e-9
}
fn default_optimizer_max_iter() -> usize {
    200
}
fn default_ulsif_lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0]
}
fn default_ulsif_sigma_grid() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}
// Regression wants far less ridge and wider kernels than ratio fitting: with a
// near-flat kernel and tiny ridge, KRR acts as a global polynomial smoother,
// which survives covariate shift much better.
fn default_krr_lambda_grid() -> Vec<f64> {
    vec![1e-6, 1e-5, 1e-4, 1e-3]
}
fn default_krr_sigma_grid() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}
fn default_scsa_alpha() -> f64 {
    0.5
}

/// Knobs of the estimation pipeline. Serializes to/from a flat JSON object.
///
/// The sigma grids are scale factors applied to the median pairwise distance
/// of the data being fitted; the lambda grids are absolute ridge penalties.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimatorConfig {
    #[serde(default = "default_xi")]
    pub xi: usize,
    #[serde(default = "default_ratio_clip")]
    pub ratio_clip: f64,
    #[serde(default = "default_optimizer_tol")]
    pub optimizer_tol: f64,
    #[serde(default = "default_optimizer_max_iter")]
    pub optimizer_max_iter: usize,
    #[serde(default = "default_ulsif_lambda_grid")]
    pub ulsif_lambda_grid: Vec<f64>,
    #[serde(default = "default_ulsif_sigma_grid")]
    pub ulsif_sigma_grid: Vec<f64>,
    #[serde(default = "default_krr_lambda_grid")]
    pub krr_lambda_grid: Vec<f64>,
    #[serde(default = "default_krr_sigma_grid")]
    pub krr_sigma_grid: Vec<f64>,
    #[serde(default = "default_scsa_alpha")]
    pub scsa_alpha: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            xi: default_xi(),
            ratio_clip: default_ratio_clip(),
            optimizer_tol: default_optimizer_tol(),
            optimizer_max_iter: default_optimizer_max_iter(),
            ulsif_lambda_grid: default_ulsif_lambda_grid(),
            ulsif_sigma_grid: default_ulsif_sigma_grid(),
            krr_lambda_grid: default_krr_lambda_grid(),
            krr_sigma_grid: default_krr_sigma_grid(),
            scsa_alpha: default_scsa_alpha(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi < 2 {
            return Err(Error::InvalidConfig("xi must be >= 2".into()));
        }
        if !self.ratio_clip.is_finite() || self.ratio_clip <= 0.0 {
            return Err(Error::InvalidConfig("ratio_clip must be > 0".into()));
        }
        if !self.optimizer_tol.is_finite() || self.optimizer_tol <= 0.0 {
            return Err(Error::InvalidConfig("optimizer_tol must be > 0".into()));
        }
        if self.optimizer_max_iter == 0 {
            return Err(Error::InvalidConfig("optimizer_max_iter must be >= 1".into()));
        }
        for (name, grid) in [
            ("ulsif_lambda_grid", &self.ulsif_lambda_grid),
            ("ulsif_sigma_grid", &self.ulsif_sigma_grid),
            ("krr_lambda_grid", &self.krr_lambda_grid),
            ("krr_sigma_grid", &self.krr_sigma_grid),
        ] {
            if grid.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} must be non-empty")));
            }
            if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.ulsif_sigma_grid.iter().any(|v| *v <= 0.0)
            || self.krr_sigma_grid.iter().any(|v| *v <= 0.0)
        {
            return Err(Error::InvalidConfig("sigma grids must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.scsa_alpha) {
            return Err(Error::InvalidConfig("scsa_alpha must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fold_plan_even_split() {
        let plan = make_fold_plan(4, 4, 2, &RngStream::new(1)).unwrap();
        assert_eq!(plan.train_fold(0).len(), 2);
        assert_eq!(plan.train_fold(1).len(), 2);
        assert_eq!(plan.test_fold(0).len(), 2);
        let mut all: Vec<usize> = plan.train_fold(0).to_vec();
        all.extend_from_slice(plan.train_fold(1));
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fold_plan_uneven_split() {
        let plan = make_fold_plan(5, 5, 2, &RngStream::new(2)).unwrap();
        assert_eq!(plan.train_fold(0).len(), 3);
        assert_eq!(plan.train_fold(1).len(), 2);
    }

    #[test]
    fn fold_plan_deterministic() {
        let a = make_fold_plan(17, 9, 3, &RngStream::new(33)).unwrap();
        let b = make_fold_plan(17, 9, 3, &RngStream::new(33)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_plan_too_few_samples() {
        assert!(matches!(
            make_fold_plan(1, 5, 2, &RngStream::new(0)),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            make_fold_plan(5, 1, 2, &RngStream::new(0)),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn complement_membership_counts() {
        let plan = make_fold_plan(11, 7, 3, &RngStream::new(5)).unwrap();
        for i in 0..11 {
            let appearances = (0..3)
                .filter(|&l| plan.train_complement(l).binary_search(&i).is_ok())
                .count();
            assert_eq!(appearances, 2, "index {i} should sit in xi-1 complements");
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(vec![1.0, f64::NAN], vec![0.0, 0.0], 2, 1).is_err());
        assert!(LabeledDataset::new(vec![1.0, 2.0], vec![0.0], 2, 1).is_err());
        let ds = LabeledDataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0], 2, 2).unwrap();
        assert_eq!(ds.row(1), &[3.0, 4.0]);
        let sub = ds.subset(&[1]);
        assert_eq!(sub.n(), 1);
        assert_eq!(sub.y(), &[6.0]);
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = EstimatorConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: EstimatorConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // Partial object picks up defaults for missing fields.
        let partial: EstimatorConfig = serde_json::from_str(r#"{"xi": 3}"#).unwrap();
        assert_eq!(partial.xi, 3);
        assert_eq!(partial.ratio_clip, 50.0);
        let mut bad = cfg.clone();
        bad.ulsif_sigma_grid.clear();
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn folds_partition_the_range(n in 2usize..120, m in 2usize..120, xi in 2usize..6, seed in 0u64..500) {
            prop_assume!(n >= xi && m >= xi);
            let plan = make_fold_plan(n, m, xi, &RngStream::new(seed)).unwrap();
            let mut train: Vec<usize> = (0..xi).flat_map(|l| plan.train_fold(l).to_vec()).collect();
            train.sort_unstable();
            prop_assert_eq!(train, (0..n).collect::<Vec<_>>());
            let mut test: Vec<usize> = (0..xi).flat_map(|l| plan.test_fold(l).to_vec()).collect();
            test.sort_unstable();
            prop_assert_eq!(test, (0..m).collect::<Vec<_>>());
            let sizes: Vec<usize> = (0..xi).map(|l| plan.train_fold(l).len()).collect();
            let (mn, mx) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(mx - mn <= 1);
        }
    }
}
