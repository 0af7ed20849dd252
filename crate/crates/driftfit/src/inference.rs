//! Plug-in sandwich covariance for β̂ and pointwise standard errors for the
//! fitted regression function.
//!
//! The asymptotic covariance of the DR-family estimators has sandwich form
//! `Ω = D⁻¹ M D⁻¹` with bread `D = E_q[ġ ġᵀ]` and meat
//! `M = E_q[σ²(X̃) r(X̃) ġ ġᵀ]`. Test outcomes are unobservable, so the meat
//! is estimated under the train distribution via the change of measure
//! `E_q[σ² r^{2α−1} ġ ġᵀ] = E_p[σ² r^{2α} ġ ġᵀ]`, plugging in the cross-fitted
//! residuals `(Y_i − f̂_(-ℓ(i))(X_i))²` and ratios `r̂_(-ℓ(i))(X_i)`.

use crate::datamodel::{LabeledDataset, UnlabeledDataset};
use crate::drcsa::DrFitResult;
use crate::models::ParametricModel;
use crate::numkit::{spd_cholesky, Matrix, Vector};
use crate::{Error, Result};

/// Plug-in sandwich `Ω̂ = D̂⁻¹ M̂ D̂⁻¹` with its factors.
#[derive(Debug, Clone)]
pub struct SandwichCovariance {
    pub omega: Matrix,
    pub bread: Matrix,
    pub meat: Matrix,
    pub n_effective: usize,
}

impl SandwichCovariance {
    /// Per-coordinate standard errors `√(Ω̂_aa / n)`.
    pub fn standard_errors(&self) -> Vector {
        Vector::from_fn(self.omega.nrows(), |a, _| {
            (self.omega[(a, a)].max(0.0) / self.n_effective as f64).sqrt()
        })
    }
}

/// Estimate the sandwich covariance of a DR-family fit.
///
/// Bread: `D̂ = (1/m) Σ_j ġ_β̂(X̃_j) ġᵀ_β̂(X̃_j)` over the test covariates.
/// Meat: `M̂ = (1/n) Σ_i (Y_i − f̂(X_i))² r̂(X_i)^{2α} ġ_β̂(X_i) ġᵀ_β̂(X_i)`
/// using each train sample's own-fold nuisances.
pub fn estimate_covariance(
    fit: &DrFitResult,
    train: &LabeledDataset,
    test: &UnlabeledDataset,
) -> Result<SandwichCovariance> {
    let k = fit.model.beta.len();
    if test.m() < k {
        return Err(Error::TooFewSamples {
            needed: k,
            got: test.m(),
        });
    }
    let mut bread = Matrix::zeros(k, k);
    for j in 0..test.m() {
        let g = fit.model.grad(test.row(j));
        bread.ger(1.0 / test.m() as f64, &g, &g, 1.0);
    }

    let alpha = fit.variant.alpha();
    let mut meat = Matrix::zeros(k, k);
    for l in 0..fit.fold_plan.xi() {
        let nuis = &fit.nuisances.folds[l];
        for &i in fit.fold_plan.train_fold(l) {
            let x = train.row(i);
            let resid = train.y()[i] - nuis.regression.eval(x);
            let ratio = nuis.ratio.eval(x);
            let weight = if alpha == 0.0 {
                1.0
            } else {
                ratio.max(0.0).powf(2.0 * alpha)
            };
            let g = fit.model.grad(x);
            meat.ger(resid * resid * weight / train.n() as f64, &g, &g, 1.0);
        }
    }

    let chol = spd_cholesky(&bread).map_err(|_| Error::NotPositiveDefinite {
        context: "sandwich bread (test second-moment matrix) is singular",
    })?;
    let dinv_m = chol.solve(&meat);
    let omega_raw = chol.solve(&dinv_m.transpose());
    let omega = (&omega_raw + omega_raw.transpose()) * 0.5;
    Ok(SandwichCovariance {
        omega,
        bread,
        meat,
        n_effective: train.n(),
    })
}

/// Heteroskedasticity-robust sandwich for a plain (weighted) squared-risk fit
/// on the train data: bread `(1/n) Σ w_i ġ ġᵀ`, meat
/// `(1/n) Σ w_i² (Y_i − g_β̂(X_i))² ġ ġᵀ`. This is the companion covariance for
/// the OLS/WLS baselines; the DR-family fits use [`estimate_covariance`].
pub fn hc_sandwich(
    train: &LabeledDataset,
    model: &ParametricModel,
    weights: Option<&[f64]>,
) -> Result<SandwichCovariance> {
    let n = train.n();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::LengthMismatch {
                left: w.len(),
                right: n,
            });
        }
    }
    let k = model.beta.len();
    let mut bread = Matrix::zeros(k, k);
    let mut meat = Matrix::zeros(k, k);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let x = train.row(i);
        let g = model.grad(x);
        let resid = train.y()[i] - model.predict(x);
        bread.ger(w / n as f64, &g, &g, 1.0);
        meat.ger(w * w * resid * resid / n as f64, &g, &g, 1.0);
    }
    let chol = spd_cholesky(&bread).map_err(|_| Error::NotPositiveDefinite {
        context: "sandwich bread (weighted gradient second moment) is singular",
    })?;
    let dinv_m = chol.solve(&meat);
    let omega_raw = chol.solve(&dinv_m.transpose());
    let omega = (&omega_raw + omega_raw.transpose()) * 0.5;
    Ok(SandwichCovariance {
        omega,
        bread,
        meat,
        n_effective: n,
    })
}

/// Pointwise standard error of the fitted regression at `x`:
/// `√(ġᵀ(x) Ω̂ ġ(x) / n)`.
pub fn pointwise_se(cov: &SandwichCovariance, model: &ParametricModel, x: &[f64]) -> f64 {
    let g = model.grad(x);
    let quad = (&g.transpose() * &cov.omega * &g)[(0, 0)];
    (quad.max(0.0) / cov.n_effective as f64).sqrt()
}

/// Two-sided normal-quantile interval `estimate ± z_{(1+level)/2} · se`.
pub fn confidence_interval(estimate: f64, se: f64, level: f64) -> (f64, f64) {
    debug_assert!(se >= 0.0);
    debug_assert!((0.0..1.0).contains(&level) && level > 0.0);
    let z = normal_quantile(0.5 * (1.0 + level));
    (estimate - z * se, estimate + z * se)
}

/// Inverse standard normal CDF by the AS241 rational approximations
/// (relative error below 1e-15 across the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    const A: [f64; 8] = [
        3.387_132_872_796_366_5,
        133.141_667_891_784_38,
        1_971.590_950_306_551_3,
        13_731.693_765_509_46,
        45_921.953_931_549_87,
        67_265.770_927_008_7,
        33_430.575_583_588_13,
        2_509.080_928_730_122_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_91,
        687.187_007_492_057_9,
        5_394.196_021_424_751,
        21_213.794_301_586_597,
        39_307.895_800_092_71,
        28_729.085_735_721_943,
        5_226.495_278_852_854,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        0.241_780_725_177_450_6,
        0.022_723_844_989_269_184,
        0.000_774_545_014_278_341_4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        0.689_767_334_985_1,
        0.148_103_976_427_480_08,
        0.015_198_666_563_616_457,
        0.000_547_593_808_499_534_5,
        1.050_750_071_644_416_9e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        0.296_560_571_828_504_87,
        0.026_532_189_526_576_124,
        0.001_242_660_947_388_078_4,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_9,
        0.136_929_880_922_735_8,
        0.014_875_361_290_850_615,
        0.000_786_869_131_145_613_3,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}
