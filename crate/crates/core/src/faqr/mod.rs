//! Factor-augmented quantile regressions per country and quantile, with
//! Powell sandwich inference, Wald joint-significance tests, the quantile
//! goodness-of-fit R1 and an information criterion with a pluggable
//! factor-uncertainty correction.

mod solver;

pub use solver::{check_loss, solve_qr};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::ingest::InflationPanel;

#[derive(Debug, thiserror::Error)]
pub enum FaqrError {
    #[error("tau {0} outside (0, 1)")]
    InvalidTau(f64),
    #[error("design has {rows} rows but response has {len}")]
    DimensionMismatch { rows: usize, len: usize },
    #[error("rank deficient design: {0}")]
    RankDeficientDesign(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("singular Hessian in sandwich covariance (bandwidth too small or collinear design)")]
    SingularHessian,
    #[error("singular restriction matrix in Wald test")]
    SingularRestriction,
    #[error("zero denominator in R1: response has no quantile spread")]
    ZeroDenominator,
    #[error("country index {0} out of range")]
    BadCountry(usize),
    #[error("factor index {0} out of range (8 factors)")]
    BadFactor(usize),
    #[error("series too short: {0} observations")]
    TooShort(usize),
}

/// Output of the bare check-loss minimization.
#[derive(Debug, Clone)]
pub struct QrFit {
    pub tau: f64,
    pub theta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub objective: f64,
}

/// Solve `min_theta sum_t rho_tau(y_t - x_t' theta)` as a linear program.
pub fn fit_qr(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64) -> Result<QrFit, FaqrError> {
    let (theta, residuals, objective) = solve_qr(y, x, tau)?;
    Ok(QrFit { tau, theta, residuals, objective })
}

/// Hall-Sheather bandwidth on the quantile scale.
fn hall_sheather(tau: f64, n: usize) -> f64 {
    let normal = Normal::standard();
    let z_alpha = normal.inverse_cdf(1.0 - 0.05 / 2.0);
    let z_tau = normal.inverse_cdf(tau);
    let phi = (-0.5 * z_tau * z_tau).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (n as f64).powf(-1.0 / 3.0)
        * z_alpha.powf(2.0 / 3.0)
        * ((1.5 * phi * phi) / (2.0 * z_tau * z_tau + 1.0)).powf(1.0 / 3.0)
}

/// Powell kernel sandwich covariance
/// `tau(1-tau) H^-1 (X'X/n) H^-1 / n` with a Gaussian-kernel Hessian
/// estimate at Hall-Sheather bandwidth.
pub fn sandwich_cov(fit: &QrFit, x: &DMatrix<f64>) -> Result<DMatrix<f64>, FaqrError> {
    let n = x.nrows();
    let k = x.ncols();
    let tau = fit.tau;

    // convert the quantile-scale bandwidth to the residual scale
    let normal = Normal::standard();
    let h_tau = hall_sheather(tau, n);
    let lo = (tau - h_tau).max(1e-6);
    let hi = (tau + h_tau).min(1.0 - 1e-6);
    let resid: Vec<f64> = fit.residuals.iter().copied().collect();
    let sd = {
        let m = resid.iter().sum::<f64>() / n as f64;
        (resid.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    };
    let spread = sd.min(crate::preprocess::iqr(&resid) / 1.349).max(1e-12);
    let h = (normal.inverse_cdf(hi) - normal.inverse_cdf(lo)) * spread;
    if h <= 0.0 || !h.is_finite() {
        return Err(FaqrError::SingularHessian);
    }

    let mut hess = DMatrix::zeros(k, k);
    let mut xtx = DMatrix::zeros(k, k);
    let norm_const = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    for t in 0..n {
        let u = fit.residuals[t] / h;
        let kern = norm_const * (-0.5 * u * u).exp();
        let xt = x.row(t);
        for p in 0..k {
            for q in 0..k {
                hess[(p, q)] += kern * xt[p] * xt[q];
                xtx[(p, q)] += xt[p] * xt[q];
            }
        }
    }
    hess /= n as f64 * h;
    xtx /= n as f64;

    let hess_inv = hess.try_inverse().ok_or(FaqrError::SingularHessian)?;
    let cov = &hess_inv * xtx * &hess_inv * (tau * (1.0 - tau) / n as f64);
    // symmetrize against floating point drift
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Wald test of joint significance of the factor coefficients
/// (all entries of theta past intercept and lag).
///
/// Returns the F statistic and its p-value from `F(m, n - k)`.
pub fn wald_factor_test(
    theta: &DVector<f64>,
    cov: &DMatrix<f64>,
    n_obs: usize,
    first_factor_idx: usize,
) -> Result<(f64, f64), FaqrError> {
    let k = theta.len();
    let m = k - first_factor_idx;
    if m == 0 {
        return Err(FaqrError::SingularRestriction);
    }
    let beta = DVector::from_fn(m, |i, _| theta[first_factor_idx + i]);
    let sub = DMatrix::from_fn(m, m, |i, j| cov[(first_factor_idx + i, first_factor_idx + j)]);
    let sub_inv = sub.try_inverse().ok_or(FaqrError::SingularRestriction)?;
    let f_stat = (beta.transpose() * sub_inv * &beta)[(0, 0)] / m as f64;
    if !f_stat.is_finite() || f_stat < 0.0 {
        return Err(FaqrError::SingularRestriction);
    }
    let df2 = (n_obs - k) as f64;
    let dist = FisherSnedecor::new(m as f64, df2)
        .map_err(|_| FaqrError::SingularRestriction)?;
    let p = 1.0 - dist.cdf(f_stat);
    Ok((f_stat, p))
}

/// Quantile goodness of fit: one minus the ratio of the model check loss to
/// the check loss of the empirical tau-quantile.
pub fn r1(fit: &QrFit, y: &DVector<f64>) -> Result<f64, FaqrError> {
    let yv: Vec<f64> = y.iter().copied().collect();
    let q = empirical_quantile(&yv, fit.tau);
    let base = check_loss(&(y - DVector::from_element(y.len(), q)), fit.tau);
    if base <= 0.0 {
        return Err(FaqrError::ZeroDenominator);
    }
    Ok(1.0 - fit.objective / base)
}

/// Empirical tau-quantile (lower order statistic convention, which attains
/// the minimum of the check loss).
pub fn empirical_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let idx = ((tau * n as f64).ceil() as usize).clamp(1, n) - 1;
    v[idx]
}

/// Information criterion `2T ln(mean check loss) + 2T b` with pluggable
/// correction term `b`. The default correction is `k / T`.
pub fn aic_with(fit: &QrFit, b: impl Fn(usize, usize) -> f64) -> f64 {
    let t = fit.residuals.len();
    let k = fit.theta.len();
    let mean_loss = (fit.objective / t as f64).max(1e-300);
    2.0 * t as f64 * mean_loss.ln() + 2.0 * t as f64 * b(k, t)
}

pub fn aic(fit: &QrFit) -> f64 {
    aic_with(fit, |k, t| k as f64 / t as f64)
}

/// Regressor selection for one (country, tau) fit. The intercept is always
/// included; factor indices refer to the 8-column factor ordering
/// (g, Af, Am, As, Eu, Ad, Mi, Li).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSpec {
    pub tau: f64,
    pub country: usize,
    pub include_lag: bool,
    pub factors: Vec<usize>,
}

impl QuantileSpec {
    /// The full FA-QR spec: lag plus exactly the factors the country's
    /// block mask allows.
    pub fn full(tau: f64, country: usize, mask_row: &[bool]) -> Self {
        let factors = mask_row
            .iter()
            .enumerate()
            .filter_map(|(j, &on)| if on { Some(j) } else { None })
            .collect();
        QuantileSpec { tau, country, include_lag: true, factors }
    }

    /// The AR-QR benchmark: intercept and lag only.
    pub fn ar(tau: f64, country: usize) -> Self {
        QuantileSpec { tau, country, include_lag: true, factors: Vec::new() }
    }

    pub fn n_regressors(&self) -> usize {
        1 + usize::from(self.include_lag) + self.factors.len()
    }
}

/// A fitted factor-augmented quantile regression with inference attached.
#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub spec: QuantileSpec,
    pub fit: QrFit,
    pub cov: DMatrix<f64>,
    pub r1: f64,
    pub aic: f64,
    /// Wald test of joint factor significance; `None` for factor-free specs.
    pub wald: Option<(f64, f64)>,
}

/// Build the FA-QR design: regress `y_{t+1}` on `[1, y_t, F_kt]`.
pub fn build_design(
    y: &[f64],
    factors: &DMatrix<f64>,
    spec: &QuantileSpec,
) -> Result<(DVector<f64>, DMatrix<f64>), FaqrError> {
    let t = y.len();
    if t < 3 {
        return Err(FaqrError::TooShort(t));
    }
    if factors.nrows() != t {
        return Err(FaqrError::DimensionMismatch { rows: factors.nrows(), len: t });
    }
    for &f in &spec.factors {
        if f >= factors.ncols() {
            return Err(FaqrError::BadFactor(f));
        }
    }
    let n = t - 1;
    let k = spec.n_regressors();
    let response = DVector::from_fn(n, |i, _| y[i + 1]);
    let x = DMatrix::from_fn(n, k, |i, j| {
        if j == 0 {
            1.0
        } else if spec.include_lag && j == 1 {
            y[i]
        } else {
            let offset = 1 + usize::from(spec.include_lag);
            factors[(i, spec.factors[j - offset])]
        }
    });
    Ok((response, x))
}

/// Fit the FA-QR for one (country, tau) pair and attach inference.
pub fn fa_qr(
    panel: &InflationPanel,
    factors: &DMatrix<f64>,
    spec: &QuantileSpec,
) -> Result<QuantileFit, FaqrError> {
    if spec.country >= panel.n_countries() {
        return Err(FaqrError::BadCountry(spec.country));
    }
    let y = panel.series(spec.country);
    fa_qr_series(&y, factors, spec)
}

/// As [`fa_qr`] but over an explicit series (used by the rolling engine).
pub fn fa_qr_series(
    y: &[f64],
    factors: &DMatrix<f64>,
    spec: &QuantileSpec,
) -> Result<QuantileFit, FaqrError> {
    let (response, x) = build_design(y, factors, spec)?;
    let fit = fit_qr(&response, &x, spec.tau)?;
    let cov = sandwich_cov(&fit, &x)?;
    let r1_val = r1(&fit, &response)?;
    let aic_val = aic(&fit);
    let first_factor_idx = 1 + usize::from(spec.include_lag);
    let wald = if spec.factors.is_empty() {
        None
    } else {
        Some(wald_factor_test(&fit.theta, &cov, response.len(), first_factor_idx)?)
    };
    Ok(QuantileFit { spec: spec.clone(), fit, cov, r1: r1_val, aic: aic_val, wald })
}
