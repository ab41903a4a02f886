//! Per-series cleaning: seasonal adjustment via a basic structural time
//! series model (local level + stochastic monthly seasonal dummies +
//! irregular) with Kalman smoothing, followed by outlier clamping at ten
//! interquartile ranges from the median.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;

use crate::ingest::{InflationPanel, Stage};
use crate::optim;

const STATE_DIM: usize = 12; // level + 11 seasonal lags
const SEASONS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("series too short for seasonal adjustment: T = {0}, need at least 36")]
    TooShort(usize),
    #[error("likelihood maximization failed to converge after restarts")]
    OptimizerFailure,
    #[error("degenerate series: interquartile range is zero")]
    DegenerateSeries,
    #[error("stage must be {expected}, got {got}")]
    WrongStage { expected: Stage, got: Stage },
}

/// Estimated seasonal state of one series.
#[derive(Debug, Clone)]
pub struct SeasonalAdjustment {
    /// Smoothed seasonal component, same length as the series.
    pub seasonal_component: Vec<f64>,
    /// Maximized log-likelihood (prediction error decomposition).
    pub loglik: f64,
    /// Variance estimates: (level, seasonal, irregular).
    pub hyperparams: (f64, f64, f64),
}

/// One clamped observation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierEntry {
    pub index: usize,
    pub original: f64,
    pub replacement: f64,
}

/// All clamped observations of one series.
#[derive(Debug, Clone, Default)]
pub struct OutlierReport {
    pub entries: Vec<OutlierEntry>,
}

type StateVec = SVector<f64, STATE_DIM>;
type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Kalman filter pass for the basic structural model with unit irregular
/// variance and relative state variances `(q_level, q_seasonal)`.
struct FilterOutput {
    innovations: Vec<f64>,
    innovation_vars: Vec<f64>,
    gains: Vec<StateVec>,
    predicted: Vec<StateVec>,
    predicted_cov: Vec<StateMat>,
}

fn transition_matrix() -> StateMat {
    let mut t = StateMat::zeros();
    t[(0, 0)] = 1.0;
    for j in 1..STATE_DIM {
        t[(1, j)] = -1.0;
    }
    for j in 2..STATE_DIM {
        t[(j, j - 1)] = 1.0;
    }
    t
}

fn run_filter(series: &[f64], q_level: f64, q_seasonal: f64, kappa: f64) -> FilterOutput {
    let n = series.len();
    let t_mat = transition_matrix();
    // Z picks level + current seasonal.
    let mut z = StateVec::zeros();
    z[0] = 1.0;
    z[1] = 1.0;

    let mut a = StateVec::zeros();
    let mut p: StateMat = StateMat::identity() * kappa;

    let mut innovations = Vec::with_capacity(n);
    let mut innovation_vars = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    let mut predicted_cov = Vec::with_capacity(n);

    for &y in series {
        predicted.push(a);
        predicted_cov.push(p);

        let v = y - (a[0] + a[1]);
        let pz = p * z;
        let f = (z.dot(&pz) + 1.0).max(1e-300);
        innovations.push(v);
        innovation_vars.push(f);

        // filtered update
        let a_f = a + pz * (v / f);
        let p_f = p - pz * (pz.transpose() / f);

        // predict; K (predictive-form gain) = T P Z' / F
        let k = t_mat * (pz / f);
        gains.push(k);
        a = t_mat * a_f;
        p = t_mat * p_f * t_mat.transpose();
        p[(0, 0)] += q_level;
        p[(1, 1)] += q_seasonal;
        // symmetrize against drift
        p = (p + p.transpose()) * 0.5;
    }

    FilterOutput { innovations, innovation_vars, gains, predicted, predicted_cov }
}

/// Concentrated log-likelihood: irregular variance profiled out, the first
/// `STATE_DIM + 1` innovations are treated as diffuse and skipped.
fn concentrated_loglik(series: &[f64], q_level: f64, q_seasonal: f64, kappa: f64) -> (f64, f64) {
    let out = run_filter(series, q_level, q_seasonal, kappa);
    let skip = STATE_DIM + 1;
    let n_eff = series.len() - skip;
    let mut ssq = 0.0;
    let mut log_f = 0.0;
    for t in skip..series.len() {
        ssq += out.innovations[t] * out.innovations[t] / out.innovation_vars[t];
        log_f += out.innovation_vars[t].ln();
    }
    let sigma2 = (ssq / n_eff as f64).max(1e-300);
    let ll = -0.5 * n_eff as f64 * ((2.0 * std::f64::consts::PI).ln() + 1.0 + sigma2.ln())
        - 0.5 * log_f;
    (ll, sigma2)
}

/// Smoothed seasonal component via the backward disturbance recursion.
fn smooth_seasonal(series: &[f64], q_level: f64, q_seasonal: f64, kappa: f64) -> Vec<f64> {
    let n = series.len();
    let out = run_filter(series, q_level, q_seasonal, kappa);
    let t_mat = transition_matrix();
    let mut z = StateVec::zeros();
    z[0] = 1.0;
    z[1] = 1.0;

    let mut seasonal = vec![0.0; n];
    let mut r = StateVec::zeros();
    for t in (0..n).rev() {
        let f = out.innovation_vars[t];
        let v = out.innovations[t];
        // L_t = T - K_t Z'
        let l = t_mat - out.gains[t] * z.transpose();
        r = z * (v / f) + l.transpose() * r;
        let smoothed = out.predicted[t] + out.predicted_cov[t] * r;
        seasonal[t] = smoothed[1];
    }
    seasonal
}

/// Remove the smoothed seasonal component of a basic structural model,
/// with variances estimated by maximum likelihood.
pub fn deseasonalize(series: &[f64]) -> Result<(Vec<f64>, SeasonalAdjustment), PreprocessError> {
    let n = series.len();
    if n < 3 * SEASONS {
        return Err(PreprocessError::TooShort(n));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var < 1e-12 {
        // nothing to estimate: constant series carries no seasonality
        return Ok((
            series.to_vec(),
            SeasonalAdjustment {
                seasonal_component: vec![0.0; n],
                loglik: f64::INFINITY,
                hyperparams: (0.0, 0.0, 0.0),
            },
        ));
    }
    let kappa = 1e7 * var;

    // Optimize the concentrated likelihood over log variance ratios.
    let objective = |x: &[f64]| -> f64 {
        let ql = x[0].clamp(-30.0, 10.0).exp();
        let qs = x[1].clamp(-30.0, 10.0).exp();
        let (ll, _) = concentrated_loglik(series, ql, qs, kappa);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };

    // Deterministic multi-start grid over plausible signal/noise ratios.
    let starts: [[f64; 2]; 3] = [[-2.0, -2.0], [0.0, 0.0], [-6.0, -6.0]];
    let mut best: Option<optim::OptimResult> = None;
    for s in &starts {
        let r = optim::bfgs(objective, s, 1e-6, 100);
        if !r.value.is_finite() {
            continue;
        }
        match &best {
            Some(b) if b.value <= r.value => {}
            _ => best = Some(r),
        }
    }
    let best = best.ok_or(PreprocessError::OptimizerFailure)?;

    let ql = best.x[0].clamp(-30.0, 10.0).exp();
    let qs = best.x[1].clamp(-30.0, 10.0).exp();
    let (ll, sigma2) = concentrated_loglik(series, ql, qs, kappa);
    let seasonal = smooth_seasonal(series, ql, qs, kappa);
    let adjusted: Vec<f64> = series.iter().zip(&seasonal).map(|(y, s)| y - s).collect();

    Ok((
        adjusted,
        SeasonalAdjustment {
            seasonal_component: seasonal,
            loglik: ll,
            hyperparams: (ql * sigma2, qs * sigma2, sigma2),
        },
    ))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

/// Clamp observations farther than ten interquartile ranges from the
/// sample median to `median ± 10·IQR`. Median and IQR are computed once on
/// the input.
pub fn clean_outliers(series: &[f64]) -> Result<(Vec<f64>, OutlierReport), PreprocessError> {
    let med = median(series);
    let range = iqr(series);
    if range <= 0.0 {
        return Err(PreprocessError::DegenerateSeries);
    }
    let bound = 10.0 * range;
    let mut cleaned = series.to_vec();
    let mut report = OutlierReport::default();
    for (i, y) in series.iter().enumerate() {
        let dev = y - med;
        if dev.abs() > bound {
            let replacement = med + dev.signum() * bound;
            report.entries.push(OutlierEntry { index: i, original: *y, replacement });
            cleaned[i] = replacement;
        }
    }
    Ok((cleaned, report))
}

/// Panel driver: deseasonalize every series, then clamp outliers.
///
/// Returns the cleaned panel plus per-series adjustments and reports in
/// column order.
pub fn preprocess_panel(
    panel: &InflationPanel,
) -> Result<(InflationPanel, Vec<SeasonalAdjustment>, Vec<OutlierReport>), PreprocessError> {
    if panel.stage != Stage::Raw {
        return Err(PreprocessError::WrongStage { expected: Stage::Raw, got: panel.stage });
    }
    let n = panel.n_countries();
    let results: Vec<Result<(Vec<f64>, SeasonalAdjustment, OutlierReport), PreprocessError>> =
        (0..n)
            .into_par_iter()
            .map(|j| {
                let series = panel.series(j);
                let (adjusted, adj) = deseasonalize(&series)?;
                let (cleaned, report) = clean_outliers(&adjusted)?;
                Ok((cleaned, adj, report))
            })
            .collect();

    let mut values = panel.values.clone();
    let mut adjustments = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    for (j, r) in results.into_iter().enumerate() {
        let (cleaned, adj, report) = r?;
        for (i, v) in cleaned.iter().enumerate() {
            values[(i, j)] = *v;
        }
        adjustments.push(adj);
        reports.push(report);
    }
    Ok((
        InflationPanel {
            dates: panel.dates.clone(),
            values,
            meta: panel.meta.clone(),
            stage: Stage::Cleaned,
        },
        adjustments,
        reports,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn too_short_series_rejected() {
        let s = vec![1.0; 35];
        assert!(matches!(deseasonalize(&s).unwrap_err(), PreprocessError::TooShort(35)));
    }

    #[test]
    fn constant_series_has_zero_seasonal() {
        let s = vec![3.5; 120];
        let (adjusted, adj) = deseasonalize(&s).unwrap();
        assert_eq!(adjusted, s);
        assert!(adj.seasonal_component.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..120)
            .map(|t| {
                let seas = [3.0, -1.0, 0.5, 2.0, -2.5, 1.0, -1.0, 0.0, 0.5, -0.5, -1.0, -1.0]
                    [t % 12];
                seas + 0.2 * noise.sample(&mut rng)
            })
            .collect();
        let (adjusted, adj) = deseasonalize(&s).unwrap();
        for t in 0..s.len() {
            assert!((adjusted[t] + adj.seasonal_component[t] - s[t]).abs() < 1e-8);
        }
    }

    /// F statistic of regressing a series on monthly dummies.
    fn seasonal_f_stat(series: &[f64]) -> f64 {
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let sst: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
        let mut group_mean = [0.0; 12];
        let mut count = [0usize; 12];
        for (t, v) in series.iter().enumerate() {
            group_mean[t % 12] += v;
            count[t % 12] += 1;
        }
        for m in 0..12 {
            group_mean[m] /= count[m] as f64;
        }
        let ssb: f64 =
            (0..12).map(|m| count[m] as f64 * (group_mean[m] - mean).powi(2)).sum();
        let ssw = sst - ssb;
        (ssb / 11.0) / (ssw / (n - 12) as f64)
    }

    #[test]
    fn removes_deterministic_seasonal_pattern() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let pattern = [4.0, -2.0, 1.0, 3.0, -3.0, 0.5, -1.5, 0.0, 1.0, -1.0, -1.0, -1.0];
        let s: Vec<f64> =
            (0..180).map(|t| pattern[t % 12] + noise.sample(&mut rng)).collect();
        assert!(seasonal_f_stat(&s) > 100.0);

        let (adjusted, _) = deseasonalize(&s).unwrap();
        // 5% critical value of F(11, 168) is about 1.85
        let f_after = seasonal_f_stat(&adjusted);
        assert!(f_after < 1.85, "seasonal F statistic after adjustment: {f_after}");
    }

    #[test]
    fn white_noise_gets_near_zero_seasonal_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let s: Vec<f64> = (0..240).map(|_| noise.sample(&mut rng)).collect();
            let sd = {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
            };
            let (_, adj) = deseasonalize(&s).unwrap();
            let (_, seas_var, irr_var) = adj.hyperparams;
            // seasonal state noise should be negligible relative to the irregular
            assert!(seas_var < 0.05 * irr_var, "seasonal var {seas_var}, irregular {irr_var}");
            // the smoothed seasonal is bounded by the monthly-mean noise
            // floor sd/sqrt(T/12), not by an arbitrarily small constant
            let floor = 4.0 * sd / (s.len() as f64 / 12.0).sqrt();
            let max_seas =
                adj.seasonal_component.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_seas < floor, "max seasonal {max_seas} vs floor {floor}");
        }
    }

    #[test]
    fn seasonal_component_sums_near_zero_over_cycles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let pattern = [2.0, -1.0, 0.5, 1.0, -1.5, 0.5, -0.5, 0.0, 0.5, -0.5, -0.5, -0.5];
        let s: Vec<f64> =
            (0..144).map(|t| pattern[t % 12] + noise.sample(&mut rng)).collect();
        let (_, adj) = deseasonalize(&s).unwrap();
        let series_iqr = iqr(&s);
        for start in 0..(s.len() - 12) {
            let sum: f64 = adj.seasonal_component[start..start + 12].iter().sum();
            assert!(sum.abs() < 0.1 * series_iqr, "window {start}: sum {sum}");
        }
    }

    #[test]
    fn outlier_rule_hand_check() {
        // 11 values with median 2, IQR 1 under interpolated quartiles,
        // one value 20 -> replaced by 2 + 10*1 = 12
        let series = vec![1.5, 1.5, 1.5, 1.5, 2.0, 2.0, 2.0, 2.5, 2.5, 2.5, 20.0];
        let med = median(&series);
        let r = iqr(&series);
        assert_eq!(med, 2.0);
        assert_eq!(r, 1.0);
        let (cleaned, report) = clean_outliers(&series).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].original, 20.0);
        assert_eq!(report.entries[0].replacement, 12.0);
        assert_eq!(cleaned[10], 12.0);
    }

    #[test]
    fn series_inside_bounds_unchanged() {
        let series = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let (cleaned, report) = clean_outliers(&series).unwrap();
        assert_eq!(cleaned, series);
        assert!(report.entries.is_empty());
    }

    #[test]
    fn boundary_value_not_flagged() {
        // median 0, IQR 2 from symmetric values; boundary at exactly 20
        let series = vec![-2.0, -1.0, 0.0, 1.0, 2.0, 20.0];
        let med = median(&series);
        let r = iqr(&series);
        let boundary = med + 10.0 * r;
        let mut with_boundary = series.clone();
        *with_boundary.last_mut().unwrap() = boundary;
        // recompute stats change when we edit the series, so check directly:
        let med2 = median(&with_boundary);
        let r2 = iqr(&with_boundary);
        let (cleaned, report) = clean_outliers(&with_boundary).unwrap();
        for (i, v) in with_boundary.iter().enumerate() {
            if (v - med2).abs() <= 10.0 * r2 {
                assert_eq!(cleaned[i], *v);
            }
        }
        let _ = report;
    }

    #[test]
    fn clean_outliers_idempotent_and_median_preserving() {
        let series = vec![0.0, 1.0, -1.0, 2.0, -2.0, 50.0, 0.5, -0.5, 1.5, -1.5, 0.0];
        let med_before = median(&series);
        let (once, _) = clean_outliers(&series).unwrap();
        let (twice, report2) = clean_outliers(&once).unwrap();
        assert_eq!(once, twice);
        assert!(report2.entries.is_empty());
        assert_eq!(median(&once), med_before);
    }

    #[test]
    fn degenerate_series_rejected() {
        let series = vec![1.0; 10];
        assert!(matches!(clean_outliers(&series).unwrap_err(), PreprocessError::DegenerateSeries));
    }
}
