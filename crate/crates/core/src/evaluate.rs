//! Rolling-window out-of-sample evaluation: per-vintage factor
//! re-extraction, one-step-ahead quantile forecasts for the model grid,
//! tick-loss and weighted-CRPS scores, Diebold-Mariano tests with a
//! Newey-West variance, and the fluctuation test over rolling loss
//! differentials.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dates::YearMonth;
use crate::faqr::{self, QuantileSpec};
use crate::ingest::InflationPanel;
use crate::mldfm::{estimate_mldfm, BlockStructure, FactorSet, MldfmConfig, N_FACTORS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid split: R = {r}, P = {p}, panel has T = {t}")]
    BadSplit { r: usize, p: usize, t: usize },
    #[error("quantile grid must have 5 entries, got {0}")]
    WrongGridLength(usize),
    #[error("loss series too short: {0} < 10")]
    TooShort(usize),
    #[error("zero variance in loss differential with nonzero mean")]
    ZeroVariance,
    #[error("fluctuation window {m} not below sample size {p}")]
    WindowTooLarge { m: usize, p: usize },
    #[error("bad critical value table: {0}")]
    BadTable(String),
    #[error("no successful vintages")]
    NoVintages,
}

/// Rolling-window split: `r` in-sample observations, `p` out-of-sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitConfig {
    pub r: usize,
    pub p: usize,
}

impl SplitConfig {
    pub fn validate(&self, t: usize) -> Result<(), EvalError> {
        if self.r < 60 || self.p == 0 || self.r + self.p != t {
            return Err(EvalError::BadSplit { r: self.r, p: self.p, t });
        }
        Ok(())
    }
}

/// The restricted-model grid plus the autoregressive benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ModelId {
    /// Full FA-QR: lag plus global, regional and income factors.
    M1,
    /// Global and regional factors only.
    M2,
    /// Global and income-group factors only.
    M3,
    /// Global factor only.
    M4,
    /// Constant only (empirical window quantile).
    M5,
    /// Per-vintage re-selection: keep only regressors significant at 10%.
    MB,
    /// Autoregressive quantile benchmark: intercept and lag.
    ArQr,
}

impl ModelId {
    pub fn name(&self) -> &'static str {
        match self {
            ModelId::M1 => "M1",
            ModelId::M2 => "M2",
            ModelId::M3 => "M3",
            ModelId::M4 => "M4",
            ModelId::M5 => "M5",
            ModelId::MB => "MB",
            ModelId::ArQr => "AR_QR",
        }
    }

    pub fn parse(s: &str) -> Option<ModelId> {
        match s.trim().to_uppercase().as_str() {
            "M1" => Some(ModelId::M1),
            "M2" => Some(ModelId::M2),
            "M3" => Some(ModelId::M3),
            "M4" => Some(ModelId::M4),
            "M5" => Some(ModelId::M5),
            "MB" => Some(ModelId::MB),
            "AR_QR" | "ARQR" | "AR" => Some(ModelId::ArQr),
            _ => None,
        }
    }

    pub fn needs_factors(&self) -> bool {
        !matches!(self, ModelId::M5 | ModelId::ArQr)
    }

    /// Static regressor rule; `None` for MB, which is data-dependent.
    fn spec(&self, tau: f64, country: usize, mask_row: &[bool; N_FACTORS]) -> Option<QuantileSpec> {
        let pick = |cols: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
            cols.filter(|&k| mask_row[k]).collect()
        };
        match self {
            ModelId::M1 => Some(QuantileSpec {
                tau,
                country,
                include_lag: true,
                factors: pick(&mut (0..N_FACTORS)),
            }),
            ModelId::M2 => Some(QuantileSpec {
                tau,
                country,
                include_lag: true,
                factors: pick(&mut (0..5)),
            }),
            ModelId::M3 => Some(QuantileSpec {
                tau,
                country,
                include_lag: true,
                factors: pick(&mut [0usize, 5, 6, 7].into_iter()),
            }),
            ModelId::M4 => Some(QuantileSpec { tau, country, include_lag: true, factors: vec![0] }),
            ModelId::M5 => {
                Some(QuantileSpec { tau, country, include_lag: false, factors: Vec::new() })
            }
            ModelId::ArQr => Some(QuantileSpec::ar(tau, country)),
            ModelId::MB => None,
        }
    }
}

/// One out-of-sample forecast.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ForecastRecord {
    pub model: ModelId,
    pub country: usize,
    pub tau: f64,
    /// Time index of the last in-sample observation (forecast target is
    /// `vintage + 1`).
    pub vintage: usize,
    pub date: YearMonth,
    pub qhat: f64,
    pub realized: f64,
}

/// Per-vintage artifacts: the re-extracted factor path and the fitted
/// coefficient vectors of that window.
#[derive(Debug, Clone)]
pub struct VintageArtifact {
    pub vintage: usize,
    pub date: YearMonth,
    /// R x 8 factor path of the window (empty for factor-free models).
    pub factors: DMatrix<f64>,
    /// (country, tau, theta) per fitted regression.
    pub params: Vec<(usize, f64, DVector<f64>)>,
}

#[derive(Debug)]
pub struct RollingOutput {
    pub records: Vec<ForecastRecord>,
    pub vintages: Vec<VintageArtifact>,
    /// Vintages skipped because estimation failed, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// Factor sets re-estimated on every rolling window (shared across the
/// model grid so extraction runs once per vintage).
pub struct VintageFactors {
    /// One entry per vintage `v` in `r-1 ..= t-2` (time index of the last
    /// in-sample observation).
    pub sets: Vec<(usize, Result<FactorSet, String>)>,
}

/// Re-extract the ML-DFM on each rolling window. Standardization is
/// recomputed inside each window (no look-ahead).
pub fn extract_vintage_factors(
    panel: &InflationPanel,
    structure: &BlockStructure,
    split: &SplitConfig,
    config: &MldfmConfig,
) -> Result<VintageFactors, EvalError> {
    let t = panel.n_periods();
    split.validate(t)?;
    let vintages: Vec<usize> = (split.r - 1..=t - 2).collect();
    let sets: Vec<(usize, Result<FactorSet, String>)> = vintages
        .par_iter()
        .map(|&v| {
            let window = window_panel(panel, v + 1 - split.r, v);
            let res = estimate_mldfm(&window, structure, config).map_err(|e| e.to_string());
            (v, res)
        })
        .collect();
    Ok(VintageFactors { sets })
}

fn window_panel(panel: &InflationPanel, start: usize, end: usize) -> InflationPanel {
    let rows = end - start + 1;
    InflationPanel {
        dates: panel.dates[start..=end].to_vec(),
        values: DMatrix::from_fn(rows, panel.n_countries(), |i, j| {
            panel.values[(start + i, j)]
        }),
        meta: panel.meta.clone(),
        stage: panel.stage,
    }
}

/// Rolling one-step-ahead forecasts for one model, re-using pre-extracted
/// per-vintage factors when the model needs them.
pub fn rolling_forecast(
    panel: &InflationPanel,
    structure: &BlockStructure,
    model: ModelId,
    split: &SplitConfig,
    taus: &[f64],
    factors: Option<&VintageFactors>,
) -> Result<RollingOutput, EvalError> {
    let t = panel.n_periods();
    split.validate(t)?;

    let owned_factors;
    let vf: Option<&VintageFactors> = if model.needs_factors() {
        match factors {
            Some(f) => Some(f),
            None => {
                owned_factors = extract_vintage_factors(
                    panel,
                    structure,
                    split,
                    &MldfmConfig::default(),
                )?;
                Some(&owned_factors)
            }
        }
    } else {
        None
    };

    let vintages: Vec<usize> = (split.r - 1..=t - 2).collect();
    let per_vintage: Vec<Result<(VintageArtifact, Vec<ForecastRecord>), (usize, String)>> =
        vintages
            .par_iter()
            .enumerate()
            .map(|(vi, &v)| {
                let start = v + 1 - split.r;
                let fs: Option<&FactorSet> = match vf {
                    Some(vf) => match &vf.sets[vi].1 {
                        Ok(fs) => Some(fs),
                        Err(e) => return Err((v, format!("factor extraction: {e}"))),
                    },
                    None => None,
                };
                forecast_one_vintage(panel, structure, model, taus, start, v, fs)
                    .map_err(|e| (v, e))
            })
            .collect();

    let mut records = Vec::new();
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();
    for r in per_vintage {
        match r {
            Ok((art, recs)) => {
                records.extend(recs);
                artifacts.push(art);
            }
            Err(f) => failures.push(f),
        }
    }
    if artifacts.is_empty() {
        return Err(EvalError::NoVintages);
    }
    Ok(RollingOutput { records, vintages: artifacts, failures })
}

fn forecast_one_vintage(
    panel: &InflationPanel,
    structure: &BlockStructure,
    model: ModelId,
    taus: &[f64],
    start: usize,
    v: usize,
    fs: Option<&FactorSet>,
) -> Result<(VintageArtifact, Vec<ForecastRecord>), String> {
    let r = v - start + 1;
    let n = panel.n_countries();
    let factors = match fs {
        Some(fs) => fs.factors.clone(),
        None => DMatrix::zeros(r, N_FACTORS),
    };
    let mut records = Vec::new();
    let mut params = Vec::new();

    for country in 0..n {
        let y: Vec<f64> = (0..r).map(|i| panel.values[(start + i, country)]).collect();
        for &tau in taus {
            let spec = match model.spec(tau, country, &structure.mask[country]) {
                Some(s) => s,
                None => select_mb_spec(&y, &factors, tau, country, &structure.mask[country])
                    .map_err(|e| format!("country {country} tau {tau}: {e}"))?,
            };
            let (resp, x) = faqr::build_design(&y, &factors, &spec)
                .map_err(|e| format!("country {country} tau {tau}: {e}"))?;
            let fit = faqr::fit_qr(&resp, &x, tau)
                .map_err(|e| format!("country {country} tau {tau}: {e}"))?;

            // one-step-ahead regressor row at the window's last observation
            let mut qhat = fit.theta[0];
            let mut idx = 1;
            if spec.include_lag {
                qhat += fit.theta[idx] * y[r - 1];
                idx += 1;
            }
            for &k in &spec.factors {
                qhat += fit.theta[idx] * factors[(r - 1, k)];
                idx += 1;
            }
            records.push(ForecastRecord {
                model,
                country,
                tau,
                vintage: v,
                date: panel.dates[v],
                qhat,
                realized: panel.values[(v + 1, country)],
            });
            params.push((country, tau, fit.theta));
        }
    }
    Ok((
        VintageArtifact { vintage: v, date: panel.dates[v], factors, params },
        records,
    ))
}

/// The MB rule: fit the full FA-QR, then keep only the factor regressors
/// individually significant at the 10% level (intercept and lag always
/// stay).
fn select_mb_spec(
    y: &[f64],
    factors: &DMatrix<f64>,
    tau: f64,
    country: usize,
    mask_row: &[bool; N_FACTORS],
) -> Result<QuantileSpec, String> {
    let full = QuantileSpec::full(tau, country, mask_row);
    let fit = faqr::fa_qr_series(y, factors, &full).map_err(|e| e.to_string())?;
    let normal = Normal::standard();
    let mut kept = Vec::new();
    for (j, &k) in full.factors.iter().enumerate() {
        let idx = 2 + j;
        let se = fit.cov[(idx, idx)].max(0.0).sqrt();
        if se > 0.0 {
            let z = fit.fit.theta[idx] / se;
            let p = 2.0 * (1.0 - normal.cdf(z.abs()));
            if p < 0.10 {
                kept.push(k);
            }
        }
    }
    Ok(QuantileSpec { tau, country, include_lag: true, factors: kept })
}

/// Tick loss of one forecast.
pub fn tick_loss(qhat: f64, realized: f64, tau: f64) -> f64 {
    let indicator = if realized <= qhat { 1.0 } else { 0.0 };
    (indicator - tau) * (qhat - realized)
}

/// Average tick loss over a record set (one country, tau and model).
pub fn quantile_score(records: &[&ForecastRecord]) -> f64 {
    let sum: f64 = records.iter().map(|r| tick_loss(r.qhat, r.realized, r.tau)).sum();
    sum / records.len() as f64
}

/// CRPS weighting schemes over the five-point quantile grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CrpsWeighting {
    /// Equal weights.
    E,
    /// Left tail: (tau - 1)^2.
    L,
    /// Right tail: tau^2.
    R,
}

impl CrpsWeighting {
    pub fn weight(&self, tau: f64) -> f64 {
        match self {
            CrpsWeighting::E => 1.0,
            CrpsWeighting::L => (tau - 1.0) * (tau - 1.0),
            CrpsWeighting::R => tau * tau,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CrpsWeighting::E => "E",
            CrpsWeighting::L => "L",
            CrpsWeighting::R => "R",
        }
    }
}

/// Weighted CRPS from the per-tau quantile scores (grid of five).
pub fn crps(qs_by_tau: &[f64], taus: &[f64], weighting: CrpsWeighting) -> Result<f64, EvalError> {
    if qs_by_tau.len() != 5 || taus.len() != 5 {
        return Err(EvalError::WrongGridLength(qs_by_tau.len()));
    }
    let sum: f64 = qs_by_tau
        .iter()
        .zip(taus.iter())
        .map(|(&qs, &tau)| weighting.weight(tau) * qs)
        .sum();
    Ok(sum / taus.len() as f64)
}

/// Newey-West long-run variance with Bartlett kernel.
fn hac_variance(d: &[f64], lag: usize) -> f64 {
    let p = d.len() as f64;
    let mean = d.iter().sum::<f64>() / p;
    let mut var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
    for j in 1..=lag {
        let w = 1.0 - j as f64 / (lag as f64 + 1.0);
        let mut gamma = 0.0;
        for s in j..d.len() {
            gamma += (d[s] - mean) * (d[s - j] - mean);
        }
        gamma /= p;
        var += 2.0 * w * gamma;
    }
    var
}

/// Diebold-Mariano test on a loss differential. Negative statistics favor
/// the candidate model; the one-sided p-value is the lower normal tail.
pub fn dm_test(loss_diff: &[f64]) -> Result<(f64, f64), EvalError> {
    let p = loss_diff.len();
    if p < 10 {
        return Err(EvalError::TooShort(p));
    }
    let mean = loss_diff.iter().sum::<f64>() / p as f64;
    let lag = (p as f64).powf(1.0 / 3.0).floor() as usize;
    let var = hac_variance(loss_diff, lag);
    if var <= 0.0 || !var.is_finite() {
        if mean.abs() < 1e-300 {
            return Ok((0.0, 0.5)); // identical losses: no rejection
        }
        return Err(EvalError::ZeroVariance);
    }
    let stat = mean / (var / p as f64).sqrt();
    let pval = Normal::standard().cdf(stat);
    Ok((stat, pval))
}

/// Critical values for the fluctuation test, keyed by mu = m / P.
#[derive(Debug, Clone)]
pub struct FluctuationTable {
    /// (mu, two-sided 5% cv, two-sided 10% cv), ascending in mu.
    pub rows: Vec<(f64, f64, f64)>,
}

impl FluctuationTable {
    /// Table shipped with the crate (from the published critical values of
    /// the rolling predictive-ability test).
    pub fn bundled() -> FluctuationTable {
        Self::parse(include_str!("../data/fluctuation_cv.csv"))
            .expect("bundled table parses")
    }

    pub fn parse(csv: &str) -> Result<FluctuationTable, EvalError> {
        let mut rows = Vec::new();
        for (i, line) in csv.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(EvalError::BadTable(format!("line {}: `{line}`", i + 1)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| EvalError::BadTable(format!("line {}: {e}", i + 1)))
            };
            rows.push((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
        }
        if rows.is_empty() {
            return Err(EvalError::BadTable("no rows".into()));
        }
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Ok(FluctuationTable { rows })
    }

    /// Critical values at the tabulated mu nearest to the requested one.
    pub fn lookup(&self, mu: f64) -> (f64, f64) {
        let row = self
            .rows
            .iter()
            .min_by(|a, b| {
                (a.0 - mu).abs().partial_cmp(&(b.0 - mu).abs()).unwrap()
            })
            .unwrap();
        (row.1, row.2)
    }
}

#[derive(Debug, Clone)]
pub struct FluctuationResult {
    /// Standardized rolling-mean path; entry `t` covers the window ending
    /// at loss index `m - 1 + t`.
    pub path: Vec<f64>,
    pub mu: f64,
    pub cv_5pct: f64,
    pub cv_10pct: f64,
}

/// Standardized rolling means of the loss differential, with two-sided
/// critical values for the ratio mu = m / P.
pub fn fluctuation_test(
    loss_diff: &[f64],
    m: usize,
    table: &FluctuationTable,
) -> Result<FluctuationResult, EvalError> {
    let p = loss_diff.len();
    if m == 0 || m >= p {
        return Err(EvalError::WindowTooLarge { m, p });
    }
    let lag = (p as f64).powf(1.0 / 3.0).floor() as usize;
    let var = hac_variance(loss_diff, lag);
    let sigma = var.max(0.0).sqrt();
    let mu = m as f64 / p as f64;
    let (cv5, cv10) = table.lookup(mu);
    let mut path = Vec::with_capacity(p - m + 1);
    if sigma <= 0.0 {
        // identically zero differential: a flat zero path
        path.resize(p - m + 1, 0.0);
        return Ok(FluctuationResult { path, mu, cv_5pct: cv5, cv_10pct: cv10 });
    }
    let scale = 1.0 / (sigma * (m as f64).sqrt());
    let mut rolling: f64 = loss_diff[..m].iter().sum();
    path.push(scale * rolling);
    for t in m..p {
        rolling += loss_diff[t] - loss_diff[t - m];
        path.push(scale * rolling);
    }
    Ok(FluctuationResult { path, mu, cv_5pct: cv5, cv_10pct: cv10 })
}

/// Default fluctuation window: three tenths of the out-of-sample span.
pub fn default_fluctuation_window(p: usize) -> usize {
    ((0.3 * p as f64).floor() as usize).max(1)
}

/// Scores of one (country, model): per-tau quantile scores and the three
/// CRPS variants, each with the ratio to the benchmark and a DM test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScoreRow {
    pub country: usize,
    pub model: ModelId,
    pub tau: f64,
    pub qs: f64,
    pub ratio: f64,
    pub dm_stat: f64,
    pub dm_p: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CrpsRow {
    pub country: usize,
    pub model: ModelId,
    pub weighting: CrpsWeighting,
    pub crps: f64,
    pub ratio: f64,
    pub dm_stat: f64,
    pub dm_p: f64,
}

/// Share of countries in a group whose DM test rejects at 10% for a metric.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GroupShareRow {
    pub model: ModelId,
    pub group: String,
    pub metric: String,
    pub share_significant: f64,
}

#[derive(Debug)]
pub struct EvalReport {
    pub qs_rows: Vec<ScoreRow>,
    pub crps_rows: Vec<CrpsRow>,
    pub group_shares: Vec<GroupShareRow>,
    pub failures: Vec<(ModelId, usize, String)>,
    /// Raw forecasts and vintage artifacts per candidate model.
    pub outputs: Vec<(ModelId, RollingOutput)>,
    /// Benchmark forecasts (AR-QR).
    pub benchmark: RollingOutput,
    /// Vintages that succeeded for every model, ascending.
    pub common_vintages: Vec<usize>,
}

/// Per-vintage tick losses of one model, aligned on the vintages that
/// succeeded for every model in the comparison set.
fn loss_matrix(
    records: &[ForecastRecord],
    country: usize,
    tau: f64,
    vintages: &[usize],
) -> Vec<f64> {
    let mut by_vintage = std::collections::HashMap::new();
    for r in records {
        if r.country == country && (r.tau - tau).abs() < 1e-12 {
            by_vintage.insert(r.vintage, tick_loss(r.qhat, r.realized, r.tau));
        }
    }
    vintages.iter().map(|v| by_vintage[v]).collect()
}

/// Run the model grid, score everything against the AR-QR benchmark, and
/// summarize DM significance shares by region and income group.
pub fn model_grid(
    panel: &InflationPanel,
    structure: &BlockStructure,
    split: &SplitConfig,
    taus: &[f64],
    models: &[ModelId],
    mldfm_config: &MldfmConfig,
) -> Result<EvalReport, EvalError> {
    if taus.len() != 5 {
        return Err(EvalError::WrongGridLength(taus.len()));
    }
    let needs_factors = models.iter().any(|m| m.needs_factors());
    let vf = if needs_factors {
        Some(extract_vintage_factors(panel, structure, split, mldfm_config)?)
    } else {
        None
    };

    let benchmark =
        rolling_forecast(panel, structure, ModelId::ArQr, split, taus, vf.as_ref())?;
    let mut outputs: Vec<(ModelId, RollingOutput)> = Vec::new();
    let mut failures = Vec::new();
    for &m in models {
        let out = rolling_forecast(panel, structure, m, split, taus, vf.as_ref())?;
        for (v, e) in &out.failures {
            failures.push((m, *v, e.clone()));
        }
        outputs.push((m, out));
    }

    // align on vintages every model (and the benchmark) completed
    let mut common: Vec<usize> = benchmark.vintages.iter().map(|a| a.vintage).collect();
    for (_, out) in &outputs {
        let have: std::collections::HashSet<usize> =
            out.vintages.iter().map(|a| a.vintage).collect();
        common.retain(|v| have.contains(v));
    }
    if common.is_empty() {
        return Err(EvalError::NoVintages);
    }

    let n = panel.n_countries();
    let mut qs_rows = Vec::new();
    let mut crps_rows = Vec::new();
    let mut group_shares = Vec::new();

    for (m, out) in &outputs {
        // per-country CRPS loss paths for group summaries
        let mut crps_reject: Vec<(CrpsWeighting, Vec<bool>)> = vec![
            (CrpsWeighting::E, vec![false; n]),
            (CrpsWeighting::L, vec![false; n]),
            (CrpsWeighting::R, vec![false; n]),
        ];
        for country in 0..n {
            let mut qs_model = Vec::with_capacity(taus.len());
            let mut qs_bench = Vec::with_capacity(taus.len());
            let mut losses_model: Vec<Vec<f64>> = Vec::with_capacity(taus.len());
            let mut losses_bench: Vec<Vec<f64>> = Vec::with_capacity(taus.len());
            for &tau in taus {
                let lm = loss_matrix(&out.records, country, tau, &common);
                let lb = loss_matrix(&benchmark.records, country, tau, &common);
                let qm = lm.iter().sum::<f64>() / lm.len() as f64;
                let qb = lb.iter().sum::<f64>() / lb.len() as f64;
                let d: Vec<f64> = lm.iter().zip(lb.iter()).map(|(a, b)| a - b).collect();
                let (stat, p) = dm_test(&d)?;
                qs_rows.push(ScoreRow {
                    country,
                    model: *m,
                    tau,
                    qs: qm,
                    ratio: if qb > 0.0 { qm / qb } else { f64::NAN },
                    dm_stat: stat,
                    dm_p: p,
                });
                qs_model.push(qm);
                qs_bench.push(qb);
                losses_model.push(lm);
                losses_bench.push(lb);
            }
            for (w, reject) in crps_reject.iter_mut() {
                let cm = crps(&qs_model, taus, *w)?;
                let cb = crps(&qs_bench, taus, *w)?;
                // per-vintage weighted loss differential for the DM test
                let d: Vec<f64> = (0..common.len())
                    .map(|vi| {
                        taus.iter()
                            .enumerate()
                            .map(|(j, &tau)| {
                                w.weight(tau)
                                    * (losses_model[j][vi] - losses_bench[j][vi])
                            })
                            .sum::<f64>()
                            / taus.len() as f64
                    })
                    .collect();
                let (stat, p) = dm_test(&d)?;
                crps_rows.push(CrpsRow {
                    country,
                    model: *m,
                    weighting: *w,
                    crps: cm,
                    ratio: if cb > 0.0 { cm / cb } else { f64::NAN },
                    dm_stat: stat,
                    dm_p: p,
                });
                reject[country] = p < 0.10;
            }
        }

        // significance shares by region and by income group
        for (w, reject) in &crps_reject {
            let metric = format!("crps_{}", w.name());
            let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
            for region in crate::ingest::Region::ALL {
                let members: Vec<usize> = (0..n)
                    .filter(|&i| panel.meta[i].region == region)
                    .collect();
                if !members.is_empty() {
                    groups.push((region.to_string(), members));
                }
            }
            for income in crate::ingest::Income::ALL {
                let members: Vec<usize> = (0..n)
                    .filter(|&i| panel.meta[i].income == income)
                    .collect();
                if !members.is_empty() {
                    groups.push((income.to_string(), members));
                }
            }
            groups.push(("Total".to_string(), (0..n).collect()));
            for (name, members) in groups {
                let cnt = members.iter().filter(|&&i| reject[i]).count();
                group_shares.push(GroupShareRow {
                    model: *m,
                    group: name,
                    metric: metric.clone(),
                    share_significant: 100.0 * cnt as f64 / members.len() as f64,
                });
            }
        }
    }

    Ok(EvalReport {
        qs_rows,
        crps_rows,
        group_shares,
        failures,
        outputs,
        benchmark,
        common_vintages: common,
    })
}
