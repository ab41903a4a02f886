//! Command-line front end: stage orchestration, config merging, artifact
//! emission and the reproducibility manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::density::{
    self, SkewTParams, DEFAULT_DAR_THRESHOLD, DEFAULT_IAR_THRESHOLD, TAU_GRID,
};
use crate::evaluate::{
    self, default_fluctuation_window, CrpsWeighting, FluctuationTable, ModelId, SplitConfig,
};
use crate::faqr::{self, QuantileFit, QuantileSpec};
use crate::ingest::{self, InflationPanel};
use crate::mldfm::{
    build_block_structure, estimate_mldfm, factor_bands, scree, BlockStructure, FactorSet,
    MldfmConfig, FACTOR_NAMES, N_FACTORS,
};
use crate::preprocess;

/// Exit code 1: bad input or configuration.
/// Exit code 2: a numerical routine failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn validation(stage: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{stage}: {e}"))
}

fn numerical(stage: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(format!("{stage}: {e}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "inflarisk",
    version,
    about = "Inflation-at-risk toolkit: factor extraction, quantile regression, \
             density fitting and out-of-sample evaluation for CPI panels"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct GlobalArgs {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed recorded in the manifest (the pipeline itself is deterministic)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Comma-separated quantile levels, strictly increasing in (0,1)
    #[arg(long, global = true, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Country codes to drop before any processing
    #[arg(long, global = true, value_delimiter = ',')]
    pub exclude: Option<Vec<String>>,
    /// CPI level CSV (wide `date,CODE,...` or long `date,code,value`)
    #[arg(long, global = true)]
    pub prices: Option<PathBuf>,
    /// Country metadata CSV (`code,name,region,income`)
    #[arg(long, global = true)]
    pub meta: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load the CPI panel and emit annualized month-on-month inflation
    Ingest,
    /// Seasonal adjustment and outlier clamping
    Preprocess,
    /// Multi-level dynamic factor model estimation
    Factors,
    /// Factor-augmented quantile regressions with inference
    Fit,
    /// Skew-t densities fitted to the latest conditional quantiles
    Density,
    /// Inflation-at-risk / deflation-at-risk trajectories
    Risk {
        /// High-inflation threshold (percent per year)
        #[arg(long)]
        iar_threshold: Option<f64>,
        /// Deflation threshold (percent per year)
        #[arg(long)]
        dar_threshold: Option<f64>,
    },
    /// Rolling out-of-sample evaluation of the model grid
    Evaluate {
        /// Comma-separated model list (M1..M5, MB)
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        /// In-sample:out-of-sample split, e.g. 155:132
        #[arg(long)]
        split: Option<String>,
    },
    /// Run every stage and write the summary tables
    Report {
        #[arg(long)]
        iar_threshold: Option<f64>,
        #[arg(long)]
        dar_threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Run an explicit list of stages in pipeline order
    Run {
        /// Comma-separated stages out of
        /// ingest,preprocess,factors,fit,density,risk,evaluate,report
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[arg(long)]
        iar_threshold: Option<f64>,
        #[arg(long)]
        dar_threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long)]
        split: Option<String>,
    },
}

/// Config file contents; every field mirrors a flag.
#[derive(Debug, Default, Clone, serde::Deserialize, serde::Serialize)]
pub struct FileConfig {
    pub prices: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub taus: Option<Vec<f64>>,
    pub exclude: Option<Vec<String>>,
    pub iar_threshold: Option<f64>,
    pub dar_threshold: Option<f64>,
    pub models: Option<Vec<String>>,
    pub split: Option<String>,
}

/// Fully resolved run configuration (file values overridden by flags).
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub prices: PathBuf,
    pub meta: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub taus: Vec<f64>,
    pub exclude: Vec<String>,
    pub iar_threshold: f64,
    pub dar_threshold: f64,
    pub models: Vec<ModelId>,
    pub split: Option<SplitConfig>,
}

pub fn parse_split(s: &str) -> Result<SplitConfig, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(CliError::Validation(format!(
            "split must look like R:P (e.g. 155:132), got `{s}`"
        )));
    }
    let r = parts[0]
        .trim()
        .parse::<usize>()
        .map_err(|e| CliError::Validation(format!("bad split R `{}`: {e}", parts[0])))?;
    let p = parts[1]
        .trim()
        .parse::<usize>()
        .map_err(|e| CliError::Validation(format!("bad split P `{}`: {e}", parts[1])))?;
    Ok(SplitConfig { r, p })
}

pub fn parse_models(names: &[String]) -> Result<Vec<ModelId>, CliError> {
    let mut out = Vec::new();
    for name in names {
        let m = ModelId::parse(name)
            .ok_or_else(|| CliError::Validation(format!("unknown model `{name}`")))?;
        if m != ModelId::ArQr && !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("model list is empty".into()));
    }
    Ok(out)
}

fn validate_taus(taus: &[f64]) -> Result<(), CliError> {
    if taus.is_empty()
        || taus.windows(2).any(|w| w[0] >= w[1])
        || taus.iter().any(|&t| t <= 0.0 || t >= 1.0)
    {
        return Err(CliError::Validation(
            "taus must be strictly increasing and inside (0,1)".into(),
        ));
    }
    Ok(())
}

/// Merge the config file (if any) with the command-line flags; flags win.
pub fn resolve_config(
    global: &GlobalArgs,
    iar_threshold: Option<f64>,
    dar_threshold: Option<f64>,
    models: Option<&[String]>,
    split: Option<&str>,
) -> Result<RunConfig, CliError> {
    let file: FileConfig = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| validation("config", format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| validation("config", format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let prices = global
        .prices
        .clone()
        .or(file.prices)
        .ok_or_else(|| CliError::Validation("no prices file (use --prices)".into()))?;
    let meta = global
        .meta
        .clone()
        .or(file.meta)
        .ok_or_else(|| CliError::Validation("no metadata file (use --meta)".into()))?;
    let out = global.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out"));
    let taus = global.taus.clone().or(file.taus).unwrap_or_else(|| TAU_GRID.to_vec());
    validate_taus(&taus)?;
    let model_names: Vec<String> = models
        .map(|m| m.to_vec())
        .or(file.models)
        .unwrap_or_else(|| vec!["M1".into(), "M2".into(), "M3".into(), "M4".into(), "M5".into()]);
    let split = match split.map(str::to_string).or(file.split) {
        Some(s) => Some(parse_split(&s)?),
        None => None,
    };
    Ok(RunConfig {
        prices,
        meta,
        out,
        seed: global.seed.or(file.seed).unwrap_or(0),
        jobs: global.jobs.or(file.jobs).unwrap_or(0),
        taus,
        exclude: global.exclude.clone().or(file.exclude).unwrap_or_default(),
        iar_threshold: iar_threshold.or(file.iar_threshold).unwrap_or(DEFAULT_IAR_THRESHOLD),
        dar_threshold: dar_threshold.or(file.dar_threshold).unwrap_or(DEFAULT_DAR_THRESHOLD),
        models: parse_models(&model_names)?,
        split,
    })
}

/// Format a cell: finite numbers round-trip, everything else becomes NA.
fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".to_string()
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path)
        .map_err(|e| validation("write", format!("{}: {e}", path.display())))?;
    f.write_all(content.as_bytes())
        .map_err(|e| validation("write", format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pipeline state computed lazily in dependency order.
struct Pipeline {
    cfg: RunConfig,
    artifacts: Vec<String>,
    raw_inflation: Option<InflationPanel>,
    cleaned: Option<InflationPanel>,
    structure: Option<BlockStructure>,
    factors: Option<FactorSet>,
    fits: Option<Vec<QuantileFit>>,
}

impl Pipeline {
    fn new(cfg: RunConfig) -> Self {
        Pipeline {
            cfg,
            artifacts: Vec::new(),
            raw_inflation: None,
            cleaned: None,
            structure: None,
            factors: None,
            fits: None,
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn emit(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        write_file(&self.out_path(name), content)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn inflation(&mut self) -> Result<&InflationPanel, CliError> {
        if self.raw_inflation.is_none() {
            let meta = ingest::load_meta(&self.cfg.meta).map_err(|e| validation("ingest", e))?;
            let meta = ingest::exclude_countries(meta, &self.cfg.exclude);
            if meta.is_empty() {
                return Err(CliError::Validation(
                    "ingest: no countries remain after exclusions".into(),
                ));
            }
            let raw = ingest::load_panel_with_meta(&self.cfg.prices, meta)
                .map_err(|e| validation("ingest", e))?;
            let inflation =
                ingest::cpi_to_inflation(&raw).map_err(|e| validation("ingest", e))?;
            self.raw_inflation = Some(inflation);
        }
        Ok(self.raw_inflation.as_ref().unwrap())
    }

    fn cleaned(&mut self) -> Result<&InflationPanel, CliError> {
        if self.cleaned.is_none() {
            self.inflation()?;
            let panel = self.raw_inflation.as_ref().unwrap();
            let (cleaned, adjustments, reports) = preprocess::preprocess_panel(panel)
                .map_err(|e| numerical("preprocess", e))?;

            let mut outliers = String::from("code,date,original,replacement\n");
            for (j, report) in reports.iter().enumerate() {
                for entry in &report.entries {
                    outliers.push_str(&format!(
                        "{},{},{},{}\n",
                        cleaned.meta[j].code,
                        cleaned.dates[entry.index],
                        cell(entry.original),
                        cell(entry.replacement)
                    ));
                }
            }
            self.emit("outliers.csv", &outliers)?;

            let hyper: Vec<serde_json::Value> = adjustments
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    serde_json::json!({
                        "code": cleaned.meta[j].code,
                        "loglik": a.loglik,
                        "var_level": a.hyperparams.0,
                        "var_seasonal": a.hyperparams.1,
                        "var_irregular": a.hyperparams.2,
                    })
                })
                .collect();
            self.emit(
                "seasonal.json",
                &serde_json::to_string_pretty(&hyper).expect("serializable"),
            )?;
            self.emit_panel("cleaned.csv", &cleaned)?;
            self.cleaned = Some(cleaned);
        }
        Ok(self.cleaned.as_ref().unwrap())
    }

    fn emit_panel(&mut self, name: &str, panel: &InflationPanel) -> Result<(), CliError> {
        let mut s = String::from("date");
        for m in &panel.meta {
            s.push(',');
            s.push_str(&m.code);
        }
        s.push('\n');
        for i in 0..panel.n_periods() {
            s.push_str(&panel.dates[i].to_string());
            for j in 0..panel.n_countries() {
                s.push(',');
                s.push_str(&cell(panel.values[(i, j)]));
            }
            s.push('\n');
        }
        self.emit(name, &s)
    }

    fn structure(&mut self) -> Result<&BlockStructure, CliError> {
        if self.structure.is_none() {
            self.cleaned()?;
            let meta = self.cleaned.as_ref().unwrap().meta.clone();
            self.structure = Some(build_block_structure(&meta));
        }
        Ok(self.structure.as_ref().unwrap())
    }

    fn factors(&mut self) -> Result<&FactorSet, CliError> {
        if self.factors.is_none() {
            self.structure()?;
            let panel = self.cleaned.as_ref().unwrap();
            let structure = self.structure.as_ref().unwrap();
            let fs = estimate_mldfm(panel, structure, &MldfmConfig::default())
                .map_err(|e| numerical("factors", e))?;

            let mut factors_csv = String::from("date");
            for name in FACTOR_NAMES {
                factors_csv.push_str(&format!(",F_{name}"));
            }
            factors_csv.push('\n');
            for i in 0..fs.factors.nrows() {
                factors_csv.push_str(&panel.dates[i].to_string());
                for k in 0..N_FACTORS {
                    factors_csv.push(',');
                    factors_csv.push_str(&cell(fs.factors[(i, k)]));
                }
                factors_csv.push('\n');
            }

            let mut loadings_csv = String::from("code");
            for name in FACTOR_NAMES {
                loadings_csv.push_str(&format!(",lambda_{name}"));
            }
            loadings_csv.push('\n');
            for j in 0..panel.n_countries() {
                loadings_csv.push_str(&panel.meta[j].code);
                for k in 0..N_FACTORS {
                    loadings_csv.push(',');
                    loadings_csv.push_str(&cell(fs.loadings[(j, k)]));
                }
                loadings_csv.push('\n');
            }

            let bands = factor_bands(&fs, structure, 0.9).map_err(|e| numerical("factors", e))?;
            let mut bands_csv = String::from("factor,half_width_90pct\n");
            for (k, name) in FACTOR_NAMES.iter().enumerate() {
                bands_csv.push_str(&format!("F_{name},{}\n", cell(bands[k])));
            }

            let scree_report = scree(panel, None).map_err(|e| numerical("factors", e))?;
            let log = serde_json::json!({
                "converged": fs.converged,
                "iterations": fs.iterations,
                "objective_path": fs.objective_path,
                "scree_shares": scree_report.shares,
                "scree_count_above_5pct": scree_report.count_above_5pct,
            });

            let factors_owned = factors_csv;
            self.emit("factors.csv", &factors_owned)?;
            self.emit("loadings.csv", &loadings_csv)?;
            self.emit("factor_bands.csv", &bands_csv)?;
            self.emit(
                "factor_log.json",
                &serde_json::to_string_pretty(&log).expect("serializable"),
            )?;
            self.factors = Some(fs);
        }
        Ok(self.factors.as_ref().unwrap())
    }

    fn fits(&mut self) -> Result<&[QuantileFit], CliError> {
        if self.fits.is_none() {
            self.factors()?;
            let panel = self.cleaned.as_ref().unwrap();
            let structure = self.structure.as_ref().unwrap();
            let fs = self.factors.as_ref().unwrap();
            let taus = self.cfg.taus.clone();

            use rayon::prelude::*;
            let jobs: Vec<(usize, f64)> = (0..panel.n_countries())
                .flat_map(|c| taus.iter().map(move |&t| (c, t)))
                .collect();
            let results: Vec<Result<(QuantileFit, f64), CliError>> = jobs
                .par_iter()
                .map(|&(c, tau)| {
                    let spec = QuantileSpec::full(tau, c, &structure.mask[c]);
                    let fit = faqr::fa_qr(panel, &fs.factors, &spec).map_err(|e| {
                        numerical("fit", format!("{} tau {tau}: {e}", panel.meta[c].code))
                    })?;
                    let ar = faqr::fa_qr(panel, &fs.factors, &QuantileSpec::ar(tau, c))
                        .map_err(|e| {
                            numerical("fit", format!("{} tau {tau}: {e}", panel.meta[c].code))
                        })?;
                    Ok((fit, ar.aic))
                })
                .collect();

            let mut fits = Vec::with_capacity(results.len());
            let mut csv = String::from("code,tau,mu,phi");
            for name in FACTOR_NAMES {
                csv.push_str(&format!(",beta_{name}"));
            }
            csv.push_str(",se_mu,se_phi");
            for name in FACTOR_NAMES {
                csv.push_str(&format!(",se_beta_{name}"));
            }
            csv.push_str(",pval_mu,pval_phi");
            for name in FACTOR_NAMES {
                csv.push_str(&format!(",pval_beta_{name}"));
            }
            csv.push_str(",wald_F,wald_p,r1,aic,aic_ar,na_reason\n");

            use statrs::distribution::{ContinuousCDF, Normal};
            let normal = Normal::standard();
            for (ji, res) in results.into_iter().enumerate() {
                let (fit, aic_ar) = res?;
                let (c, tau) = jobs[ji];
                // scatter the packed theta back onto the 8 factor slots
                let mut beta = [f64::NAN; N_FACTORS];
                let mut se = [f64::NAN; N_FACTORS + 2];
                let mut pv = [f64::NAN; N_FACTORS + 2];
                let mut beta_se = [f64::NAN; N_FACTORS];
                let mut beta_pv = [f64::NAN; N_FACTORS];
                for idx in 0..fit.fit.theta.len() {
                    se[idx] = fit.cov[(idx, idx)].max(0.0).sqrt();
                    pv[idx] = if se[idx] > 0.0 {
                        2.0 * (1.0 - normal.cdf((fit.fit.theta[idx] / se[idx]).abs()))
                    } else {
                        f64::NAN
                    };
                }
                for (fj, &k) in fit.spec.factors.iter().enumerate() {
                    beta[k] = fit.fit.theta[2 + fj];
                    beta_se[k] = se[2 + fj];
                    beta_pv[k] = pv[2 + fj];
                }
                let any_na = beta.iter().any(|v| !v.is_finite());
                csv.push_str(&format!(
                    "{},{},{},{}",
                    panel.meta[c].code,
                    tau,
                    cell(fit.fit.theta[0]),
                    cell(fit.fit.theta[1])
                ));
                for k in 0..N_FACTORS {
                    csv.push_str(&format!(",{}", cell(beta[k])));
                }
                csv.push_str(&format!(",{},{}", cell(se[0]), cell(se[1])));
                for k in 0..N_FACTORS {
                    csv.push_str(&format!(",{}", cell(beta_se[k])));
                }
                csv.push_str(&format!(",{},{}", cell(pv[0]), cell(pv[1])));
                for k in 0..N_FACTORS {
                    csv.push_str(&format!(",{}", cell(beta_pv[k])));
                }
                let (wf, wp) = fit.wald.unwrap_or((f64::NAN, f64::NAN));
                csv.push_str(&format!(
                    ",{},{},{},{},{},{}\n",
                    cell(wf),
                    cell(wp),
                    cell(fit.r1),
                    cell(fit.aic),
                    cell(aic_ar),
                    if any_na { "factor outside country block" } else { "" }
                ));
                fits.push(fit);
            }
            self.emit("fit.csv", &csv)?;
            self.fits = Some(fits);
        }
        Ok(self.fits.as_ref().unwrap())
    }

    /// In-sample conditional quantile paths per country: rows are target
    /// dates 1..T-1, one column per tau.
    fn quantile_paths(&mut self) -> Result<Vec<Vec<Vec<f64>>>, CliError> {
        self.fits()?;
        let panel = self.cleaned.as_ref().unwrap();
        let fs = self.factors.as_ref().unwrap();
        let fits = self.fits.as_ref().unwrap();
        let n = panel.n_countries();
        let n_taus = self.cfg.taus.len();
        let mut paths = vec![Vec::new(); n];
        for (fi, fit) in fits.iter().enumerate() {
            let c = fi / n_taus;
            let y = panel.series(c);
            let (_, x) = faqr::build_design(&y, &fs.factors, &fit.spec)
                .map_err(|e| numerical("density", e))?;
            let q: Vec<f64> = (0..x.nrows())
                .map(|i| x.row(i).iter().zip(fit.fit.theta.iter()).map(|(a, b)| a * b).sum())
                .collect();
            paths[c].push(q);
        }
        Ok(paths)
    }

    fn density(&mut self) -> Result<(), CliError> {
        if self.cfg.taus.len() < 4 {
            return Err(CliError::Validation(
                "density: need at least four quantile levels".into(),
            ));
        }
        let taus = self.cfg.taus.clone();
        let paths = self.quantile_paths()?;
        let panel = self.cleaned.as_ref().unwrap();
        let mut csv = String::from("code,y,pdf,cdf,crossing_flag\n");
        for (c, per_tau) in paths.iter().enumerate() {
            let last = per_tau[0].len() - 1;
            let qhat: Vec<f64> = per_tau.iter().map(|q| q[last]).collect();
            let (sorted, crossed) = density::rearrange(&qhat);
            let params = density::fit_skewt(&sorted, &taus)
                .map_err(|e| numerical("density", format!("{}: {e}", panel.meta[c].code)))?;
            let lo = sorted[0] - (sorted[taus.len() - 1] - sorted[0]);
            let hi = sorted[taus.len() - 1] + (sorted[taus.len() - 1] - sorted[0]);
            for g in 0..=200 {
                let y = lo + (hi - lo) * g as f64 / 200.0;
                let pdf = density::skewt_density(&params, y)
                    .map_err(|e| numerical("density", e))?;
                let cdf =
                    density::skewt_cdf(&params, y).map_err(|e| numerical("density", e))?;
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    panel.meta[c].code,
                    cell(y),
                    cell(pdf),
                    cell(cdf),
                    u8::from(crossed)
                ));
            }
        }
        self.emit("density.csv", &csv)
    }

    fn risk(&mut self) -> Result<(), CliError> {
        if self.cfg.taus.len() < 4 {
            return Err(CliError::Validation(
                "risk: need at least four quantile levels".into(),
            ));
        }
        let taus = self.cfg.taus.clone();
        let paths = self.quantile_paths()?;
        let panel = self.cleaned.as_ref().unwrap();
        let (pi_iar, pi_dar) = (self.cfg.iar_threshold, self.cfg.dar_threshold);

        use rayon::prelude::*;
        let rows: Vec<Result<String, CliError>> = paths
            .par_iter()
            .enumerate()
            .map(|(c, per_tau)| {
                let mut out = String::new();
                let mut warm: Option<SkewTParams> = None;
                for t in 0..per_tau[0].len() {
                    let qhat: Vec<f64> = per_tau.iter().map(|q| q[t]).collect();
                    let (sorted, crossed) = density::rearrange(&qhat);
                    let params = density::fit_skewt_warm(&sorted, &taus, warm.as_ref())
                        .map_err(|e| {
                            numerical(
                                "risk",
                                format!("{} {}: {e}", panel.meta[c].code, panel.dates[t + 1]),
                            )
                        })?;
                    let measures = density::risk(&params, pi_iar, pi_dar)
                        .map_err(|e| numerical("risk", e))?;
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{}\n",
                        panel.meta[c].code,
                        panel.dates[t + 1],
                        cell(params.xi),
                        cell(params.omega),
                        cell(params.alpha),
                        cell(params.nu),
                        u8::from(crossed),
                        cell(measures.iar),
                        cell(measures.dar)
                    ));
                    warm = Some(params);
                }
                Ok(out)
            })
            .collect();

        let mut csv = String::from("code,date,xi,omega,alpha,nu,crossing_flag,iar,dar\n");
        for r in rows {
            csv.push_str(&r?);
        }
        self.emit("risk.csv", &csv)
    }

    fn evaluate(&mut self) -> Result<(), CliError> {
        if self.cfg.taus.len() != 5 {
            return Err(CliError::Validation(
                "evaluate: the scoring grid needs exactly five quantile levels".into(),
            ));
        }
        self.structure()?;
        let panel = self.cleaned.as_ref().unwrap().clone();
        let structure = self.structure.as_ref().unwrap().clone();
        let split = match self.cfg.split {
            Some(s) => s,
            None => {
                // default: last third out of sample, at least 60 in sample
                let t = panel.n_periods();
                let p = (t / 3).max(1);
                SplitConfig { r: t - p, p }
            }
        };
        split
            .validate(panel.n_periods())
            .map_err(|e| validation("evaluate", e))?;
        let taus = self.cfg.taus.clone();
        let models = self.cfg.models.clone();
        let report = evaluate::model_grid(
            &panel,
            &structure,
            &split,
            &taus,
            &models,
            &MldfmConfig::default(),
        )
        .map_err(|e| numerical("evaluate", e))?;

        // scores.csv: one row per (code, model, tau); the CRPS columns are
        // per (code, model) and repeat across the tau rows
        let mut scores = String::from(
            "code,model,tau,qs,ratio_qs,crps_e,crps_l,crps_r,\
             ratio_crps_e,ratio_crps_l,ratio_crps_r,dm_stat,dm_p\n",
        );
        for row in &report.qs_rows {
            let crps_of = |w: CrpsWeighting| {
                report
                    .crps_rows
                    .iter()
                    .find(|r| r.country == row.country && r.model == row.model && r.weighting == w)
                    .map(|r| (r.crps, r.ratio))
                    .unwrap_or((f64::NAN, f64::NAN))
            };
            let (ce, rce) = crps_of(CrpsWeighting::E);
            let (cl, rcl) = crps_of(CrpsWeighting::L);
            let (cr, rcr) = crps_of(CrpsWeighting::R);
            scores.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                panel.meta[row.country].code,
                row.model.name(),
                row.tau,
                cell(row.qs),
                cell(row.ratio),
                cell(ce),
                cell(cl),
                cell(cr),
                cell(rce),
                cell(rcl),
                cell(rcr),
                cell(row.dm_stat),
                cell(row.dm_p)
            ));
        }
        self.emit("scores.csv", &scores)?;

        // fluctuation.csv over the CRPS-E loss differential per country
        let table = FluctuationTable::bundled();
        let m = default_fluctuation_window(report.common_vintages.len());
        let mut fluct = String::from("code,model,date,statistic,cv_lo,cv_hi\n");
        if m < report.common_vintages.len() {
            for (mid, out) in &report.outputs {
                for c in 0..panel.n_countries() {
                    let d = crps_loss_diff(
                        &out.records,
                        &report.benchmark.records,
                        c,
                        &taus,
                        &report.common_vintages,
                    );
                    let res = evaluate::fluctuation_test(&d, m, &table)
                        .map_err(|e| numerical("evaluate", e))?;
                    for (wi, stat) in res.path.iter().enumerate() {
                        // window ends at vintage index m-1+wi; report the
                        // forecast target date of that vintage
                        let v = report.common_vintages[m - 1 + wi];
                        fluct.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            panel.meta[c].code,
                            mid.name(),
                            panel.dates[v + 1],
                            cell(*stat),
                            cell(-res.cv_5pct),
                            cell(res.cv_5pct)
                        ));
                    }
                }
            }
        }
        self.emit("fluctuation.csv", &fluct)?;

        // group significance shares
        let mut shares = String::from("model,group,metric,share_significant_pct\n");
        for row in &report.group_shares {
            shares.push_str(&format!(
                "{},{},{},{}\n",
                row.model.name(),
                row.group,
                row.metric,
                cell(row.share_significant)
            ));
        }
        self.emit("group_shares.csv", &shares)?;

        // per-vintage artifacts: factor path end points and parameters
        let vdir = self.out_path("vintages");
        fs::create_dir_all(&vdir)
            .map_err(|e| validation("evaluate", format!("{}: {e}", vdir.display())))?;
        for (mid, out) in
            report.outputs.iter().chain(std::iter::once(&(ModelId::ArQr, report.benchmark)).map(|r| r))
        {
            let mut params = String::from("vintage_date,code,tau,coefficients\n");
            for art in &out.vintages {
                for (c, tau, theta) in &art.params {
                    let coefs: Vec<String> = theta.iter().map(|v| cell(*v)).collect();
                    params.push_str(&format!(
                        "{},{},{},{}\n",
                        art.date,
                        panel.meta[*c].code,
                        tau,
                        coefs.join(";")
                    ));
                }
            }
            let name = format!("vintages/params_{}.csv", mid.name());
            write_file(&self.out_path(&name), &params)?;
            self.artifacts.push(name);
        }
        // factor path at each window end (the regressor the forecast used)
        if let Some((_, out)) = report.outputs.iter().find(|(m, _)| m.needs_factors()) {
            let mut fcsv = String::from("vintage_date");
            for name in FACTOR_NAMES {
                fcsv.push_str(&format!(",F_{name}"));
            }
            fcsv.push('\n');
            for art in &out.vintages {
                fcsv.push_str(&art.date.to_string());
                let last = art.factors.nrows() - 1;
                for k in 0..N_FACTORS {
                    fcsv.push(',');
                    fcsv.push_str(&cell(art.factors[(last, k)]));
                }
                fcsv.push('\n');
            }
            write_file(&self.out_path("vintages/factors.csv"), &fcsv)?;
            self.artifacts.push("vintages/factors.csv".into());
        }

        if !report.failures.is_empty() {
            let mut flog = String::from("model,vintage,error\n");
            for (mid, v, e) in &report.failures {
                flog.push_str(&format!("{},{},{}\n", mid.name(), v, e.replace(',', ";")));
            }
            self.emit("evaluate_failures.csv", &flog)?;
        }
        Ok(())
    }

    fn report(&mut self) -> Result<(), CliError> {
        // the report stage only summarizes; all heavy artifacts come from
        // the stages it depends on
        let panel = self.cleaned.as_ref().unwrap();
        let summary = serde_json::json!({
            "countries": panel.n_countries(),
            "periods": panel.n_periods(),
            "first_date": panel.dates.first().map(|d| d.to_string()),
            "last_date": panel.dates.last().map(|d| d.to_string()),
            "taus": self.cfg.taus,
            "models": self.cfg.models.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "factor_converged": self.factors.as_ref().map(|f| f.converged),
            "factor_iterations": self.factors.as_ref().map(|f| f.iterations),
        });
        self.emit("report.json", &serde_json::to_string_pretty(&summary).expect("serializable"))
    }

    fn write_manifest(&mut self) -> Result<(), CliError> {
        // hash the config without the output path: where the artifacts go
        // has no bearing on what they contain
        let mut cfg_value = serde_json::to_value(&self.cfg).expect("serializable");
        cfg_value.as_object_mut().expect("object").remove("out");
        let cfg_json = serde_json::to_string(&cfg_value).expect("serializable");
        let mut inputs = BTreeMap::new();
        for path in [&self.cfg.prices, &self.cfg.meta] {
            let bytes = fs::read(path)
                .map_err(|e| validation("manifest", format!("{}: {e}", path.display())))?;
            inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        }
        self.artifacts.sort();
        self.artifacts.dedup();
        let manifest = serde_json::json!({
            "tool_version": env!("CARGO_PKG_VERSION"),
            "config_hash": sha256_hex(cfg_json.as_bytes()),
            "inputs": inputs,
            "seed": self.cfg.seed,
            "artifacts": self.artifacts,
        });
        write_file(
            &self.out_path("manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("serializable"),
        )
    }
}

/// Per-vintage CRPS-E loss differential of one country (model − benchmark).
fn crps_loss_diff(
    model_records: &[evaluate::ForecastRecord],
    bench_records: &[evaluate::ForecastRecord],
    country: usize,
    taus: &[f64],
    vintages: &[usize],
) -> Vec<f64> {
    let mut model_loss: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    let mut bench_loss: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    for (records, losses) in
        [(model_records, &mut model_loss), (bench_records, &mut bench_loss)]
    {
        for r in records.iter().filter(|r| r.country == country) {
            *losses.entry(r.vintage).or_insert(0.0) +=
                evaluate::tick_loss(r.qhat, r.realized, r.tau) / taus.len() as f64;
        }
    }
    vintages.iter().map(|v| model_loss[v] - bench_loss[v]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum StageId {
    Ingest,
    Preprocess,
    Factors,
    Fit,
    Density,
    Risk,
    Evaluate,
    Report,
}

impl StageId {
    fn parse(s: &str) -> Option<StageId> {
        match s.trim().to_lowercase().as_str() {
            "ingest" => Some(StageId::Ingest),
            "preprocess" => Some(StageId::Preprocess),
            "factors" => Some(StageId::Factors),
            "fit" => Some(StageId::Fit),
            "density" => Some(StageId::Density),
            "risk" => Some(StageId::Risk),
            "evaluate" => Some(StageId::Evaluate),
            "report" => Some(StageId::Report),
            _ => None,
        }
    }
}

fn run_stages(cfg: RunConfig, stages: &[StageId]) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| validation("setup", format!("{}: {e}", cfg.out.display())))?;
    if cfg.jobs > 0 {
        // ignore the error if a global pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    let mut pipeline = Pipeline::new(cfg);
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    for stage in ordered {
        match stage {
            StageId::Ingest => {
                pipeline.inflation()?;
                let panel = pipeline.raw_inflation.as_ref().unwrap().clone();
                pipeline.emit_panel("inflation.csv", &panel)?;
            }
            StageId::Preprocess => {
                pipeline.cleaned()?;
            }
            StageId::Factors => {
                pipeline.factors()?;
            }
            StageId::Fit => {
                pipeline.fits()?;
            }
            StageId::Density => pipeline.density()?,
            StageId::Risk => pipeline.risk()?,
            StageId::Evaluate => pipeline.evaluate()?,
            StageId::Report => {
                pipeline.cleaned()?;
                pipeline.factors()?;
                pipeline.report()?;
            }
        }
    }
    pipeline.write_manifest()
}

/// Entry point: returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = dispatch(cli);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest => {
            run_stages(resolve_config(g, None, None, None, None)?, &[StageId::Ingest])
        }
        Command::Preprocess => run_stages(
            resolve_config(g, None, None, None, None)?,
            &[StageId::Preprocess],
        ),
        Command::Factors => {
            run_stages(resolve_config(g, None, None, None, None)?, &[StageId::Factors])
        }
        Command::Fit => run_stages(resolve_config(g, None, None, None, None)?, &[StageId::Fit]),
        Command::Density => {
            run_stages(resolve_config(g, None, None, None, None)?, &[StageId::Density])
        }
        Command::Risk { iar_threshold, dar_threshold } => run_stages(
            resolve_config(g, iar_threshold, dar_threshold, None, None)?,
            &[StageId::Risk],
        ),
        Command::Evaluate { models, split } => run_stages(
            resolve_config(g, None, None, models.as_deref(), split.as_deref())?,
            &[StageId::Evaluate],
        ),
        Command::Report { iar_threshold, dar_threshold, models, split } => run_stages(
            resolve_config(g, iar_threshold, dar_threshold, models.as_deref(), split.as_deref())?,
            &[
                StageId::Ingest,
                StageId::Preprocess,
                StageId::Factors,
                StageId::Fit,
                StageId::Density,
                StageId::Risk,
                StageId::Evaluate,
                StageId::Report,
            ],
        ),
        Command::Run { stages, iar_threshold, dar_threshold, models, split } => {
            let mut ids = Vec::new();
            for s in &stages {
                ids.push(StageId::parse(s).ok_or_else(|| {
                    CliError::Validation(format!("unknown stage `{s}`"))
                })?);
            }
            if ids.is_empty() {
                return Err(CliError::Validation("no stages given".into()));
            }
            run_stages(
                resolve_config(
                    g,
                    iar_threshold,
                    dar_threshold,
                    models.as_deref(),
                    split.as_deref(),
                )?,
                &ids,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parsing() {
        let s = parse_split("155:132").unwrap();
        assert_eq!(s, SplitConfig { r: 155, p: 132 });
        assert!(parse_split("155").is_err());
        assert!(parse_split("a:b").is_err());
    }

    #[test]
    fn model_parsing_dedupes_and_drops_benchmark() {
        let models = parse_models(&[
            "M1".into(),
            "m1".into(),
            "MB".into(),
            "AR_QR".into(),
        ])
        .unwrap();
        assert_eq!(models, vec![ModelId::M1, ModelId::MB]);
        assert!(parse_models(&["M9".into()]).is_err());
    }

    #[test]
    fn tau_validation() {
        assert!(validate_taus(&[0.05, 0.25, 0.5]).is_ok());
        assert!(validate_taus(&[0.5, 0.25]).is_err());
        assert!(validate_taus(&[0.0, 0.5]).is_err());
        assert!(validate_taus(&[]).is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.toml");
        fs::write(
            &cfg_path,
            "prices = \"p.csv\"\nmeta = \"m.csv\"\nseed = 7\ntaus = [0.1, 0.9]\n",
        )
        .unwrap();
        let global = GlobalArgs {
            config: Some(cfg_path),
            seed: Some(42),
            ..GlobalArgs::default()
        };
        let cfg = resolve_config(&global, None, None, None, None).unwrap();
        assert_eq!(cfg.seed, 42); // flag wins
        assert_eq!(cfg.taus, vec![0.1, 0.9]); // file value kept
        assert_eq!(cfg.prices, PathBuf::from("p.csv"));
    }

    #[test]
    fn na_formatting() {
        assert_eq!(cell(1.5), "1.5");
        assert_eq!(cell(f64::NAN), "NA");
        assert_eq!(cell(f64::INFINITY), "NA");
    }
}
