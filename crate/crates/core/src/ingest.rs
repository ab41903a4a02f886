//! Loading and validation of raw CPI panels, and the transform to
//! annualized month-on-month inflation.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dates::YearMonth;

/// Geographical region of a country.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Africa,
    America,
    Asia,
    Europe,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Africa, Region::America, Region::Asia, Region::Europe];

    pub fn index(&self) -> usize {
        match self {
            Region::Africa => 0,
            Region::America => 1,
            Region::Asia => 2,
            Region::Europe => 3,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::Africa => "Africa",
            Region::America => "America",
            Region::Asia => "Asia",
            Region::Europe => "Europe",
        };
        f.write_str(s)
    }
}

impl FromStr for Region {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "Africa" => Ok(Region::Africa),
            "America" => Ok(Region::America),
            "Asia" => Ok(Region::Asia),
            "Europe" => Ok(Region::Europe),
            other => Err(IngestError::UnknownRegion(other.to_string())),
        }
    }
}

/// Income / development classification of a country.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Income {
    /// Advanced economies.
    Adv,
    /// Middle-high income emerging and developing economies.
    Mhi,
    /// Low income emerging economies.
    Li,
}

impl Income {
    pub const ALL: [Income; 3] = [Income::Adv, Income::Mhi, Income::Li];

    pub fn index(&self) -> usize {
        match self {
            Income::Adv => 0,
            Income::Mhi => 1,
            Income::Li => 2,
        }
    }
}

impl fmt::Display for Income {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Income::Adv => "ADV",
            Income::Mhi => "MHI",
            Income::Li => "LI",
        };
        f.write_str(s)
    }
}

impl FromStr for Income {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ADV" => Ok(Income::Adv),
            "MHI" => Ok(Income::Mhi),
            "LI" => Ok(Income::Li),
            other => Err(IngestError::UnknownIncome(other.to_string())),
        }
    }
}

/// Country metadata: code, name and the two block classifications.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryMeta {
    pub code: String,
    pub name: String,
    pub region: Region,
    pub income: Income,
}

/// Balanced panel of CPI index levels, one column per country.
///
/// Rows are months (length `T + 1` relative to the inflation panel derived
/// from it); columns follow the metadata order.
#[derive(Debug, Clone)]
pub struct RawCpiPanel {
    pub dates: Vec<YearMonth>,
    pub values: DMatrix<f64>,
    pub meta: Vec<CountryMeta>,
}

/// Processing stage of an inflation panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Deseasonalized,
    Cleaned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "raw",
            Stage::Deseasonalized => "deseasonalized",
            Stage::Cleaned => "cleaned",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "raw" => Ok(Stage::Raw),
            "deseasonalized" => Ok(Stage::Deseasonalized),
            "cleaned" => Ok(Stage::Cleaned),
            other => Err(IngestError::UnknownStage(other.to_string())),
        }
    }
}

/// Balanced T x N panel of annualized month-on-month inflation, percent/year.
#[derive(Debug, Clone)]
pub struct InflationPanel {
    pub dates: Vec<YearMonth>,
    pub values: DMatrix<f64>,
    pub meta: Vec<CountryMeta>,
    pub stage: Stage,
}

impl InflationPanel {
    pub fn n_periods(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_countries(&self) -> usize {
        self.values.ncols()
    }

    /// Column index of a country code, if present.
    pub fn country_index(&self, code: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.code == code)
    }

    /// One country's series as a plain vector.
    pub fn series(&self, col: usize) -> Vec<f64> {
        self.values.column(col).iter().copied().collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("missing value at date {date}, country {code}")]
    MissingValue { date: String, code: String },
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("unknown region `{0}` (expected Africa, America, Asia or Europe)")]
    UnknownRegion(String),
    #[error("unknown income class `{0}` (expected ADV, MHI or LI)")]
    UnknownIncome(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("duplicate country code `{0}`")]
    DuplicateCountry(String),
    #[error("prices file has no column for country `{0}`")]
    MissingCountry(String),
    #[error("non-positive CPI level {value} at date {date}, country {code}")]
    NonPositivePrice { date: String, code: String, value: f64 },
    #[error("dates are not strictly increasing by one month at {0}")]
    NonMonthlyDates(String),
    #[error("{0}")]
    BadDate(#[from] crate::dates::DateParseError),
    #[error("{0}")]
    Malformed(String),
}

/// Read the country metadata CSV (`code,name,region,income`).
pub fn load_meta(path: &Path) -> Result<Vec<CountryMeta>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| {
        IngestError::Csv { path: path.display().to_string(), source: e }
    })?;
    let mut meta = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::Csv { path: path.display().to_string(), source: e })?;
        if rec.len() < 4 {
            return Err(IngestError::Malformed(format!(
                "metadata row has {} fields, expected code,name,region,income",
                rec.len()
            )));
        }
        let code = rec[0].to_string();
        if code.is_empty() {
            return Err(IngestError::Malformed("empty country code".into()));
        }
        if seen.insert(code.clone(), ()).is_some() {
            return Err(IngestError::DuplicateCountry(code));
        }
        meta.push(CountryMeta {
            code,
            name: rec[1].to_string(),
            region: rec[2].parse()?,
            income: rec[3].parse()?,
        });
    }
    Ok(meta)
}

fn validate_dates(dates: &[YearMonth]) -> Result<(), IngestError> {
    for w in dates.windows(2) {
        if w[1] != w[0].next() {
            return Err(IngestError::NonMonthlyDates(w[1].to_string()));
        }
    }
    Ok(())
}

fn parse_cell(field: &str, date: &YearMonth, code: &str) -> Result<f64, IngestError> {
    let t = field.trim();
    if t.is_empty() {
        return Err(IngestError::MissingValue { date: date.to_string(), code: code.to_string() });
    }
    t.parse::<f64>().map_err(|_| {
        IngestError::Malformed(format!("cannot parse `{t}` at date {date}, country {code}"))
    })
}

/// Load a prices file together with country metadata.
///
/// The prices file may be wide (`date,<code1>,<code2>,...`) or long
/// (`date,code,value`); the long form is pivoted and checked for balance.
/// Columns are realigned to the metadata order.
pub fn load_panel(prices_path: &Path, meta_path: &Path) -> Result<RawCpiPanel, IngestError> {
    let meta = load_meta(meta_path)?;
    load_panel_with_meta(prices_path, meta)
}

/// As [`load_panel`] but with already-parsed metadata (used by `--exclude`).
pub fn load_panel_with_meta(
    prices_path: &Path,
    meta: Vec<CountryMeta>,
) -> Result<RawCpiPanel, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(prices_path)
        .map_err(|e| IngestError::Csv { path: prices_path.display().to_string(), source: e })?;
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Csv { path: prices_path.display().to_string(), source: e })?
        .clone();
    let header_fields: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();

    let is_long = header_fields.len() == 3
        && header_fields[1].eq_ignore_ascii_case("code")
        && header_fields[2].eq_ignore_ascii_case("value");

    let (dates, values) = if is_long {
        read_long(&mut rdr, prices_path, &meta)?
    } else {
        read_wide(&mut rdr, prices_path, &header_fields, &meta)?
    };

    validate_dates(&dates)?;
    if dates.len() < 2 {
        return Err(IngestError::UnbalancedPanel(format!(
            "need at least two monthly observations, got {}",
            dates.len()
        )));
    }
    Ok(RawCpiPanel { dates, values, meta })
}

fn read_wide(
    rdr: &mut csv::Reader<std::fs::File>,
    path: &Path,
    header_fields: &[String],
    meta: &[CountryMeta],
) -> Result<(Vec<YearMonth>, DMatrix<f64>), IngestError> {
    // Map metadata order onto prices-file column positions.
    let mut col_of: Vec<usize> = Vec::with_capacity(meta.len());
    for m in meta {
        let pos = header_fields
            .iter()
            .position(|h| *h == m.code)
            .ok_or_else(|| IngestError::MissingCountry(m.code.clone()))?;
        col_of.push(pos);
    }

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::Csv { path: path.display().to_string(), source: e })?;
        if rec.len() != header_fields.len() {
            return Err(IngestError::UnbalancedPanel(format!(
                "row `{}` has {} fields, header has {}",
                rec.get(0).unwrap_or(""),
                rec.len(),
                header_fields.len()
            )));
        }
        let date: YearMonth = rec[0].parse()?;
        let mut row = Vec::with_capacity(meta.len());
        for (m, &pos) in meta.iter().zip(&col_of) {
            row.push(parse_cell(&rec[pos], &date, &m.code)?);
        }
        dates.push(date);
        rows.push(row);
    }
    let values = DMatrix::from_fn(rows.len(), meta.len(), |i, j| rows[i][j]);
    Ok((dates, values))
}

fn read_long(
    rdr: &mut csv::Reader<std::fs::File>,
    path: &Path,
    meta: &[CountryMeta],
) -> Result<(Vec<YearMonth>, DMatrix<f64>), IngestError> {
    let idx_of: HashMap<&str, usize> =
        meta.iter().enumerate().map(|(i, m)| (m.code.as_str(), i)).collect();
    let mut cells: HashMap<(YearMonth, usize), f64> = HashMap::new();
    let mut dates: Vec<YearMonth> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::Csv { path: path.display().to_string(), source: e })?;
        if rec.len() != 3 {
            return Err(IngestError::Malformed(format!(
                "long-format row has {} fields, expected date,code,value",
                rec.len()
            )));
        }
        let date: YearMonth = rec[0].parse()?;
        let code = rec[1].trim();
        let Some(&j) = idx_of.get(code) else {
            // Ignore countries outside the metadata list.
            continue;
        };
        let v = parse_cell(&rec[2], &date, code)?;
        if cells.insert((date, j), v).is_some() {
            return Err(IngestError::UnbalancedPanel(format!(
                "duplicate observation for {} at {}",
                code, date
            )));
        }
        if !dates.contains(&date) {
            dates.push(date);
        }
    }
    dates.sort();
    let mut values = DMatrix::zeros(dates.len(), meta.len());
    for (i, d) in dates.iter().enumerate() {
        for (j, m) in meta.iter().enumerate() {
            match cells.get(&(*d, j)) {
                Some(&v) => values[(i, j)] = v,
                None => {
                    return Err(IngestError::MissingValue {
                        date: d.to_string(),
                        code: m.code.clone(),
                    })
                }
            }
        }
    }
    Ok((dates, values))
}

/// Transform CPI levels to annualized month-on-month inflation,
/// `y_t = 1200 * (ln CPI_t - ln CPI_{t-1})`.
pub fn cpi_to_inflation(panel: &RawCpiPanel) -> Result<InflationPanel, IngestError> {
    let (rows, cols) = panel.values.shape();
    for i in 0..rows {
        for j in 0..cols {
            let v = panel.values[(i, j)];
            if v <= 0.0 || !v.is_finite() {
                return Err(IngestError::NonPositivePrice {
                    date: panel.dates[i].to_string(),
                    code: panel.meta[j].code.clone(),
                    value: v,
                });
            }
        }
    }
    let t = rows - 1;
    let values = DMatrix::from_fn(t, cols, |i, j| {
        1200.0 * (panel.values[(i + 1, j)].ln() - panel.values[(i, j)].ln())
    });
    Ok(InflationPanel {
        dates: panel.dates[1..].to_vec(),
        values,
        meta: panel.meta.clone(),
        stage: Stage::Raw,
    })
}

/// Drop the listed country codes from a metadata list (`--exclude`).
pub fn exclude_countries(meta: Vec<CountryMeta>, exclude: &[String]) -> Vec<CountryMeta> {
    meta.into_iter().filter(|m| !exclude.iter().any(|e| e == &m.code)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const META: &str = "code,name,region,income\nAAA,Aland,Europe,ADV\nBBB,Bland,Asia,MHI\n";

    #[test]
    fn loads_minimal_wide_panel() {
        let meta = write_temp(META);
        let prices = write_temp(
            "date,AAA,BBB\n2000-01,100,200\n2000-02,101,202\n2000-03,102,203\n2000-04,103,205\n",
        );
        let panel = load_panel(prices.path(), meta.path()).unwrap();
        assert_eq!(panel.dates.len(), 4);
        assert_eq!(panel.values.shape(), (4, 2));
        assert_eq!(panel.meta[0].code, "AAA");
    }

    #[test]
    fn realigns_columns_to_metadata_order() {
        let meta = write_temp(META);
        let prices = write_temp("date,BBB,AAA\n2000-01,200,100\n2000-02,202,101\n");
        let panel = load_panel(prices.path(), meta.path()).unwrap();
        assert_eq!(panel.values[(0, 0)], 100.0);
        assert_eq!(panel.values[(0, 1)], 200.0);
    }

    #[test]
    fn empty_cell_is_missing_value() {
        let meta = write_temp(META);
        let prices = write_temp("date,AAA,BBB\n2000-01,100,200\n2000-02,,202\n");
        let err = load_panel(prices.path(), meta.path()).unwrap_err();
        assert!(matches!(err, IngestError::MissingValue { .. }), "{err}");
    }

    #[test]
    fn long_format_pivots_and_checks_balance() {
        let meta = write_temp(META);
        let prices = write_temp(
            "date,code,value\n2000-01,AAA,100\n2000-01,BBB,200\n2000-02,AAA,101\n2000-02,BBB,202\n",
        );
        let panel = load_panel(prices.path(), meta.path()).unwrap();
        assert_eq!(panel.values.shape(), (2, 2));

        let ragged = write_temp(
            "date,code,value\n2000-01,AAA,100\n2000-01,BBB,200\n2000-02,AAA,101\n",
        );
        let err = load_panel(ragged.path(), meta.path()).unwrap_err();
        assert!(matches!(err, IngestError::MissingValue { .. }), "{err}");
    }

    #[test]
    fn duplicate_country_rejected() {
        let meta = write_temp("code,name,region,income\nAAA,A,Europe,ADV\nAAA,A2,Asia,MHI\n");
        let err = load_meta(meta.path()).unwrap_err();
        assert!(matches!(err, IngestError::DuplicateCountry(_)));
    }

    #[test]
    fn bad_enums_rejected() {
        let meta = write_temp("code,name,region,income\nAAA,A,Mars,ADV\n");
        assert!(matches!(load_meta(meta.path()).unwrap_err(), IngestError::UnknownRegion(_)));
        let meta = write_temp("code,name,region,income\nAAA,A,Asia,RICH\n");
        assert!(matches!(load_meta(meta.path()).unwrap_err(), IngestError::UnknownIncome(_)));
    }

    #[test]
    fn non_monthly_dates_rejected() {
        let meta = write_temp(META);
        let prices = write_temp("date,AAA,BBB\n2000-01,100,200\n2000-03,101,202\n");
        let err = load_panel(prices.path(), meta.path()).unwrap_err();
        assert!(matches!(err, IngestError::NonMonthlyDates(_)));
    }

    fn panel_from(values: &[f64], n: usize) -> RawCpiPanel {
        let rows = values.len() / n;
        let mut dates: Vec<YearMonth> = vec!["2000-01".parse().unwrap()];
        for _ in 1..rows {
            dates.push(dates.last().unwrap().next());
        }
        let meta = (0..n)
            .map(|j| CountryMeta {
                code: format!("C{j:02}"),
                name: format!("Country {j}"),
                region: Region::Europe,
                income: Income::Adv,
            })
            .collect();
        RawCpiPanel {
            dates,
            values: DMatrix::from_row_slice(rows, n, values),
            meta,
        }
    }

    #[test]
    fn constant_cpi_gives_zero_inflation() {
        let p = panel_from(&[100.0, 100.0, 100.0, 100.0], 1);
        let infl = cpi_to_inflation(&p).unwrap();
        assert_eq!(infl.stage, Stage::Raw);
        assert!(infl.values.iter().all(|&v| v == 0.0));
        assert_eq!(infl.n_periods(), 3);
    }

    #[test]
    fn one_percent_rise_annualizes() {
        let p = panel_from(&[100.0, 101.0], 1);
        let infl = cpi_to_inflation(&p).unwrap();
        let expected = 1200.0 * (1.01f64).ln();
        assert!((infl.values[(0, 0)] - expected).abs() < 1e-12);
        assert!((expected - 11.940).abs() < 1e-2);
    }

    #[test]
    fn log_exact_case() {
        let p = panel_from(&[100.0, 100.0 * (0.01f64).exp()], 1);
        let infl = cpi_to_inflation(&p).unwrap();
        assert!((infl.values[(0, 0)] - 12.0).abs() < 1e-10);
    }

    #[test]
    fn scale_invariance() {
        let base = [100.0, 103.0, 101.5, 107.0];
        let p1 = panel_from(&base, 1);
        let scaled: Vec<f64> = base.iter().map(|v| v * 7.3).collect();
        let p2 = panel_from(&scaled, 1);
        let i1 = cpi_to_inflation(&p1).unwrap();
        let i2 = cpi_to_inflation(&p2).unwrap();
        for (a, b) in i1.values.iter().zip(i2.values.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn twelve_month_sum_matches_annual_log_diff() {
        let levels: Vec<f64> = (0..13).map(|i| 100.0 * (1.0 + 0.003 * i as f64)).collect();
        let p = panel_from(&levels, 1);
        let infl = cpi_to_inflation(&p).unwrap();
        let monthly_sum: f64 = infl.values.iter().sum::<f64>() / 12.0;
        let annual = 100.0 * (levels[12].ln() - levels[0].ln());
        assert!((monthly_sum - annual).abs() < 1e-10);
    }

    #[test]
    fn negative_price_rejected() {
        let p = panel_from(&[100.0, -1.0], 1);
        assert!(matches!(cpi_to_inflation(&p).unwrap_err(), IngestError::NonPositivePrice { .. }));
    }
}
