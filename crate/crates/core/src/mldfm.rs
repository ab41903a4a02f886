//! Multi-level dynamic factor model with one global factor, four regional
//! factors and three income-group factors, estimated by sequential least
//! squares over the overlapping-block zero-restriction pattern on the
//! loading matrix.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ingest::{CountryMeta, Income, InflationPanel, Region};

/// Number of factors: global + 4 regions + 3 income groups.
pub const N_FACTORS: usize = 8;

/// Factor column labels, in storage order.
pub const FACTOR_NAMES: [&str; N_FACTORS] = ["g", "Af", "Am", "As", "Eu", "Ad", "Mi", "Li"];

/// Column index of a region's factor.
pub fn region_col(r: Region) -> usize {
    1 + r.index()
}

/// Column index of an income group's factor.
pub fn income_col(i: Income) -> usize {
    5 + i.index()
}

#[derive(Debug, thiserror::Error)]
pub enum MldfmError {
    #[error("rank deficiency: {0}")]
    RankDeficiency(String),
    #[error("empty country subset")]
    EmptySubset,
    #[error("factor count {0} outside 1..=min(T, N)")]
    BadFactorCount(usize),
    #[error("sample too short: T = {0}, need T > 8")]
    ShortSample(usize),
}

/// The zero-restriction pattern of the loading matrix: which of the 8
/// factors each country may load on.
#[derive(Debug, Clone)]
pub struct BlockStructure {
    /// (region index, income index) per country, in panel column order.
    pub block_of: Vec<(usize, usize)>,
    /// N x 8 admissibility mask, column order (g, Af, Am, As, Eu, Ad, Mi, Li).
    pub mask: Vec<[bool; N_FACTORS]>,
}

impl BlockStructure {
    pub fn n_countries(&self) -> usize {
        self.mask.len()
    }

    /// Countries allowed to load on factor column `k`.
    pub fn support(&self, k: usize) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i][k]).collect()
    }
}

/// Derive the block structure from country metadata: every country loads on
/// the global factor, its region's factor and its income group's factor.
pub fn build_block_structure(meta: &[CountryMeta]) -> BlockStructure {
    let mut block_of = Vec::with_capacity(meta.len());
    let mut mask = Vec::with_capacity(meta.len());
    for m in meta {
        let mut row = [false; N_FACTORS];
        row[0] = true;
        row[region_col(m.region)] = true;
        row[income_col(m.income)] = true;
        block_of.push((m.region.index(), m.income.index()));
        mask.push(row);
    }
    BlockStructure { block_of, mask }
}

/// Eigenvalue shares of the sample correlation matrix of a country subset.
#[derive(Debug, Clone)]
pub struct ScreeReport {
    /// Eigenvalue shares in descending order, summing to one.
    pub shares: Vec<f64>,
    /// Number of components with share above 5%.
    pub count_above_5pct: usize,
}

/// Factors, loadings and idiosyncratic components of an estimated DFM.
#[derive(Debug, Clone)]
pub struct FactorSet {
    /// T x r factor matrix, each column Euclidean norm one.
    pub factors: DMatrix<f64>,
    /// N x r loading matrix; exactly zero off the admissible pattern.
    pub loadings: DMatrix<f64>,
    /// T x N idiosyncratic components of the standardized panel.
    pub residuals: DMatrix<f64>,
    /// Per-series means removed before extraction.
    pub means: Vec<f64>,
    /// Per-series standard deviations divided out before extraction.
    pub sds: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sum of squared residuals after each sweep (first entry: at
    /// initialization).
    pub objective_path: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MldfmConfig {
    /// Convergence tolerance on the max absolute loading change per sweep.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MldfmConfig {
    fn default() -> Self {
        MldfmConfig { tol: 1e-6, max_iter: 1000 }
    }
}

/// Z-score each column; near-constant columns keep sd 1 to avoid blowup.
fn standardize(values: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let t = values.nrows();
    let n = values.ncols();
    let mut means = Vec::with_capacity(n);
    let mut sds = Vec::with_capacity(n);
    let mut z = values.clone();
    for j in 0..n {
        let col = values.column(j);
        let mean = col.sum() / t as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t as f64 - 1.0);
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for i in 0..t {
            z[(i, j)] = (values[(i, j)] - mean) / sd;
        }
        means.push(mean);
        sds.push(sd);
    }
    (z, means, sds)
}

/// Scree report for a subset of countries (all if `subset` is `None`).
pub fn scree(panel: &InflationPanel, subset: Option<&[usize]>) -> Result<ScreeReport, MldfmError> {
    let cols: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..panel.n_countries()).collect(),
    };
    if cols.is_empty() {
        return Err(MldfmError::EmptySubset);
    }
    let t = panel.n_periods();
    let sub = DMatrix::from_fn(t, cols.len(), |i, j| panel.values[(i, cols[j])]);
    let (z, _, _) = standardize(&sub);
    let corr = z.transpose() * &z / (t as f64 - 1.0);
    let eig = corr.symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = vals.iter().sum();
    let shares: Vec<f64> = vals.iter().map(|v| v / total.max(1e-300)).collect();
    let count_above_5pct = shares.iter().filter(|&&s| s > 0.05).count();
    Ok(ScreeReport { shares, count_above_5pct })
}

/// First `r` principal components of the standardized panel, loadings by
/// per-series OLS on the factors. The unrestricted benchmark.
pub fn extract_pc(panel: &InflationPanel, r: usize) -> Result<FactorSet, MldfmError> {
    let t = panel.n_periods();
    let n = panel.n_countries();
    if r == 0 || r > t.min(n) {
        return Err(MldfmError::BadFactorCount(r));
    }
    let (z, means, sds) = standardize(&panel.values);
    let svd = z.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u requested");
    // order singular values descending (nalgebra does not guarantee order)
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap()
    });
    let mut factors = DMatrix::from_fn(t, r, |i, j| u[(i, order[j])]);
    // loadings by OLS; with orthonormal factors this is F'z per series
    let mut loadings = (z.transpose() * &factors).transpose().transpose();
    for k in 0..r {
        if loadings.column(k).sum() < 0.0 {
            for i in 0..t {
                factors[(i, k)] = -factors[(i, k)];
            }
            for j in 0..n {
                loadings[(j, k)] = -loadings[(j, k)];
            }
        }
    }
    let residuals = &z - &factors * loadings.transpose();
    Ok(FactorSet {
        factors,
        loadings,
        residuals,
        means,
        sds,
        converged: true,
        iterations: 1,
        objective_path: Vec::new(),
    })
}

/// First principal component of a T x m matrix, as a unit-norm T-vector.
fn first_pc(block: &DMatrix<f64>) -> DVector<f64> {
    let svd = block.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u requested");
    let best = (0..svd.singular_values.len())
        .max_by(|&a, &b| svd.singular_values[a].partial_cmp(&svd.singular_values[b]).unwrap())
        .unwrap_or(0);
    DVector::from_fn(block.nrows(), |i, _| u[(i, best)])
}

/// Project `v` orthogonally off the span of unit-norm `basis` columns that
/// are themselves mutually orthogonalized on the fly (Gram-Schmidt).
fn project_off(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for b in basis {
        let mut q = b.clone();
        for o in &ortho {
            let c = q.dot(o);
            q -= o * c;
        }
        let norm = q.norm();
        if norm > 1e-12 {
            ortho.push(q / norm);
        }
    }
    for o in &ortho {
        let c = v.dot(o);
        *v -= o * c;
    }
}

/// Re-estimate one factor by cross-section LS: at each t, regress the
/// residualized observations of the factor's support on its loadings.
fn ls_factor_update(
    resid: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    support: &[usize],
    k: usize,
    out: &mut DVector<f64>,
) {
    let denom: f64 = support.iter().map(|&i| loadings[(i, k)].powi(2)).sum();
    if denom < 1e-14 {
        return; // keep the previous factor when the loading column vanished
    }
    for t in 0..resid.nrows() {
        let num: f64 = support.iter().map(|&i| loadings[(i, k)] * resid[(t, i)]).sum();
        out[t] = num / denom;
    }
}

/// Per-series OLS of the standardized panel on each country's admissible
/// factor columns.
fn ls_loadings(
    z: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    structure: &BlockStructure,
    loadings: &mut DMatrix<f64>,
) {
    let t = z.nrows();
    for i in 0..z.ncols() {
        let cols: Vec<usize> = (0..N_FACTORS).filter(|&k| structure.mask[i][k]).collect();
        let x = DMatrix::from_fn(t, cols.len(), |r, c| factors[(r, cols[c])]);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * z.column(i);
        let beta = xtx
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&xty))
            .unwrap_or_else(|| xtx.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(cols.len())));
        for k in 0..N_FACTORS {
            loadings[(i, k)] = 0.0;
        }
        for (c, &k) in cols.iter().enumerate() {
            loadings[(i, k)] = beta[c];
        }
    }
}

/// Flip factor and loading column signs so each factor's loading sum over
/// its support is positive, and scale so each factor has unit norm.
fn normalize_and_sign(
    factors: &mut DMatrix<f64>,
    loadings: &mut DMatrix<f64>,
    structure: &BlockStructure,
) {
    let t = factors.nrows();
    for k in 0..N_FACTORS {
        let norm = factors.column(k).norm();
        if norm > 1e-12 {
            for i in 0..t {
                factors[(i, k)] /= norm;
            }
            for j in 0..loadings.nrows() {
                loadings[(j, k)] *= norm;
            }
        }
        let lsum: f64 = structure.support(k).iter().map(|&i| loadings[(i, k)]).sum();
        if lsum < 0.0 {
            for i in 0..t {
                factors[(i, k)] = -factors[(i, k)];
            }
            for j in 0..loadings.nrows() {
                loadings[(j, k)] = -loadings[(j, k)];
            }
        }
    }
}

/// Sequential LS estimation of the multi-level DFM.
///
/// Standardizes the panel, initializes from principal components (global
/// from the full panel, block factors from within-block residuals after
/// removing the global initializer), then sweeps: global factor, regional
/// factors, income factors, loadings, identification; until the max
/// absolute loading change falls below `config.tol`.
pub fn estimate_mldfm(
    panel: &InflationPanel,
    structure: &BlockStructure,
    config: &MldfmConfig,
) -> Result<FactorSet, MldfmError> {
    let t = panel.n_periods();
    let n = panel.n_countries();
    if t <= N_FACTORS {
        return Err(MldfmError::ShortSample(t));
    }
    for k in 1..N_FACTORS {
        let m = structure.support(k).len();
        if m == 1 {
            return Err(MldfmError::RankDeficiency(format!(
                "block {} has a single series",
                FACTOR_NAMES[k]
            )));
        }
    }

    let (z, means, sds) = standardize(&panel.values);

    // --- initialization ---
    let mut factors = DMatrix::zeros(t, N_FACTORS);
    let g0 = first_pc(&z);
    factors.set_column(0, &g0);

    for k in 1..N_FACTORS {
        let support = structure.support(k);
        if support.is_empty() {
            // unused factor column: deterministic placeholder direction
            let mut v = DVector::zeros(t);
            v[k % t] = 1.0;
            project_off(&mut v, &[g0.clone()]);
            let norm = v.norm();
            factors.set_column(0.max(k), &(v / norm.max(1e-12)));
            continue;
        }
        // within-block residual after projecting out the global initializer
        let mut block = DMatrix::from_fn(t, support.len(), |i, j| z[(i, support[j])]);
        for j in 0..support.len() {
            let col = DVector::from_column_slice(block.column(j).as_slice());
            let coef = col.dot(&g0); // g0 has unit norm
            for i in 0..t {
                block[(i, j)] -= coef * g0[i];
            }
        }
        let mut f = first_pc(&block);
        // one-level alignment: sign so the block's loading sum is positive
        let lsum: f64 = (0..support.len())
            .map(|j| {
                (0..t).map(|i| block[(i, j)] * f[i]).sum::<f64>()
            })
            .sum();
        if lsum < 0.0 {
            f = -f;
        }
        factors.set_column(k, &f);
    }

    let mut loadings = DMatrix::zeros(n, N_FACTORS);
    ls_loadings(&z, &factors, structure, &mut loadings);
    let mut objective_path =
        vec![(&z - &factors * loadings.transpose()).norm_squared()];

    // --- sweeps ---
    let region_cols = [1usize, 2, 3, 4];
    let income_cols = [5usize, 6, 7];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        iterations += 1;
        let prev_loadings = loadings.clone();

        // (a) global factor on the panel net of block components
        {
            let mut resid = z.clone();
            for &k in region_cols.iter().chain(income_cols.iter()) {
                let fk = factors.column(k).clone_owned();
                for i in 0..n {
                    let l = loadings[(i, k)];
                    if l != 0.0 {
                        for r in 0..t {
                            resid[(r, i)] -= l * fk[r];
                        }
                    }
                }
            }
            let support: Vec<usize> = (0..n).collect();
            let mut f = factors.column(0).clone_owned();
            ls_factor_update(&resid, &loadings, &support, 0, &mut f);
            factors.set_column(0, &f);
        }

        // (b) regional factors on each region's residual net of global + income
        for &k in &region_cols {
            let support = structure.support(k);
            if support.is_empty() {
                continue;
            }
            let mut resid = DMatrix::zeros(t, n);
            for &i in &support {
                for r in 0..t {
                    let mut v = z[(r, i)] - loadings[(i, 0)] * factors[(r, 0)];
                    for &kk in &income_cols {
                        v -= loadings[(i, kk)] * factors[(r, kk)];
                    }
                    resid[(r, i)] = v;
                }
            }
            let mut f = factors.column(k).clone_owned();
            ls_factor_update(&resid, &loadings, &support, k, &mut f);
            factors.set_column(k, &f);
        }

        // (c) income factors on each group's residual net of global + regional
        for &k in &income_cols {
            let support = structure.support(k);
            if support.is_empty() {
                continue;
            }
            let mut resid = DMatrix::zeros(t, n);
            for &i in &support {
                for r in 0..t {
                    let mut v = z[(r, i)] - loadings[(i, 0)] * factors[(r, 0)];
                    for &kk in &region_cols {
                        v -= loadings[(i, kk)] * factors[(r, kk)];
                    }
                    resid[(r, i)] = v;
                }
            }
            let mut f = factors.column(k).clone_owned();
            ls_factor_update(&resid, &loadings, &support, k, &mut f);
            factors.set_column(k, &f);
        }

        // (d) loadings by per-series restricted OLS
        ls_loadings(&z, &factors, structure, &mut loadings);

        // (e) identification: block factors off global, regional off income,
        // then unit norms and positive loading sums
        {
            let mut g = factors.column(0).clone_owned();
            let gnorm = g.norm();
            if gnorm > 1e-12 {
                g /= gnorm;
            }
            for k in 1..N_FACTORS {
                let mut f = factors.column(k).clone_owned();
                project_off(&mut f, std::slice::from_ref(&g));
                factors.set_column(k, &f);
            }
            let income_basis: Vec<DVector<f64>> =
                income_cols.iter().map(|&k| factors.column(k).clone_owned()).collect();
            for &k in &region_cols {
                let mut f = factors.column(k).clone_owned();
                project_off(&mut f, &income_basis);
                factors.set_column(k, &f);
            }
            // refit loadings on the re-projected factors before normalizing
            ls_loadings(&z, &factors, structure, &mut loadings);
            normalize_and_sign(&mut factors, &mut loadings, structure);
        }

        objective_path.push((&z - &factors * loadings.transpose()).norm_squared());

        let delta = (&loadings - &prev_loadings).amax();
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    let residuals = &z - &factors * loadings.transpose();
    Ok(FactorSet {
        factors,
        loadings,
        residuals,
        means,
        sds,
        converged,
        iterations,
        objective_path,
    })
}

/// Per-factor confidence band half-widths at the given level, from the
/// cross-section LS asymptotics with cross-sectionally uncorrelated
/// idiosyncratic errors. Returns an 8-vector (constant over time under the
/// homoskedastic-in-t assumption).
pub fn factor_bands(
    fs: &FactorSet,
    structure: &BlockStructure,
    level: f64,
) -> Result<Vec<f64>, MldfmError> {
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(MldfmError::BadFactorCount(0));
    }
    let t = fs.residuals.nrows();
    let n = fs.residuals.ncols();
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);

    // full-system cross-section LS covariance over the active factor
    // columns, so collinearity between overlapping blocks widens the bands
    let active: Vec<usize> =
        (0..N_FACTORS).filter(|&k| !structure.support(k).is_empty()).collect();
    let lam = DMatrix::from_fn(n, active.len(), |i, c| fs.loadings[(i, active[c])]);
    let sigma2: Vec<f64> = (0..n)
        .map(|i| fs.residuals.column(i).iter().map(|v| v * v).sum::<f64>() / t as f64)
        .collect();
    let ltl = lam.transpose() * &lam;
    let mut lsl = DMatrix::zeros(active.len(), active.len());
    for i in 0..n {
        for p in 0..active.len() {
            for q in 0..active.len() {
                lsl[(p, q)] += sigma2[i] * lam[(i, p)] * lam[(i, q)];
            }
        }
    }
    let ltl_inv = ltl
        .try_inverse()
        .ok_or_else(|| MldfmError::RankDeficiency("singular loading Gram matrix".into()))?;
    let cov = &ltl_inv * lsl * &ltl_inv;

    let mut out = vec![0.0; N_FACTORS];
    for (c, &k) in active.iter().enumerate() {
        out[k] = z * cov[(c, c)].max(0.0).sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::YearMonth;
    use crate::ingest::Stage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RandNormal};

    fn meta(code: &str, region: Region, income: Income) -> CountryMeta {
        CountryMeta { code: code.into(), name: code.into(), region, income }
    }

    fn panel_from(values: DMatrix<f64>, meta: Vec<CountryMeta>) -> InflationPanel {
        let mut d = "2000-01".parse::<YearMonth>().unwrap();
        let mut dates = Vec::with_capacity(values.nrows());
        for _ in 0..values.nrows() {
            dates.push(d);
            d = d.next();
        }
        InflationPanel { dates, values, meta, stage: Stage::Cleaned }
    }

    /// Metadata matching the acceptance-panel group sizes: 115 countries,
    /// 35 ADV / 42 MHI / 38 LI and 33 Africa / 21 America / 21 Asia / 40
    /// Europe, assigned deterministically.
    fn synthetic_meta() -> Vec<CountryMeta> {
        let mut out = Vec::new();
        let regions = [
            (Region::Africa, 33usize),
            (Region::America, 21),
            (Region::Asia, 21),
            (Region::Europe, 40),
        ];
        // income assignment cycles within regions to keep every
        // region x income cell populated
        let mut income_left = [35usize, 42, 38];
        let mut idx = 0;
        for (region, count) in regions {
            for _ in 0..count {
                let inc = (0..3)
                    .max_by_key(|&i| income_left[i])
                    .unwrap();
                income_left[inc] -= 1;
                let income = [Income::Adv, Income::Mhi, Income::Li][inc];
                out.push(meta(&format!("C{idx:03}"), region, income));
                idx += 1;
            }
        }
        out
    }

    /// Random T x 8 orthonormal factor matrix.
    fn orthonormal_factors(rng: &mut ChaCha8Rng, t: usize) -> DMatrix<f64> {
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let raw = DMatrix::from_fn(t, N_FACTORS, |_, _| normal.sample(rng));
        let qr = raw.qr();
        let q = qr.q();
        DMatrix::from_fn(t, N_FACTORS, |i, j| q[(i, j)])
    }

    fn corr(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let am = a.mean();
        let bm = b.mean();
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..a.len() {
            num += (a[i] - am) * (b[i] - bm);
            da += (a[i] - am).powi(2);
            db += (b[i] - bm).powi(2);
        }
        num / (da * db).sqrt()
    }

    /// Simulate a panel from the block model with the given idiosyncratic
    /// sd; returns (panel, true factors).
    fn simulate_panel(
        rng: &mut ChaCha8Rng,
        metas: &[CountryMeta],
        t: usize,
        idio_sd: f64,
    ) -> (InflationPanel, DMatrix<f64>) {
        let structure = build_block_structure(metas);
        let f = orthonormal_factors(rng, t);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let n = metas.len();
        let scale = (t as f64).sqrt();
        let mut lambda = DMatrix::zeros(n, N_FACTORS);
        for i in 0..n {
            for k in 0..N_FACTORS {
                if structure.mask[i][k] {
                    // keep loadings away from zero so every factor is strong
                    let raw: f64 = normal.sample(rng);
                    lambda[(i, k)] = (raw.abs() + 0.5) * raw.signum() * scale;
                }
            }
        }
        let mut values = &f * lambda.transpose();
        for i in 0..t {
            for j in 0..n {
                values[(i, j)] += idio_sd * normal.sample(rng);
            }
        }
        (panel_from(values, metas.to_vec()), f)
    }

    #[test]
    fn mask_follows_block_pattern() {
        let s = build_block_structure(&[
            meta("AAA", Region::Europe, Income::Adv),
            meta("BBB", Region::Africa, Income::Li),
        ]);
        assert_eq!(s.mask[0], [true, false, false, false, true, true, false, false]);
        assert_eq!(s.mask[1], [true, true, false, false, false, false, false, true]);
        for row in &s.mask {
            assert_eq!(row.iter().filter(|&&b| b).count(), 3);
        }
    }

    #[test]
    fn scree_rank_one_panel() {
        let base: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let values = DMatrix::from_fn(50, 6, |i, j| base[i] * (1.0 + j as f64));
        let metas: Vec<CountryMeta> =
            (0..6).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let p = panel_from(values, metas);
        let rep = scree(&p, None).unwrap();
        assert!((rep.shares[0] - 1.0).abs() < 1e-10);
        assert_eq!(rep.count_above_5pct, 1);
        let sum: f64 = rep.shares.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn scree_independent_noise_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let n = 8;
        let t = 4000;
        let values = DMatrix::from_fn(t, n, |_, _| normal.sample(&mut rng));
        let metas: Vec<CountryMeta> =
            (0..n).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let rep = scree(&panel_from(values, metas), None).unwrap();
        // Marchenko-Pastur: shares within (1 +/- sqrt(n/t))^2 / n
        let edge = (n as f64 / t as f64).sqrt();
        for &s in &rep.shares {
            assert!(s < (1.0 + edge).powi(2) / n as f64 * 1.1, "share {s}");
            assert!(s > (1.0 - edge).powi(2) / n as f64 * 0.9, "share {s}");
        }
    }

    #[test]
    fn scree_two_strong_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let t = 300;
        let n = 20;
        let f1: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let f2: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let l1: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let l2: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let values = DMatrix::from_fn(t, n, |i, j| {
            l1[j] * f1[i] + l2[j] * f2[i] + 0.316 * normal.sample(&mut rng)
        });
        let metas: Vec<CountryMeta> =
            (0..n).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let rep = scree(&panel_from(values, metas), None).unwrap();
        assert!(rep.count_above_5pct >= 2, "count {}", rep.count_above_5pct);
    }

    #[test]
    fn pc_recovers_rank_one_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let t = 120;
        let f: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let values = DMatrix::from_fn(t, 5, |i, j| (j as f64 + 1.0) * f[i]);
        let metas: Vec<CountryMeta> =
            (0..5).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let fs = extract_pc(&panel_from(values, metas), 1).unwrap();
        let fv = DVector::from_vec(f);
        let c = corr(&fs.factors.column(0).clone_owned(), &fv);
        assert!(c.abs() > 1.0 - 1e-10, "corr {c}");
    }

    #[test]
    fn pc_factors_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let values = DMatrix::from_fn(100, 12, |_, _| normal.sample(&mut rng));
        let metas: Vec<CountryMeta> =
            (0..12).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let fs = extract_pc(&panel_from(values, metas), 4).unwrap();
        for a in 0..4 {
            for b in 0..a {
                let dot = fs.factors.column(a).dot(&fs.factors.column(b));
                assert!(dot.abs() < 1e-10, "factors {a},{b} dot {dot}");
            }
        }
    }

    #[test]
    fn pc_one_factor_noisy_panel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let t = 288;
        let n = 115;
        let f: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let l: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let values =
            DMatrix::from_fn(t, n, |i, j| l[j] * f[i] + 0.1 * normal.sample(&mut rng));
        let metas: Vec<CountryMeta> =
            (0..n).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let fs = extract_pc(&panel_from(values, metas), 1).unwrap();
        let fv = DVector::from_vec(f);
        let c = corr(&fs.factors.column(0).clone_owned(), &fv);
        assert!(c.abs() > 0.99, "corr {c}");
    }

    #[test]
    fn mldfm_recovers_simulated_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        for rep in 0..3 {
            let (panel, f_true) = simulate_panel(&mut rng, &metas, 288, 0.5);
            let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
            for k in 0..N_FACTORS {
                let c = corr(
                    &fs.factors.column(k).clone_owned(),
                    &f_true.column(k).clone_owned(),
                );
                assert!(
                    c.abs() > 0.95,
                    "rep {rep} factor {} corr {c}",
                    FACTOR_NAMES[k]
                );
            }
        }
    }

    #[test]
    fn mldfm_identification_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        let (panel, _) = simulate_panel(&mut rng, &metas, 120, 0.8);
        let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
        for k in 0..N_FACTORS {
            let norm = fs.factors.column(k).norm();
            assert!((norm - 1.0).abs() < 1e-8, "factor {k} norm {norm}");
        }
        let g = fs.factors.column(0);
        for k in 1..N_FACTORS {
            let dot = fs.factors.column(k).dot(&g);
            assert!(dot.abs() < 1e-8, "factor {k} vs global: {dot}");
        }
        for r in 1..5 {
            for i in 5..8 {
                let dot = fs.factors.column(r).dot(&fs.factors.column(i));
                assert!(dot.abs() < 1e-8, "regional {r} vs income {i}: {dot}");
            }
        }
        // masked loadings exactly zero
        for i in 0..structure.n_countries() {
            for k in 0..N_FACTORS {
                if !structure.mask[i][k] {
                    assert_eq!(fs.loadings[(i, k)], 0.0);
                }
            }
        }
        // exact reconstruction of the standardized panel
        let (z, _, _) = standardize(&panel.values);
        let recon = &fs.factors * fs.loadings.transpose() + &fs.residuals;
        assert!((&recon - &z).amax() < 1e-10);
        // objective decreased from initialization
        let first = fs.objective_path.first().unwrap();
        let last = fs.objective_path.last().unwrap();
        assert!(last <= first, "objective rose: {first} -> {last}");
    }

    #[test]
    fn mldfm_null_block_loadings_small() {
        // only a global factor in the DGP: estimated block loadings stay
        // near zero on average
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let t = 288;
        let n = metas.len();
        let g: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let lg: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng) + 2.0).collect();
        let values = DMatrix::from_fn(t, n, |i, j| {
            lg[j] * g[i] + 0.5 * normal.sample(&mut rng)
        });
        let panel = panel_from(values, metas);
        let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
        for k in 1..N_FACTORS {
            let support = structure.support(k);
            let mean_abs: f64 = support.iter().map(|&i| fs.loadings[(i, k)].abs()).sum::<f64>()
                / support.len() as f64;
            let mean_abs_g: f64 = support.iter().map(|&i| fs.loadings[(i, 0)].abs()).sum::<f64>()
                / support.len() as f64;
            assert!(
                mean_abs < 0.3 * mean_abs_g,
                "block {} mean |lambda| {mean_abs} vs global {mean_abs_g}",
                FACTOR_NAMES[k]
            );
        }
    }

    #[test]
    fn mldfm_rank_deficient_block_rejected() {
        let metas = vec![
            meta("AAA", Region::Europe, Income::Adv),
            meta("BBB", Region::Europe, Income::Adv),
            meta("CCC", Region::Asia, Income::Adv), // lone Asian series
        ];
        let structure = build_block_structure(&metas);
        let values = DMatrix::from_element(30, 3, 1.0);
        let panel = panel_from(values, metas);
        assert!(matches!(
            estimate_mldfm(&panel, &structure, &MldfmConfig::default()),
            Err(MldfmError::RankDeficiency(_))
        ));
    }

    #[test]
    fn mldfm_global_only_mask_matches_pc() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let normal = RandNormal::new(0.0, 1.0).unwrap();
        let t = 150;
        let n = 20;
        let f: Vec<f64> = (0..t).map(|_| normal.sample(&mut rng)).collect();
        let l: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let values =
            DMatrix::from_fn(t, n, |i, j| l[j] * f[i] + 0.3 * normal.sample(&mut rng));
        let metas: Vec<CountryMeta> =
            (0..n).map(|i| meta(&format!("C{i}"), Region::Asia, Income::Mhi)).collect();
        let panel = panel_from(values, metas.clone());

        let mut structure = build_block_structure(&metas);
        for row in &mut structure.mask {
            *row = [false; N_FACTORS];
            row[0] = true;
        }
        let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
        let pc = extract_pc(&panel, 1).unwrap();
        let c = corr(
            &fs.factors.column(0).clone_owned(),
            &pc.factors.column(0).clone_owned(),
        );
        assert!(c.abs() > 0.9999, "corr with PC1: {c}");
    }

    #[test]
    fn bands_zero_noise_zero_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        let (panel, _) = simulate_panel(&mut rng, &metas, 100, 0.0);
        let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
        let bands = factor_bands(&fs, &structure, 0.95).unwrap();
        // not exactly zero: the sweep stops at the loading tolerance, so a
        // residual of that order remains
        for (k, &b) in bands.iter().enumerate() {
            assert!(b < 1e-3, "factor {k} half-width {b}");
        }
    }

    #[test]
    fn bands_scale_with_idiosyncratic_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        let (p1, _) = simulate_panel(&mut rng, &metas, 200, 0.4);
        let mut rng2 = ChaCha8Rng::seed_from_u64(21);
        let (p2, _) = simulate_panel(&mut rng2, &metas, 200, 0.8);
        let f1 = estimate_mldfm(&p1, &structure, &MldfmConfig::default()).unwrap();
        let f2 = estimate_mldfm(&p2, &structure, &MldfmConfig::default()).unwrap();
        let b1 = factor_bands(&f1, &structure, 0.95).unwrap();
        let b2 = factor_bands(&f2, &structure, 0.95).unwrap();
        let mut ratios: Vec<f64> = (0..N_FACTORS).map(|k| b2[k] / b1[k]).collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_ratio = ratios[N_FACTORS / 2];
        assert!(
            (1.7..2.3).contains(&median_ratio),
            "median half-width ratio {median_ratio}"
        );
    }

    #[test]
    fn bands_cover_true_global_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let metas = synthetic_meta();
        let structure = build_block_structure(&metas);
        let t = 240;
        let (panel, f_true) = simulate_panel(&mut rng, &metas, t, 0.5);
        let fs = estimate_mldfm(&panel, &structure, &MldfmConfig::default()).unwrap();
        let bands = factor_bands(&fs, &structure, 0.95).unwrap();
        // the standardized panel is demeaned per series, so the estimable
        // object is the demeaned factor; demean, norm-match and sign-align
        // the truth to the estimate
        for k in 0..N_FACTORS {
            let est = fs.factors.column(k).clone_owned();
            let mut truth = f_true.column(k).clone_owned();
            let tm = truth.mean();
            truth.add_scalar_mut(-tm);
            truth *= est.norm() / truth.norm();
            if corr(&est, &truth) < 0.0 {
                truth = -truth;
            }
            let covered = (0..t)
                .filter(|&i| (est[i] - truth[i]).abs() <= bands[k])
                .count();
            assert!(
                covered as f64 / t as f64 >= 0.90,
                "factor {} coverage {}",
                FACTOR_NAMES[k],
                covered as f64 / t as f64
            );
        }
    }
}
