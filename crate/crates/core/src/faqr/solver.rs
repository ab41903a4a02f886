//! Linear-programming solver for the quantile regression check-loss
//! problem, via a primal-dual interior point method on the bounded dual
//!
//! ```text
//!   max y'a   s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1,
//! ```
//!
//! whose equality multipliers are the regression coefficients. The interior
//! point solution is polished to an exact basic solution (a fit through k
//! observations) so the reported objective sits on an LP vertex.

use nalgebra::{DMatrix, DVector};

use super::FaqrError;

/// Check loss `rho_tau(u) = u * (tau - 1{u < 0})` summed over residuals.
pub fn check_loss(residuals: &DVector<f64>, tau: f64) -> f64 {
    residuals
        .iter()
        .map(|&u| if u < 0.0 { u * (tau - 1.0) } else { u * tau })
        .sum()
}

fn rank_of(x: &DMatrix<f64>) -> usize {
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let max_diag = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0f64, f64::max);
    let eps = max_diag * 1e-10 * (x.nrows().max(x.ncols()) as f64);
    (0..r.nrows().min(r.ncols())).filter(|&i| r[(i, i)].abs() > eps).count()
}

struct IpSolution {
    theta: DVector<f64>,
    converged: bool,
}

/// Mehrotra predictor-corrector interior point iteration.
fn interior_point(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64) -> Result<IpSolution, FaqrError> {
    let n = x.nrows();
    let k = x.ncols();
    let ones = DVector::from_element(n, 1.0);
    let c = x.transpose() * &ones * (1.0 - tau);

    let a0 = (1.0 - tau).clamp(0.01, 0.99);
    let mut a = DVector::from_element(n, a0);
    let mut s = DVector::from_element(n, 1.0 - a0);
    let mut z = DVector::from_element(n, 1.0);
    let mut w = DVector::from_element(n, 1.0);
    let mut theta = DVector::zeros(k);

    let max_iter = 100;
    let tol = 1e-9;
    let mut converged = false;

    for _ in 0..max_iter {
        let r_p = &c - x.transpose() * &a;
        let r_d = y - x * &theta + &z - &w;
        let gap = (a.dot(&z) + s.dot(&w)) / (2.0 * n as f64);
        let scale = 1.0 + y.amax();
        if gap < tol && r_p.amax() < tol * scale && r_d.amax() < tol * scale {
            converged = true;
            break;
        }

        let e = DVector::from_fn(n, |i, _| z[i] / a[i] + w[i] / s[i]);
        let d = e.map(|v| 1.0 / v.max(1e-300));

        // X' D X, reused for predictor and corrector
        let mut xdx: DMatrix<f64> = DMatrix::zeros(k, k);
        for i in 0..n {
            let xi = x.row(i);
            for p in 0..k {
                let dp = d[i] * xi[p];
                for q in p..k {
                    xdx[(p, q)] += dp * xi[q];
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                xdx[(p, q)] = xdx[(q, p)];
            }
        }
        let chol = match nalgebra::Cholesky::new(xdx.clone()) {
            Some(c) => c,
            None => {
                // tiny ridge against near-singular scaling
                for j in 0..k {
                    xdx[(j, j)] += 1e-12 * (1.0 + xdx[(j, j)].abs());
                }
                nalgebra::Cholesky::new(xdx).ok_or(FaqrError::SolverFailure(
                    "normal equations not positive definite".into(),
                ))?
            }
        };

        let solve_direction = |mu_num_a: &DVector<f64>, mu_num_s: &DVector<f64>| {
            // g_i = r_d + mu_num_a/a - z - mu_num_s/s + w  (r_s = 0 throughout)
            let g = DVector::from_fn(n, |i, _| {
                r_d[i] + mu_num_a[i] / a[i] - z[i] - mu_num_s[i] / s[i] + w[i]
            });
            let rhs = x.transpose() * d.component_mul(&g) - &r_p;
            let dtheta = chol.solve(&rhs);
            let xdt = x * &dtheta;
            let da = DVector::from_fn(n, |i, _| d[i] * (g[i] - xdt[i]));
            let ds = -&da;
            let dz = DVector::from_fn(n, |i, _| (mu_num_a[i] - a[i] * z[i] - z[i] * da[i]) / a[i]);
            let dw = DVector::from_fn(n, |i, _| (mu_num_s[i] - s[i] * w[i] - w[i] * ds[i]) / s[i]);
            (dtheta, da, ds, dz, dw)
        };

        let step_len = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
            let mut alpha: f64 = 1.0;
            for i in 0..n {
                if dv[i] < 0.0 {
                    alpha = alpha.min(-v[i] / dv[i]);
                }
            }
            alpha
        };

        // predictor (affine) step
        let zero = DVector::zeros(n);
        let (_, da_aff, ds_aff, dz_aff, dw_aff) = solve_direction(&zero, &zero);
        let ap_aff = step_len(&a, &da_aff).min(step_len(&s, &ds_aff)).min(1.0);
        let ad_aff = step_len(&z, &dz_aff).min(step_len(&w, &dw_aff)).min(1.0);
        let mu = (a.dot(&z) + s.dot(&w)) / (2.0 * n as f64);
        let mut mu_aff = 0.0;
        for i in 0..n {
            mu_aff += (a[i] + ap_aff * da_aff[i]) * (z[i] + ad_aff * dz_aff[i])
                + (s[i] + ap_aff * ds_aff[i]) * (w[i] + ad_aff * dw_aff[i]);
        }
        mu_aff /= 2.0 * n as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // corrector step
        let mu_num_a = DVector::from_fn(n, |i, _| sigma * mu - da_aff[i] * dz_aff[i]);
        let mu_num_s = DVector::from_fn(n, |i, _| sigma * mu - ds_aff[i] * dw_aff[i]);
        let (dtheta, da, ds, dz, dw) = solve_direction(&mu_num_a, &mu_num_s);

        let eta = 0.9995;
        let ap = (eta * step_len(&a, &da).min(step_len(&s, &ds))).min(1.0);
        let ad = (eta * step_len(&z, &dz).min(step_len(&w, &dw))).min(1.0);

        a += &da * ap;
        s += &ds * ap;
        z += &dz * ad;
        w += &dw * ad;
        theta += &dtheta * ad;
    }

    Ok(IpSolution { theta, converged })
}

/// Refine an interior point solution to an exact basic (vertex) solution.
///
/// Candidate bases are drawn from the observations with the smallest
/// absolute residuals; among bases whose objective ties the best one, the
/// lexicographically smallest coefficient vector wins.
fn polish(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    tau: f64,
    theta_ip: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, f64) {
    let n = x.nrows();
    let k = x.ncols();
    let resid_ip = y - x * theta_ip;
    let obj_ip = check_loss(&resid_ip, tau);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        resid_ip[i]
            .abs()
            .partial_cmp(&resid_ip[j].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    // a wider pool is affordable at small k; at larger k the binomial blows
    // up, and the interior point has localized the basis well enough that a
    // slimmer margin suffices
    let extra = if k <= 5 { 3 } else { 2 };
    let pool: Vec<usize> = order.into_iter().take((k + extra).min(n)).collect();

    let mut best: Option<(f64, DVector<f64>)> = None;
    for combo in combinations(pool.len(), k) {
        let rows: Vec<usize> = combo.iter().map(|&c| pool[c]).collect();
        let xb = DMatrix::from_fn(k, k, |r, c| x[(rows[r], c)]);
        let yb = DVector::from_fn(k, |r, _| y[rows[r]]);
        if let Some(theta) = xb.lu().solve(&yb) {
            if theta.iter().all(|v| v.is_finite()) {
                let obj = check_loss(&(y - x * &theta), tau);
                let better = match &best {
                    None => true,
                    Some((b_obj, b_theta)) => {
                        obj < b_obj - 1e-12
                            || (obj <= b_obj + 1e-12 && lex_less(&theta, b_theta))
                    }
                };
                if better {
                    best = Some((obj, theta));
                }
            }
        }
    }

    match best {
        Some((obj, theta)) if obj <= obj_ip + 1e-9 * (1.0 + obj_ip.abs()) => {
            let residuals = y - x * &theta;
            (theta, residuals, obj)
        }
        _ => (theta_ip.clone(), resid_ip, obj_ip),
    }
}

/// All k-element index combinations out of `0..m`, in lexicographic order.
fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > m {
        return out;
    }
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        out.push(combo.clone());
        // advance to the next combination
        let mut i = k;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if combo[i] != i + m - k {
                combo[i] += 1;
                for j in i + 1..k {
                    combo[j] = combo[j - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    out
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if (x - y).abs() > 1e-12 {
            return x < y;
        }
    }
    false
}

/// Solve `min_theta sum_t rho_tau(y_t - x_t' theta)`.
pub fn solve_qr(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    tau: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64), FaqrError> {
    if !(0.0..1.0).contains(&tau) || tau <= 0.0 {
        return Err(FaqrError::InvalidTau(tau));
    }
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(FaqrError::DimensionMismatch { rows: n, len: y.len() });
    }
    if n < k {
        return Err(FaqrError::RankDeficientDesign(format!("{n} rows for {k} columns")));
    }
    if rank_of(x) < k {
        return Err(FaqrError::RankDeficientDesign("design matrix is rank deficient".into()));
    }

    let ip = interior_point(y, x, tau)?;
    let (theta, residuals, objective) = polish(y, x, tau, &ip.theta);
    if !ip.converged {
        // polishing can still land on the optimum; verify via the
        // subgradient condition before giving up
        let neg = residuals.iter().filter(|&&r| r < 0.0).count() as f64 / n as f64;
        let slack = (k as f64 + 1.0) / n as f64;
        if (neg - tau).abs() > slack {
            return Err(FaqrError::SolverFailure(
                "interior point did not converge and polish failed optimality".into(),
            ));
        }
    }
    Ok((theta, residuals, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal, Uniform};

    /// Brute-force oracle: enumerate every exact-fit basic solution.
    pub fn vertex_oracle(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64) -> f64 {
        let n = x.nrows();
        let k = x.ncols();
        let mut best = f64::INFINITY;
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let xb = DMatrix::from_fn(k, k, |r, c| x[(combo[r], c)]);
            let yb = DVector::from_fn(k, |r, _| y[combo[r]]);
            if let Some(theta) = xb.lu().solve(&yb) {
                if theta.iter().all(|v| v.is_finite()) {
                    let obj = check_loss(&(y - x * &theta), tau);
                    if obj < best {
                        best = obj;
                    }
                }
            }
            // next combination
            let mut i = k;
            let mut advanced = false;
            while i > 0 {
                i -= 1;
                if combo[i] != i + n - k {
                    combo[i] += 1;
                    for j in i + 1..k {
                        combo[j] = combo[j - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
        best
    }

    fn empirical_quantile_objective(y: &[f64], tau: f64) -> f64 {
        // minimize over the sample points; optimum is attained at an order statistic
        y.iter()
            .map(|&q| {
                y.iter()
                    .map(|&v| {
                        let u = v - q;
                        if u < 0.0 {
                            u * (tau - 1.0)
                        } else {
                            u * tau
                        }
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn perfect_fit_recovers_coefficients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) + i as f64 * 0.0 });
        let theta0 = DVector::from_vec(vec![1.5, -2.0, 0.5]);
        let y = &x * &theta0;
        let (theta, _, obj) = solve_qr(&y, &x, 0.3).unwrap();
        assert!(obj.abs() < 1e-9, "objective {obj}");
        for j in 0..3 {
            assert!((theta[j] - theta0[j]).abs() < 1e-7, "{theta}");
        }
    }

    #[test]
    fn intercept_only_matches_empirical_quantile_objective() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(1.0, 2.0).unwrap();
        for &tau in &[0.05, 0.25, 0.5, 0.75, 0.95] {
            let yv: Vec<f64> = (0..57).map(|_| normal.sample(&mut rng)).collect();
            let y = DVector::from_vec(yv.clone());
            let x = DMatrix::from_element(57, 1, 1.0);
            let (_, _, obj) = solve_qr(&y, &x, tau).unwrap();
            let oracle = empirical_quantile_objective(&yv, tau);
            assert!((obj - oracle).abs() < 1e-8, "tau {tau}: {obj} vs {oracle}");
        }
    }

    #[test]
    fn random_instances_match_vertex_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let taus = [0.1, 0.25, 0.5, 0.8, 0.95];
        for rep in 0..40 {
            let n = 8 + (rep % 23);
            let k = 1 + (rep % 3);
            let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) });
            let y = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
            let tau = taus[rep % taus.len()];
            let (_, _, obj) = solve_qr(&y, &x, tau).unwrap();
            let oracle = vertex_oracle(&y, &x, tau);
            assert!(
                (obj - oracle).abs() < 1e-6 * (1.0 + oracle.abs()),
                "rep {rep}: {obj} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn subgradient_condition_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let u = Uniform::new(0.05f64, 0.95).unwrap();
        for _ in 0..25 {
            let n = 60;
            let k = 4;
            let tau = u.sample(&mut rng);
            let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) });
            let y = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
            let (_, residuals, _) = solve_qr(&y, &x, tau).unwrap();
            let neg = residuals.iter().filter(|&&r| r < 0.0).count() as f64 / n as f64;
            let slack = (k as f64 + 1.0) / n as f64;
            assert!(
                neg >= tau - slack && neg <= tau + slack,
                "tau {tau}, negative fraction {neg}"
            );
        }
    }

    #[test]
    fn monotone_equivariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 45;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) });
        let y = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
        let tau = 0.7;
        let (theta, _, _) = solve_qr(&y, &x, tau).unwrap();
        let a = 2.5;
        let c = DVector::from_vec(vec![1.0, -3.0]);
        let y2 = &y * a + &x * &c;
        let (theta2, _, _) = solve_qr(&y2, &x, tau).unwrap();
        for j in 0..2 {
            assert!(
                (theta2[j] - (a * theta[j] + c[j])).abs() < 1e-6,
                "{theta2} vs {theta} transformed"
            );
        }
    }

    #[test]
    fn local_optimality_probe() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 50;
        let k = 3;
        let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { normal.sample(&mut rng) });
        let y = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
        let (theta, _, obj) = solve_qr(&y, &x, 0.4).unwrap();
        for j in 0..k {
            for delta in [1e-4, -1e-4] {
                let mut t = theta.clone();
                t[j] += delta;
                let perturbed = check_loss(&(&y - &x * &t), 0.4);
                assert!(perturbed >= obj - 1e-10, "perturbation improved objective");
            }
        }
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let x = DMatrix::from_fn(10, 2, |i, _| i as f64); // duplicated column
        let y = DVector::from_fn(10, |i, _| i as f64);
        assert!(matches!(
            solve_qr(&y, &x, 0.5).unwrap_err(),
            FaqrError::RankDeficientDesign(_)
        ));
    }
}
