//! Inference for the idiosyncratic coefficients: is the factor regression
//! adequate, or does the response load on the panel beyond the factors?
//!
//! The null hypothesis is that every idiosyncratic coefficient is zero. The
//! test statistic is the scaled sup-norm of a de-biased penalized fit, and
//! its null distribution is approximated by a Gaussian multiplier
//! bootstrap. The ingredients, each exposed on its own:
//!
//! - a node-wise regression estimate of the precision matrix of the
//!   idiosyncratic panel, used to undo the penalization bias;
//! - the de-biased coefficient vector;
//! - a refitted cross-validation estimate of the noise scale (support
//!   selected on one half, variance measured on the other);
//! - sorted multiplier bootstrap draws and the derived test report.
//!
//! Entrywise confidence intervals and simultaneous group tests reuse the
//! same pieces.

use ndarray::{Array1, Array2, ArrayView2, s};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::DataSet;
use crate::error::{FarmError, Result};
use crate::estimate::{fit_farm_cv, FarmEstimate, LambdaPath};
use crate::factor::{default_k_max, estimate_factors, select_num_factors, FactorEstimate};
use crate::lasso::{self, LassoOptions};
use crate::seed;

/// Sub-seed tags, one per stochastic ingredient, so a single master seed
/// drives the whole pipeline reproducibly.
const TAG_NODEWISE: u64 = 0x4e44;
const TAG_LASSO_CV: u64 = 0x4356;
const TAG_RCV: u64 = 0x5243;
const TAG_BOOT: u64 = 0x4254;
const TAG_DRAW: u64 = 0x6472;

/// Bootstrap draws are generated in batches of this many columns.
const DRAW_CHUNK: usize = 256;

/// Node-wise estimate of the precision matrix of the idiosyncratic panel.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    /// Row j holds 1/nu_sq[j] on the diagonal and -w[l]/nu_sq[j] elsewhere,
    /// with w the penalized regression of column j on the others.
    pub theta: Array2<f64>,
    /// Per-column residual quadratic nu_j^2 = n^-1 |U_j - U_{-j} w|^2 +
    /// lambda_j |w|_1.
    pub nu_sq: Array1<f64>,
    /// Per-column selected penalties.
    pub lambdas: Array1<f64>,
    /// Measured sup-norm of I - theta (U'U/n); how far the estimate is from
    /// a true inverse.
    pub identity_gap: f64,
}

/// De-biased coefficients with the pieces needed for inference attached.
#[derive(Debug, Clone)]
pub struct DebiasedEstimate {
    pub beta_tilde: Array1<f64>,
    /// Noise scale, usually from [`estimate_sigma_rcv`].
    pub sigma_hat: f64,
    pub theta: PrecisionEstimate,
    /// Sample size behind the fit; CIs scale by it.
    pub n: usize,
}

/// Outcome of a bootstrap-calibrated hypothesis test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub bootstrap_draws: usize,
}

/// Everything the adequacy test computes, kept for audit.
#[derive(Debug, Clone)]
pub struct FabOutcome {
    pub k_hat: usize,
    pub factors: FactorEstimate,
    pub estimate: FarmEstimate,
    pub path: LambdaPath,
    pub debiased: DebiasedEstimate,
    /// Sorted multiplier bootstrap draws.
    pub draws: Array1<f64>,
    pub report: TestReport,
}

/// Node-wise precision for the idiosyncratic panel of a factor estimate,
/// with per-column penalties chosen by 10-fold cross-validation.
pub fn nodewise_precision(fe: &FactorEstimate, seed: u64) -> Result<PrecisionEstimate> {
    nodewise_precision_of(&fe.u().view(), 10, seed)
}

/// Node-wise precision of an arbitrary panel. One fold partition is shared
/// by every column regression, which lets all columns reuse the same
/// per-fold Gram matrices.
pub fn nodewise_precision_of(
    u: &ArrayView2<f64>,
    folds: usize,
    seed: u64,
) -> Result<PrecisionEstimate> {
    let (n, d) = u.dim();
    if d < 2 {
        return Err(FarmError::InvalidInput(format!(
            "node-wise regression needs at least 2 columns, got {d}"
        )));
    }
    let opts = LassoOptions::default();
    let g = u.t().dot(u);
    let blocks = lasso::fold_blocks(n, folds, seed)?;

    // Per-column penalty grids from the full-data correlations.
    let grids: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut top = 0.0f64;
            for l in 0..d {
                if l != j {
                    top = top.max(g[[l, j]].abs() / n as f64);
                }
            }
            lasso::lambda_grid(top, lasso::GRID_POINTS, lasso::GRID_RATIO)
        })
        .collect();

    // Held-out errors, summed over folds.
    let mut err_sums: Vec<Vec<f64>> = grids.iter().map(|gr| vec![0.0; gr.len()]).collect();
    let mut g_out = Array2::zeros((d, d));
    let mut g_train = Array2::zeros((d, d));
    for rows in &blocks {
        let mut u_out = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            u_out.row_mut(i).assign(&u.row(r));
        }
        g_out.assign(&u_out.t().dot(&u_out));
        g_train.assign(&g);
        g_train -= &g_out;
        let n_train = n - rows.len();
        let n_out = rows.len();

        let fold_errs: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|j| {
                let c = g_train.column(j);
                let problem = lasso::GramProblem {
                    g: &g_train,
                    c: &c,
                    n: n_train,
                    banned: Some(j),
                };
                let mut errs = vec![0.0; grids[j].len()];
                let g_out_view = g_out.view();
                let c_out = g_out.column(j);
                lasso::lasso_path(&problem, &grids[j], &opts, |i, _, state| {
                    errs[i] =
                        lasso::held_out_error(state, &g_out_view, &c_out, g_out[[j, j]], n_out);
                })?;
                Ok(errs)
            })
            .collect::<Result<_>>()?;
        for (j, errs) in fold_errs.into_iter().enumerate() {
            for (acc, e) in err_sums[j].iter_mut().zip(errs) {
                *acc += e;
            }
        }
    }

    // Refit each column on the full panel at its selected penalty and
    // assemble the precision rows.
    struct Row {
        lambda: f64,
        nu_sq: f64,
        weights: Vec<(usize, f64)>,
        identity_gap: f64,
    }
    let rows: Vec<Row> = (0..d)
        .into_par_iter()
        .map(|j| {
            let chosen = lasso::choose_min_error(&err_sums[j]);
            let c = g.column(j);
            let problem = lasso::GramProblem {
                g: &g,
                c: &c,
                n,
                banned: Some(j),
            };
            let mut state = lasso::PathState::new(d);
            for &lambda in &grids[j][..=chosen] {
                lasso::solve_at(&problem, lambda, &mut state, &opts)?;
            }
            let lambda = grids[j][chosen];
            let w = state.beta();

            // Residual quadratic from the Gram: |U_j - U_{-j} w|^2 =
            // G_jj - 2 w'c + w'Gw over the active coordinates.
            let mut lin = 0.0;
            let mut quad = 0.0;
            let mut l1 = 0.0;
            let mut weights = Vec::new();
            for l in 0..d {
                let wl = w[l];
                if wl == 0.0 {
                    continue;
                }
                lin += wl * g[[l, j]];
                for m in 0..d {
                    if w[m] != 0.0 {
                        quad += wl * w[m] * g[[l, m]];
                    }
                }
                l1 += wl.abs();
                weights.push((l, wl));
            }
            let nu_sq = (g[[j, j]] - 2.0 * lin + quad).max(0.0) / n as f64 + lambda * l1;
            if nu_sq < 1e-12 {
                return Err(FarmError::DegenerateColumn { index: j });
            }

            // Row j of theta Sigma, for the identity-gap report:
            // (G[j,:] - sum_l w_l G[l,:]) / (n nu_sq).
            let mut row = g.row(j).to_owned();
            for &(l, wl) in &weights {
                row.scaled_add(-wl, &g.row(l));
            }
            let scale = 1.0 / (n as f64 * nu_sq);
            let mut identity_gap = 0.0f64;
            for l in 0..d {
                let entry = row[l] * scale;
                let target = if l == j { 1.0 } else { 0.0 };
                identity_gap = identity_gap.max((entry - target).abs());
            }

            Ok(Row {
                lambda,
                nu_sq,
                weights,
                identity_gap,
            })
        })
        .collect::<Result<_>>()?;

    let mut theta = Array2::zeros((d, d));
    let mut nu_sq = Array1::zeros(d);
    let mut lambdas = Array1::zeros(d);
    let mut identity_gap = 0.0f64;
    for (j, row) in rows.iter().enumerate() {
        let inv = 1.0 / row.nu_sq;
        theta[[j, j]] = inv;
        for &(l, wl) in &row.weights {
            theta[[j, l]] = -wl * inv;
        }
        nu_sq[j] = row.nu_sq;
        lambdas[j] = row.lambda;
        identity_gap = identity_gap.max(row.identity_gap);
    }

    Ok(PrecisionEstimate {
        theta,
        nu_sq,
        lambdas,
        identity_gap,
    })
}

/// De-bias a penalized fit: beta_tilde = beta_hat + theta U'(y - U beta)/n.
/// The response enters uncentered by the factor projection; U'F = 0 makes
/// that equal to using the projected response.
pub fn debias(
    fe: &FactorEstimate,
    est: &FarmEstimate,
    prec: PrecisionEstimate,
    sigma_hat: f64,
) -> Result<DebiasedEstimate> {
    let d = fe.d();
    if est.beta.len() != d || prec.theta.dim() != (d, d) {
        return Err(FarmError::InvalidInput(
            "estimate, precision, and factor dimensions disagree".into(),
        ));
    }
    if !sigma_hat.is_finite() || sigma_hat < 0.0 {
        return Err(FarmError::InvalidInput(format!(
            "noise scale must be finite and nonnegative, got {sigma_hat}"
        )));
    }
    let resid = fe.y() - &fe.u().dot(&est.beta);
    let score = fe.u().t().dot(&resid) / fe.n() as f64;
    let beta_tilde = &est.beta + &prec.theta.dot(&score);
    Ok(DebiasedEstimate {
        beta_tilde,
        sigma_hat,
        theta: prec,
        n: fe.n(),
    })
}

/// Refitted cross-validation estimate of the noise scale on the
/// factor-adjusted problem. The rows are split in half by a seeded shuffle;
/// each half selects a support by cross-validated penalized regression, the
/// other half refits that support by least squares (with an intercept) and
/// measures the residual variance; the two variances are averaged.
pub fn estimate_sigma_rcv(fe: &FactorEstimate, seed: u64) -> Result<f64> {
    let n = fe.n();
    if n < 20 {
        return Err(FarmError::InsufficientData(format!(
            "refitted cross-validation needs at least 20 rows, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = seed::rng(seed, &[TAG_RCV]);
    order.shuffle(&mut rng);
    let (first, second) = order.split_at(n / 2);

    let u = fe.u();
    let y = fe.y_resid();
    let gather = |rows: &[usize]| {
        let mut a = Array2::zeros((rows.len(), fe.d()));
        let mut b = Array1::zeros(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            a.row_mut(i).assign(&u.row(r));
            b[i] = y[r];
        }
        (a, b)
    };
    let halves = [gather(first), gather(second)];

    let mut var_sum = 0.0;
    for (sel, fit) in [(0, 1), (1, 0)] {
        let (sel_u, sel_y) = &halves[sel];
        let folds = (sel_u.nrows() / 2).min(10).max(2);
        let cv = lasso::cv_lasso(
            &sel_u.view(),
            &sel_y.view(),
            folds,
            seed::substream(seed, &[TAG_RCV, sel as u64]),
            &LassoOptions::default(),
        )?;
        let support = &cv.fit.active;

        let (fit_u, fit_y) = &halves[fit];
        let m = fit_u.nrows();
        if support.len() >= m || m < support.len() + 2 {
            return Err(FarmError::SupportTooLarge {
                support: support.len(),
                half: m,
            });
        }
        // Least squares of the refit half on the selected columns plus an
        // intercept.
        let cols = support.len() + 1;
        let design = nalgebra::DMatrix::from_fn(m, cols, |i, c| {
            if c == 0 {
                1.0
            } else {
                fit_u[[i, support[c - 1]]]
            }
        });
        let target = nalgebra::DVector::from_fn(m, |i, _| fit_y[i]);
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| FarmError::InvalidInput(format!("least squares refit failed: {e}")))?;
        let resid = &target - design * coef;
        let df = (m - support.len() - 1) as f64;
        var_sum += resid.norm_squared() / df;
    }
    Ok((var_sum / 2.0).sqrt())
}

/// Sparse-row view of a precision matrix for fast repeated application.
fn sparse_rows(theta: &Array2<f64>) -> Vec<Vec<(usize, f64)>> {
    theta
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(l, &v)| (l, v))
                .collect()
        })
        .collect()
}

/// Multiplier bootstrap draws L_b = |theta U' xi_b|_inf / sqrt(n) with
/// independent standard normal xi_b, sorted ascending. Each draw has its
/// own counter-derived RNG stream, so the result does not depend on how
/// draws are scheduled.
pub fn multiplier_bootstrap(
    prec: &PrecisionEstimate,
    fe: &FactorEstimate,
    b: usize,
    seed: u64,
) -> Result<Array1<f64>> {
    bootstrap_draws(prec, fe.u(), b, seed, None)
}

fn bootstrap_draws(
    prec: &PrecisionEstimate,
    u: &Array2<f64>,
    b: usize,
    seed: u64,
    subset: Option<&[usize]>,
) -> Result<Array1<f64>> {
    if b < 100 {
        return Err(FarmError::InvalidInput(format!(
            "need at least 100 bootstrap draws, got {b}"
        )));
    }
    let (n, d) = u.dim();
    if prec.theta.dim() != (d, d) {
        return Err(FarmError::InvalidInput(
            "precision and panel dimensions disagree".into(),
        ));
    }
    let rows = sparse_rows(&prec.theta);
    let row_idx: Vec<usize> = match subset {
        Some(g) => g.to_vec(),
        None => (0..d).collect(),
    };
    let root_n = (n as f64).sqrt();

    let mut draws = Vec::with_capacity(b);
    let mut xi = Array2::zeros((n, DRAW_CHUNK));
    for start in (0..b).step_by(DRAW_CHUNK) {
        let size = DRAW_CHUNK.min(b - start);
        for col in 0..size {
            let mut rng = seed::rng(seed, &[TAG_DRAW, (start + col) as u64]);
            for i in 0..n {
                xi[[i, col]] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let p = u.t().dot(&xi.slice(s![.., ..size]));
        for col in 0..size {
            let mut sup = 0.0f64;
            for &j in &row_idx {
                let mut v = 0.0;
                for &(l, w) in &rows[j] {
                    v += w * p[[l, col]];
                }
                sup = sup.max(v.abs());
            }
            draws.push(sup / root_n);
        }
    }
    draws.sort_unstable_by(f64::total_cmp);
    Ok(Array1::from_vec(draws))
}

/// Assemble a report from a statistic and sorted bootstrap draws. The
/// critical value is the empirical (1 - alpha) quantile; the p-value uses
/// add-one smoothing so it is never exactly zero.
pub fn report_from_draws(statistic: f64, draws: &Array1<f64>, alpha: f64) -> Result<TestReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FarmError::InvalidInput(format!(
            "level must lie strictly between 0 and 1, got {alpha}"
        )));
    }
    let b = draws.len();
    let idx = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b) - 1;
    let critical_value = draws[idx];
    let slice = draws.as_slice().expect("contiguous");
    let below = slice.partition_point(|&x| x < statistic);
    let p_value = (1 + (b - below)) as f64 / (b + 1) as f64;
    Ok(TestReport {
        statistic,
        critical_value,
        p_value,
        alpha,
        reject: statistic > critical_value,
        bootstrap_draws: b,
    })
}

/// Round-off floor for the de-biased coefficients: deviations at or below
/// this level are indistinguishable from floating-point noise in the
/// de-biasing arithmetic. The bound chains the row sums of the precision
/// matrix, the column scale of the panel, and the response scale, with a
/// wide safety margin over machine epsilon.
fn debias_noise_floor(theta: &Array2<f64>, u: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let row_l1 = theta
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let n = u.nrows() as f64;
    let col_rms = u
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c) / n).sqrt())
        .fold(0.0f64, f64::max);
    let y_rms = (y.dot(y) / n).sqrt();
    1e-10 * row_l1 * col_rms * y_rms
}

/// Scaled sup-norm statistic with guards for degenerate scales: a
/// deviation at the round-off floor never rejects (a response explained to
/// machine precision is evidence for the null, however small the estimated
/// noise); a zero noise scale with a real deviation always rejects.
fn sup_statistic(sup: f64, floor: f64, n: usize, sigma_hat: f64) -> f64 {
    if sup <= floor {
        0.0
    } else if sigma_hat == 0.0 {
        f64::INFINITY
    } else {
        (n as f64).sqrt() * sup / sigma_hat
    }
}

/// Test the adequacy of the pure factor regression: H0 is that every
/// idiosyncratic coefficient vanishes. Runs the whole pipeline (factor
/// count by eigenvalue ratio, factor extraction, node-wise precision,
/// cross-validated penalized fit, refitted-CV noise scale, de-biasing,
/// multiplier bootstrap) and keeps every intermediate product.
pub fn fab_test(data: &DataSet, alpha: f64, b: usize, seed: u64) -> Result<FabOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FarmError::InvalidInput(format!(
            "level must lie strictly between 0 and 1, got {alpha}"
        )));
    }
    let k_hat = select_num_factors(data, default_k_max(data.n(), data.d()))?;
    let fe = estimate_factors(data, k_hat)?;
    let prec = nodewise_precision(&fe, seed::substream(seed, &[TAG_NODEWISE]))?;
    let (estimate, path) = fit_farm_cv(&fe, 10, seed::substream(seed, &[TAG_LASSO_CV]))?;
    let sigma_hat = estimate_sigma_rcv(&fe, seed)?;
    let debiased = debias(&fe, &estimate, prec, sigma_hat)?;
    let draws = bootstrap_draws(
        &debiased.theta,
        fe.u(),
        b,
        seed::substream(seed, &[TAG_BOOT]),
        None,
    )?;
    let sup = debiased
        .beta_tilde
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);
    let floor = debias_noise_floor(&debiased.theta.theta, fe.u(), fe.y());
    let statistic = sup_statistic(sup, floor, fe.n(), sigma_hat);
    let report = report_from_draws(statistic, &draws, alpha)?;
    Ok(FabOutcome {
        k_hat,
        factors: fe,
        estimate,
        path,
        debiased,
        draws,
        report,
    })
}

/// Two-sided confidence interval for one idiosyncratic coefficient
/// (0-based index): beta_tilde_j plus and minus
/// sigma_hat z_{1-alpha/2} sqrt(theta_jj / n).
pub fn entrywise_ci(deb: &DebiasedEstimate, j: usize, alpha: f64) -> Result<(f64, f64)> {
    if j >= deb.beta_tilde.len() {
        return Err(FarmError::InvalidInput(format!(
            "coordinate {j} out of range for d = {}",
            deb.beta_tilde.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FarmError::InvalidInput(format!(
            "level must lie strictly between 0 and 1, got {alpha}"
        )));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half = deb.sigma_hat * z * (deb.theta.theta[[j, j]] / deb.n as f64).sqrt();
    Ok((deb.beta_tilde[j] - half, deb.beta_tilde[j] + half))
}

/// Simultaneous test of H0: beta_j = beta_circ over the coordinates in
/// `group` (0-based). The statistic is the largest scaled deviation over
/// the group; the critical value comes from the same bootstrap streams as
/// the full test, restricted to the group, so `group = 0..d` with zero
/// targets reproduces the adequacy test decision for the same seed.
pub fn group_test(
    deb: &DebiasedEstimate,
    fe: &FactorEstimate,
    group: &[usize],
    beta_circ: &Array1<f64>,
    alpha: f64,
    b: usize,
    seed: u64,
) -> Result<TestReport> {
    if group.is_empty() {
        return Err(FarmError::InvalidInput("empty coordinate group".into()));
    }
    if beta_circ.len() != group.len() {
        return Err(FarmError::InvalidInput(format!(
            "{} hypothesized values for {} coordinates",
            beta_circ.len(),
            group.len()
        )));
    }
    let d = deb.beta_tilde.len();
    if let Some(&bad) = group.iter().find(|&&j| j >= d) {
        return Err(FarmError::InvalidInput(format!(
            "coordinate {bad} out of range for d = {d}"
        )));
    }
    let sup = group
        .iter()
        .zip(beta_circ.iter())
        .map(|(&j, &t)| (deb.beta_tilde[j] - t).abs())
        .fold(0.0f64, f64::max);
    let floor = debias_noise_floor(&deb.theta.theta, fe.u(), fe.y());
    let statistic = sup_statistic(sup, floor, deb.n, deb.sigma_hat);
    let draws = bootstrap_draws(
        &deb.theta,
        fe.u(),
        b,
        seed::substream(seed, &[TAG_BOOT]),
        Some(group),
    )?;
    report_from_draws(statistic, &draws, alpha)
}
