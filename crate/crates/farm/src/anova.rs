//! Adequacy test for the sparse linear regression: does the response load
//! on latent factors beyond the observed panel?
//!
//! The null hypothesis is that the factor-side coefficients vanish, so a
//! sparse regression on the raw panel suffices. The test splits the sample,
//! screens a candidate support on the first part (factor-adjusted marginal
//! screening with one iterative refinement round), and compares two nested
//! residual sums of squares on the second part: raw-panel least squares on
//! the screened columns versus the factor subspace plus the screened
//! idiosyncratic columns. Under the null the gap behaves like sigma^2 times
//! a chi-square with as many degrees of freedom as there are factors.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::DataSet;
use crate::error::{FarmError, Result};
use crate::fab::estimate_sigma_rcv;
use crate::factor::{default_k_max, estimate_factors, select_num_factors, FactorEstimate};
use crate::lasso::{cv_lasso, LassoOptions};
use crate::seed;

const TAG_SPLIT: u64 = 0x5350;
const TAG_SCREEN: u64 = 0x5343;
const TAG_SIGMA: u64 = 0x5256;

/// Rank tolerance for the least-squares projections (relative to the
/// largest singular value).
const RANK_TOL: f64 = 1e-10;

/// How a marginal screen picks its survivors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScreeningRule {
    /// Keep the k columns with the largest marginal coefficients.
    Rank(usize),
    /// Keep every column whose marginal coefficient reaches the threshold.
    Threshold(f64),
}

/// Survivors of a factor-adjusted marginal screen.
#[derive(Debug, Clone)]
pub struct ScreeningResult {
    /// Sorted selected column indices.
    pub selected: Vec<usize>,
    /// Per-column marginal coefficients U_l'Y / U_l'U_l.
    pub marginal_betas: Array1<f64>,
    /// The rule that produced the selection.
    pub rule: ScreeningRule,
    /// Rows in the screening part.
    pub m: usize,
}

/// One projection-difference statistic with its audit trail.
#[derive(Debug, Clone)]
pub struct AnovaStatistic {
    /// Clamped at zero.
    pub q: f64,
    /// Before clamping; round-off can push it a hair negative.
    pub raw: f64,
    /// True when a projection design was rank deficient and fell back to a
    /// pseudo-inverse.
    pub rank_deficient: bool,
}

/// Outcome of the sparse-regression adequacy test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AnovaResult {
    pub q: f64,
    pub raw_q: f64,
    pub sigma_sq_hat: f64,
    /// Degrees of freedom: the estimated factor count.
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub rank_deficient: bool,
    /// Screened support the statistic conditioned on.
    pub selected: Vec<usize>,
    pub no_split: bool,
}

/// Row indices behind a sample split: a seeded shuffle of 0..n cut at
/// ceil(n^exponent). Exposed so the disjointness of the two parts can be
/// audited directly.
pub fn split_indices(n: usize, exponent: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 30 {
        return Err(FarmError::InsufficientData(format!(
            "sample splitting needs at least 30 rows, got {n}"
        )));
    }
    if !exponent.is_finite() {
        return Err(FarmError::InvalidInput(format!(
            "split exponent must be finite, got {exponent}"
        )));
    }
    let m = (n as f64).powf(exponent).ceil() as usize;
    if m >= n {
        return Err(FarmError::ExponentTooLarge { exponent, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed, &[TAG_SPLIT]);
    order.shuffle(&mut rng);
    let mut first: Vec<usize> = order[..m].to_vec();
    let mut second: Vec<usize> = order[m..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// Split a data set into a screening part of ceil(n^exponent) rows and an
/// evaluation part holding the rest. Both parts are re-centered.
pub fn split_sample(data: &DataSet, exponent: f64, seed: u64) -> Result<(DataSet, DataSet)> {
    let (first, second) = split_indices(data.n(), exponent, seed)?;
    Ok((data.subset(&first)?, data.subset(&second)?))
}

/// Marginal coefficients of each idiosyncratic column against a response:
/// U_l'r / U_l'U_l. Errors on a numerically zero column.
fn marginal_stats(u: &Array2<f64>, r: &Array1<f64>) -> Result<Array1<f64>> {
    let d = u.ncols();
    let norms: Vec<f64> = (0..d).map(|j| u.column(j).dot(&u.column(j))).collect();
    let floor = 1e-18 * (1.0 + norms.iter().fold(0.0f64, |a, &b| a.max(b)));
    let mut betas = Array1::zeros(d);
    for j in 0..d {
        if norms[j] <= floor {
            return Err(FarmError::DegenerateColumn { index: j });
        }
        betas[j] = u.column(j).dot(r) / norms[j];
    }
    Ok(betas)
}

/// Apply a screening rule to marginal coefficients. Rank selection orders
/// by magnitude with index as the deterministic tie-break.
fn apply_rule(betas: &Array1<f64>, rule: ScreeningRule) -> Vec<usize> {
    let d = betas.len();
    match rule {
        ScreeningRule::Threshold(phi) => {
            (0..d).filter(|&j| betas[j].abs() >= phi).collect()
        }
        ScreeningRule::Rank(k) => {
            let keep = k.min(d);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| {
                betas[b]
                    .abs()
                    .total_cmp(&betas[a].abs())
                    .then(a.cmp(&b))
            });
            let mut sel: Vec<usize> = order[..keep].to_vec();
            sel.sort_unstable();
            sel
        }
    }
}

/// Factor-adjusted marginal screen on the screening part: remove k factors,
/// regress the projected response on each idiosyncratic column alone, keep
/// survivors per the rule.
pub fn marginal_screen(part1: &DataSet, k: usize, rule: ScreeningRule) -> Result<ScreeningResult> {
    let fe = estimate_factors(part1, k)?;
    screen_on_factors(&fe, rule)
}

fn screen_on_factors(fe: &FactorEstimate, rule: ScreeningRule) -> Result<ScreeningResult> {
    let betas = marginal_stats(fe.u(), fe.y_resid())?;
    let selected = apply_rule(&betas, rule);
    Ok(ScreeningResult {
        selected,
        marginal_betas: betas,
        rule,
        m: fe.n(),
    })
}

/// One refinement round on top of the marginal screen: keep the top
/// two-thirds of the budget, fit a cross-validated penalized regression on
/// those columns, screen the remaining columns against its residuals, and
/// top the union up to the budget.
pub fn isis_screen(
    part1: &DataSet,
    k: usize,
    bound: usize,
    seed: u64,
) -> Result<ScreeningResult> {
    let fe = estimate_factors(part1, k)?;
    let d = fe.d();
    let budget = bound.min(d);
    let k1 = (2 * budget).div_ceil(3);
    let first = screen_on_factors(&fe, ScreeningRule::Rank(k1))?;
    if first.selected.len() >= budget {
        return Ok(ScreeningResult {
            rule: ScreeningRule::Rank(bound),
            ..first
        });
    }

    // Penalized fit on the first-round survivors.
    let m = fe.n();
    let mut sel_u = Array2::zeros((m, first.selected.len()));
    for (c, &j) in first.selected.iter().enumerate() {
        sel_u.column_mut(c).assign(&fe.u().column(j));
    }
    let folds = (m / 2).min(10).max(2);
    let cv = cv_lasso(
        &sel_u.view(),
        &fe.y_resid().view(),
        folds,
        seed::substream(seed, &[TAG_SCREEN]),
        &LassoOptions::default(),
    )?;
    let resid = fe.y_resid() - &sel_u.dot(&cv.fit.beta);

    // Residual screen over the columns not yet selected.
    let resid_betas = marginal_stats(fe.u(), &resid)?;
    let mut in_first = vec![false; d];
    for &j in &first.selected {
        in_first[j] = true;
    }
    let mut rest: Vec<usize> = (0..d).filter(|&j| !in_first[j]).collect();
    rest.sort_by(|&a, &b| {
        resid_betas[b]
            .abs()
            .total_cmp(&resid_betas[a].abs())
            .then(a.cmp(&b))
    });
    let mut selected = first.selected.clone();
    selected.extend(rest.into_iter().take(budget - selected.len()));
    selected.sort_unstable();

    Ok(ScreeningResult {
        selected,
        marginal_betas: first.marginal_betas,
        rule: ScreeningRule::Rank(bound),
        m,
    })
}

/// Fitted values of the least-squares projection of `y` onto the columns
/// of `a`, with a rank-deficiency flag.
fn project_onto(a: &Array2<f64>, y: &Array1<f64>) -> Result<(Array1<f64>, bool)> {
    let (n, c) = a.dim();
    if c == 0 {
        return Ok((Array1::zeros(n), false));
    }
    let am = nalgebra::DMatrix::from_fn(n, c, |i, j| a[[i, j]]);
    let yv = nalgebra::DVector::from_fn(n, |i, _| y[i]);
    let svd = am.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let deficient = svd.rank(RANK_TOL * smax.max(1e-300)) < c;
    let coef = svd
        .solve(&yv, RANK_TOL * smax.max(1e-300))
        .map_err(|e| FarmError::InvalidInput(format!("projection solve failed: {e}")))?;
    let fitted = am * coef;
    Ok((Array1::from_iter(fitted.iter().copied()), deficient))
}

/// The three fitted-value vectors every statistic form is built from:
/// response projected onto the factor subspace, onto the selected
/// idiosyncratic columns, and onto the selected raw-panel columns.
fn statistic_parts(
    part2: &DataSet,
    k: usize,
    s: &[usize],
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>, bool)> {
    let n = part2.n();
    if s.len() + k >= n {
        return Err(FarmError::InsufficientData(format!(
            "support {} plus {k} factors needs more than {n} evaluation rows",
            s.len()
        )));
    }
    if let Some(&bad) = s.iter().find(|&&j| j >= part2.d()) {
        return Err(FarmError::InvalidInput(format!(
            "selected column {bad} out of range for d = {}",
            part2.d()
        )));
    }
    let fe = estimate_factors(part2, k)?;
    let y = fe.y().clone();

    // Factor projection: columns of F are orthogonal with squared norm n.
    let pf = fe.f().dot(&fe.f().t().dot(&y)) / n as f64;

    let gather = |m: &Array2<f64>| {
        let mut out = Array2::zeros((n, s.len()));
        for (c, &j) in s.iter().enumerate() {
            out.column_mut(c).assign(&m.column(j));
        }
        out
    };
    let (pu, du) = project_onto(&gather(fe.u()), &y)?;
    let (px, dx) = project_onto(&gather(part2.x()), &y)?;
    Ok((y, pf, pu, px, du || dx))
}

/// Nested residual-sum-of-squares statistic on the evaluation part:
/// |(I - P_XS) Y|^2 - |(I - P_F - P_US) Y|^2 with factors re-estimated on
/// this part. The factor and idiosyncratic projections add because their
/// ranges are exactly orthogonal.
pub fn anova_statistic(part2: &DataSet, k: usize, s: &[usize]) -> Result<AnovaStatistic> {
    let (y, pf, pu, px, rank_deficient) = statistic_parts(part2, k, s)?;
    let r1 = &y - &px;
    let r2 = &y - &pf - &pu;
    let raw = r1.dot(&r1) - r2.dot(&r2);
    Ok(AnovaStatistic {
        q: raw.max(0.0),
        raw,
        rank_deficient,
    })
}

/// The same quantity in its projector-difference form
/// |(P_F + P_US - P_XS) Y|^2, used by the no-split variant. Equals
/// [`anova_statistic`] on the same data and support because every selected
/// panel column decomposes exactly as F b + U_j.
pub fn no_split_statistic(part: &DataSet, k: usize, s: &[usize]) -> Result<AnovaStatistic> {
    let (_, pf, pu, px, rank_deficient) = statistic_parts(part, k, s)?;
    let v = &pf + &pu - &px;
    let raw = v.dot(&v);
    Ok(AnovaStatistic {
        q: raw.max(0.0),
        raw,
        rank_deficient,
    })
}

/// Screening budget: ceil(rows / ln(rows)).
fn rank_bound(rows: usize) -> usize {
    ((rows as f64) / (rows as f64).ln()).ceil() as usize
}

/// Test the adequacy of the sparse linear regression. With splitting
/// (default), the candidate support is screened on ceil(n^0.8) rows and the
/// statistic, factor count, and noise scale all come from the remaining
/// rows; the no-split variant does everything on the full sample with the
/// projector-difference statistic (anti-conservative, kept for comparison).
pub fn sparse_adequacy_test(
    data: &DataSet,
    alpha: f64,
    seed: u64,
    no_split: bool,
) -> Result<AnovaResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FarmError::InvalidInput(format!(
            "level must lie strictly between 0 and 1, got {alpha}"
        )));
    }

    let (q_stat, k_hat, sigma, selected) = if no_split {
        let k_hat = select_num_factors(data, default_k_max(data.n(), data.d()))?;
        let bound = rank_bound(data.n());
        let screen = isis_screen(data, k_hat, bound, seed)?;
        let fe = estimate_factors(data, k_hat)?;
        let sigma = estimate_sigma_rcv(&fe, seed::substream(seed, &[TAG_SIGMA]))?;
        let q = no_split_statistic(data, k_hat, &screen.selected)?;
        (q, k_hat, sigma, screen.selected)
    } else {
        let (part1, part2) = split_sample(data, 0.8, seed)?;
        let k_hat = select_num_factors(&part2, default_k_max(part2.n(), part2.d()))?;
        let bound = rank_bound(part2.n());
        let screen = isis_screen(&part1, k_hat, bound, seed)?;
        let fe2 = estimate_factors(&part2, k_hat)?;
        let sigma = estimate_sigma_rcv(&fe2, seed::substream(seed, &[TAG_SIGMA]))?;
        let q = anova_statistic(&part2, k_hat, &screen.selected)?;
        (q, k_hat, sigma, screen.selected)
    };

    let sigma_sq_hat = sigma * sigma;
    let ratio = if sigma_sq_hat == 0.0 {
        if q_stat.q == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        q_stat.q / sigma_sq_hat
    };
    let chi = ChiSquared::new(k_hat as f64).map_err(|e| {
        FarmError::InvalidInput(format!("chi-square with {k_hat} degrees of freedom: {e}"))
    })?;
    let p_value = 1.0 - chi.cdf(ratio);
    let critical = chi.inverse_cdf(1.0 - alpha);
    Ok(AnovaResult {
        q: q_stat.q,
        raw_q: q_stat.raw,
        sigma_sq_hat,
        df: k_hat,
        p_value,
        alpha,
        reject: ratio > critical,
        rank_deficient: q_stat.rank_deficient,
        selected,
        no_split,
    })
}
