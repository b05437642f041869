//! l1-penalized least squares in Gram form.
//!
//! Every penalized regression in the crate (the augmented-regression fit, the
//! node-wise precision rows, refitted-variance support selection, screening
//! refits, and the plain high-dimensional benchmark) reduces to
//!
//! ```text
//! min over b:  (2n)^-1 (b'Gb - 2c'b + y'y) + lambda * |b|_1
//! ```
//!
//! with `G = A'A` and `c = A'y`. Working on the Gram keeps warm-started path
//! sweeps at O(|active| * d) regardless of the row count and lets callers
//! share fold Grams across many regressions on the same design.
//!
//! The solver is cyclic coordinate descent over the active set with full
//! KKT-violation passes to grow it; a sweep converges when no coefficient
//! moves more than `tol`. Solutions carry their measured KKT gap.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;

use crate::error::{FarmError, Result};
use crate::seed;

/// Coefficients below this magnitude count as zero when reporting supports.
pub const ZERO_TOL: f64 = 1e-12;

/// Default penalty-path length.
pub const GRID_POINTS: usize = 100;

/// Default ratio of the smallest to the largest grid penalty.
pub const GRID_RATIO: f64 = 1e-3;

/// Solver controls.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    /// Sweep convergence: largest coefficient move in a sweep must fall
    /// below this.
    pub tol: f64,
    /// Iteration budget measured in sweeps.
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        // The sweep budget is sized for near-collinear designs (a panel
        // with its factor component removed has exact linear dependencies),
        // where cyclic descent converges slowly at small penalties; tens of
        // thousands of sweeps over a small active set are still cheap.
        Self {
            tol: 1e-7,
            max_sweeps: 200_000,
        }
    }
}

/// A quadratic problem in Gram form. `banned` masks one coordinate out of
/// the fit entirely (used when a design column doubles as the response).
#[derive(Clone, Copy)]
pub struct GramProblem<'a> {
    pub g: &'a Array2<f64>,
    pub c: &'a ArrayView1<'a, f64>,
    pub n: usize,
    pub banned: Option<usize>,
}

/// Solution of one penalized problem.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub beta: Array1<f64>,
    /// Sorted indices of coefficients larger than [`ZERO_TOL`] in magnitude.
    pub active: Vec<usize>,
    /// Measured stationarity gap: worst violation of the subgradient
    /// conditions at the returned point.
    pub kkt_gap: f64,
    pub sweeps: usize,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Mutable solver state reused across a penalty path.
pub struct PathState {
    beta: Array1<f64>,
    active: Vec<usize>,
    in_active: Vec<bool>,
    sweeps_used: usize,
}

impl PathState {
    pub fn new(d: usize) -> Self {
        Self {
            beta: Array1::zeros(d),
            active: Vec::new(),
            in_active: vec![false; d],
            sweeps_used: 0,
        }
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    fn prune_zeros(&mut self) {
        let beta = &self.beta;
        let in_active = &mut self.in_active;
        self.active.retain(|&j| {
            if beta[j] == 0.0 {
                in_active[j] = false;
                false
            } else {
                true
            }
        });
    }
}

/// Accumulate (G beta) over the active set into `gb`.
fn gram_times_beta(problem: &GramProblem, state: &PathState, gb: &mut Array1<f64>) {
    gb.fill(0.0);
    for &j in &state.active {
        let bj = state.beta[j];
        if bj != 0.0 {
            gb.scaled_add(bj, &problem.g.row(j));
        }
    }
}

/// Solve at a single penalty from the current state. Returns the measured
/// KKT gap and the sweeps consumed.
pub fn solve_at(
    problem: &GramProblem,
    lambda: f64,
    state: &mut PathState,
    opts: &LassoOptions,
) -> Result<(f64, usize)> {
    let d = problem.g.nrows();
    debug_assert_eq!(problem.c.len(), d);
    let n = problem.n as f64;
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(FarmError::InvalidInput(format!(
            "penalty must be finite and nonnegative, got {lambda}"
        )));
    }

    let allowed = |j: usize| problem.banned != Some(j) && problem.g[[j, j]] > 0.0;

    // An unpenalized fit needs every usable coordinate in play from the
    // start; the violation pass below would never trigger at lambda = 0.
    if lambda == 0.0 {
        for j in 0..d {
            if allowed(j) && !state.in_active[j] {
                state.in_active[j] = true;
                state.active.push(j);
            }
        }
        state.active.sort_unstable();
    }

    let start_sweeps = state.sweeps_used;
    let mut gb = Array1::zeros(d);
    loop {
        // Cyclic descent over the active set.
        loop {
            if state.sweeps_used - start_sweeps >= opts.max_sweeps {
                gram_times_beta(problem, state, &mut gb);
                let gap = kkt_gap(problem, state, &gb, lambda);
                return Err(FarmError::NonConvergence {
                    gap,
                    iterations: state.sweeps_used - start_sweeps,
                });
            }
            state.sweeps_used += 1;
            let mut max_move = 0.0f64;
            for idx in 0..state.active.len() {
                let j = state.active[idx];
                let gjj = problem.g[[j, j]];
                let vj = gjj / n;
                // Gather G[j, active] . beta[active].
                let row = problem.g.row(j);
                let mut s = 0.0;
                for &l in &state.active {
                    s += row[l] * state.beta[l];
                }
                let q = (problem.c[j] - s + gjj * state.beta[j]) / n;
                let new = soft_threshold(q, lambda) / vj;
                let delta = new - state.beta[j];
                if delta != 0.0 {
                    state.beta[j] = new;
                    max_move = max_move.max(delta.abs());
                }
            }
            if max_move < opts.tol {
                break;
            }
        }

        // Full pass: admit coordinates whose gradient breaches the penalty.
        gram_times_beta(problem, state, &mut gb);
        let mut admitted = false;
        for j in 0..d {
            if state.in_active[j] || !allowed(j) {
                continue;
            }
            let grad = (problem.c[j] - gb[j]) / n;
            if grad.abs() > lambda * (1.0 + 1e-9) + 1e-15 {
                state.in_active[j] = true;
                state.active.push(j);
                admitted = true;
            }
        }
        if !admitted {
            let gap = kkt_gap(problem, state, &gb, lambda);
            return Ok((gap, state.sweeps_used - start_sweeps));
        }
    }
}

/// Worst violation of the stationarity conditions at the current point,
/// given `gb = G beta`.
fn kkt_gap(problem: &GramProblem, state: &PathState, gb: &Array1<f64>, lambda: f64) -> f64 {
    let n = problem.n as f64;
    let d = problem.g.nrows();
    let mut gap = 0.0f64;
    for j in 0..d {
        if problem.banned == Some(j) || problem.g[[j, j]] <= 0.0 {
            continue;
        }
        let grad = (problem.c[j] - gb[j]) / n;
        let bj = state.beta[j];
        if bj.abs() > ZERO_TOL {
            gap = gap.max((grad - lambda * bj.signum()).abs());
        } else {
            gap = gap.max((grad.abs() - lambda).max(0.0));
        }
    }
    gap
}

/// Finish a state into a reported fit.
fn finish(state: &PathState, kkt_gap: f64, sweeps: usize) -> LassoFit {
    let mut active: Vec<usize> = state
        .active
        .iter()
        .copied()
        .filter(|&j| state.beta[j].abs() > ZERO_TOL)
        .collect();
    active.sort_unstable();
    LassoFit {
        beta: state.beta.clone(),
        active,
        kkt_gap,
        sweeps,
    }
}

/// Solve a single problem from a cold start.
pub fn lasso_gram(problem: &GramProblem, lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    let mut state = PathState::new(problem.g.nrows());
    let (gap, sweeps) = solve_at(problem, lambda, &mut state, opts)?;
    Ok(finish(&state, gap, sweeps))
}

/// Largest penalty with an all-zero solution: max |c_j| / n over usable
/// coordinates.
pub fn lambda_max(problem: &GramProblem) -> f64 {
    let n = problem.n as f64;
    let mut m = 0.0f64;
    for (j, &cj) in problem.c.iter().enumerate() {
        if problem.banned == Some(j) || problem.g[[j, j]] <= 0.0 {
            continue;
        }
        m = m.max(cj.abs() / n);
    }
    m
}

/// Log-spaced descending penalty grid from `top` down to `top * ratio`.
/// Degenerate tops produce the single point 0 (an all-zero response).
pub fn lambda_grid(top: f64, points: usize, ratio: f64) -> Vec<f64> {
    if !(top > 1e-300) || points == 0 {
        return vec![0.0];
    }
    if points == 1 {
        return vec![top];
    }
    let log_top = top.ln();
    let log_bot = (top * ratio).ln();
    (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            (log_top + t * (log_bot - log_top)).exp()
        })
        .collect()
}

/// Walk a descending penalty grid with warm starts, invoking `visit` with
/// (grid index, lambda, fit state) after each solve.
pub fn lasso_path<F>(
    problem: &GramProblem,
    grid: &[f64],
    opts: &LassoOptions,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, f64, &PathState),
{
    let mut state = PathState::new(problem.g.nrows());
    for (i, &lambda) in grid.iter().enumerate() {
        state.prune_zeros();
        solve_at(problem, lambda, &mut state, opts)?;
        visit(i, lambda, &state);
    }
    Ok(())
}

/// Row indices of each cross-validation fold: a seeded shuffle of 0..n cut
/// into contiguous blocks (sizes differing by at most one).
pub fn fold_blocks(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(FarmError::InvalidInput(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if n < 2 * folds {
        return Err(FarmError::InsufficientData(format!(
            "{n} rows cannot support {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed, &[0x0f01d5]);
    order.shuffle(&mut rng);

    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0usize;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut block: Vec<usize> = order[at..at + len].to_vec();
        block.sort_unstable();
        out.push(block);
        at += len;
    }
    Ok(out)
}

/// Pick the grid index minimizing the mean validation error; exact ties
/// resolve to the smallest index, i.e. the larger penalty.
pub fn choose_min_error(mean_errors: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &e) in mean_errors.iter().enumerate() {
        if e < mean_errors[best] {
            best = i;
        }
    }
    best
}

/// Held-out pieces of one fold, in Gram form.
pub struct FoldGrams {
    pub g_out: Array2<f64>,
    pub c_out: Array1<f64>,
    pub yty_out: f64,
    pub n_out: usize,
}

/// Build per-fold held-out Grams from row data.
pub fn fold_grams(
    a: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    blocks: &[Vec<usize>],
) -> Vec<FoldGrams> {
    let d = a.ncols();
    blocks
        .iter()
        .map(|rows| {
            let mut a_out = Array2::zeros((rows.len(), d));
            let mut y_out = Array1::zeros(rows.len());
            for (i, &r) in rows.iter().enumerate() {
                a_out.row_mut(i).assign(&a.row(r));
                y_out[i] = y[r];
            }
            FoldGrams {
                g_out: a_out.t().dot(&a_out),
                c_out: a_out.t().dot(&y_out),
                yty_out: y_out.dot(&y_out),
                n_out: rows.len(),
            }
        })
        .collect()
}

/// Mean held-out squared error of the active coefficients against held-out
/// Gram pieces.
pub fn held_out_error(
    state: &PathState,
    g_out: &ArrayView2<f64>,
    c_out: &ArrayView1<f64>,
    yty_out: f64,
    n_out: usize,
) -> f64 {
    let mut quad = 0.0;
    let mut lin = 0.0;
    for &j in &state.active {
        let bj = state.beta[j];
        if bj == 0.0 {
            continue;
        }
        lin += bj * c_out[j];
        let row = g_out.row(j);
        for &l in &state.active {
            quad += bj * state.beta[l] * row[l];
        }
    }
    ((yty_out - 2.0 * lin + quad) / n_out as f64).max(0.0)
}

/// [`held_out_error`] against one fold's stored Grams.
pub fn fold_error(state: &PathState, fold: &FoldGrams) -> f64 {
    held_out_error(
        state,
        &fold.g_out.view(),
        &fold.c_out.view(),
        fold.yty_out,
        fold.n_out,
    )
}

/// Cross-validated penalized fit on raw rows: builds the default grid,
/// scores it over seeded folds, refits on the full data at the chosen
/// penalty. Convenience wrapper for designs that are not reused.
pub struct CvFit {
    pub grid: Vec<f64>,
    /// grid.len() x folds held-out mean squared errors.
    pub errors: Array2<f64>,
    pub mean_errors: Array1<f64>,
    pub chosen: usize,
    pub fit: LassoFit,
}

pub fn cv_lasso(
    a: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    folds: usize,
    seed: u64,
    opts: &LassoOptions,
) -> Result<CvFit> {
    let (n, _) = a.dim();
    let g = a.t().dot(a);
    let c = a.t().dot(y);
    let yty = y.dot(y);
    let blocks = fold_blocks(n, folds, seed)?;
    let per_fold = fold_grams(a, y, &blocks);
    cv_lasso_gram(&g, &c, yty, n, &per_fold, None, opts)
}

/// Cross-validated fit when the caller already holds full and per-fold
/// Grams. `banned` masks a coordinate throughout.
pub fn cv_lasso_gram(
    g: &Array2<f64>,
    c: &Array1<f64>,
    _yty: f64,
    n: usize,
    per_fold: &[FoldGrams],
    banned: Option<usize>,
    opts: &LassoOptions,
) -> Result<CvFit> {
    let folds = per_fold.len();
    if folds < 2 {
        return Err(FarmError::InvalidInput("need at least 2 folds".into()));
    }
    let cview = c.view();
    let full = GramProblem {
        g,
        c: &cview,
        n,
        banned,
    };
    let grid = lambda_grid(lambda_max(&full), GRID_POINTS, GRID_RATIO);
    let mut errors = Array2::zeros((grid.len(), folds));

    let mut g_train = Array2::zeros(g.raw_dim());
    let mut c_train = Array1::zeros(c.len());
    for (fi, fold) in per_fold.iter().enumerate() {
        g_train.assign(g);
        g_train -= &fold.g_out;
        c_train.assign(c);
        c_train -= &fold.c_out;
        let n_train = n - fold.n_out;
        let cview = c_train.view();
        let problem = GramProblem {
            g: &g_train,
            c: &cview,
            n: n_train,
            banned,
        };
        lasso_path(&problem, &grid, opts, |i, _, state| {
            errors[[i, fi]] = fold_error(state, fold);
        })?;
    }

    let mean_errors =
        Array1::from_iter(errors.rows().into_iter().map(|r| r.sum() / folds as f64));
    let chosen = choose_min_error(mean_errors.as_slice().expect("contiguous"));

    // Refit on the full data, warm-walking the grid down to the chosen
    // penalty.
    let mut state = PathState::new(g.nrows());
    let mut last = (0.0, 0);
    for &lambda in &grid[..=chosen] {
        state.prune_zeros();
        last = solve_at(&full, lambda, &mut state, opts)?;
    }
    let fit = finish(&state, last.0, last.1);

    Ok(CvFit {
        grid,
        errors,
        mean_errors,
        chosen,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn problem_from_rows<'a>(
        g: &'a Array2<f64>,
        c: &'a ArrayView1<'a, f64>,
        n: usize,
    ) -> GramProblem<'a> {
        GramProblem {
            g,
            c,
            n,
            banned: None,
        }
    }

    #[test]
    fn soft_threshold_matches_definition() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
    }

    #[test]
    fn orthogonal_design_has_closed_form() {
        // A'A = n I makes each coordinate a scalar soft-threshold.
        let n = 4;
        let a = arr2(&[
            [1.0, 1.0],
            [1.0, -1.0],
            [-1.0, 1.0],
            [-1.0, -1.0],
        ]);
        let y = arr1(&[2.0, 0.4, -0.4, -2.0]);
        let g = a.t().dot(&a);
        let c = a.t().dot(&y);
        let cv = c.view();
        let lambda = 0.3;
        let fit = lasso_gram(&problem_from_rows(&g, &cv, n), lambda, &LassoOptions::default())
            .unwrap();
        for j in 0..2 {
            let expect = soft_threshold(c[j] / n as f64, lambda) / (g[[j, j]] / n as f64);
            assert!(
                (fit.beta[j] - expect).abs() < 1e-10,
                "coordinate {j}: {} vs {expect}",
                fit.beta[j]
            );
        }
        assert!(fit.kkt_gap < 1e-9);
    }

    #[test]
    fn unpenalized_fit_matches_least_squares() {
        let a = arr2(&[
            [1.0, 0.3],
            [0.2, 1.1],
            [-0.7, 0.4],
            [0.5, -0.9],
            [1.3, 0.8],
        ]);
        let y = arr1(&[1.0, -0.5, 0.3, 0.9, -1.2]);
        let g = a.t().dot(&a);
        let c = a.t().dot(&y);
        // 2x2 normal equations by hand.
        let det = g[[0, 0]] * g[[1, 1]] - g[[0, 1]] * g[[1, 0]];
        let ols = [
            (g[[1, 1]] * c[0] - g[[0, 1]] * c[1]) / det,
            (g[[0, 0]] * c[1] - g[[1, 0]] * c[0]) / det,
        ];
        let cv = c.view();
        let opts = LassoOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let fit = lasso_gram(&problem_from_rows(&g, &cv, 5), 0.0, &opts).unwrap();
        assert!((fit.beta[0] - ols[0]).abs() < 1e-6);
        assert!((fit.beta[1] - ols[1]).abs() < 1e-6);
    }

    #[test]
    fn solution_satisfies_kkt_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 30;
            let d = 8;
            let a = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
            let y = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
            let g = a.t().dot(&a);
            let c = a.t().dot(&y);
            let cv = c.view();
            let problem = problem_from_rows(&g, &cv, n);
            let lambda = lambda_max(&problem) * rng.random_range(0.05..0.9);
            let fit = lasso_gram(&problem, lambda, &LassoOptions::default()).unwrap();

            // Recompute the gradient from raw rows: n^-1 A'(y - A beta).
            let resid = &y - &a.dot(&fit.beta);
            let grad = a.t().dot(&resid) / n as f64;
            for j in 0..d {
                if fit.beta[j].abs() > ZERO_TOL {
                    assert!(
                        (grad[j] - lambda * fit.beta[j].signum()).abs() < 1e-6,
                        "trial {trial} active coordinate {j}"
                    );
                } else {
                    assert!(
                        grad[j].abs() <= lambda * (1.0 + 1e-6) + 1e-9,
                        "trial {trial} inactive coordinate {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn lambda_at_max_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((25, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(25, |_| rng.sample::<f64, _>(StandardNormal));
        let g = a.t().dot(&a);
        let c = a.t().dot(&y);
        let cv = c.view();
        let problem = problem_from_rows(&g, &cv, 25);
        let top = lambda_max(&problem);
        let fit = lasso_gram(&problem, top * (1.0 + 1e-12), &LassoOptions::default()).unwrap();
        assert!(fit.active.is_empty());
    }

    #[test]
    fn warm_path_agrees_with_cold_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = Array2::from_shape_fn((40, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(40, |_| rng.sample::<f64, _>(StandardNormal));
        let g = a.t().dot(&a);
        let c = a.t().dot(&y);
        let cv = c.view();
        let problem = problem_from_rows(&g, &cv, 40);
        let grid = lambda_grid(lambda_max(&problem), 12, 1e-2);
        let opts = LassoOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let mut path_betas = Vec::new();
        lasso_path(&problem, &grid, &opts, |_, _, state| {
            path_betas.push(state.beta().clone());
        })
        .unwrap();
        for (i, &lambda) in grid.iter().enumerate() {
            let cold = lasso_gram(&problem, lambda, &opts).unwrap();
            let diff = (&path_betas[i] - &cold.beta)
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-6, "grid point {i}: max diff {diff}");
        }
    }

    #[test]
    fn banned_coordinate_stays_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((30, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let y = a.column(2).to_owned(); // response equals a design column
        let g = a.t().dot(&a);
        let c = a.t().dot(&y);
        let cv = c.view();
        let problem = GramProblem {
            g: &g,
            c: &cv,
            n: 30,
            banned: Some(2),
        };
        let fit = lasso_gram(&problem, 0.01, &LassoOptions::default()).unwrap();
        assert_eq!(fit.beta[2], 0.0);
    }

    #[test]
    fn grid_is_log_spaced_and_descending() {
        let grid = lambda_grid(2.0, 5, 1e-2);
        assert_eq!(grid.len(), 5);
        assert!((grid[0] - 2.0).abs() < 1e-15);
        assert!((grid[4] - 0.02).abs() < 1e-12);
        for w in grid.windows(2) {
            assert!(w[0] > w[1]);
        }
        let ratios: Vec<f64> = grid.windows(2).map(|w| w[1] / w[0]).collect();
        for w in ratios.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12, "not log-spaced");
        }
        assert_eq!(lambda_grid(0.0, 5, 1e-2), vec![0.0]);
    }

    #[test]
    fn fold_blocks_partition_and_are_deterministic() {
        let blocks = fold_blocks(23, 5, 99).unwrap();
        assert_eq!(blocks.len(), 5);
        let mut all: Vec<usize> = blocks.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        assert_eq!(blocks, fold_blocks(23, 5, 99).unwrap());
        assert_ne!(blocks, fold_blocks(23, 5, 100).unwrap());
        assert!(matches!(
            fold_blocks(9, 5, 1),
            Err(FarmError::InsufficientData(_))
        ));
        assert!(matches!(
            fold_blocks(9, 1, 1),
            Err(FarmError::InvalidInput(_))
        ));
    }

    #[test]
    fn tie_rule_prefers_larger_penalty() {
        // Index 1 and 3 tie exactly; the smaller index (larger penalty) wins.
        assert_eq!(choose_min_error(&[0.5, 0.2, 0.3, 0.2, 0.4]), 1);
        assert_eq!(choose_min_error(&[0.2, 0.2]), 0);
    }

    #[test]
    fn cv_on_pure_noise_picks_heavy_penalty() {
        // With no signal the held-out error is minimized near the top of the
        // grid, where the fit is all zeros (or nearly so).
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let a = Array2::from_shape_fn((60, 10), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(60, |_| rng.sample::<f64, _>(StandardNormal));
        let cv = cv_lasso(&a.view(), &y.view(), 5, 7, &LassoOptions::default()).unwrap();
        assert!(
            cv.grid[cv.chosen] > 0.2 * cv.grid[0],
            "chose {} of top {}",
            cv.grid[cv.chosen],
            cv.grid[0]
        );
        assert!(cv.fit.active.len() <= 3);
    }

    #[test]
    fn cv_recovers_planted_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let n = 80;
        let d = 12;
        let a = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut beta = Array1::zeros(d);
        beta[0] = 1.5;
        beta[3] = -2.0;
        let y = a.dot(&beta)
            + Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal) * 0.2);
        let cv = cv_lasso(&a.view(), &y.view(), 5, 11, &LassoOptions::default()).unwrap();
        assert!(cv.fit.active.contains(&0));
        assert!(cv.fit.active.contains(&3));
        assert!((cv.fit.beta[0] - 1.5).abs() < 0.2);
        assert!((cv.fit.beta[3] + 2.0).abs() < 0.2);
    }
}
