//! The factor-augmented regression fit.
//!
//! After factor extraction (see [`crate::factor`]) the response decomposes
//! into a part explained by the factor scores and a part explained by the
//! idiosyncratic panel. Because the scores and the panel are orthogonal by
//! construction, the two halves decouple exactly: the factor coefficients
//! are ordinary least squares on the scores (a K-vector, computed in closed
//! form) and the idiosyncratic coefficients solve an l1-penalized least
//! squares problem on the panel. The penalty level is picked by K-fold
//! cross-validation along a log-spaced path.

use ndarray::{Array1, Array2};

use crate::error::{FarmError, Result};
use crate::factor::FactorEstimate;
use crate::lasso::{self, LassoOptions};

/// Fitted coefficients of the augmented regression.
#[derive(Debug, Clone)]
pub struct FarmEstimate {
    /// Idiosyncratic (high-dimensional, penalized) coefficients, length d.
    pub beta: Array1<f64>,
    /// Factor coefficients, length K, unpenalized and exact.
    pub gamma: Array1<f64>,
    /// Penalty level the beta fit used.
    pub lambda: f64,
    /// Sorted indices of beta entries larger than 1e-12 in magnitude.
    pub active_set: Vec<usize>,
    /// Penalized objective at the solution:
    /// (2n)^-1 |y_resid - U beta|^2 + lambda |beta|_1.
    pub objective: f64,
    /// Measured worst violation of the stationarity conditions.
    pub kkt_gap: f64,
}

/// A cross-validation run over the penalty path.
#[derive(Debug, Clone)]
pub struct LambdaPath {
    /// Strictly decreasing penalty grid.
    pub grid: Vec<f64>,
    /// Held-out mean squared errors, grid length x folds.
    pub cv_errors: Array2<f64>,
    /// Index of the selected penalty: minimum mean error, ties to the
    /// larger penalty.
    pub chosen: usize,
}

impl LambdaPath {
    /// The selected penalty value.
    pub fn lambda(&self) -> f64 {
        self.grid[self.chosen]
    }

    /// Mean held-out error per grid point.
    pub fn mean_errors(&self) -> Array1<f64> {
        let folds = self.cv_errors.ncols() as f64;
        Array1::from_iter(self.cv_errors.rows().into_iter().map(|r| r.sum() / folds))
    }
}

/// Exact factor coefficients: F'y / n. Unaffected by the penalty because
/// F'U = 0 decouples the two blocks.
fn gamma_of(fe: &FactorEstimate) -> Array1<f64> {
    fe.f().t().dot(fe.y()) / fe.n() as f64
}

/// Fit the augmented regression at a fixed penalty.
pub fn fit_farm_lasso(fe: &FactorEstimate, lambda: f64) -> Result<FarmEstimate> {
    fit_with_options(fe, lambda, &LassoOptions::default())
}

/// As [`fit_farm_lasso`] with explicit solver controls (tests tighten the
/// tolerance when comparing against closed forms).
pub fn fit_with_options(
    fe: &FactorEstimate,
    lambda: f64,
    opts: &LassoOptions,
) -> Result<FarmEstimate> {
    let u = fe.u();
    let y_resid = fe.y_resid();
    let g = u.t().dot(u);
    let c = u.t().dot(y_resid);
    let cview = c.view();
    let problem = lasso::GramProblem {
        g: &g,
        c: &cview,
        n: fe.n(),
        banned: None,
    };
    let fit = lasso::lasso_gram(&problem, lambda, opts)?;

    let resid = y_resid - &u.dot(&fit.beta);
    let objective = resid.dot(&resid) / (2.0 * fe.n() as f64)
        + lambda * fit.beta.iter().map(|b| b.abs()).sum::<f64>();

    Ok(FarmEstimate {
        beta: fit.beta,
        gamma: gamma_of(fe),
        lambda,
        active_set: fit.active,
        objective,
        kkt_gap: fit.kkt_gap,
    })
}

/// Score the penalty path by K-fold cross-validation on (U, y_resid).
/// Folds are contiguous blocks of a seeded row shuffle, so the result is
/// deterministic given the seed.
pub fn cv_select_lambda(fe: &FactorEstimate, folds: usize, seed: u64) -> Result<LambdaPath> {
    let cv = lasso::cv_lasso(
        &fe.u().view(),
        &fe.y_resid().view(),
        folds,
        seed,
        &LassoOptions::default(),
    )?;
    Ok(LambdaPath {
        grid: cv.grid,
        cv_errors: cv.errors,
        chosen: cv.chosen,
    })
}

/// Cross-validate the penalty and fit at the selection, in one call.
pub fn fit_farm_cv(
    fe: &FactorEstimate,
    folds: usize,
    seed: u64,
) -> Result<(FarmEstimate, LambdaPath)> {
    let path = cv_select_lambda(fe, folds, seed)?;
    let est = fit_farm_lasso(fe, path.lambda())?;
    Ok((est, path))
}

/// Predict on new observations. Rows of `xnew` must already be centered
/// with the training column means. Each row is scored against the loadings
/// (f = V^-1 B'x, the same projection that reproduces the training scores),
/// split into factor and idiosyncratic parts, and pushed through the fitted
/// coefficients. Returns centered predictions; add the training response
/// mean for forecasts on the original scale.
pub fn predict(
    est: &FarmEstimate,
    fe: &FactorEstimate,
    xnew: &Array2<f64>,
) -> Result<Array1<f64>> {
    if xnew.ncols() != fe.d() {
        return Err(FarmError::InvalidInput(format!(
            "new observations have {} columns, expected {}",
            xnew.ncols(),
            fe.d()
        )));
    }
    if est.beta.len() != fe.d() || est.gamma.len() != fe.k() {
        return Err(FarmError::InvalidInput(
            "estimate dimensions do not match the factor structure".into(),
        ));
    }
    // f_new = xnew B V^-1, row by row.
    let mut f_new = xnew.dot(fe.b());
    for (mut col, &v) in f_new.columns_mut().into_iter().zip(fe.v().iter()) {
        col.mapv_inplace(|z| z / v);
    }
    let u_new = xnew - &f_new.dot(&fe.b().t());
    Ok(f_new.dot(&est.gamma) + u_new.dot(&est.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSet;
    use crate::factor::estimate_factors;
    use crate::lasso::ZERO_TOL;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// A small panel with one planted factor, sparse idiosyncratic signal,
    /// and light noise.
    fn fitted_instance(n: usize, d: usize, seed: u64) -> (DataSet, FactorEstimate) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        let b = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                x[[i, j]] = f[i] * b[j] + rng.sample::<f64, _>(StandardNormal) * 0.8;
            }
        }
        let y = Array1::from_shape_fn(n, |i| {
            0.7 * f[i] + 0.5 * x[[i, 0]] - 0.4 * x[[i, 1]]
                + rng.sample::<f64, _>(StandardNormal) * 0.3
        });
        let data = DataSet::from_raw(x, y).unwrap();
        let fe = estimate_factors(&data, 1).unwrap();
        (data, fe)
    }

    #[test]
    fn heavy_penalty_zeroes_beta_and_leaves_gamma_exact() {
        let (_, fe) = fitted_instance(40, 6, 1);
        let lambda_top = fe
            .u()
            .t()
            .dot(fe.y_resid())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            / fe.n() as f64;
        let est = fit_farm_lasso(&fe, lambda_top * 1.0000001).unwrap();
        assert!(est.active_set.is_empty());
        assert!(est.beta.iter().all(|&b| b == 0.0));
        let gamma_direct = fe.f().t().dot(fe.y()) / fe.n() as f64;
        for (a, b) in est.gamma.iter().zip(gamma_direct.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn unpenalized_fit_solves_the_normal_equations() {
        // The panel is orthogonal to the loadings by construction (U B = 0
        // exactly, since X B = F V and B'B = V), so U'U is rank d - K and
        // the unpenalized minimizer is a set. Every minimizer satisfies the
        // normal equations and shares fitted values; check both against a
        // pseudo-inverse solution.
        let (_, fe) = fitted_instance(50, 3, 2);

        let ub = fe.u().dot(fe.b());
        let ub_sup = ub.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(ub_sup < 1e-8, "panel not orthogonal to loadings: {ub_sup}");

        let opts = LassoOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let est = fit_with_options(&fe, 0.0, &opts).unwrap();

        let g = fe.u().t().dot(fe.u());
        let c = fe.u().t().dot(fe.y_resid());
        let ne_gap = (&g.dot(&est.beta) - &c)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(ne_gap < 1e-8, "normal equations violated by {ne_gap}");

        let gm = nalgebra::DMatrix::from_fn(3, 3, |i, j| g[[i, j]]);
        let cm = nalgebra::DVector::from_fn(3, |i, _| c[i]);
        let pinv = gm.svd(true, true).pseudo_inverse(1e-10).unwrap();
        let mn = pinv * cm;
        let beta_mn = Array1::from_shape_fn(3, |j| mn[j]);
        let fit_gap = (&fe.u().dot(&est.beta) - &fe.u().dot(&beta_mn))
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(fit_gap < 1e-6, "fitted values differ by {fit_gap}");
    }

    #[test]
    fn stationarity_holds_at_the_solution() {
        let (_, fe) = fitted_instance(60, 12, 3);
        let lambda = 0.05;
        let est = fit_farm_lasso(&fe, lambda).unwrap();
        assert!(est.kkt_gap < 1e-6);

        // Independent recomputation from the panel.
        let resid = fe.y_resid() - &fe.u().dot(&est.beta);
        let grad = fe.u().t().dot(&resid) / fe.n() as f64;
        let sup = grad.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(sup <= lambda * (1.0 + 1e-6));
        for &j in &est.active_set {
            assert!((grad[j] - lambda * est.beta[j].signum()).abs() < 1e-6);
            assert!(est.beta[j].abs() > ZERO_TOL);
        }
    }

    #[test]
    fn gamma_does_not_depend_on_the_penalty() {
        let (_, fe) = fitted_instance(45, 8, 4);
        let a = fit_farm_lasso(&fe, 0.3).unwrap();
        let b = fit_farm_lasso(&fe, 0.001).unwrap();
        for (x, y) in a.gamma.iter().zip(b.gamma.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn objective_field_matches_direct_evaluation() {
        let (_, fe) = fitted_instance(40, 10, 5);
        let est = fit_farm_lasso(&fe, 0.02).unwrap();
        let resid = fe.y_resid() - &fe.u().dot(&est.beta);
        let direct = resid.dot(&resid) / (2.0 * fe.n() as f64)
            + 0.02 * est.beta.iter().map(|b| b.abs()).sum::<f64>();
        assert!((est.objective - direct).abs() < 1e-12);
    }

    #[test]
    fn cv_path_is_deterministic_and_well_formed() {
        let (_, fe) = fitted_instance(60, 10, 6);
        let p1 = cv_select_lambda(&fe, 5, 77).unwrap();
        let p2 = cv_select_lambda(&fe, 5, 77).unwrap();
        assert_eq!(p1.chosen, p2.chosen);
        assert_eq!(p1.grid, p2.grid);
        assert_eq!(p1.cv_errors, p2.cv_errors);
        assert_eq!(p1.grid.len(), 100);
        assert_eq!(p1.cv_errors.dim(), (100, 5));
        for w in p1.grid.windows(2) {
            assert!(w[0] > w[1], "grid not strictly decreasing");
        }
        // The chosen index minimizes the mean error with ties to smaller
        // index.
        let means = p1.mean_errors();
        for (i, &m) in means.iter().enumerate() {
            assert!(means[p1.chosen] <= m || i < p1.chosen);
        }
    }

    #[test]
    fn cv_needs_enough_rows() {
        let (_, fe) = fitted_instance(12, 4, 7);
        assert!(matches!(
            cv_select_lambda(&fe, 10, 1),
            Err(FarmError::InsufficientData(_))
        ));
    }

    #[test]
    fn prediction_reproduces_training_fit_on_training_rows() {
        let (data, fe) = fitted_instance(40, 7, 8);
        let (est, _) = fit_farm_cv(&fe, 5, 3).unwrap();
        let yhat = predict(&est, &fe, data.x()).unwrap();
        let direct = fe.f().dot(&est.gamma) + fe.u().dot(&est.beta);
        for (a, b) in yhat.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn with_zero_beta_prediction_sees_only_the_factor_projection() {
        let (data, fe) = fitted_instance(40, 6, 9);
        let lambda_top = fe
            .u()
            .t()
            .dot(fe.y_resid())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            / fe.n() as f64;
        let est = fit_farm_lasso(&fe, lambda_top * 1.01).unwrap();
        assert!(est.active_set.is_empty());

        // Perturb a test row by a vector in the null space of B': the
        // prediction must not move.
        let x0 = data.x().row(0).to_owned();
        let b = fe.b();
        let mut w = Array1::from_shape_fn(6, |j| (j as f64 + 1.0) * 0.1);
        let btb = b.t().dot(b);
        let btw = b.t().dot(&w);
        let coef = nalgebra::DMatrix::from_fn(1, 1, |_, _| btb[[0, 0]])
            .lu()
            .solve(&nalgebra::DVector::from_fn(1, |i, _| btw[i]))
            .unwrap();
        w -= &b.column(0).mapv(|v| v * coef[0]);
        assert!(b.t().dot(&w)[0].abs() < 1e-10);

        let mut xnew = Array2::zeros((2, 6));
        xnew.row_mut(0).assign(&x0);
        xnew.row_mut(1).assign(&(&x0 + &w));
        let yhat = predict(&est, &fe, &xnew).unwrap();
        assert!((yhat[0] - yhat[1]).abs() < 1e-10);
    }

    #[test]
    fn prediction_rejects_wrong_width() {
        let (_, fe) = fitted_instance(30, 5, 10);
        let (est, _) = fit_farm_cv(&fe, 5, 1).unwrap();
        let bad = Array2::zeros((2, 4));
        assert!(matches!(
            predict(&est, &fe, &bad),
            Err(FarmError::InvalidInput(_))
        ));
    }
}
