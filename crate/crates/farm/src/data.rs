//! Observed data container.

use ndarray::{Array1, Array2, Axis};

use crate::error::{FarmError, Result};

/// A centered predictor panel with its response.
///
/// Construction subtracts column means from `x` and the mean from `y` and
/// keeps the means, so raw rows can be reconstructed for sample splitting,
/// moving windows, and prediction on new observations.
#[derive(Debug, Clone)]
pub struct DataSet {
    x: Array2<f64>,
    y: Array1<f64>,
    x_means: Array1<f64>,
    y_mean: f64,
}

impl DataSet {
    /// Build a data set from raw (uncentered) observations.
    ///
    /// Requires at least two rows, at least one predictor column, matching
    /// row counts, and finite entries throughout.
    pub fn from_raw(mut x: Array2<f64>, mut y: Array1<f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(FarmError::InsufficientData(format!(
                "need at least 2 rows, got {n}"
            )));
        }
        if d < 1 {
            return Err(FarmError::InvalidInput("no predictor columns".into()));
        }
        if y.len() != n {
            return Err(FarmError::InvalidInput(format!(
                "predictor panel has {n} rows but response has {}",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(FarmError::InvalidInput(
                "non-finite value in the data".into(),
            ));
        }

        let x_means = x.mean_axis(Axis(0)).expect("n >= 2");
        for mut row in x.rows_mut() {
            row -= &x_means;
        }
        let y_mean = y.mean().expect("n >= 2");
        y.mapv_inplace(|v| v - y_mean);

        Ok(Self {
            x,
            y,
            x_means,
            y_mean,
        })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of predictor columns.
    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Centered predictor panel, n x d.
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Centered response, length n.
    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Column means removed from the predictors.
    pub fn x_means(&self) -> &Array1<f64> {
        &self.x_means
    }

    /// Mean removed from the response.
    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    /// Reconstruct the raw (uncentered) predictor rows at `rows`.
    pub fn raw_x_rows(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.d()));
        for (i, &r) in rows.iter().enumerate() {
            let mut dest = out.row_mut(i);
            dest.assign(&self.x.row(r));
            dest += &self.x_means;
        }
        out
    }

    /// Reconstruct the raw response at `rows`.
    pub fn raw_y_rows(&self, rows: &[usize]) -> Array1<f64> {
        Array1::from_iter(rows.iter().map(|&r| self.y[r] + self.y_mean))
    }

    /// New data set from a subset of rows, re-centered on that subset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(FarmError::InvalidInput(format!(
                "row index {bad} out of range for n = {}",
                self.n()
            )));
        }
        Self::from_raw(self.raw_x_rows(rows), self.raw_y_rows(rows))
    }
}
