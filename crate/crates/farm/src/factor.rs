//! Latent factor extraction.
//!
//! Principal components of the centered predictor panel: the factor scores
//! are the leading eigenvectors of X X' scaled to F'F/n = I, loadings follow
//! by least squares, and the idiosyncratic panel is the residual after
//! projecting the factors out. The number of factors is chosen by the
//! eigenvalue-ratio rule. Identification fixes Cov(f) = I and B'B diagonal;
//! the remaining column-sign ambiguity is resolved by making the largest
//! loading (in absolute value) of each column positive.

use ndarray::{s, Array1, Array2};

use crate::data::DataSet;
use crate::eigen::{sym_eigen_desc, sym_eigen_top, FULL_EIGEN_LIMIT};
use crate::error::{FarmError, Result};

/// Relative threshold under which eigenvalues count as zero for rank and
/// ratio-scan purposes; also the absolute floor for a usable spectrum.
const SPECTRUM_TOL: f64 = 1e-12;

/// Estimated factor structure of a data set.
///
/// Holds the score matrix `F` (n x K, F'F/n = I), loadings `B` (d x K), the
/// idiosyncratic panel `U = X - F B'` (n x K orthogonal to F), the leading
/// eigenvalues `V` of X X'/n, and the response with the factor projection
/// removed. The centering means are carried along for prediction on new
/// observations.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    f: Array2<f64>,
    b: Array2<f64>,
    u: Array2<f64>,
    v: Array1<f64>,
    y: Array1<f64>,
    y_resid: Array1<f64>,
    x_means: Array1<f64>,
    y_mean: f64,
}

impl FactorEstimate {
    /// Number of observations.
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Number of predictor columns.
    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    /// Number of factors.
    pub fn k(&self) -> usize {
        self.f.ncols()
    }

    /// Factor scores, n x K, normalized so that F'F/n = I.
    pub fn f(&self) -> &Array2<f64> {
        &self.f
    }

    /// Factor loadings, d x K.
    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    /// Idiosyncratic panel, n x d.
    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    /// Leading K eigenvalues of X X'/n, descending.
    pub fn v(&self) -> &Array1<f64> {
        &self.v
    }

    /// Centered response the estimate was built with.
    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Response with the factor projection removed.
    pub fn y_resid(&self) -> &Array1<f64> {
        &self.y_resid
    }

    /// Predictor column means from the underlying data set.
    pub fn x_means(&self) -> &Array1<f64> {
        &self.x_means
    }

    /// Response mean from the underlying data set.
    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }
}

/// Eigenvalues of the smaller Gram of the centered panel (descending); the
/// nonzero spectrum of X X' either way.
fn gram_spectrum_full(data: &DataSet) -> (Array1<f64>, Array2<f64>, bool) {
    let x = data.x();
    let (n, d) = x.dim();
    if n <= d {
        let g = x.dot(&x.t());
        let (vals, vecs) = sym_eigen_desc(&g);
        (vals, vecs, true)
    } else {
        let g = x.t().dot(x);
        let (vals, vecs) = sym_eigen_desc(&g);
        (vals, vecs, false)
    }
}

/// Extract `k` factors from the data.
///
/// Errors with [`FarmError::RankDeficient`] when `k` exceeds the numerical
/// rank of the panel and with [`FarmError::DegenerateSpectrum`] when the
/// spectrum carries no signal at all.
pub fn estimate_factors(data: &DataSet, k: usize) -> Result<FactorEstimate> {
    let x = data.x();
    let (n, d) = x.dim();
    let m = n.min(d);
    if k == 0 {
        return Err(FarmError::InvalidInput("need at least one factor".into()));
    }
    if k > m {
        return Err(FarmError::InvalidInput(format!(
            "requested {k} factors but min(n, d) = {m}"
        )));
    }

    // Eigenpairs of the smaller Gram; full solve while small, leading block
    // beyond that (the ratio scan never needs more than k values here).
    let (vals, vecs, n_side) = if m <= FULL_EIGEN_LIMIT {
        let (vals, vecs, n_side) = gram_spectrum_full(data);
        (
            vals.slice(s![..k]).to_owned(),
            vecs.slice(s![.., ..k]).to_owned(),
            n_side,
        )
    } else if n <= d {
        let g = x.dot(&x.t());
        let (vals, vecs) = sym_eigen_top(&g, k);
        (vals, vecs, true)
    } else {
        let g = x.t().dot(x);
        let (vals, vecs) = sym_eigen_top(&g, k);
        (vals, vecs, false)
    };

    if vals[0] < SPECTRUM_TOL {
        return Err(FarmError::DegenerateSpectrum {
            threshold: SPECTRUM_TOL,
        });
    }
    let guard = SPECTRUM_TOL * vals[0];
    let rank_seen = vals.iter().take_while(|&&v| v > guard).count();
    if rank_seen < k {
        return Err(FarmError::RankDeficient {
            requested: k,
            rank: rank_seen,
        });
    }

    let nf = n as f64;
    let mut f = if n_side {
        // Columns of `vecs` are unit eigenvectors of X X'.
        &vecs * nf.sqrt()
    } else {
        // Map eigenvectors of X'X into score space: w = X q / sqrt(nu).
        let mut f = x.dot(&vecs);
        for (mut col, &nu) in f.columns_mut().into_iter().zip(vals.iter()) {
            col.mapv_inplace(|v| v * (nf / nu).sqrt());
        }
        f
    };

    let mut b = x.t().dot(&f) / nf;

    // Sign convention: the largest-magnitude loading of each column is
    // positive; ties resolve to the earliest index.
    for kk in 0..k {
        let col = b.column(kk);
        let mut arg = 0usize;
        let mut best = -1.0f64;
        for (j, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = j;
            }
        }
        if b[[arg, kk]] < 0.0 {
            b.column_mut(kk).mapv_inplace(|v| -v);
            f.column_mut(kk).mapv_inplace(|v| -v);
        }
    }

    let u = x - &f.dot(&b.t());
    let y = data.y().clone();
    let fty = f.t().dot(&y) / nf;
    let y_resid = &y - &f.dot(&fty);

    Ok(FactorEstimate {
        f,
        b,
        u,
        v: vals / nf,
        y,
        y_resid,
        x_means: data.x_means().clone(),
        y_mean: data.y_mean(),
    })
}

/// Default upper bound for the eigenvalue-ratio scan: half the smaller panel
/// dimension, clamped to the valid range. Keeps the scan away from the lower
/// spectral edge, where trailing ratios of a noise Gram are unstable.
pub fn default_k_max(n: usize, d: usize) -> usize {
    let m = n.min(d);
    (m / 2).clamp(1, m.saturating_sub(1).max(1))
}

/// Choose the number of factors by the eigenvalue-ratio rule:
/// the k <= `k_max` maximizing lambda_k / lambda_{k+1} of X X'.
///
/// Ratios are only formed while lambda_{k+1} stays above a relative guard of
/// 1e-12 x lambda_1; if the spectrum collapses before the first ratio, the
/// count of non-negligible eigenvalues is returned instead (exactly rank-r
/// data yields r). Ties resolve to the smallest k.
pub fn select_num_factors(data: &DataSet, k_max: usize) -> Result<usize> {
    let m = data.n().min(data.d());
    if k_max < 1 || k_max + 1 > m {
        return Err(FarmError::InvalidInput(format!(
            "ratio scan bound must lie in [1, {}], got {k_max}",
            m.saturating_sub(1)
        )));
    }

    let (vals, _, _) = gram_spectrum_full(data);
    ratio_scan(vals.as_slice().expect("contiguous"), k_max)
}

/// The scan itself, on an already-computed descending spectrum. Split out so
/// the tie and guard rules can be checked on exact synthetic eigenvalues.
fn ratio_scan(vals: &[f64], k_max: usize) -> Result<usize> {
    if vals[0] < SPECTRUM_TOL {
        return Err(FarmError::DegenerateSpectrum {
            threshold: SPECTRUM_TOL,
        });
    }
    let guard = SPECTRUM_TOL * vals[0];

    let mut best_k = None;
    let mut best_ratio = f64::NEG_INFINITY;
    for k in 1..=k_max {
        if vals[k] <= guard {
            break;
        }
        let ratio = vals[k - 1] / vals[k];
        if ratio > best_ratio {
            best_ratio = ratio;
            best_k = Some(k);
        }
    }

    Ok(match best_k {
        Some(k) => k,
        // Spectrum collapsed before the first ratio: numerically exact
        // low-rank data, and the rank is the factor count.
        None => vals.iter().take_while(|&&v| v > guard).count().clamp(1, k_max),
    })
}

/// Remove the span of the estimated factors from a length-n vector:
/// v - F (F'v)/n.
pub fn project_out_factors(v: &Array1<f64>, fe: &FactorEstimate) -> Result<Array1<f64>> {
    if v.len() != fe.n() {
        return Err(FarmError::InvalidInput(format!(
            "vector length {} does not match n = {}",
            v.len(),
            fe.n()
        )));
    }
    let coef = fe.f.t().dot(v) / fe.n() as f64;
    Ok(v - &fe.f.dot(&coef))
}
