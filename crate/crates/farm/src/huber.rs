//! Robust estimation of the augmented regression under heavy-tailed noise.
//!
//! The squared loss is replaced by the Huber loss with robustification
//! parameter `omega`: quadratic within `[-omega, omega]`, linear outside.
//! Unlike the quadratic case, the factor and idiosyncratic blocks no longer
//! decouple, so (beta, gamma) are fit jointly: beta carries the l1 penalty,
//! gamma is free. The solver is an accelerated proximal gradient method
//! with backtracking, made monotone by falling back to the previous iterate
//! whenever the accelerated step would increase the objective.

use ndarray::{Array1, Array2};

use crate::error::{FarmError, Result};
use crate::factor::FactorEstimate;
use crate::lasso::ZERO_TOL;

/// Tuning for the robust fit. `vartheta` is the assumed finite moment
/// order of the noise; it only feeds [`default_tuning`] and is carried as
/// metadata.
#[derive(Debug, Clone, Copy)]
pub struct HuberConfig {
    pub omega: f64,
    pub lambda: f64,
    pub vartheta: f64,
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(FarmError::InvalidInput(format!(
                "robustification parameter must be positive and finite, got {}",
                self.omega
            )));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(FarmError::InvalidInput(format!(
                "penalty must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.vartheta > 0.0) {
            return Err(FarmError::InvalidInput(format!(
                "moment order must be positive, got {}",
                self.vartheta
            )));
        }
        Ok(())
    }
}

/// Optimizer controls, split from the statistical tuning.
#[derive(Debug, Clone, Copy)]
pub struct HuberOptions {
    pub max_iters: usize,
    /// Stop candidate when |obj_k - obj_{k+1}| < rel_obj_tol * max(1, |obj_k|).
    pub rel_obj_tol: f64,
    /// Stop candidate when the proximal-gradient mapping norm falls below
    /// this.
    pub prox_grad_tol: f64,
    /// A stop candidate is only accepted once the first-order conditions
    /// hold within this bound; the objective can flatten out (triggering the
    /// relative-change rule) while the subgradient conditions are still
    /// loose, and the fit contract promises them.
    pub kkt_tol: f64,
}

impl Default for HuberOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            rel_obj_tol: 1e-9,
            prox_grad_tol: 1e-7,
            kkt_tol: 5e-6,
        }
    }
}

/// Fitted robust coefficients.
#[derive(Debug, Clone)]
pub struct HuberFit {
    pub beta: Array1<f64>,
    pub gamma: Array1<f64>,
    pub config: HuberConfig,
    /// n^-1 sum of Huber losses plus lambda |beta|_1 at the solution.
    pub objective: f64,
    /// Norm of the proximal-gradient mapping at the returned point.
    pub prox_gap: f64,
    pub iterations: usize,
}

/// Huber loss value and derivative at a scalar residual: z^2/2 inside
/// [-omega, omega], omega |z| - omega^2/2 outside; derivative clamps z to
/// that interval.
pub fn huber_value_grad(z: f64, omega: f64) -> (f64, f64) {
    debug_assert!(omega > 0.0);
    if z.abs() <= omega {
        (0.5 * z * z, z)
    } else {
        (omega * z.abs() - 0.5 * omega * omega, z.clamp(-omega, omega))
    }
}

/// Rate-optimal default tuning for noise with `vartheta` finite moments
/// (saturating at 1): omega = (n / log d)^{1/(1+v)} and
/// lambda = (log d / n)^{v/(1+v)} with v = min(vartheta, 1). Constants are
/// 1 and meant to be refined by cross-validation at small sample sizes.
pub fn default_tuning(n: usize, d: usize, vartheta: f64) -> HuberConfig {
    assert!(n > 1 && d > 1, "need n > 1 and d > 1 for the tuning rates");
    assert!(vartheta > 0.0, "moment order must be positive");
    let v = vartheta.min(1.0);
    let ratio = (d as f64).ln() / n as f64;
    HuberConfig {
        omega: ratio.powf(-1.0 / (1.0 + v)),
        lambda: ratio.powf(v / (1.0 + v)),
        vartheta,
    }
}

/// The model matrix is [U | F] applied blockwise; this holds the pieces and
/// the response so the optimizer never materializes the concatenation.
struct Blocks<'a> {
    u: &'a Array2<f64>,
    f: &'a Array2<f64>,
    y: &'a Array1<f64>,
    n: usize,
    d: usize,
    k: usize,
}

impl Blocks<'_> {
    fn residual(&self, beta: &Array1<f64>, gamma: &Array1<f64>) -> Array1<f64> {
        self.y - &self.u.dot(beta) - &self.f.dot(gamma)
    }

    /// Smooth loss n^-1 sum rho_omega(r_t).
    fn loss(&self, resid: &Array1<f64>, omega: f64) -> f64 {
        resid
            .iter()
            .map(|&z| huber_value_grad(z, omega).0)
            .sum::<f64>()
            / self.n as f64
    }

    /// Gradient of the smooth loss: (-U' psi / n, -F' psi / n).
    fn grad(&self, resid: &Array1<f64>, omega: f64) -> (Array1<f64>, Array1<f64>) {
        let psi = resid.mapv(|z| z.clamp(-omega, omega));
        let scale = -1.0 / self.n as f64;
        (
            self.u.t().dot(&psi).mapv(|v| v * scale),
            self.f.t().dot(&psi).mapv(|v| v * scale),
        )
    }

    /// Largest eigenvalue of n^-1 [U F]'[U F] by power iteration, a global
    /// Lipschitz bound for the smooth loss (the Huber derivative is
    /// 1-Lipschitz). Deterministic start, mild safety factor.
    fn lipschitz_bound(&self) -> f64 {
        let m = self.d + self.k;
        let mut v = Array1::from_shape_fn(m, |i| 1.0 + 1e-3 * i as f64);
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|z| z / norm);
        let mut rayleigh = 0.0;
        for _ in 0..40 {
            let vb = v.slice(ndarray::s![..self.d]).to_owned();
            let vg = v.slice(ndarray::s![self.d..]).to_owned();
            let mv = self.u.dot(&vb) + self.f.dot(&vg);
            let mut w = Array1::zeros(m);
            w.slice_mut(ndarray::s![..self.d]).assign(&self.u.t().dot(&mv));
            w.slice_mut(ndarray::s![self.d..]).assign(&self.f.t().dot(&mv));
            let wn = w.dot(&w).sqrt();
            if wn < 1e-300 {
                return 1.0;
            }
            rayleigh = v.dot(&w);
            v = w.mapv(|z| z / wn);
        }
        (rayleigh / self.n as f64).max(1e-12) * 1.05
    }
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn l1(v: &Array1<f64>) -> f64 {
    v.iter().map(|z| z.abs()).sum()
}

/// One proximal step from (beta, gamma) with smooth gradient (gb, gg) and
/// step size s: soft-threshold the penalized block, plain descent on the
/// free block.
fn prox_step(
    beta: &Array1<f64>,
    gamma: &Array1<f64>,
    gb: &Array1<f64>,
    gg: &Array1<f64>,
    s: f64,
    lambda: f64,
) -> (Array1<f64>, Array1<f64>) {
    let nb = Array1::from_shape_fn(beta.len(), |j| soft(beta[j] - s * gb[j], s * lambda));
    let ng = Array1::from_shape_fn(gamma.len(), |j| gamma[j] - s * gg[j]);
    (nb, ng)
}

/// Fit with default optimizer controls.
pub fn fit_farm_huber(fe: &FactorEstimate, config: &HuberConfig) -> Result<HuberFit> {
    fit_huber_with_options(fe, config, &HuberOptions::default())
}

/// Fit the penalized Huber problem
/// n^-1 sum rho_omega(y_t - u_t'beta - f_t'gamma) + lambda |beta|_1
/// by monotone accelerated proximal gradient with backtracking.
pub fn fit_huber_with_options(
    fe: &FactorEstimate,
    config: &HuberConfig,
    opts: &HuberOptions,
) -> Result<HuberFit> {
    let (fit, _) = fit_traced(fe, config, opts)?;
    Ok(fit)
}

/// Internal entry point that also returns the per-iteration objective
/// values, so tests can assert monotone descent.
pub(crate) fn fit_traced(
    fe: &FactorEstimate,
    config: &HuberConfig,
    opts: &HuberOptions,
) -> Result<(HuberFit, Vec<f64>)> {
    let blocks = Blocks {
        u: fe.u(),
        f: fe.f(),
        y: fe.y(),
        n: fe.n(),
        d: fe.d(),
        k: fe.k(),
    };
    fit_blocks_traced(&blocks, config, opts)
}

/// Fit on explicit design blocks (row subsets of a factor estimate, say)
/// rather than a whole [`FactorEstimate`].
pub(crate) fn fit_huber_on(
    u: &Array2<f64>,
    f: &Array2<f64>,
    y: &Array1<f64>,
    config: &HuberConfig,
    opts: &HuberOptions,
) -> Result<HuberFit> {
    let blocks = Blocks {
        u,
        f,
        y,
        n: u.nrows(),
        d: u.ncols(),
        k: f.ncols(),
    };
    let (fit, _) = fit_blocks_traced(&blocks, config, opts)?;
    Ok(fit)
}

fn fit_blocks_traced(
    blocks: &Blocks,
    config: &HuberConfig,
    opts: &HuberOptions,
) -> Result<(HuberFit, Vec<f64>)> {
    config.validate()?;
    let omega = config.omega;
    let lambda = config.lambda;

    let objective = |b: &Array1<f64>, g: &Array1<f64>| {
        let r = blocks.residual(b, g);
        blocks.loss(&r, omega) + lambda * l1(b)
    };

    // Start beta at zero and gamma at the least-squares factor coefficients,
    // which is exact in the quadratic limit.
    let mut x_b: Array1<f64> = Array1::zeros(blocks.d);
    let mut x_g = blocks.f.t().dot(blocks.y) / blocks.n as f64;
    let mut obj_x = objective(&x_b, &x_g);
    let mut trace = vec![obj_x];

    // Extrapolated point.
    let mut y_b = x_b.clone();
    let mut y_g = x_g.clone();
    let mut t = 1.0f64;
    let mut step = 1.0 / blocks.lipschitz_bound();
    let mut prox_gap = f64::INFINITY;

    let mut iterations = 0usize;
    while iterations < opts.max_iters {
        iterations += 1;

        let r_y = blocks.residual(&y_b, &y_g);
        let loss_y = blocks.loss(&r_y, omega);
        let (gb, gg) = blocks.grad(&r_y, omega);

        // Backtracking: shrink until the quadratic upper model at y holds
        // at the prox point.
        let (mut z_b, mut z_g) = prox_step(&y_b, &y_g, &gb, &gg, step, lambda);
        loop {
            let db = &z_b - &y_b;
            let dg = &z_g - &y_g;
            let sq = db.dot(&db) + dg.dot(&dg);
            let r_z = blocks.residual(&z_b, &z_g);
            let loss_z = blocks.loss(&r_z, omega);
            let bound = loss_y + gb.dot(&db) + gg.dot(&dg) + sq / (2.0 * step);
            if loss_z <= bound + 1e-15 * bound.abs().max(1.0) {
                prox_gap = (sq / (step * step)).sqrt();
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
            (z_b, z_g) = prox_step(&y_b, &y_g, &gb, &gg, step, lambda);
        }

        let obj_z = objective(&z_b, &z_g);

        // Monotone update with restart: if the accelerated point fails to
        // improve, drop the momentum and retry as a plain proximal step from
        // the current iterate (which the backtracking condition guarantees
        // to descend). A restart iteration is never a stop candidate.
        if obj_z > obj_x {
            t = 1.0;
            y_b = x_b.clone();
            y_g = x_g.clone();
            trace.push(obj_x);
            continue;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y_b = &z_b + &(&z_b - &x_b).mapv(|v| v * ((t - 1.0) / t_next));
        y_g = &z_g + &(&z_g - &x_g).mapv(|v| v * ((t - 1.0) / t_next));
        t = t_next;

        let obj_prev = obj_x;
        x_b = z_b;
        x_g = z_g;
        obj_x = obj_z;
        trace.push(obj_x);

        let rel_done = (obj_prev - obj_x).abs() < opts.rel_obj_tol * obj_prev.abs().max(1.0);
        if (rel_done || prox_gap < opts.prox_grad_tol)
            && kkt_gap_blocks(blocks, config, &x_b, &x_g) <= opts.kkt_tol
        {
            let fit = HuberFit {
                beta: x_b,
                gamma: x_g,
                config: *config,
                objective: obj_x,
                prox_gap,
                iterations,
            };
            return Ok((fit, trace));
        }
    }

    Err(FarmError::NonConvergence {
        gap: prox_gap,
        iterations,
    })
}

/// Worst violation of the first-order conditions at (beta, gamma): the
/// penalized block must satisfy the l1 subgradient conditions, the free
/// block must have zero gradient.
pub fn huber_kkt_gap(
    fe: &FactorEstimate,
    config: &HuberConfig,
    beta: &Array1<f64>,
    gamma: &Array1<f64>,
) -> f64 {
    let blocks = Blocks {
        u: fe.u(),
        f: fe.f(),
        y: fe.y(),
        n: fe.n(),
        d: fe.d(),
        k: fe.k(),
    };
    kkt_gap_blocks(&blocks, config, beta, gamma)
}

fn kkt_gap_blocks(
    blocks: &Blocks,
    config: &HuberConfig,
    beta: &Array1<f64>,
    gamma: &Array1<f64>,
) -> f64 {
    let n = blocks.n as f64;
    let resid = blocks.residual(beta, gamma);
    let psi = resid.mapv(|z| z.clamp(-config.omega, config.omega));
    let score_b = blocks.u.t().dot(&psi) / n;
    let score_g = blocks.f.t().dot(&psi) / n;
    let mut gap = score_g.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    for j in 0..beta.len() {
        let g = if beta[j].abs() > ZERO_TOL {
            (score_b[j] - config.lambda * beta[j].signum()).abs()
        } else {
            (score_b[j].abs() - config.lambda).max(0.0)
        };
        gap = gap.max(g);
    }
    gap
}
