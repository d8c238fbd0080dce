//! Diffusion noise schedule and closed-form forward-process quantities.
//!
//! The beta schedule is linear from 1e-4 at t = 1 to 2e-2 at t = T. Cumulative
//! products are anchored at `alpha_bar(0) = 1`, which makes the posterior
//! variance at t = 1 exactly zero (no noise injected on the final reverse
//! step). Tables are built and stored in double precision.

use crate::error::{Error, Result};
use crate::kspace::RealImage;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear beta at step `t` (1-based) for a schedule of `T` total steps.
pub fn linear_beta(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule length T must be >= 1"));
    }
    if t < 1 || t > total {
        return Err(Error::invalid(format!(
            "timestep {} out of range [1, {}]",
            t, total
        )));
    }
    if total == 1 {
        // Degenerate single-step schedule; the formula divides by T - 1.
        return Ok(BETA_START);
    }
    // endpoints are pinned so rounding in the interpolation cannot move them
    if t == 1 {
        return Ok(BETA_START);
    }
    if t == total {
        return Ok(BETA_END);
    }
    let (t, total) = (t as f64, total as f64);
    Ok((BETA_START * (total - t) + BETA_END * (t - 1.0)) / (total - 1.0))
}

/// Precomputed beta/alpha/alpha-bar/posterior-variance tables, indexed 1..=T.
/// Index 0 holds the anchors (`alpha_bar(0) = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    total: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Build the full table set for `T` steps.
pub fn build_schedule(total: usize) -> Result<DiffusionSchedule> {
    if total == 0 {
        return Err(Error::invalid("schedule length T must be >= 1"));
    }
    let mut betas = vec![0.0; total + 1];
    let mut alphas = vec![1.0; total + 1];
    let mut alpha_bars = vec![1.0; total + 1];
    let mut posterior_vars = vec![0.0; total + 1];
    for t in 1..=total {
        betas[t] = linear_beta(t, total)?;
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        posterior_vars[t] = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
    }
    Ok(DiffusionSchedule {
        total,
        betas,
        alphas,
        alpha_bars,
        posterior_vars,
    })
}

impl DiffusionSchedule {
    pub fn total_steps(&self) -> usize {
        self.total
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total {
            return Err(Error::invalid(format!(
                "timestep {} out of range [1, {}]",
                t, self.total
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t])
    }

    /// `alpha_bar(t)` for t in [0, T]; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(Error::invalid(format!(
                "timestep {} out of range [0, {}]",
                t, self.total
            )));
        }
        Ok(self.alpha_bars[t])
    }

    /// Posterior variance `beta_tilde(t)`; zero at t = 1.
    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.posterior_vars[t])
    }
}

/// Forward-process sample `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(
    x0: &RealImage,
    t: usize,
    eps: &RealImage,
    sched: &DiffusionSchedule,
) -> Result<RealImage> {
    sched.check_t(t)?;
    let abar = sched.alpha_bars[t];
    x0.affine(abar.sqrt(), eps, (1.0 - abar).sqrt())
}

/// Algebraic inversion of [`q_sample`]:
/// `x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(
    xt: &RealImage,
    eps: &RealImage,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<RealImage> {
    sched.check_t(t)?;
    let abar = sched.alpha_bars[t];
    let inv = 1.0 / abar.sqrt();
    xt.affine(inv, eps, -inv * (1.0 - abar).sqrt())
}
