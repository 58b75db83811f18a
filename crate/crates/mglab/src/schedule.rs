//! Noise schedules and forward/reverse process kernels.
//!
//! Covers the discrete variance-preserving (VP) diffusion chain
//! `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` and the optimal
//! transport flow interpolant `x_t = (1 - t) x0 + t eps`, together with the
//! single-step DDPM reverse kernel used by the ancestral sampler.
//!
//! Flow integration convention: with `x_t = (1-t) x0 + t eps` the ground-truth
//! flow `u = x0 - eps` is the negative time-derivative of the interpolant, so
//! samplers integrate `x <- x + ds * u` with `s = 1 - t` running from 0 to 1
//! (noise toward data).

use crate::error::{Error, Result};
use crate::vec2::Vec2;

/// Discrete VP schedule: per-step variances and their cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_min` to `beta_max` inclusive over `t_steps` steps.
    pub fn linear(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::InvalidRange(format!(
                "schedule needs at least 2 steps, got {t_steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let frac = t as f64 / (t_steps - 1) as f64;
            betas.push(beta_min + frac * (beta_max - beta_min));
        }
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        let sigmas = alpha_bars.iter().map(|&ab| (1.0 - ab).sqrt()).collect();
        NoiseSchedule {
            betas,
            alpha_bars,
            sigmas,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: t,
                len: self.len(),
            })
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `sigma_t = sqrt(1 - alpha_bar_t)`, the marginal noise level.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(self.sigmas[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Draw from the forward marginal: `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_marginal(&self, x0: Vec2, eps: Vec2, t: usize) -> Result<Vec2> {
        self.check_index(t)?;
        let ab = self.alpha_bars[t];
        Ok(ab.sqrt() * x0 + self.sigmas[t] * eps)
    }

    /// One ancestral reverse step with the epsilon-parameterized posterior mean
    /// and fixed variance `beta_t`. The stochastic term is suppressed at `t = 0`.
    pub fn ddpm_step(&self, x_t: Vec2, eps_hat: Vec2, t: usize, noise: Vec2) -> Result<Vec2> {
        self.check_index(t)?;
        let beta = self.betas[t];
        let sigma = self.sigmas[t];
        let mean = (1.0 / (1.0 - beta).sqrt()) * (x_t - (beta / sigma) * eps_hat);
        if t == 0 {
            Ok(mean)
        } else {
            Ok(mean + beta.sqrt() * noise)
        }
    }
}

/// Continuous flow time, clamped by construction to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(FlowTime(t))
        } else {
            Err(Error::InvalidTime(format!("flow time {t} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// OT interpolant `(1 - t) x0 + t eps`.
pub fn ot_interpolate(x0: Vec2, eps: Vec2, t: FlowTime) -> Vec2 {
    let t = t.value();
    (1.0 - t) * x0 + t * eps
}

/// Ground-truth conditional flow `u = x0 - eps`.
pub fn ground_truth_flow(x0: Vec2, eps: Vec2) -> Vec2 {
    x0 - eps
}
