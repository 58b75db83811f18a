//! Closed-form ground truth for diffused Gaussian mixtures.
//!
//! Diffusing an isotropic Gaussian mixture under either process keeps it a
//! Gaussian mixture, so conditional/unconditional scores, the class-posterior
//! score, guided scores, the Bayes-optimal noise and flow predictors, and the
//! fixed point of the model-guidance target map are all available exactly.
//! Every learned quantity in the crate is tested against this module.

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, Component, LabeledMixture};
use crate::schedule::{FlowTime, NoiseSchedule};
use crate::vec2::Vec2;

/// Which corruption process produced a diffused mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessTime {
    /// VP diffusion at noise level `sigma_t = sqrt(1 - alpha_bar)`.
    Vp { alpha_bar: f64 },
    /// OT flow interpolant at time `t`.
    Ot { t: f64 },
}

/// A labeled mixture pushed through a corruption process, with enough source
/// information retained to compute Bayes-optimal predictors.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    /// The diffused mixture itself (component std = sqrt(diffused variance)).
    diffused: LabeledMixture,
    /// Source component means/stds in the same order as `diffused`.
    source: Vec<(Vec2, f64)>,
    kind: ProcessTime,
}

impl DiffusedMixture {
    /// Diffuse under the VP process at step `t` of `schedule`.
    pub fn vp(source: &LabeledMixture, schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        Self::vp_from_alpha_bar(source, schedule.alpha_bar(t)?)
    }

    /// Diffuse under the VP process at an explicit `alpha_bar` level.
    /// Component means scale by `sqrt(alpha_bar)`; variances become
    /// `alpha_bar * std^2 + (1 - alpha_bar)`.
    pub fn vp_from_alpha_bar(source: &LabeledMixture, alpha_bar: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_bar) {
            return Err(Error::InvalidTime(format!(
                "alpha_bar {alpha_bar} outside [0, 1]"
            )));
        }
        let sqrt_ab = alpha_bar.sqrt();
        let comps = source
            .components()
            .iter()
            .map(|c| Component {
                mean: sqrt_ab * c.mean,
                std: (alpha_bar * c.std * c.std + (1.0 - alpha_bar)).sqrt(),
                class_id: c.class_id,
                weight: c.weight,
            })
            .collect();
        Ok(DiffusedMixture {
            diffused: LabeledMixture::new(comps, source.num_classes())?,
            source: source
                .components()
                .iter()
                .map(|c| (c.mean, c.std))
                .collect(),
            kind: ProcessTime::Vp { alpha_bar },
        })
    }

    /// Diffuse under the OT interpolant at flow time `t`. Component means scale
    /// by `(1 - t)`; variances become `(1-t)^2 std^2 + t^2`.
    pub fn ot(source: &LabeledMixture, t: FlowTime) -> Result<Self> {
        let t = t.value();
        let comps = source
            .components()
            .iter()
            .map(|c| Component {
                mean: (1.0 - t) * c.mean,
                std: ((1.0 - t) * (1.0 - t) * c.std * c.std + t * t).sqrt(),
                class_id: c.class_id,
                weight: c.weight,
            })
            .collect();
        Ok(DiffusedMixture {
            diffused: LabeledMixture::new(comps, source.num_classes())?,
            source: source
                .components()
                .iter()
                .map(|c| (c.mean, c.std))
                .collect(),
            kind: ProcessTime::Ot { t },
        })
    }

    pub fn kind(&self) -> ProcessTime {
        self.kind
    }

    /// The diffused mixture as a plain labeled mixture (for densities etc.).
    pub fn as_mixture(&self) -> &LabeledMixture {
        &self.diffused
    }

    /// `sigma_t` of the VP process; error for OT.
    fn vp_sigma(&self) -> Result<f64> {
        match self.kind {
            ProcessTime::Vp { alpha_bar } => Ok((1.0 - alpha_bar).sqrt()),
            ProcessTime::Ot { t } => Err(Error::ProcessMismatch(format!(
                "VP-only operation called on OT-flow mixture at t = {t}"
            ))),
        }
    }

    /// Component responsibilities and scores, restricted to class `c` when given.
    fn score_impl(&self, x: Vec2, c: Option<usize>) -> Result<Vec2> {
        if let Some(c) = c {
            if c >= self.diffused.num_classes() {
                return Err(Error::UnknownClass {
                    class: c,
                    num_classes: self.diffused.num_classes(),
                });
            }
        }
        let comps: Vec<&Component> = self
            .diffused
            .components()
            .iter()
            .filter(|comp| c.map_or(true, |c| comp.class_id == c))
            .collect();
        let log_terms: Vec<f64> = comps
            .iter()
            .map(|comp| {
                let var = comp.std * comp.std;
                comp.weight.ln() - var.ln() - x.dist(comp.mean).powi(2) / (2.0 * var)
            })
            .collect();
        let norm = log_sum_exp(&log_terms);
        let mut score = Vec2::ZERO;
        for (comp, &lt) in comps.iter().zip(&log_terms) {
            let resp = (lt - norm).exp();
            let var = comp.std * comp.std;
            score += resp * ((comp.mean - x) * (1.0 / var));
        }
        Ok(score)
    }

    /// Conditional score `grad_x log p_t(x | c)`.
    pub fn cond_score(&self, x: Vec2, c: usize) -> Result<Vec2> {
        self.score_impl(x, Some(c))
    }

    /// Unconditional score `grad_x log p_t(x)`.
    pub fn uncond_score(&self, x: Vec2) -> Vec2 {
        self.score_impl(x, None)
            .expect("unconditional score cannot fail")
    }

    /// Score of the class posterior, `grad_x log p(c | x_t)`, equal to the
    /// conditional minus the unconditional score (the class prior is constant
    /// in x and drops out).
    pub fn posterior_score(&self, x: Vec2, c: usize) -> Result<Vec2> {
        Ok(self.cond_score(x, c)? - self.uncond_score(x))
    }

    /// Score of the guidance-tilted distribution `p(x|c) p(c|x)^w`.
    pub fn guided_score(&self, x: Vec2, c: usize, w: f64) -> Result<Vec2> {
        Ok(self.cond_score(x, c)? + w * self.posterior_score(x, c)?)
    }

    /// Bayes-optimal noise prediction `-sigma_t * score`, the minimizer of the
    /// simple noise-prediction loss at `(x, t, c)`. VP only.
    pub fn bayes_eps(&self, x: Vec2, c: Option<usize>) -> Result<Vec2> {
        let sigma = self.vp_sigma()?;
        let score = self.score_impl(x, c)?;
        Ok(-sigma * score)
    }

    /// Bayes-optimal flow prediction `E[x0 - eps | x_t = x, c]`, computed in
    /// closed form from component responsibilities and Gaussian conditioning.
    /// OT only, `t` strictly inside `(0, 1)`.
    pub fn bayes_flow(&self, x: Vec2, c: Option<usize>) -> Result<Vec2> {
        let t = match self.kind {
            ProcessTime::Ot { t } => t,
            ProcessTime::Vp { .. } => {
                return Err(Error::ProcessMismatch(
                    "bayes_flow called on a VP-diffused mixture".into(),
                ))
            }
        };
        if t <= 0.0 || t >= 1.0 {
            return Err(Error::EndpointTime(t));
        }
        if let Some(c) = c {
            if c >= self.diffused.num_classes() {
                return Err(Error::UnknownClass {
                    class: c,
                    num_classes: self.diffused.num_classes(),
                });
            }
        }
        let pairs: Vec<(&Component, &(Vec2, f64))> = self
            .diffused
            .components()
            .iter()
            .zip(&self.source)
            .filter(|(comp, _)| c.map_or(true, |c| comp.class_id == c))
            .collect();
        let log_terms: Vec<f64> = pairs
            .iter()
            .map(|(comp, _)| {
                let var = comp.std * comp.std;
                comp.weight.ln() - var.ln() - x.dist(comp.mean).powi(2) / (2.0 * var)
            })
            .collect();
        let norm = log_sum_exp(&log_terms);
        let mut flow = Vec2::ZERO;
        for ((comp, (src_mean, src_std)), &lt) in pairs.iter().zip(&log_terms) {
            let resp = (lt - norm).exp();
            let var_t = comp.std * comp.std;
            // E[x0 - eps | x_t, component] from joint-Gaussian conditioning:
            // cov(x0, x_t) = (1-t) s^2, cov(eps, x_t) = t.
            let gain = ((1.0 - t) * src_std * src_std - t) / var_t;
            flow += resp * (*src_mean + gain * (x - comp.mean));
        }
        Ok(flow)
    }

    /// Bayes-optimal predictor for whichever process this mixture came from.
    pub fn bayes_pred(&self, x: Vec2, c: Option<usize>) -> Result<Vec2> {
        match self.kind {
            ProcessTime::Vp { .. } => self.bayes_eps(x, c),
            ProcessTime::Ot { .. } => self.bayes_flow(x, c),
        }
    }

    /// Closed-form fixed point of the model-guidance target map
    /// `f_c <- pred*(x, c) + w (f_c - f_null)` with `f_null = pred*(x, null)`:
    /// `pred*_c + (w / (1 - w)) (pred*_c - pred*_null)`. Requires `w < 1`.
    pub fn mg_fixed_point(&self, x: Vec2, c: usize, w: f64) -> Result<Vec2> {
        if w >= 1.0 {
            return Err(Error::Divergence { w });
        }
        let pred_c = self.bayes_pred(x, Some(c))?;
        let pred_null = self.bayes_pred(x, None)?;
        Ok(pred_c + (w / (1.0 - w)) * (pred_c - pred_null))
    }

    /// Iterate the target map from `f = 0`, with divergence detection. Valid
    /// for any `w >= 0`; diverges (and errors) when `w >= 1` and the
    /// conditional and unconditional predictors differ.
    pub fn mg_fixed_point_iterative(
        &self,
        x: Vec2,
        c: usize,
        w: f64,
        iters: usize,
    ) -> Result<Vec2> {
        let pred_c = self.bayes_pred(x, Some(c))?;
        let pred_null = self.bayes_pred(x, None)?;
        let bound = 1e9 * (1.0 + pred_c.norm() + pred_null.norm());
        let mut f = Vec2::ZERO;
        for _ in 0..iters {
            f = pred_c + w * (f - pred_null);
            if !f.is_finite() || f.norm() > bound {
                return Err(Error::Divergence { w });
            }
        }
        Ok(f)
    }
}

/// Central finite differences of a scalar field, per axis.
pub fn finite_diff_grad<F: Fn(Vec2) -> f64>(f: F, x: Vec2, h: f64) -> Vec2 {
    let dx = (f(Vec2::new(x.x + h, x.y)) - f(Vec2::new(x.x - h, x.y))) / (2.0 * h);
    let dy = (f(Vec2::new(x.x, x.y + h)) - f(Vec2::new(x.x, x.y - h))) / (2.0 * h);
    Vec2::new(dx, dy)
}
