//! Labeled 2D Gaussian mixtures: the ground-truth data distribution.
//!
//! Components are isotropic. All density math runs in log space with
//! log-sum-exp so that heavily diffused mixtures do not underflow.

use crate::error::{Error, Result};
use crate::rngutil::gauss2;
use crate::vec2::Vec2;
use rand::Rng;
use serde::{Deserialize, Serialize};

const LOG_2PI: f64 = 1.8378770664093453;

/// One isotropic Gaussian component with a class label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec2,
    pub std: f64,
    pub class_id: usize,
    pub weight: f64,
}

/// A labeled mixture of isotropic Gaussians. Immutable after construction.
#[derive(Debug, Clone)]
pub struct LabeledMixture {
    components: Vec<Component>,
    num_classes: usize,
}

/// Stable log(sum(exp(terms))).
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

fn log_gauss_iso(x: Vec2, mean: Vec2, var: f64) -> f64 {
    -LOG_2PI - var.ln() - x.dist(mean).powi(2) / (2.0 * var)
}

impl LabeledMixture {
    pub fn new(components: Vec<Component>, num_classes: usize) -> Result<Self> {
        if components.is_empty() || num_classes == 0 {
            return Err(Error::InvalidDimension(
                "mixture needs at least one component and one class".into(),
            ));
        }
        let mut total = 0.0;
        let mut class_seen = vec![false; num_classes];
        for comp in &components {
            if comp.std <= 0.0 || comp.weight <= 0.0 {
                return Err(Error::InvalidRange(format!(
                    "component std and weight must be positive, got std={} weight={}",
                    comp.std, comp.weight
                )));
            }
            if comp.class_id >= num_classes {
                return Err(Error::UnknownClass {
                    class: comp.class_id,
                    num_classes,
                });
            }
            class_seen[comp.class_id] = true;
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidRange(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        if let Some(missing) = class_seen.iter().position(|&s| !s) {
            return Err(Error::InvalidDimension(format!(
                "class {missing} owns no component"
            )));
        }
        Ok(LabeledMixture {
            components,
            num_classes,
        })
    }

    /// Single isotropic Gaussian, class 0.
    pub fn single_gaussian(mean: Vec2, std: f64) -> Result<Self> {
        Self::new(
            vec![Component {
                mean,
                std,
                class_id: 0,
                weight: 1.0,
            }],
            1,
        )
    }

    /// `rows x cols` isotropic modes on a centered grid with checkerboard class
    /// assignment (two classes) and uniform weights.
    pub fn grid_two_class(rows: usize, cols: usize, spacing: f64, std: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimension(format!(
                "grid needs rows, cols >= 1, got {rows}x{cols}"
            )));
        }
        if spacing <= 0.0 || std <= 0.0 {
            return Err(Error::InvalidRange(format!(
                "spacing and std must be positive, got spacing={spacing} std={std}"
            )));
        }
        let n = rows * cols;
        let weight = 1.0 / n as f64;
        let x_off = (cols as f64 - 1.0) / 2.0;
        let y_off = (rows as f64 - 1.0) / 2.0;
        let mut components = Vec::with_capacity(n);
        for r in 0..rows {
            for c in 0..cols {
                components.push(Component {
                    mean: Vec2::new((c as f64 - x_off) * spacing, (r as f64 - y_off) * spacing),
                    std,
                    class_id: (r + c) % 2,
                    weight,
                });
            }
        }
        // A 1x1 grid has only one class; keep num_classes consistent.
        let num_classes = if n == 1 { 1 } else { 2 };
        Self::new(components, num_classes)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c < self.num_classes {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                class: c,
                num_classes: self.num_classes,
            })
        }
    }

    /// Total weight of class-`c` components (the class prior).
    pub fn class_prior(&self, c: usize) -> Result<f64> {
        self.check_class(c)?;
        Ok(self
            .components
            .iter()
            .filter(|comp| comp.class_id == c)
            .map(|comp| comp.weight)
            .sum())
    }

    /// Draw one `(x0, class)` pair: component proportional to weight, then
    /// `mean + std * z`.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> (Vec2, usize) {
        let comp = self.draw_component(rng, None);
        let z = gauss2(rng);
        (comp.mean + comp.std * z, comp.class_id)
    }

    /// Draw from the class-`c` conditional.
    pub fn sample_class<R: Rng>(&self, c: usize, rng: &mut R) -> Result<Vec2> {
        self.check_class(c)?;
        let comp = self.draw_component(rng, Some(c));
        let z = gauss2(rng);
        Ok(comp.mean + comp.std * z)
    }

    fn draw_component<R: Rng>(&self, rng: &mut R, class: Option<usize>) -> &Component {
        let total: f64 = self
            .components
            .iter()
            .filter(|comp| class.map_or(true, |c| comp.class_id == c))
            .map(|comp| comp.weight)
            .sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        for comp in &self.components {
            if class.map_or(false, |c| comp.class_id != c) {
                continue;
            }
            chosen = Some(comp);
            if u < comp.weight {
                break;
            }
            u -= comp.weight;
        }
        chosen.expect("mixture invariant: every class owns a component")
    }

    /// Log density of the mixture, restricted and renormalized to class-`c`
    /// components when `c` is given.
    pub fn log_density(&self, x: Vec2, c: Option<usize>) -> Result<f64> {
        if let Some(c) = c {
            self.check_class(c)?;
        }
        let mut terms = Vec::with_capacity(self.components.len());
        let mut weight_total = 0.0;
        for comp in &self.components {
            if c.map_or(false, |c| comp.class_id != c) {
                continue;
            }
            weight_total += comp.weight;
            terms.push(comp.weight.ln() + log_gauss_iso(x, comp.mean, comp.std * comp.std));
        }
        Ok(log_sum_exp(&terms) - weight_total.ln())
    }

    /// Exact class posterior `p(c | x)` via Bayes over the component densities.
    pub fn class_posterior(&self, x: Vec2) -> Vec<f64> {
        // log p(c, x) summed per class, then normalized with log-sum-exp.
        let mut class_terms: Vec<Vec<f64>> = vec![Vec::new(); self.num_classes];
        for comp in &self.components {
            class_terms[comp.class_id]
                .push(comp.weight.ln() + log_gauss_iso(x, comp.mean, comp.std * comp.std));
        }
        let log_joint: Vec<f64> = class_terms.iter().map(|t| log_sum_exp(t)).collect();
        let log_norm = log_sum_exp(&log_joint);
        log_joint.iter().map(|&lj| (lj - log_norm).exp()).collect()
    }
}
