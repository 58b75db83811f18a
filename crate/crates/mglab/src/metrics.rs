//! Desk-scale evaluation metrics: outlier fraction, mode recall, condition
//! accuracy, energy distance, KDE density grids, and trajectory turning.
//!
//! These stand in for the dataset-scale quality/diversity metrics (FID and
//! friends) that make no sense on a 2D toy problem. The mapping is recorded in
//! `MetricReport` metadata so toy numbers are never mistaken for image-metric
//! values.

use crate::error::{Error, Result};
use crate::mixture::LabeledMixture;
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// One evaluation summary. `metric_mapping` documents which dataset-scale
/// metric each field replaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub outlier_fraction: f64,
    pub mode_recall: f64,
    pub condition_accuracy: f64,
    pub energy_distance: f64,
    pub per_mode_hits: Vec<usize>,
    pub nfe: u64,
    pub run_id: String,
    pub seed: u64,
    pub objective: String,
    pub w: f64,
    /// Desk-scale stand-in mapping, fixed for this artifact.
    pub metric_mapping: String,
}

pub const METRIC_MAPPING: &str = "energy_distance+kde~FID, condition_accuracy~IS, \
outlier_fraction~Precision, mode_recall~Recall (toy-scale stand-ins, not comparable)";

fn class_modes(mixture: &LabeledMixture, c: Option<usize>) -> Result<Vec<(Vec2, f64)>> {
    if let Some(c) = c {
        if c >= mixture.num_classes() {
            return Err(Error::UnknownClass {
                class: c,
                num_classes: mixture.num_classes(),
            });
        }
    }
    Ok(mixture
        .components()
        .iter()
        .filter(|comp| c.map_or(true, |c| comp.class_id == c))
        .map(|comp| (comp.mean, comp.std))
        .collect())
}

/// Fraction of samples farther than `k * std` from the nearest mode of class
/// `c` (or of any class when `c` is `None`).
pub fn outlier_fraction(
    samples: &[Vec2],
    mixture: &LabeledMixture,
    c: Option<usize>,
    k: f64,
) -> Result<f64> {
    if k <= 0.0 {
        return Err(Error::InvalidRange(format!(
            "sigma multiplier k must be positive, got {k}"
        )));
    }
    let modes = class_modes(mixture, c)?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let outliers = samples
        .iter()
        .filter(|&&s| modes.iter().all(|&(mean, std)| s.dist(mean) > k * std))
        .count();
    Ok(outliers as f64 / samples.len() as f64)
}

/// Fraction of class-`c` modes with at least one sample within `r * std`.
pub fn mode_recall(
    samples: &[Vec2],
    mixture: &LabeledMixture,
    c: Option<usize>,
    r: f64,
) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::InvalidRange(format!(
            "radius multiplier r must be positive, got {r}"
        )));
    }
    let hits = per_mode_hits(samples, mixture, c, r)?;
    let recalled = hits.iter().filter(|&&h| h > 0).count();
    Ok(recalled as f64 / hits.len() as f64)
}

/// Sample count within `r * std` of each class-`c` mode.
pub fn per_mode_hits(
    samples: &[Vec2],
    mixture: &LabeledMixture,
    c: Option<usize>,
    r: f64,
) -> Result<Vec<usize>> {
    let modes = class_modes(mixture, c)?;
    Ok(modes
        .iter()
        .map(|&(mean, std)| samples.iter().filter(|&&s| s.dist(mean) <= r * std).count())
        .collect())
}

/// Fraction of samples whose argmax class posterior equals the requested
/// class. Posterior ties break toward the lowest class id.
pub fn condition_accuracy(
    samples: &[Vec2],
    requested: usize,
    mixture: &LabeledMixture,
) -> Result<f64> {
    if requested >= mixture.num_classes() {
        return Err(Error::UnknownClass {
            class: requested,
            num_classes: mixture.num_classes(),
        });
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct = samples
        .iter()
        .filter(|&&s| {
            let post = mixture.class_posterior(s);
            let mut best = 0usize;
            for (i, &p) in post.iter().enumerate() {
                if p > post[best] {
                    best = i;
                }
            }
            best == requested
        })
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

fn mean_cross_dist(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut sum = 0.0;
    for &p in a {
        for &q in b {
            sum += p.dist(q);
        }
    }
    sum / (a.len() as f64 * b.len() as f64)
}

fn mean_within_dist_unbiased(a: &[Vec2]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += a[i].dist(a[j]);
        }
    }
    2.0 * sum / (n as f64 * (n - 1) as f64)
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` with unbiased within-set
/// estimators.
pub fn energy_distance(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(2.0 * mean_cross_dist(a, b) - mean_within_dist_unbiased(a) - mean_within_dist_unbiased(b))
}

/// Biased V-statistic variant (within-set means include the diagonal);
/// identically zero when `a == b` as multisets.
pub fn energy_distance_vstat(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(2.0 * mean_cross_dist(a, b) - mean_cross_dist(a, a) - mean_cross_dist(b, b))
}

/// Grid specification for KDE evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn node(&self, i: usize, j: usize) -> Vec2 {
        let fx = if self.nx > 1 {
            i as f64 / (self.nx - 1) as f64
        } else {
            0.5
        };
        let fy = if self.ny > 1 {
            j as f64 / (self.ny - 1) as f64
        } else {
            0.5
        };
        Vec2::new(
            self.x_min + fx * (self.x_max - self.x_min),
            self.y_min + fy * (self.y_max - self.y_min),
        )
    }

    pub fn cell_area(&self) -> f64 {
        let dx = (self.x_max - self.x_min) / (self.nx.max(2) - 1) as f64;
        let dy = (self.y_max - self.y_min) / (self.ny.max(2) - 1) as f64;
        dx * dy
    }
}

/// Scott-style default bandwidth: `n^(-1/6) * pooled sample std`.
pub fn scott_bandwidth(samples: &[Vec2]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vec2::ZERO, |a, &s| a + s) * (1.0 / n);
    let var = samples.iter().map(|s| (*s - mean).norm_sq()).sum::<f64>() / (2.0 * n);
    var.sqrt() * n.powf(-1.0 / 6.0)
}

/// Gaussian KDE evaluated on a grid, normalized to integrate to 1 over the
/// grid. Row-major `ny` rows of `nx` values.
pub fn kde_grid(samples: &[Vec2], grid: &GridSpec, bandwidth: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    if bandwidth <= 0.0 {
        return Err(Error::InvalidRange(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut out = vec![0.0; grid.nx * grid.ny];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let p = grid.node(i, j);
            let mut density = 0.0;
            for &s in samples {
                density += (-p.dist(s).powi(2) * inv_two_h2).exp();
            }
            out[j * grid.nx + i] = density;
        }
    }
    let integral: f64 = out.iter().sum::<f64>() * grid.cell_area();
    if integral > 0.0 {
        for v in &mut out {
            *v /= integral;
        }
    }
    Ok(out)
}

/// Total absolute turning angle of a trajectory, summed over interior points.
/// Zero-length segments are skipped.
pub fn trajectory_turning(trajectory: &[Vec2]) -> Result<f64> {
    if trajectory.len() < 3 {
        return Err(Error::TooShortTrajectory(trajectory.len()));
    }
    let mut total = 0.0;
    let mut prev_dir: Option<Vec2> = None;
    for pair in trajectory.windows(2) {
        let seg = pair[1] - pair[0];
        if seg.norm() == 0.0 {
            continue;
        }
        if let Some(dir) = prev_dir {
            let angle = dir.cross(seg).atan2(dir.dot(seg)).abs();
            total += angle;
        }
        prev_dir = Some(seg);
    }
    Ok(total)
}
