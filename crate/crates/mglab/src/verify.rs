//! Self-verification suites: analytic scores against finite differences,
//! backprop against finite differences, fixed-point consistency, NFE
//! accounting, and the zero-guidance degeneracy. These are the checks the
//! `verify` command runs on a fresh build.

use crate::error::Result;
use crate::mixture::LabeledMixture;
use crate::net::{ArchDescriptor, Cond, NetInput, PredictorParams};
use crate::oracle::{finite_diff_grad, DiffusedMixture};
use crate::rngutil::{gauss2, standard_normal, stream, substream};
use crate::sampler::{sample_ddpm, Guidance, OracleEps};
use crate::schedule::{FlowTime, NoiseSchedule};
use crate::train::{Objective, TrainConfig, Trainer};
use crate::vec2::Vec2;
use rand::Rng;
use std::time::Instant;

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub runtime_s: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Test-only fault injection, used to prove the suites can fail.
#[derive(Debug, Clone, Copy, Default)]
struct Tweaks {
    flip_posterior: bool,
}

pub fn run_all() -> VerifyReport {
    run_with(Tweaks::default())
}

fn run_with(tweaks: Tweaks) -> VerifyReport {
    let suites = vec![
        timed("score-vs-finite-difference", || score_suite(tweaks)),
        timed("gradient-check", gradient_suite),
        timed("fixed-point-consistency", fixed_point_suite),
        timed("nfe-accounting", nfe_suite),
        timed("zero-guidance-degeneracy", degeneracy_suite),
    ];
    VerifyReport { suites }
}

fn timed(name: &str, suite: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match suite() {
        Ok(pair) => pair,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult {
        name: name.to_string(),
        passed,
        runtime_s: start.elapsed().as_secs_f64(),
        detail,
    }
}

fn rel_err(analytic: Vec2, reference: Vec2) -> f64 {
    (analytic - reference).norm() / reference.norm().max(1e-8)
}

/// All four score fields against central finite differences of the matching
/// log-densities, on a 21x21 grid at 5 timesteps, for both process families.
fn score_suite(tweaks: Tweaks) -> Result<(bool, String)> {
    let mixture = LabeledMixture::grid_two_class(1, 2, 2.0, 0.5)?;
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let h = 1e-4;
    let w = 1.7;
    let tol = 1e-5;
    let mut worst = 0.0f64;
    let sign = if tweaks.flip_posterior { -1.0 } else { 1.0 };
    let mut diffused = Vec::new();
    for t in [100, 300, 500, 700, 900] {
        diffused.push(DiffusedMixture::vp(&mixture, &schedule, t)?);
    }
    for t in [0.2, 0.35, 0.5, 0.65, 0.8] {
        diffused.push(DiffusedMixture::ot(&mixture, FlowTime::new(t)?)?);
    }
    for dm in &diffused {
        let m = dm.as_mixture();
        for i in 0..21 {
            for j in 0..21 {
                let x = Vec2::new(-2.0 + 0.2 * i as f64, -2.0 + 0.2 * j as f64);
                let fd_c = finite_diff_grad(|p| m.log_density(p, Some(0)).unwrap(), x, h);
                let fd_u = finite_diff_grad(|p| m.log_density(p, None).unwrap(), x, h);
                // Differencing the log-posterior scalar directly avoids the
                // cancellation of two separately rounded large logs.
                let fd_post = finite_diff_grad(
                    |p| m.log_density(p, Some(0)).unwrap() - m.log_density(p, None).unwrap(),
                    x,
                    h,
                );
                let fd_guided = finite_diff_grad(
                    |p| {
                        (1.0 + w) * m.log_density(p, Some(0)).unwrap()
                            - w * m.log_density(p, None).unwrap()
                    },
                    x,
                    h,
                );
                worst = worst.max(rel_err(dm.cond_score(x, 0)?, fd_c));
                worst = worst.max(rel_err(dm.uncond_score(x), fd_u));
                worst = worst.max(rel_err(sign * dm.posterior_score(x, 0)?, fd_post));
                worst = worst.max(rel_err(dm.guided_score(x, 0, w)?, fd_guided));
            }
        }
    }
    Ok((
        worst <= tol,
        format!("worst relative error {worst:.2e} (tolerance {tol:.0e})"),
    ))
}

/// Backprop against finite differences over every parameter of a small net,
/// with and without the guidance-scale input.
fn gradient_suite() -> Result<(bool, String)> {
    let tol_rel = 1e-4;
    let floor = 1e-8;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for w_input in [false, true] {
        let arch = ArchDescriptor {
            hidden_layers: 2,
            hidden_width: 8,
            time_freqs: 3,
            num_classes: 2,
            embed_dim: 4,
            w_input,
        };
        let mut rng = substream(5150, stream::INIT);
        let mut params = PredictorParams::init(arch, &mut rng)?;
        // Randomize everything, including the zero-initialized output layer.
        for p in params.data_mut() {
            *p += 0.1 * standard_normal(&mut rng);
        }
        let batch: Vec<NetInput> = (0..6)
            .map(|i| NetInput {
                x: gauss2(&mut rng),
                t: rng.gen::<f64>(),
                cond: match i % 3 {
                    0 => Cond::Class(0),
                    1 => Cond::Class(1),
                    _ => Cond::Empty,
                },
                w: w_input.then(|| rng.gen::<f64>()),
            })
            .collect();
        let targets: Vec<Vec2> = (0..6).map(|_| gauss2(&mut rng)).collect();
        let (_, grads) = params.loss_and_grad(&batch, &targets)?;
        for i in 0..params.num_params() {
            let orig = params.data()[i];
            params.data_mut()[i] = orig + h;
            let (lp, _) = params.loss_and_grad(&batch, &targets)?;
            params.data_mut()[i] = orig - h;
            let (lm, _) = params.loss_and_grad(&batch, &targets)?;
            params.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (grads.data()[i] - fd).abs() / fd.abs().max(floor);
            worst = worst.max(err);
        }
    }
    Ok((
        worst <= tol_rel,
        format!("worst relative error {worst:.2e} (tolerance {tol_rel:.0e})"),
    ))
}

/// Closed-form vs iterative guided fixed point across the contractive range.
fn fixed_point_suite() -> Result<(bool, String)> {
    let mixture = LabeledMixture::grid_two_class(1, 2, 4.0, 0.3)?;
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02)?;
    let tol = 1e-10;
    let mut worst = 0.0f64;
    for t in [10, 50, 90] {
        let dm = DiffusedMixture::vp(&mixture, &schedule, t)?;
        for k in 1..=9 {
            let w = k as f64 * 0.1;
            for &x in &[
                Vec2::new(0.3, -0.2),
                Vec2::new(-1.5, 0.8),
                Vec2::new(2.0, 2.0),
            ] {
                let closed = dm.mg_fixed_point(x, 0, w)?;
                let iterative = dm.mg_fixed_point_iterative(x, 0, w, 300)?;
                worst = worst.max((closed - iterative).norm());
            }
        }
    }
    Ok((
        worst <= tol,
        format!("worst disagreement {worst:.2e} (tolerance {tol:.0e})"),
    ))
}

/// Unguided sampling must cost exactly half the evaluations of CFG sampling
/// at equal step counts.
fn nfe_suite() -> Result<(bool, String)> {
    let mixture = LabeledMixture::grid_two_class(1, 2, 3.0, 0.2)?;
    let schedule = NoiseSchedule::linear(40, 1e-3, 0.1)?;
    let pred = OracleEps::new(&mixture, &schedule)?;
    let n = 16;
    let single = sample_ddpm(
        &pred,
        &schedule,
        n,
        Cond::Class(0),
        Guidance::None,
        9,
        false,
    )?;
    let double = sample_ddpm(
        &pred,
        &schedule,
        n,
        Cond::Class(0),
        Guidance::Cfg { w: 1.5 },
        9,
        false,
    )?;
    let ok = single.nfe == (n * 40) as u64 && double.nfe == 2 * single.nfe;
    Ok((
        ok,
        format!("guidance=none nfe {}, cfg nfe {}", single.nfe, double.nfe),
    ))
}

/// Guided training at w = 0 must reproduce unguided training bit for bit.
fn degeneracy_suite() -> Result<(bool, String)> {
    let mixture = LabeledMixture::grid_two_class(1, 2, 4.0, 0.3)?;
    let base = TrainConfig {
        w: 0.0,
        batch_size: 32,
        total_steps: 50,
        t_steps: 40,
        seed: 31,
        arch: ArchDescriptor {
            hidden_layers: 2,
            hidden_width: 16,
            time_freqs: 4,
            num_classes: 2,
            embed_dim: 4,
            w_input: false,
        },
        ..TrainConfig::default()
    };
    let mut vanilla = Trainer::new(
        TrainConfig {
            objective: Objective::Vanilla,
            ..base.clone()
        },
        mixture.clone(),
    )?;
    let mut guided = Trainer::new(
        TrainConfig {
            objective: Objective::Mg,
            ..base
        },
        mixture,
    )?;
    for _ in 0..50 {
        vanilla.train_step()?;
        guided.train_step()?;
    }
    let identical = vanilla
        .state
        .online
        .data()
        .iter()
        .zip(guided.state.online.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        identical,
        "50 steps, online parameters compared bitwise".to_string(),
    ))
}
