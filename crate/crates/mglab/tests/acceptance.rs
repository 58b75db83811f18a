//! Acceptance gate: the end-to-end properties the laboratory must satisfy,
//! one pass/fail line per criterion. Runs as a plain binary (no test harness)
//! so the lines always reach stdout; exits nonzero if any criterion fails.

use mglab::error::Result;
use mglab::metrics::{condition_accuracy, outlier_fraction};
use mglab::mixture::LabeledMixture;
use mglab::net::{ArchDescriptor, Cond, NetInput, PredictorParams};
use mglab::oracle::{finite_diff_grad, DiffusedMixture};
use mglab::rngutil::{gauss2, standard_normal, stream, substream};
use mglab::sampler::{
    sample_ddpm, sample_flow_em, sample_flow_euler, CountingEps, CountingFlow, Guidance, NetEps,
    NetFlow, OracleEps,
};
use mglab::schedule::{FlowTime, NoiseSchedule};
use mglab::train::{
    load_checkpoint, mg_target, save_checkpoint, Objective, ProcessKind, TrainConfig, Trainer,
};
use mglab::vec2::Vec2;
use rand::Rng;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

fn main() {
    let criteria: &[(&str, fn() -> Result<(bool, String)>)] = &[
        ("oracle-vs-finite-difference", c1_oracle_scores),
        ("gradient-vs-finite-difference", c2_gradients),
        ("zero-guidance-degeneracy", c3_degeneracy),
        ("stop-gradient-contract", c4_stop_gradient),
        ("fixed-point-consistency", c5_fixed_point),
        ("nfe-halving", c6_nfe_halving),
        ("figure2-orderings", c7_figure2),
        ("w-sweep-u-shape", c8_w_sweep),
        ("drop-ratio-sweep", c9_drop_ratio),
        ("determinism-and-persistence", c10_determinism),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(pair) => pair,
            Err(e) => (false, format!("error: {e}")),
        };
        all &= passed;
        println!(
            "criterion {:2} {:<30} {}  [{:7.1}s]  {}",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            detail
        );
    }
    if !all {
        std::process::exit(1);
    }
}

fn rel_err(got: Vec2, want: Vec2) -> f64 {
    (got - want).norm() / want.norm().max(1e-8)
}

fn two_mode() -> Result<LabeledMixture> {
    LabeledMixture::grid_two_class(1, 2, 4.0, 0.3)
}

/// All four analytic score fields against central finite differences of the
/// matching log-densities, 21x21 grid, five timesteps per process family.
fn c1_oracle_scores() -> Result<(bool, String)> {
    let start = Instant::now();
    let mixture = LabeledMixture::grid_two_class(1, 2, 2.0, 0.5)?;
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let (h, w, tol) = (1e-4, 1.7, 1e-5);
    let mut worst = 0.0f64;
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
                worst = worst.max(rel_err(dm.posterior_score(x, 0)?, fd_post));
                worst = worst.max(rel_err(dm.guided_score(x, 0, w)?, fd_guided));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        worst <= tol && elapsed < 10.0,
        format!("worst relative error {worst:.2e} (tolerance {tol:.0e})"),
    ))
}

/// Backprop against finite differences over every parameter of an
/// (L=2, H=8) net, with and without the guidance-scale input.
fn c2_gradients() -> Result<(bool, String)> {
    let start = Instant::now();
    let (tol, floor, h) = (1e-4, 1e-8, 1e-5);
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
            worst = worst.max((grads.data()[i] - fd).abs() / fd.abs().max(floor));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        worst <= tol && elapsed < 30.0,
        format!("worst relative error {worst:.2e} (tolerance {tol:.0e})"),
    ))
}

/// Guided training at w = 0 reproduces unguided training bit for bit over a
/// full 1000-step run at a fixed seed.
fn c3_degeneracy() -> Result<(bool, String)> {
    let base = TrainConfig {
        w: 0.0,
        batch_size: 64,
        total_steps: 1000,
        t_steps: 200,
        seed: 31,
        arch: ArchDescriptor {
            hidden_layers: 2,
            hidden_width: 32,
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
        two_mode()?,
    )?;
    let mut guided = Trainer::new(
        TrainConfig {
            objective: Objective::Mg,
            ..base
        },
        two_mode()?,
    )?;
    for _ in 0..1000 {
        vanilla.train_step()?;
        guided.train_step()?;
    }
    let bits = |p: &PredictorParams| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&vanilla.state.online) == bits(&guided.state.online)
        && bits(&vanilla.state.ema) == bits(&guided.state.ema);
    Ok((
        identical,
        "1000 steps, online and EMA parameters compared bitwise".to_string(),
    ))
}

/// The loss differentiated past the stop-gradient boundary: finite
/// differences with respect to every teacher parameter are exactly zero,
/// while re-deriving the targets from a perturbed teacher does move the loss
/// (the dependence is severed at the boundary, not absent).
fn c4_stop_gradient() -> Result<(bool, String)> {
    let arch = ArchDescriptor {
        hidden_layers: 2,
        hidden_width: 8,
        time_freqs: 3,
        num_classes: 2,
        embed_dim: 4,
        w_input: false,
    };
    let mut rng = substream(99, stream::INIT);
    let mut student = PredictorParams::init(arch, &mut rng)?;
    let mut teacher = PredictorParams::init(arch, &mut rng)?;
    for p in student.data_mut().iter_mut().chain(teacher.data_mut()) {
        *p += 0.1 * standard_normal(&mut rng);
    }
    let w = 0.5;
    let batch: Vec<NetInput> = (0..8)
        .map(|i| NetInput {
            x: gauss2(&mut rng),
            t: rng.gen::<f64>(),
            cond: Cond::Class(i % 2),
            w: None,
        })
        .collect();
    let eps: Vec<Vec2> = (0..8).map(|_| gauss2(&mut rng)).collect();
    let targets_from = |teacher: &PredictorParams| -> Result<Vec<Vec2>> {
        batch
            .iter()
            .zip(&eps)
            .map(|(inp, &e)| {
                let pred_c = teacher.forward(inp)?;
                let pred_null = teacher.forward(&NetInput {
                    cond: Cond::Empty,
                    ..*inp
                })?;
                Ok(mg_target(e, pred_c, pred_null, w))
            })
            .collect()
    };
    // The stop gradient freezes the targets before differentiation; the loss
    // seen by the optimizer is a function of the student alone.
    let targets = targets_from(&teacher)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..teacher.num_params() {
        let orig = teacher.data()[i];
        teacher.data_mut()[i] = orig + h;
        let (lp, _) = student.loss_and_grad(&batch, &targets)?;
        teacher.data_mut()[i] = orig - h;
        let (lm, _) = student.loss_and_grad(&batch, &targets)?;
        teacher.data_mut()[i] = orig;
        worst = worst.max(((lp - lm) / (2.0 * h)).abs());
    }
    // Contrast: without the boundary the teacher does influence the loss.
    let (base_loss, _) = student.loss_and_grad(&batch, &targets)?;
    teacher.data_mut()[0] += 0.1;
    let moved = targets_from(&teacher)?;
    let (moved_loss, _) = student.loss_and_grad(&batch, &moved)?;
    let contrast = (moved_loss - base_loss).abs();
    Ok((
        worst <= 1e-12 && contrast > 1e-9,
        format!("max |dL/d(teacher)| = {worst:.1e}; unfrozen-target contrast {contrast:.1e}"),
    ))
}

/// Closed-form vs iterative guided fixed point across the contractive range,
/// and a trained model (two-mode task, w = 0.5) sitting closer to the
/// fixed-point field than to the plain Bayes field on an evaluation grid.
fn c5_fixed_point() -> Result<(bool, String)> {
    let start = Instant::now();
    let mixture = two_mode()?;
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut worst = 0.0f64;
    for t in [100, 500, 900] {
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
    if worst > 1e-10 {
        return Ok((
            false,
            format!("closed vs iterative disagreement {worst:.2e} > 1e-10"),
        ));
    }
    let w = 0.5;
    let cfg = TrainConfig {
        objective: Objective::Mg,
        process: ProcessKind::Vp,
        w,
        lambda: 0.1,
        total_steps: 50_000,
        batch_size: 128,
        seed: 7,
        arch: ArchDescriptor {
            hidden_layers: 3,
            hidden_width: 64,
            time_freqs: 6,
            num_classes: 2,
            embed_dim: 8,
            w_input: false,
        },
        ..TrainConfig::default()
    };
    let t_steps = cfg.t_steps;
    let mut trainer = Trainer::new(cfg, mixture.clone())?;
    for _ in 0..50_000 {
        trainer.train_step()?;
    }
    let params = &trainer.state.ema;
    let (mut mse_fp, mut mse_bayes, mut mse_null) = (0.0f64, 0.0, 0.0);
    let mut count = 0usize;
    for t in [300, 500, 700] {
        let dm = DiffusedMixture::vp(&mixture, &schedule, t)?;
        let tf = t as f64 / t_steps as f64;
        for i in 0..17 {
            for j in 0..17 {
                let x = Vec2::new(-3.0 + 0.375 * i as f64, -3.0 + 0.375 * j as f64);
                for c in 0..2 {
                    let pred = params.forward(&NetInput {
                        x,
                        t: tf,
                        cond: Cond::Class(c),
                        w: None,
                    })?;
                    mse_fp += (pred - dm.mg_fixed_point(x, c, w)?).norm_sq();
                    mse_bayes += (pred - dm.bayes_eps(x, Some(c))?).norm_sq();
                }
                let null = params.forward(&NetInput {
                    x,
                    t: tf,
                    cond: Cond::Empty,
                    w: None,
                })?;
                mse_null += (null - dm.bayes_eps(x, None)?).norm_sq();
                count += 1;
            }
        }
    }
    mse_fp /= (2 * count) as f64;
    mse_bayes /= (2 * count) as f64;
    mse_null /= count as f64;
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        mse_fp < mse_bayes && mse_null < 1e-2 && elapsed < 600.0,
        format!(
            "grid MSE to fixed point {mse_fp:.4} vs Bayes {mse_bayes:.4}; empty-branch MSE {mse_null:.4}"
        ),
    ))
}

/// At equal step counts, unguided sampling performs exactly half the
/// predictor evaluations of the CFG baseline, for both samplers, confirmed by
/// an instrumented counter.
fn c6_nfe_halving() -> Result<(bool, String)> {
    let mixture = two_mode()?;
    let schedule = NoiseSchedule::linear(40, 1e-3, 0.1)?;
    let n = 16;

    let oracle = OracleEps::new(&mixture, &schedule)?;
    let counter = CountingEps {
        inner: &oracle,
        calls: Default::default(),
    };
    let single = sample_ddpm(
        &counter,
        &schedule,
        n,
        Cond::Class(0),
        Guidance::None,
        9,
        false,
    )?;
    let single_calls = counter.calls.get();
    counter.calls.set(0);
    let double = sample_ddpm(
        &counter,
        &schedule,
        n,
        Cond::Class(0),
        Guidance::Cfg { w: 1.5 },
        9,
        false,
    )?;
    let ddpm_ok = single.nfe == single_calls
        && double.nfe == counter.calls.get()
        && single.nfe == (n * 40) as u64
        && double.nfe == 2 * single.nfe;

    let oracle = mglab::sampler::OracleFlow::new(&mixture);
    let counter = CountingFlow {
        inner: &oracle,
        calls: Default::default(),
    };
    let single = sample_flow_euler(&counter, n, Cond::Class(0), 32, Guidance::None, 9, false)?;
    let single_calls = counter.calls.get();
    counter.calls.set(0);
    let double = sample_flow_euler(
        &counter,
        n,
        Cond::Class(0),
        32,
        Guidance::Cfg { w: 1.5 },
        9,
        false,
    )?;
    let flow_ok = single.nfe == single_calls
        && double.nfe == counter.calls.get()
        && single.nfe == (n * 32) as u64
        && double.nfe == 2 * single.nfe;

    Ok((
        ddpm_ok && flow_ok,
        "ancestral and flow samplers, counters match recorded NFE".into(),
    ))
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mglab"))
}

fn run_ok(cmd: &mut Command) -> Result<bool> {
    Ok(cmd.stdout(Stdio::null()).status()?.success())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn grid_config(out: &Path, total_steps: u64, sampler: &str) -> String {
    format!(
        r#"seed = 1
out = "{}"

[dataset]
rows = 5
cols = 5
spacing = 2.0
std = 0.15

[train]
objective = "mg"
process = "ot-flow"
w = 0.5
lambda = 0.1
total_steps = {total_steps}
batch_size = 128
eval_samples = 2000

[train.arch]
hidden_layers = 3
hidden_width = 64
time_freqs = 6
num_classes = 2
embed_dim = 8
w_input = false

[sampler]
{sampler}

[eval]
samples = 2000
"#,
        out.display()
    )
}

/// The four-variant figure run on the default grid at a pinned seed: the MG
/// model has fewer outliers than the conditional baseline, at least the mode
/// recall of CFG, and straighter trajectories than CFG from shared noise.
fn c7_figure2() -> Result<(bool, String)> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("out");
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        grid_config(
            &out,
            25_000,
            "kind = \"flow-euler\"\nsteps = 64\nw_infer = 1.5",
        ),
    )?;
    if !run_ok(binary().args(["figure2", "--config"]).arg(&config))? {
        return Ok((false, "figure2 command failed".into()));
    }
    let rows = read_csv(&out.join("figure2").join("summary.csv"))?;
    let get = |variant: &str, col: usize| -> Option<f64> {
        rows.iter()
            .find(|r| r[0] == variant)
            .and_then(|r| r[col].parse().ok())
    };
    let (cond_out, mg_out) = (get("conditional", 3), get("mg", 3));
    let (cfg_rec, mg_rec) = (get("cfg", 4), get("mg", 4));
    let (cfg_turn, mg_turn) = (get("cfg", 6), get("mg", 6));
    let (Some(cond_out), Some(mg_out), Some(cfg_rec), Some(mg_rec), Some(cfg_turn), Some(mg_turn)) =
        (cond_out, mg_out, cfg_rec, mg_rec, cfg_turn, mg_turn)
    else {
        return Ok((false, "summary.csv is missing expected variants".into()));
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        mg_out < cond_out && mg_rec >= cfg_rec && mg_turn < cfg_turn && elapsed < 1200.0,
        format!(
            "outliers mg {mg_out:.4} < conditional {cond_out:.4}; recall mg {mg_rec:.2} >= cfg {cfg_rec:.2}; turning mg {mg_turn:.2} < cfg {cfg_turn:.2}"
        ),
    ))
}

/// The guidance-scale sweep traces a U: an interior energy-distance minimum
/// strictly below both endpoints.
fn c8_w_sweep() -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("out");
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        grid_config(
            &out,
            25_000,
            "kind = \"flow-em\"\nsteps = 16\nnoise_scale = 0.5",
        ),
    )?;
    let ok = run_ok(binary().args(["sweep", "--config"]).arg(&config).args([
        "--axis",
        "w-table",
        "--values",
        "1.0,1.25,1.5,1.75,2.0",
    ]))?;
    if !ok {
        return Ok((false, "sweep command failed".into()));
    }
    let rows = read_csv(&out.join("sweep.csv"))?;
    let eds: Vec<f64> = rows
        .iter()
        .map(|r| r[5].parse().unwrap_or(f64::NAN))
        .collect();
    if eds.len() != 5 || eds.iter().any(|e| !e.is_finite()) {
        return Ok((
            false,
            format!("expected 5 finite energy distances, got {eds:?}"),
        ));
    }
    let (imin, &edmin) = eds
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let u_shaped = imin > 0 && imin < eds.len() - 1 && edmin < eds[0] && edmin < eds[4];
    let summary: Vec<String> = eds.iter().map(|e| format!("{e:.4}")).collect();
    Ok((
        u_shaped,
        format!(
            "energy distances {} (minimum at index {imin})",
            summary.join(" ")
        ),
    ))
}

/// The drop-ratio sweep completes, and the empty-class-free objective trains
/// at lambda = 0 with the empty embedding row untouched while every sampler
/// still produces usable conditional samples from it.
fn c9_drop_ratio() -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("out");
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        grid_config(&out, 2000, "kind = \"flow-euler\"\nsteps = 16"),
    )?;
    let ok = run_ok(binary().args(["sweep", "--config"]).arg(&config).args([
        "--axis",
        "lambda",
        "--values",
        "0.05,0.10,0.15,0.20",
    ]))?;
    if !ok {
        return Ok((false, "lambda sweep command failed".into()));
    }
    let rows = read_csv(&out.join("sweep.csv"))?;
    if rows.len() != 4
        || rows
            .iter()
            .any(|r| r[5].parse::<f64>().map_or(true, |e| !e.is_finite()))
    {
        return Ok((false, "lambda sweep did not produce 4 finite rows".into()));
    }

    let mixture = two_mode()?;
    let base = TrainConfig {
        objective: Objective::MgNoEmpty,
        // The class-mean surrogate for the empty prediction is biased near
        // the data (the true conditional/unconditional gap vanishes there,
        // the class-mean gap does not), so its usable scale range is
        // narrower; train it at a modest scale.
        w: 0.1,
        lambda: 0.0,
        weight_decay: 0.0,
        total_steps: 6000,
        batch_size: 128,
        seed: 5,
        // A short chain still needs to end at (near) pure noise, so the
        // schedule is rescaled along with the step count.
        t_steps: 200,
        beta_max: 0.1,
        ..TrainConfig::default()
    };
    let mut detail = Vec::new();
    for process in [ProcessKind::Vp, ProcessKind::OtFlow] {
        let cfg = TrainConfig {
            process,
            ..base.clone()
        };
        let t_steps = cfg.t_steps;
        let mut trainer = Trainer::new(cfg, mixture.clone())?;
        let arch = *trainer.state.online.arch();
        let row = arch.num_classes * arch.embed_dim..(arch.num_classes + 1) * arch.embed_dim;
        let init_row: Vec<u64> = trainer.state.online.data()[row.clone()]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        for _ in 0..6000 {
            trainer.train_step()?;
        }
        let final_row: Vec<u64> = trainer.state.online.data()[row.clone()]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        if final_row != init_row {
            return Ok((
                false,
                format!("{process:?}: empty embedding row was updated"),
            ));
        }
        let untouched_moments = trainer.state.moments.m[row.clone()]
            .iter()
            .chain(&trainer.state.moments.v[row.clone()])
            .all(|&v| v == 0.0);
        if !untouched_moments {
            return Ok((
                false,
                format!("{process:?}: empty embedding row has optimizer state"),
            ));
        }
        let params = &trainer.state.ema;
        let runs = match process {
            ProcessKind::Vp => {
                let schedule = NoiseSchedule::linear(t_steps, 1e-4, 0.1)?;
                let net = NetEps {
                    params,
                    t_steps,
                    w_in: None,
                };
                vec![sample_ddpm(
                    &net,
                    &schedule,
                    400,
                    Cond::Class(0),
                    Guidance::None,
                    13,
                    false,
                )?]
            }
            ProcessKind::OtFlow => {
                let net = NetFlow { params, w_in: None };
                vec![
                    sample_flow_euler(&net, 400, Cond::Class(0), 64, Guidance::None, 13, false)?,
                    sample_flow_em(
                        &net,
                        400,
                        Cond::Class(0),
                        64,
                        0.5,
                        Guidance::None,
                        13,
                        false,
                    )?,
                ]
            }
        };
        for run in runs {
            if run.samples.iter().any(|s| !s.is_finite()) {
                return Ok((
                    false,
                    format!("{process:?}: sampler produced non-finite output"),
                ));
            }
            let outliers = outlier_fraction(&run.samples, &mixture, Some(0), 3.0)?;
            let accuracy = condition_accuracy(&run.samples, 0, &mixture)?;
            if outliers > 0.2 || accuracy < 0.9 {
                return Ok((
                    false,
                    format!("{process:?}: outliers {outliers:.3}, accuracy {accuracy:.3}"),
                ));
            }
            detail.push(format!("{outliers:.3}/{accuracy:.3}"));
        }
    }
    Ok((
        true,
        format!(
            "4 lambda points finite; no-empty samplers outliers/accuracy {}",
            detail.join(" ")
        ),
    ))
}

/// Compare two files, ignoring the named trailing CSV column (wall-clock
/// fields are the one sanctioned source of nondeterminism).
fn same_modulo_last_column(a: &Path, b: &Path) -> Result<bool> {
    let strip = |p: &Path| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(p)?
            .lines()
            .map(|l| match l.rsplit_once(',') {
                Some((head, _)) => head.to_string(),
                None => l.to_string(),
            })
            .collect())
    };
    Ok(strip(a)? == strip(b)?)
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    Ok(std::fs::read(a)? == std::fs::read(b)?)
}

/// Checkpoint round-trip is bit-exact, and rerunning any command with the
/// same config and seed reproduces byte-identical CSV/JSON outputs.
fn c10_determinism() -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;

    let mut trainer = Trainer::new(
        TrainConfig {
            objective: Objective::Mg,
            w: 0.5,
            total_steps: 200,
            batch_size: 64,
            t_steps: 100,
            seed: 3,
            ..TrainConfig::default()
        },
        two_mode()?,
    )?;
    for _ in 0..200 {
        trainer.train_step()?;
    }
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&trainer.state, &p1)?;
    let reloaded = load_checkpoint(&p1)?;
    save_checkpoint(&reloaded, &p2)?;
    if !same_bytes(&p1, &p2)? {
        return Ok((false, "checkpoint round-trip is not bit-exact".into()));
    }
    let same_params = reloaded
        .online
        .data()
        .iter()
        .zip(trainer.state.online.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_params {
        return Ok((false, "reloaded online parameters differ".into()));
    }

    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        format!(
            r#"seed = 4
out = "{}"

[dataset]
rows = 1
cols = 2
spacing = 4.0
std = 0.3

[train]
objective = "mg"
process = "vp"
w = 0.5
lambda = 0.1
total_steps = 1000
batch_size = 64
eval_every = 250
eval_samples = 300
t_steps = 100

[sampler]
kind = "ddpm"
steps = 100

[eval]
samples = 300
"#,
            dir.path().join("unused").display()
        ),
    )?;
    // Rerun into the same output directory (the config is byte-identical
    // either way), snapshotting the first run's outputs for comparison.
    let (ta, tb) = (dir.path().join("ta"), dir.path().join("tb"));
    std::fs::create_dir_all(&tb)?;
    for round in 0..2 {
        if !run_ok(
            binary()
                .args(["train", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&ta),
        )? {
            return Ok((false, "train command failed".into()));
        }
        if round == 0 {
            for name in ["checkpoint.ckpt", "config.toml", "metrics.csv"] {
                std::fs::copy(ta.join(name), tb.join(name))?;
            }
        }
    }
    if !same_bytes(&ta.join("checkpoint.ckpt"), &tb.join("checkpoint.ckpt"))?
        || !same_bytes(&ta.join("config.toml"), &tb.join("config.toml"))?
        || !same_modulo_last_column(&ta.join("metrics.csv"), &tb.join("metrics.csv"))?
    {
        return Ok((false, "rerun of train differs".into()));
    }

    let (sa, sb) = (dir.path().join("sa"), dir.path().join("sb"));
    for out in [&sa, &sb] {
        let ok = run_ok(
            binary()
                .args(["sample", "--config"])
                .arg(&config)
                .arg("--checkpoint")
                .arg(ta.join("checkpoint.ckpt"))
                .arg("--out")
                .arg(out)
                .args(["--n", "300", "--class", "0", "--trajectories"]),
        )?;
        if !ok {
            return Ok((false, "sample command failed".into()));
        }
    }
    if !same_bytes(&sa.join("samples.csv"), &sb.join("samples.csv"))?
        || !same_bytes(&sa.join("trajectories.csv"), &sb.join("trajectories.csv"))?
    {
        return Ok((false, "rerun of sample differs".into()));
    }

    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    for out in [&ea, &eb] {
        let ok = run_ok(
            binary()
                .args(["eval", "--config"])
                .arg(&config)
                .arg("--samples")
                .arg(sa.join("samples.csv"))
                .arg("--out")
                .arg(out)
                .args(["--class", "0"]),
        )?;
        if !ok {
            return Ok((false, "eval command failed".into()));
        }
    }
    if !same_bytes(&ea.join("report.json"), &eb.join("report.json"))? {
        return Ok((false, "rerun of eval differs".into()));
    }
    Ok((
        true,
        "checkpoint round-trip and train/sample/eval reruns byte-identical".into(),
    ))
}
