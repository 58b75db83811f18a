//! Command-line surface: train / sample / eval / sweep / figure2 / verify.
//! Every command is deterministic given (config, seed); all CSV and JSON
//! outputs are byte-stable across reruns except wall-clock fields.

use crate::config::{ExperimentConfig, GuidanceMode, SamplerKind};
use crate::error::Error;
use crate::metrics::{
    condition_accuracy, energy_distance, kde_grid, mode_recall, outlier_fraction, per_mode_hits,
    scott_bandwidth, trajectory_turning, GridSpec, MetricReport, METRIC_MAPPING,
};
use crate::mixture::LabeledMixture;
use crate::net::{Cond, PredictorParams};
use crate::rngutil::{stream, substream};
use crate::sampler::{
    sample_ddpm, sample_flow_em, sample_flow_euler, Guidance, NetEps, NetFlow, OracleEps,
    OracleFlow, SampleRun,
};
use crate::schedule::NoiseSchedule;
use crate::train::{load_checkpoint, save_checkpoint, EvalRecord, Objective, Trainer};
use crate::vec2::Vec2;
use crate::verify;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mglab",
    about = "Desk-scale guidance-distillation laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics + checkpoints.
    Train(CommonArgs),
    /// Generate samples from a checkpoint or the analytic oracle.
    Sample(SampleArgs),
    /// Score a samples.csv against the configured dataset.
    Eval(EvalArgs),
    /// Train once per axis value and tabulate the results.
    Sweep(SweepArgs),
    /// Reproduce the four-variant qualitative comparison figure.
    Figure2(CommonArgs),
    /// Run the self-verification suites.
    Verify,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training objective override.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Guidance mode override for sampling.
    #[arg(long, value_parser = parse_guidance)]
    guidance: Option<GuidanceMode>,
    /// Internal guidance scale (0 = unguided).
    #[arg(long, conflicts_with = "w_table")]
    w: Option<f64>,
    /// Table-convention guidance scale (1 = unguided); maps to w = w_table - 1.
    #[arg(long)]
    w_table: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sample from the analytic oracle instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of chains.
    #[arg(long)]
    n: Option<usize>,
    /// Conditioning class; omit for unconditional sampling.
    #[arg(long)]
    class: Option<usize>,
    /// Also write trajectories.csv.
    #[arg(long)]
    trajectories: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// samples.csv produced by the sample command.
    #[arg(long)]
    samples: PathBuf,
    /// Requested class the samples should match.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sweep axis: w, w-table, or lambda.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Run sweep points on worker threads (capped by MG_LAB_THREADS).
    #[arg(long)]
    parallel: bool,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "vanilla" => Ok(Objective::Vanilla),
        "mg" => Ok(Objective::Mg),
        "mg-scale" => Ok(Objective::MgScaleAware),
        "mg-no-empty" => Ok(Objective::MgNoEmpty),
        _ => Err(format!(
            "unknown objective `{s}` (use vanilla|mg|mg-scale|mg-no-empty)"
        )),
    }
}

fn parse_guidance(s: &str) -> Result<GuidanceMode, String> {
    match s {
        "none" => Ok(GuidanceMode::None),
        "cfg" => Ok(GuidanceMode::Cfg),
        _ => Err(format!("unknown guidance mode `{s}` (use none|cfg)")),
    }
}

pub fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Sample(args) => cmd_sample(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::Sweep(args) => cmd_sweep(&args),
        Cmd::Figure2(args) => cmd_figure2(&args),
        Cmd::Verify => cmd_verify(),
    }
}

/// Load the config (or defaults) and apply command-line overrides.
fn load_config(args: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(obj) = args.objective {
        cfg.train.objective = obj;
    }
    if let Some(g) = args.guidance {
        cfg.sampler.guidance = g;
    }
    if let Some(w) = args.w {
        cfg.train.w = w;
    }
    if let Some(wt) = args.w_table {
        if wt < 1.0 {
            bail!("--w-table must be at least 1 (1 maps to the unguided w = 0)");
        }
        cfg.train.w = wt - 1.0;
    }
    cfg.normalize()?;
    Ok(cfg)
}

fn metrics_header() -> &'static str {
    "step,loss,w,energy_distance,outlier_fraction,condition_accuracy,wall_time_s"
}

fn metrics_row(r: &EvalRecord) -> String {
    format!(
        "{},{},{},{},{},{},{:.3}",
        r.step,
        r.loss,
        r.w,
        r.energy_distance,
        r.outlier_fraction,
        r.condition_accuracy,
        r.wall_time_s
    )
}

fn cmd_train(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    std::fs::create_dir_all(&cfg.out)?;
    cfg.save(&cfg.out.join("config.toml"))?;
    println!(
        "training objective {:?}: internal w = {} (w_table = {})",
        cfg.train.objective,
        cfg.train.w,
        1.0 + cfg.train.w
    );
    let dataset = cfg.dataset.build()?;
    let mut trainer = Trainer::new(cfg.train.clone(), dataset)?;
    let mut rows = vec![metrics_header().to_string()];
    while trainer.state.step < trainer.cfg.total_steps {
        trainer.train_step()?;
        let due = trainer.cfg.eval_every > 0
            && (trainer.state.step % trainer.cfg.eval_every == 0
                || trainer.state.step == trainer.cfg.total_steps);
        if due {
            let rec = trainer.evaluate()?;
            println!(
                "step {:>7}  loss {:.5}  energy-distance {:.5}  w {:.3}",
                rec.step, rec.loss, rec.energy_distance, rec.w
            );
            rows.push(metrics_row(&rec));
            save_checkpoint(
                &trainer.state,
                &cfg.out.join(format!("checkpoint_{:07}.ckpt", rec.step)),
            )?;
        }
    }
    std::fs::write(cfg.out.join("metrics.csv"), rows.join("\n") + "\n")?;
    save_checkpoint(&trainer.state, &cfg.out.join("checkpoint.ckpt"))?;
    println!("wrote {}", cfg.out.join("checkpoint.ckpt").display());
    Ok(())
}

/// Where predictions come from.
enum Source<'a> {
    Oracle,
    Net(&'a PredictorParams),
}

/// Run the configured sampler for one condition.
fn run_sampler(
    cfg: &ExperimentConfig,
    dataset: &LabeledMixture,
    source: &Source<'_>,
    n: usize,
    cond: Cond,
    seed: u64,
    record_traj: bool,
) -> anyhow::Result<SampleRun> {
    let guidance = match cfg.sampler.guidance {
        GuidanceMode::None => Guidance::None,
        GuidanceMode::Cfg => Guidance::Cfg {
            w: cfg.sampler.w_infer,
        },
    };
    run_sampler_with(cfg, dataset, source, n, cond, guidance, seed, record_traj)
}

#[allow(clippy::too_many_arguments)]
fn run_sampler_with(
    cfg: &ExperimentConfig,
    dataset: &LabeledMixture,
    source: &Source<'_>,
    n: usize,
    cond: Cond,
    guidance: Guidance,
    seed: u64,
    record_traj: bool,
) -> anyhow::Result<SampleRun> {
    let w_in = cfg.train.arch.w_input.then_some(cfg.train.w);
    let run = match cfg.sampler.kind {
        SamplerKind::Ddpm => {
            let schedule =
                NoiseSchedule::linear(cfg.train.t_steps, cfg.train.beta_min, cfg.train.beta_max)?;
            match source {
                Source::Oracle => {
                    let pred = OracleEps::new(dataset, &schedule)?;
                    sample_ddpm(&pred, &schedule, n, cond, guidance, seed, record_traj)?
                }
                Source::Net(params) => {
                    let pred = NetEps {
                        params,
                        t_steps: cfg.train.t_steps,
                        w_in,
                    };
                    sample_ddpm(&pred, &schedule, n, cond, guidance, seed, record_traj)?
                }
            }
        }
        SamplerKind::FlowEuler => match source {
            Source::Oracle => {
                let pred = OracleFlow::new(dataset);
                sample_flow_euler(
                    &pred,
                    n,
                    cond,
                    cfg.sampler.steps,
                    guidance,
                    seed,
                    record_traj,
                )?
            }
            Source::Net(params) => {
                let pred = NetFlow { params, w_in };
                sample_flow_euler(
                    &pred,
                    n,
                    cond,
                    cfg.sampler.steps,
                    guidance,
                    seed,
                    record_traj,
                )?
            }
        },
        SamplerKind::FlowEm => match source {
            Source::Oracle => {
                let pred = OracleFlow::new(dataset);
                sample_flow_em(
                    &pred,
                    n,
                    cond,
                    cfg.sampler.steps,
                    cfg.sampler.noise_scale,
                    guidance,
                    seed,
                    record_traj,
                )?
            }
            Source::Net(params) => {
                let pred = NetFlow { params, w_in };
                sample_flow_em(
                    &pred,
                    n,
                    cond,
                    cfg.sampler.steps,
                    cfg.sampler.noise_scale,
                    guidance,
                    seed,
                    record_traj,
                )?
            }
        },
    };
    Ok(run)
}

fn write_samples_csv(
    path: &Path,
    run: &SampleRun,
    class: Option<usize>,
    seed: u64,
) -> anyhow::Result<()> {
    let mut text = String::from("chain,x,y,class,seed\n");
    let class_cell = class.map(|c| c.to_string()).unwrap_or_default();
    for (chain, s) in run.samples.iter().enumerate() {
        let _ = writeln!(text, "{chain},{},{},{class_cell},{seed}", s.x, s.y);
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_trajectories_csv(path: &Path, run: &SampleRun) -> anyhow::Result<()> {
    let mut text = String::from("chain,step,time,x,y\n");
    if let Some(trajs) = &run.trajectories {
        for (chain, traj) in trajs.iter().enumerate() {
            for (step, (time, p)) in traj.iter().enumerate() {
                let _ = writeln!(text, "{chain},{step},{time},{},{}", p.x, p.y);
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let dataset = cfg.dataset.build()?;
    let n = args.n.unwrap_or(cfg.eval.samples);
    let cond = match args.class {
        Some(c) => {
            if c >= dataset.num_classes() {
                return Err(Error::UnknownClass {
                    class: c,
                    num_classes: dataset.num_classes(),
                }
                .into());
            }
            Cond::Class(c)
        }
        None => Cond::Empty,
    };
    let loaded;
    let source = if args.oracle {
        Source::Oracle
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("provide --checkpoint PATH or --oracle"))?;
        loaded = load_checkpoint(path)?;
        Source::Net(&loaded.ema)
    };
    let run = run_sampler(
        &cfg,
        &dataset,
        &source,
        n,
        cond,
        cfg.seed,
        args.trajectories,
    )?;
    std::fs::create_dir_all(&cfg.out)?;
    write_samples_csv(&cfg.out.join("samples.csv"), &run, args.class, cfg.seed)?;
    if args.trajectories {
        write_trajectories_csv(&cfg.out.join("trajectories.csv"), &run)?;
    }
    println!(
        "samples: {}  steps: {}  NFE: {}",
        run.samples.len(),
        run.steps,
        run.nfe
    );
    Ok(())
}

fn read_samples_csv(path: &Path) -> anyhow::Result<Vec<Vec2>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            bail!(
                "{}:{}: expected chain,x,y,class,seed",
                path.display(),
                ln + 1
            );
        }
        let x: f64 = fields[1]
            .parse()
            .with_context(|| format!("line {}", ln + 1))?;
        let y: f64 = fields[2]
            .parse()
            .with_context(|| format!("line {}", ln + 1))?;
        out.push(Vec2::new(x, y));
    }
    Ok(out)
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let dataset = cfg.dataset.build()?;
    let samples = read_samples_csv(&args.samples)?;
    if samples.is_empty() {
        return Err(Error::EmptySet.into());
    }
    let class = args.class;
    if let Some(c) = class {
        if c >= dataset.num_classes() {
            return Err(Error::UnknownClass {
                class: c,
                num_classes: dataset.num_classes(),
            }
            .into());
        }
    }
    let mut truth_rng = substream(cfg.seed, stream::GROUND_TRUTH);
    let truth: Vec<Vec2> = (0..samples.len())
        .map(|_| match class {
            Some(c) => dataset.sample_class(c, &mut truth_rng),
            None => Ok(dataset.sample_pair(&mut truth_rng).0),
        })
        .collect::<crate::error::Result<_>>()?;
    let report = MetricReport {
        outlier_fraction: outlier_fraction(&samples, &dataset, class, cfg.eval.outlier_k)?,
        mode_recall: mode_recall(&samples, &dataset, class, cfg.eval.recall_r)?,
        condition_accuracy: match class {
            Some(c) => condition_accuracy(&samples, c, &dataset)?,
            None => 1.0,
        },
        energy_distance: energy_distance(&samples, &truth)?,
        per_mode_hits: per_mode_hits(&samples, &dataset, class, cfg.eval.recall_r)?,
        nfe: 0,
        run_id: args
            .samples
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: cfg.seed,
        objective: format!("{:?}", cfg.train.objective),
        w: cfg.train.w,
        metric_mapping: METRIC_MAPPING.to_string(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("report.json"), format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

/// Post-training evaluation used by sweeps and figure panels: round-robin
/// conditional sampling plus the full metric set.
struct FullEval {
    run_per_class: Vec<SampleRun>,
    samples: Vec<Vec2>,
    energy_distance: f64,
    outlier_fraction: f64,
    mode_recall: f64,
    condition_accuracy: f64,
    nfe: u64,
}

fn full_eval(
    cfg: &ExperimentConfig,
    dataset: &LabeledMixture,
    source: &Source<'_>,
    guidance: Guidance,
    unconditional: bool,
    record_traj: bool,
) -> anyhow::Result<FullEval> {
    let n = cfg.eval.samples;
    let k = dataset.num_classes();
    let eval_seed: u64 = substream(cfg.seed, stream::TRAIN_EVAL).gen();
    let mut runs = Vec::new();
    let mut samples = Vec::with_capacity(n);
    let mut correct_weighted = 0.0;
    let mut nfe = 0;
    let mut truth_rng = substream(eval_seed, stream::GROUND_TRUTH);
    let mut truth = Vec::with_capacity(n);
    for class in 0..k {
        let count = n / k + usize::from(class < n % k);
        let cond = if unconditional {
            Cond::Empty
        } else {
            Cond::Class(class)
        };
        let run = run_sampler_with(
            cfg,
            dataset,
            source,
            count,
            cond,
            guidance,
            eval_seed.wrapping_add(class as u64),
            record_traj,
        )?;
        if !unconditional && count > 0 {
            correct_weighted += condition_accuracy(&run.samples, class, dataset)? * count as f64;
        }
        for _ in 0..count {
            truth.push(if unconditional {
                dataset.sample_pair(&mut truth_rng).0
            } else {
                dataset.sample_class(class, &mut truth_rng)?
            });
        }
        nfe += run.nfe;
        samples.extend(run.samples.iter().copied());
        runs.push(run);
    }
    Ok(FullEval {
        energy_distance: energy_distance(&samples, &truth)?,
        outlier_fraction: outlier_fraction(&samples, dataset, None, cfg.eval.outlier_k)?,
        mode_recall: mode_recall(&samples, dataset, None, cfg.eval.recall_r)?,
        condition_accuracy: if unconditional {
            1.0
        } else {
            correct_weighted / samples.len().max(1) as f64
        },
        nfe,
        samples,
        run_per_class: runs,
    })
}

fn train_one(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(Trainer, Vec<EvalRecord>)> {
    std::fs::create_dir_all(out)?;
    let dataset = cfg.dataset.build()?;
    let mut trainer = Trainer::new(cfg.train.clone(), dataset)?;
    let mut records = Vec::new();
    trainer.run(|rec| records.push(rec.clone()))?;
    let mut rows = vec![metrics_header().to_string()];
    rows.extend(records.iter().map(metrics_row));
    std::fs::write(out.join("metrics.csv"), rows.join("\n") + "\n")?;
    save_checkpoint(&trainer.state, &out.join("checkpoint.ckpt"))?;
    Ok((trainer, records))
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let base = load_config(&args.common)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| anyhow::anyhow!("value `{v}`: {e}"))
        })
        .collect::<anyhow::Result<_>>()?;
    if values.is_empty() {
        bail!("--values must list at least one number");
    }
    let axis = args.axis.as_str();
    if !matches!(axis, "w" | "w-table" | "lambda") {
        bail!("--axis must be one of w, w-table, lambda");
    }
    std::fs::create_dir_all(&base.out)?;
    let mut configs = Vec::new();
    for &v in &values {
        let mut cfg = base.clone();
        match axis {
            "w" => cfg.train.w = v,
            "w-table" => {
                if v < 1.0 {
                    bail!("w-table values must be at least 1");
                }
                cfg.train.w = v - 1.0;
            }
            _ => cfg.train.lambda = v,
        }
        cfg.out = base.out.join(format!("{axis}_{v}"));
        cfg.normalize()?;
        configs.push(cfg);
    }
    let run_point = |cfg: &ExperimentConfig| -> anyhow::Result<(f64, FullEval)> {
        let (trainer, records) = train_one(cfg, &cfg.out)?;
        let dataset = cfg.dataset.build()?;
        let guidance = match cfg.sampler.guidance {
            GuidanceMode::None => Guidance::None,
            GuidanceMode::Cfg => Guidance::Cfg {
                w: cfg.sampler.w_infer,
            },
        };
        let ev = full_eval(
            cfg,
            &dataset,
            &Source::Net(&trainer.state.ema),
            guidance,
            false,
            false,
        )?;
        let loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
        Ok((loss, ev))
    };
    let results: Vec<(f64, FullEval)> = if args.parallel {
        let cap = std::env::var("MG_LAB_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|p| p.get())
                    .unwrap_or(1)
            })
            .max(1);
        let mut results: Vec<Option<anyhow::Result<(f64, FullEval)>>> =
            (0..configs.len()).map(|_| None).collect();
        for chunk_start in (0..configs.len()).step_by(cap) {
            let chunk_end = (chunk_start + cap).min(configs.len());
            let outputs = std::thread::scope(|scope| {
                let handles: Vec<_> = configs[chunk_start..chunk_end]
                    .iter()
                    .map(|cfg| scope.spawn(|| run_point(cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap())
                    .collect::<Vec<_>>()
            });
            for (i, out) in outputs.into_iter().enumerate() {
                results[chunk_start + i] = Some(out);
            }
        }
        results
            .into_iter()
            .map(|r| r.unwrap())
            .collect::<anyhow::Result<Vec<_>>>()?
    } else {
        configs
            .iter()
            .map(run_point)
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let mut rows = vec![
        "value,w,w_table,lambda,loss,energy_distance,outlier_fraction,mode_recall,condition_accuracy"
            .to_string(),
    ];
    for ((cfg, &value), (loss, ev)) in configs.iter().zip(&values).zip(&results) {
        println!(
            "{axis} = {value}: w = {} (w_table = {}), energy-distance {:.5}",
            cfg.train.w,
            1.0 + cfg.train.w,
            ev.energy_distance
        );
        rows.push(format!(
            "{value},{},{},{},{loss},{},{},{},{}",
            cfg.train.w,
            1.0 + cfg.train.w,
            cfg.train.lambda,
            ev.energy_distance,
            ev.outlier_fraction,
            ev.mode_recall,
            ev.condition_accuracy
        ));
    }
    std::fs::write(base.out.join("sweep.csv"), rows.join("\n") + "\n")?;
    println!("wrote {}", base.out.join("sweep.csv").display());
    Ok(())
}

/// Plot extent with a margin around the mixture's modes.
fn plot_bounds(dataset: &LabeledMixture) -> (f64, f64, f64, f64) {
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in dataset.components() {
        x_min = x_min.min(c.mean.x - 3.0 * c.std);
        x_max = x_max.max(c.mean.x + 3.0 * c.std);
        y_min = y_min.min(c.mean.y - 3.0 * c.std);
        y_max = y_max.max(c.mean.y + 3.0 * c.std);
    }
    let margin = 0.15 * (x_max - x_min).max(y_max - y_min).max(1.0);
    (
        x_min - margin,
        x_max + margin,
        y_min - margin,
        y_max + margin,
    )
}

fn cmd_figure2(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let dir = cfg.out.join("figure2");
    std::fs::create_dir_all(&dir)?;
    let dataset = cfg.dataset.build()?;
    // Two trainings cover all four variants: the vanilla model (with condition
    // dropout) serves conditional, unconditional, and CFG sampling; the
    // guided objective provides the fourth.
    let mut vanilla_cfg = cfg.clone();
    vanilla_cfg.train.objective = Objective::Vanilla;
    if vanilla_cfg.train.lambda == 0.0 {
        vanilla_cfg.train.lambda = 0.1;
    }
    let mut mg_cfg = cfg.clone();
    mg_cfg.train.objective = Objective::Mg;
    let vanilla_params = train_or_load(&vanilla_cfg, &dir.join("vanilla.ckpt"))?;
    let mg_params = train_or_load(&mg_cfg, &dir.join("mg.ckpt"))?;
    let w_infer = cfg.sampler.w_infer;
    let variants: [(&str, &PredictorParams, Guidance, bool); 4] = [
        ("conditional", &vanilla_params, Guidance::None, false),
        ("unconditional", &vanilla_params, Guidance::None, true),
        ("cfg", &vanilla_params, Guidance::Cfg { w: w_infer }, false),
        ("mg", &mg_params, Guidance::None, false),
    ];
    let (x_min, x_max, y_min, y_max) = plot_bounds(&dataset);
    let modes: Vec<Vec2> = dataset.components().iter().map(|c| c.mean).collect();
    let grid = GridSpec {
        x_min,
        x_max,
        y_min,
        y_max,
        nx: cfg.eval.kde_bins,
        ny: cfg.eval.kde_bins,
    };
    let mut summary = vec![
        "variant,nfe,energy_distance,outlier_fraction,mode_recall,condition_accuracy,mean_turning"
            .to_string(),
    ];
    for (name, params, guidance, unconditional) in variants {
        let ev = full_eval(
            &cfg,
            &dataset,
            &Source::Net(params),
            guidance,
            unconditional,
            true,
        )?;
        // Scatter panel.
        let mut scatter = crate::svg::SvgCanvas::new(320.0, 320.0, x_min, x_max, y_min, y_max);
        scatter.title(&format!("{name}: samples"));
        scatter.scatter(&ev.samples, 1.4, "#1f77b4");
        scatter.markers(&modes, 4.0, "#d62728");
        scatter.write(&dir.join(format!("{name}_scatter.svg")))?;
        // Trajectory panel + mean turning.
        let mut traj_panel = crate::svg::SvgCanvas::new(320.0, 320.0, x_min, x_max, y_min, y_max);
        traj_panel.title(&format!("{name}: trajectories"));
        let mut turnings = Vec::new();
        let mut drawn = 0;
        for run in &ev.run_per_class {
            if let Some(trajs) = &run.trajectories {
                for traj in trajs {
                    let pts: Vec<Vec2> = traj.iter().map(|&(_, p)| p).collect();
                    if turnings.len() < 200 {
                        turnings.push(trajectory_turning(&pts)?);
                    }
                    if drawn < 40 {
                        traj_panel.polyline(&pts, 0.8, "#2ca02c");
                        drawn += 1;
                    }
                }
            }
        }
        traj_panel.markers(&modes, 4.0, "#d62728");
        traj_panel.write(&dir.join(format!("{name}_trajectories.svg")))?;
        let mean_turning = turnings.iter().sum::<f64>() / turnings.len().max(1) as f64;
        // Density panel.
        let bw = scott_bandwidth(&ev.samples);
        let density = kde_grid(&ev.samples, &grid, bw)?;
        let mut kde_panel = crate::svg::SvgCanvas::new(320.0, 320.0, x_min, x_max, y_min, y_max);
        kde_panel.heatmap(&grid, &density);
        kde_panel.title(&format!("{name}: density"));
        kde_panel.write(&dir.join(format!("{name}_density.svg")))?;
        println!(
            "{name:>13}: nfe {:>8}  energy-distance {:.5}  outliers {:.4}  recall {:.3}  \
             turning {:.3}",
            ev.nfe, ev.energy_distance, ev.outlier_fraction, ev.mode_recall, mean_turning
        );
        summary.push(format!(
            "{name},{},{},{},{},{},{}",
            ev.nfe,
            ev.energy_distance,
            ev.outlier_fraction,
            ev.mode_recall,
            ev.condition_accuracy,
            mean_turning
        ));
    }
    std::fs::write(dir.join("summary.csv"), summary.join("\n") + "\n")?;
    println!("wrote {}", dir.join("summary.csv").display());
    Ok(())
}

fn train_or_load(cfg: &ExperimentConfig, ckpt: &Path) -> anyhow::Result<PredictorParams> {
    if ckpt.exists() {
        println!("loading {}", ckpt.display());
        return Ok(load_checkpoint(ckpt)?.ema);
    }
    let dataset = cfg.dataset.build()?;
    let mut trainer = Trainer::new(cfg.train.clone(), dataset)?;
    println!(
        "training {:?} for {} steps (w = {}, w_table = {})",
        cfg.train.objective,
        cfg.train.total_steps,
        cfg.train.w,
        1.0 + cfg.train.w
    );
    trainer.run(|_| {})?;
    save_checkpoint(&trainer.state, ckpt)?;
    Ok(trainer.state.ema)
}

fn cmd_verify() -> anyhow::Result<()> {
    let report = verify::run_all();
    for s in &report.suites {
        println!(
            "{} {:<28} {:>8.2}s  {}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.runtime_s,
            s.detail
        );
    }
    if !report.all_passed() {
        bail!("verification failed");
    }
    Ok(())
}
