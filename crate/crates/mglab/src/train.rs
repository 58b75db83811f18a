//! The training loop: condition dropping, guidance-corrected target
//! construction for both process families, the scale-aware and
//! empty-class-free variants, an automatic guidance-weight controller, AdamW,
//! and bit-exact checkpointing.
//!
//! Targets are built from a frozen teacher (EMA by default) and enter the loss
//! as constants, so no gradient ever flows through the guidance correction.

use crate::error::{Error, Result};
use crate::metrics::{condition_accuracy, energy_distance, outlier_fraction};
use crate::mixture::LabeledMixture;
use crate::net::{round_to_f32, ArchDescriptor, Cond, NetInput, PredictorParams};
use crate::rngutil::{gauss2, stream, substream};
use crate::sampler::{sample_ddpm, sample_flow_euler, Guidance, NetEps, NetFlow};
use crate::schedule::{ground_truth_flow, ot_interpolate, FlowTime, NoiseSchedule};
use crate::vec2::Vec2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Vanilla,
    Mg,
    MgScaleAware,
    MgNoEmpty,
}

/// Forward-corruption process family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    Vp,
    OtFlow,
}

/// Full training configuration. `w` is the internal guidance scale: `w = 0`
/// reproduces the unguided objective exactly; reports additionally print
/// `w_table = 1 + w` for the convention that labels the unguided run as 1.00.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub process: ProcessKind,
    pub w: f64,
    /// Condition-drop probability.
    pub lambda: f64,
    /// Guidance-scale sampling interval for the scale-aware objective.
    pub w_lo: f64,
    pub w_hi: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub auto_w: bool,
    pub auto_w_gamma: f64,
    pub auto_w_rho: f64,
    pub auto_w_max: f64,
    /// Use the online model as teacher instead of the EMA copy.
    pub online_teacher: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Integration steps for flow-model evaluation sampling.
    pub flow_eval_steps: usize,
    pub arch: ArchDescriptor,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            objective: Objective::Vanilla,
            process: ProcessKind::Vp,
            w: 0.5,
            lambda: 0.10,
            w_lo: 0.0,
            w_hi: 3.0,
            ema_decay: 0.999,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            total_steps: 10_000,
            seed: 0,
            eval_every: 0,
            eval_samples: 2000,
            auto_w: false,
            auto_w_gamma: 0.05,
            auto_w_rho: 0.9,
            auto_w_max: 4.0,
            online_teacher: false,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            t_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            flow_eval_steps: 64,
            arch: ArchDescriptor {
                hidden_layers: 3,
                hidden_width: 64,
                time_freqs: 6,
                num_classes: 2,
                embed_dim: 8,
                w_input: false,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.w >= 0.0) {
            return Err(Error::Config(format!(
                "w must be nonnegative, got {}",
                self.w
            )));
        }
        if self.w_lo > self.w_hi {
            return Err(Error::Config(format!(
                "w interval is empty: [{}, {}]",
                self.w_lo, self.w_hi
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "EMA decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        match self.objective {
            Objective::MgScaleAware if !self.arch.w_input => {
                return Err(Error::Config(
                    "scale-aware objective requires an architecture with a w-input".into(),
                ));
            }
            Objective::MgNoEmpty if self.lambda != 0.0 => {
                return Err(Error::Config(
                    "the empty-class-free objective never drops conditions; set lambda = 0".into(),
                ));
            }
            _ => {}
        }
        if self.arch.w_input && self.objective != Objective::MgScaleAware {
            return Err(Error::Config(
                "w-input architectures are only used by the scale-aware objective".into(),
            ));
        }
        if self.auto_w {
            if self.eval_every == 0 {
                return Err(Error::Config(
                    "the automatic w controller needs periodic evaluation (eval_every > 0)".into(),
                ));
            }
            if !(self.auto_w_gamma > 0.0) {
                return Err(Error::Config("auto-w step size must be positive".into()));
            }
            if !(0.0..1.0).contains(&self.auto_w_rho) {
                return Err(Error::Config("auto-w smoothing must be in [0, 1)".into()));
            }
        }
        if self.flow_eval_steps < 1 {
            return Err(Error::Config("flow_eval_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drop `c` to the empty condition with probability `lambda`.
pub fn drop_condition<R: Rng>(c: usize, lambda: f64, rng: &mut R) -> Result<Cond> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidRange(format!(
            "drop probability {lambda} not in [0, 1]"
        )));
    }
    if rng.gen::<f64>() < lambda {
        Ok(Cond::Empty)
    } else {
        Ok(Cond::Class(c))
    }
}

/// Guidance-corrected noise target: `eps + w (pred_c - pred_null)`. The
/// predictions come from the frozen teacher, so the result is a constant.
pub fn mg_target(eps: Vec2, pred_c: Vec2, pred_null: Vec2, w: f64) -> Vec2 {
    eps + w * (pred_c - pred_null)
}

/// Flow-form counterpart with the ground-truth velocity in place of the noise.
pub fn mg_flow_target(u: Vec2, pred_c: Vec2, pred_null: Vec2, w: f64) -> Vec2 {
    u + w * (pred_c - pred_null)
}

/// Scale-aware target: the teacher is queried at `(c, w=1)` and `(null, w=0)`
/// and the sampled scale `w` stretches the difference.
pub fn scale_aware_target(eps: Vec2, pred_at_w1: Vec2, pred_at_w0: Vec2, w: f64) -> Vec2 {
    eps + w * (pred_at_w1 - pred_at_w0)
}

/// Uniform class-average stand-in for the unconditional prediction, used by
/// the empty-class-free objective. This estimator is knowingly biased: the
/// exact unconditional score is a responsibility-weighted mixture, not a
/// uniform average of predictions.
pub fn total_prob_uncond(preds: &[Vec2]) -> Result<Vec2> {
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    let sum = preds.iter().fold(Vec2::ZERO, |a, &p| a + p);
    Ok(sum * (1.0 / preds.len() as f64))
}

/// Feedback controller for the guidance weight: nudged up by `gamma` when the
/// evaluation metric worsens, down otherwise, smoothed by `rho`, clamped to
/// `[0, w_max]`. Starts at `w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoWController {
    pub w: f64,
    pub gamma: f64,
    pub rho: f64,
    pub w_max: f64,
    pub prev_metric: Option<f64>,
    pub history: Vec<f64>,
}

impl AutoWController {
    pub fn new(gamma: f64, rho: f64, w_max: f64) -> Result<AutoWController> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidRange(format!(
                "controller step size {gamma} must be > 0"
            )));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidRange(format!(
                "smoothing {rho} must be in [0, 1)"
            )));
        }
        if !(w_max >= 0.0) {
            return Err(Error::InvalidRange(format!(
                "upper bound {w_max} must be >= 0"
            )));
        }
        Ok(AutoWController {
            w: 0.0,
            gamma,
            rho,
            w_max,
            prev_metric: None,
            history: Vec::new(),
        })
    }

    /// Feed one lower-is-better metric value; returns the new weight. The
    /// first call only records a baseline.
    pub fn update(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFiniteMetric(metric));
        }
        self.history.push(metric);
        if let Some(prev) = self.prev_metric {
            let candidate = if metric > prev {
                self.w + self.gamma
            } else {
                self.w - self.gamma
            };
            self.w = (self.rho * self.w + (1.0 - self.rho) * candidate).clamp(0.0, self.w_max);
        }
        self.prev_metric = Some(metric);
        Ok(self.w)
    }
}

/// AdamW first and second moments, shape-congruent with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> AdamMoments {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One decoupled-weight-decay adaptive update with bias correction. `step` is
/// the 1-based update count. Parameters and moments are rounded through f32
/// afterwards so checkpoints round-trip bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps_opt: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "params {} / grads {} / moments {} x {}",
            n,
            grads.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidRange(
            "optimizer step count must be 1-based".into(),
        ));
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..n {
        params[i] *= 1.0 - lr * weight_decay;
        moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * grads[i];
        moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps_opt);
    }
    round_to_f32(params);
    round_to_f32(&mut moments.m);
    round_to_f32(&mut moments.v);
    Ok(())
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub online: PredictorParams,
    pub ema: PredictorParams,
    pub moments: AdamMoments,
    pub step: u64,
    pub auto_w: AutoWController,
    pub data_rng: ChaCha8Rng,
    pub drop_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let mut init_rng = substream(cfg.seed, stream::INIT);
        let online = PredictorParams::init(cfg.arch, &mut init_rng)?;
        let ema = online.clone();
        let n = online.num_params();
        Ok(TrainState {
            online,
            ema,
            moments: AdamMoments::zeros(n),
            step: 0,
            auto_w: AutoWController::new(cfg.auto_w_gamma, cfg.auto_w_rho, cfg.auto_w_max)?,
            data_rng: substream(cfg.seed, stream::DATA),
            drop_rng: substream(cfg.seed, stream::DROP),
        })
    }
}

/// One row of the periodic-evaluation metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub loss: f64,
    pub w: f64,
    pub energy_distance: f64,
    pub outlier_fraction: f64,
    pub condition_accuracy: f64,
    pub wall_time_s: f64,
}

/// Owns the loop: config, dataset, schedule, and mutable state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dataset: LabeledMixture,
    pub schedule: NoiseSchedule,
    pub state: TrainState,
    started: Instant,
    last_loss: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: LabeledMixture) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.arch.num_classes != dataset.num_classes() {
            return Err(Error::Config(format!(
                "architecture expects {} classes but the dataset has {}",
                cfg.arch.num_classes,
                dataset.num_classes()
            )));
        }
        let schedule = NoiseSchedule::linear(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
        let state = TrainState::init(&cfg)?;
        Ok(Trainer {
            cfg,
            dataset,
            schedule,
            state,
            started: Instant::now(),
            last_loss: f64::NAN,
        })
    }

    /// Continue from a loaded state (e.g. a checkpoint).
    pub fn resume(cfg: TrainConfig, dataset: LabeledMixture, state: TrainState) -> Result<Trainer> {
        cfg.validate()?;
        if *state.online.arch() != cfg.arch {
            return Err(Error::ArchitectureMismatch(
                "checkpoint architecture differs from the configured one".into(),
            ));
        }
        let schedule = NoiseSchedule::linear(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
        Ok(Trainer {
            cfg,
            dataset,
            schedule,
            state,
            started: Instant::now(),
            last_loss: f64::NAN,
        })
    }

    /// Guidance weight in effect for target construction.
    pub fn effective_w(&self) -> f64 {
        if self.cfg.auto_w {
            self.state.auto_w.w
        } else {
            self.cfg.w
        }
    }

    /// Draw one batch and its constant targets. Exposed for the stop-gradient
    /// and degeneracy tests; `train_step` is the normal entry point.
    pub fn next_batch(&mut self) -> Result<(Vec<NetInput>, Vec<Vec2>)> {
        let cfg = &self.cfg;
        let w_eff = if cfg.auto_w {
            self.state.auto_w.w
        } else {
            cfg.w
        };
        let teacher: &PredictorParams = if cfg.online_teacher {
            &self.state.online
        } else {
            &self.state.ema
        };
        let data_rng = &mut self.state.data_rng;
        let drop_rng = &mut self.state.drop_rng;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x0, c) = self.dataset.sample_pair(data_rng);
            let eps = gauss2(data_rng);
            let (x_t, t_net, base) = match cfg.process {
                ProcessKind::Vp => {
                    let t = data_rng.gen_range(0..cfg.t_steps);
                    let x_t = self.schedule.forward_marginal(x0, eps, t)?;
                    (x_t, t as f64 / cfg.t_steps as f64, eps)
                }
                ProcessKind::OtFlow => {
                    let t = FlowTime::new(data_rng.gen::<f64>())?;
                    (
                        ot_interpolate(x0, eps, t),
                        t.value(),
                        ground_truth_flow(x0, eps),
                    )
                }
            };
            let (input, target) = match cfg.objective {
                Objective::Vanilla => {
                    let cond = drop_condition(c, cfg.lambda, drop_rng)?;
                    (
                        NetInput {
                            x: x_t,
                            t: t_net,
                            cond,
                            w: None,
                        },
                        base,
                    )
                }
                Objective::Mg => {
                    let cond = drop_condition(c, cfg.lambda, drop_rng)?;
                    let target = if w_eff == 0.0 || cond == Cond::Empty {
                        base
                    } else {
                        let pc = teacher.forward(&NetInput {
                            x: x_t,
                            t: t_net,
                            cond: Cond::Class(c),
                            w: None,
                        })?;
                        let pn = teacher.forward(&NetInput {
                            x: x_t,
                            t: t_net,
                            cond: Cond::Empty,
                            w: None,
                        })?;
                        mg_target(base, pc, pn, w_eff)
                    };
                    (
                        NetInput {
                            x: x_t,
                            t: t_net,
                            cond,
                            w: None,
                        },
                        target,
                    )
                }
                Objective::MgScaleAware => {
                    let cond = drop_condition(c, cfg.lambda, drop_rng)?;
                    let ws = cfg.w_lo + drop_rng.gen::<f64>() * (cfg.w_hi - cfg.w_lo);
                    let target = if ws == 0.0 || cond == Cond::Empty {
                        base
                    } else {
                        let p1 = teacher.forward(&NetInput {
                            x: x_t,
                            t: t_net,
                            cond: Cond::Class(c),
                            w: Some(1.0),
                        })?;
                        let p0 = teacher.forward(&NetInput {
                            x: x_t,
                            t: t_net,
                            cond: Cond::Empty,
                            w: Some(0.0),
                        })?;
                        scale_aware_target(base, p1, p0, ws)
                    };
                    (
                        NetInput {
                            x: x_t,
                            t: t_net,
                            cond,
                            w: Some(ws),
                        },
                        target,
                    )
                }
                Objective::MgNoEmpty => {
                    let target = if w_eff == 0.0 {
                        base
                    } else {
                        let preds = (0..self.dataset.num_classes())
                            .map(|k| {
                                teacher.forward(&NetInput {
                                    x: x_t,
                                    t: t_net,
                                    cond: Cond::Class(k),
                                    w: None,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let pn = total_prob_uncond(&preds)?;
                        mg_target(base, preds[c], pn, w_eff)
                    };
                    (
                        NetInput {
                            x: x_t,
                            t: t_net,
                            cond: Cond::Class(c),
                            w: None,
                        },
                        target,
                    )
                }
            };
            batch.push(input);
            targets.push(target);
        }
        Ok((batch, targets))
    }

    /// One full training iteration; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let (batch, targets) = self.next_batch()?;
        let (loss, grads) = self.state.online.loss_and_grad(&batch, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NumericDivergence {
                step: self.state.step,
            });
        }
        adamw_step(
            self.state.online.data_mut(),
            grads.data(),
            &mut self.state.moments,
            self.state.step + 1,
            self.cfg.lr,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps_opt,
            self.cfg.weight_decay,
        )?;
        let TrainState { online, ema, .. } = &mut self.state;
        ema.ema_update(online, self.cfg.ema_decay)?;
        self.state.step += 1;
        self.last_loss = loss;
        Ok(loss)
    }

    /// Sample from the EMA model and score against fresh ground truth; feeds
    /// the automatic w controller when enabled.
    pub fn evaluate(&mut self) -> Result<EvalRecord> {
        let cfg = &self.cfg;
        let n = cfg.eval_samples;
        let k = self.dataset.num_classes();
        let eval_seed: u64 = substream(cfg.seed, stream::TRAIN_EVAL + self.state.step).gen();
        let w_eff = self.effective_w();
        let w_in = cfg.arch.w_input.then_some(w_eff);
        // Chains are assigned classes round-robin; per-class chunks keep each
        // chain's substream tied to its index.
        let mut samples = Vec::with_capacity(n);
        let mut requested = Vec::with_capacity(n);
        let mut correct_weighted = 0.0;
        for class in 0..k {
            let count = n / k + usize::from(class < n % k);
            let run = match cfg.process {
                ProcessKind::Vp => {
                    let pred = NetEps {
                        params: &self.state.ema,
                        t_steps: cfg.t_steps,
                        w_in,
                    };
                    sample_ddpm(
                        &pred,
                        &self.schedule,
                        count,
                        Cond::Class(class),
                        Guidance::None,
                        eval_seed.wrapping_add(class as u64),
                        false,
                    )?
                }
                ProcessKind::OtFlow => {
                    let pred = NetFlow {
                        params: &self.state.ema,
                        w_in,
                    };
                    sample_flow_euler(
                        &pred,
                        count,
                        Cond::Class(class),
                        cfg.flow_eval_steps,
                        Guidance::None,
                        eval_seed.wrapping_add(class as u64),
                        false,
                    )?
                }
            };
            if count > 0 {
                correct_weighted +=
                    condition_accuracy(&run.samples, class, &self.dataset)? * count as f64;
            }
            samples.extend(run.samples);
            requested.extend(std::iter::repeat(class).take(count));
        }
        let mut truth_rng = substream(eval_seed, stream::GROUND_TRUTH);
        let truth: Vec<Vec2> = requested
            .iter()
            .map(|&c| self.dataset.sample_class(c, &mut truth_rng))
            .collect::<Result<_>>()?;
        let ed = energy_distance(&samples, &truth)?;
        let of = outlier_fraction(&samples, &self.dataset, None, 3.0)?;
        let ca = if samples.is_empty() {
            0.0
        } else {
            correct_weighted / samples.len() as f64
        };
        if self.cfg.auto_w {
            self.state.auto_w.update(ed)?;
        }
        Ok(EvalRecord {
            step: self.state.step,
            loss: self.last_loss,
            w: w_eff,
            energy_distance: ed,
            outlier_fraction: of,
            condition_accuracy: ca,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Drive training to `total_steps`, invoking `on_eval` at the configured
    /// cadence (and at the final step).
    pub fn run(&mut self, mut on_eval: impl FnMut(&EvalRecord)) -> Result<()> {
        while self.state.step < self.cfg.total_steps {
            self.train_step()?;
            let due = self.cfg.eval_every > 0
                && (self.state.step % self.cfg.eval_every == 0
                    || self.state.step == self.cfg.total_steps);
            if due {
                let record = self.evaluate()?;
                on_eval(&record);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGLABCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn push_f32_tensor(buf: &mut Vec<u8>, data: &[f64]) {
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn push_rng(buf: &mut Vec<u8>, rng: &ChaCha8Rng) {
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedCheckpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_tensor(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self.take(32)?.try_into().unwrap();
        let stream = self.u64()?;
        let word_pos = self.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Serialize the full state: magic, version, architecture, step, the four
/// parameter/moment tensors as little-endian f32, the controller, both RNG
/// states, and a trailing 64-bit checksum.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let arch = state.online.arch();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        arch.hidden_layers,
        arch.hidden_width,
        arch.time_freqs,
        arch.num_classes,
        arch.embed_dim,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(arch.w_input as u8);
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&(state.online.num_params() as u64).to_le_bytes());
    push_f32_tensor(&mut buf, state.online.data());
    push_f32_tensor(&mut buf, state.ema.data());
    push_f32_tensor(&mut buf, &state.moments.m);
    push_f32_tensor(&mut buf, &state.moments.v);
    let c = &state.auto_w;
    for v in [c.w, c.gamma, c.rho, c.w_max] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(c.prev_metric.is_some() as u8);
    buf.extend_from_slice(&c.prev_metric.unwrap_or(0.0).to_le_bytes());
    buf.extend_from_slice(&(c.history.len() as u64).to_le_bytes());
    for &h in &c.history {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    push_rng(&mut buf, &state.data_rng);
    push_rng(&mut buf, &state.drop_rng);
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a checkpoint back; bit-exact inverse of `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 12 {
        return Err(Error::MalformedCheckpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch = ArchDescriptor {
        hidden_layers: r.u32()? as usize,
        hidden_width: r.u32()? as usize,
        time_freqs: r.u32()? as usize,
        num_classes: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        w_input: r.u8()? != 0,
    };
    arch.validate()?;
    let step = r.u64()?;
    let n = r.u64()? as usize;
    let online = PredictorParams::from_flat(arch, r.f32_tensor(n)?)?;
    let ema = PredictorParams::from_flat(arch, r.f32_tensor(n)?)?;
    let moments = AdamMoments {
        m: r.f32_tensor(n)?,
        v: r.f32_tensor(n)?,
    };
    let w = r.f64()?;
    let gamma = r.f64()?;
    let rho = r.f64()?;
    let w_max = r.f64()?;
    let has_prev = r.u8()? != 0;
    let prev_raw = r.f64()?;
    let hist_len = r.u64()? as usize;
    let mut history = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        history.push(r.f64()?);
    }
    let auto_w = AutoWController {
        w,
        gamma,
        rho,
        w_max,
        prev_metric: has_prev.then_some(prev_raw),
        history,
    };
    let data_rng = r.rng()?;
    let drop_rng = r.rng()?;
    if r.pos != body.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes".into()));
    }
    Ok(TrainState {
        online,
        ema,
        moments,
        step,
        auto_w,
        data_rng,
        drop_rng,
    })
}
