//! Reverse-time generation: DDPM ancestral sampling for the VP process and
//! Euler / Euler-Maruyama integration for flow models, with optional
//! inference-time CFG combination, trajectory capture, and exact NFE
//! accounting.
//!
//! Each chain owns a ChaCha substream derived from `(seed, chain index)`, so
//! runs are reproducible and different variants can share initial noise.

use crate::error::{Error, Result};
use crate::mixture::LabeledMixture;
use crate::net::{Cond, NetInput, PredictorParams};
use crate::oracle::DiffusedMixture;
use crate::rngutil::{gauss2, stream, substream};
use crate::schedule::{FlowTime, NoiseSchedule};
use crate::vec2::Vec2;
use std::cell::Cell;

/// Inference-time guidance mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    None,
    Cfg { w: f64 },
}

/// Noise predictor over the discrete VP chain.
pub trait EpsPredictor {
    fn eps(&self, x: Vec2, t: usize, cond: Cond) -> Result<Vec2>;
}

/// Flow predictor over continuous time.
pub trait FlowPredictor {
    fn flow(&self, x: Vec2, t: f64, cond: Cond) -> Result<Vec2>;
}

/// Learned noise predictor; normalizes the step index to `t / T` for the net.
pub struct NetEps<'a> {
    pub params: &'a PredictorParams,
    pub t_steps: usize,
    /// Guidance-scale input for scale-aware architectures.
    pub w_in: Option<f64>,
}

impl EpsPredictor for NetEps<'_> {
    fn eps(&self, x: Vec2, t: usize, cond: Cond) -> Result<Vec2> {
        self.params.forward(&NetInput {
            x,
            t: t as f64 / self.t_steps as f64,
            cond,
            w: self.w_in,
        })
    }
}

/// Learned flow predictor.
pub struct NetFlow<'a> {
    pub params: &'a PredictorParams,
    pub w_in: Option<f64>,
}

impl FlowPredictor for NetFlow<'_> {
    fn flow(&self, x: Vec2, t: f64, cond: Cond) -> Result<Vec2> {
        self.params.forward(&NetInput {
            x,
            t,
            cond,
            w: self.w_in,
        })
    }
}

/// Bayes-optimal noise predictor backed by the analytic oracle, with the
/// diffused mixture precomputed at every step of the schedule.
pub struct OracleEps {
    diffused: Vec<DiffusedMixture>,
}

impl OracleEps {
    pub fn new(mixture: &LabeledMixture, schedule: &NoiseSchedule) -> Result<OracleEps> {
        let diffused = (0..schedule.len())
            .map(|t| DiffusedMixture::vp(mixture, schedule, t))
            .collect::<Result<_>>()?;
        Ok(OracleEps { diffused })
    }
}

impl EpsPredictor for OracleEps {
    fn eps(&self, x: Vec2, t: usize, cond: Cond) -> Result<Vec2> {
        let dm = self.diffused.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            len: self.diffused.len(),
        })?;
        let c = match cond {
            Cond::Class(c) => Some(c),
            Cond::Empty => None,
        };
        dm.bayes_eps(x, c)
    }
}

/// Bayes-optimal flow predictor. Times are clamped slightly inside `(0, 1)`
/// to keep away from the interpolant endpoints.
pub struct OracleFlow {
    mixture: LabeledMixture,
}

const FLOW_T_CLAMP: f64 = 1e-6;

impl OracleFlow {
    pub fn new(mixture: &LabeledMixture) -> OracleFlow {
        OracleFlow {
            mixture: mixture.clone(),
        }
    }
}

impl FlowPredictor for OracleFlow {
    fn flow(&self, x: Vec2, t: f64, cond: Cond) -> Result<Vec2> {
        let t = t.clamp(FLOW_T_CLAMP, 1.0 - FLOW_T_CLAMP);
        let dm = DiffusedMixture::ot(&self.mixture, FlowTime::new(t)?)?;
        let c = match cond {
            Cond::Class(c) => Some(c),
            Cond::Empty => None,
        };
        dm.bayes_flow(x, c)
    }
}

/// Call-counting wrapper used to verify the sampler's NFE bookkeeping.
pub struct CountingEps<'a> {
    pub inner: &'a dyn EpsPredictor,
    pub calls: Cell<u64>,
}

impl EpsPredictor for CountingEps<'_> {
    fn eps(&self, x: Vec2, t: usize, cond: Cond) -> Result<Vec2> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eps(x, t, cond)
    }
}

/// Call-counting wrapper for flow predictors.
pub struct CountingFlow<'a> {
    pub inner: &'a dyn FlowPredictor,
    pub calls: Cell<u64>,
}

impl FlowPredictor for CountingFlow<'_> {
    fn flow(&self, x: Vec2, t: f64, cond: Cond) -> Result<Vec2> {
        self.calls.set(self.calls.get() + 1);
        self.inner.flow(x, t, cond)
    }
}

/// CFG combination: `pred_c + w (pred_c - pred_null)`.
pub fn cfg_combine(pred_c: Vec2, pred_null: Vec2, w_infer: f64) -> Vec2 {
    pred_c + w_infer * (pred_c - pred_null)
}

/// One completed sampling run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub samples: Vec<Vec2>,
    /// `(time, position)` per step, `steps + 1` entries per chain, when recorded.
    pub trajectories: Option<Vec<Vec<(f64, Vec2)>>>,
    pub nfe: u64,
    pub guidance: Guidance,
    pub steps: usize,
    pub seed: u64,
    /// `"oracle"` or a checkpoint identifier.
    pub source: String,
}

struct RunBuilder {
    samples: Vec<Vec2>,
    trajectories: Option<Vec<Vec<(f64, Vec2)>>>,
    nfe: u64,
}

impl RunBuilder {
    fn new(n: usize, record: bool) -> RunBuilder {
        RunBuilder {
            samples: Vec::with_capacity(n),
            trajectories: record.then(|| Vec::with_capacity(n)),
            nfe: 0,
        }
    }
}

/// Ancestral sampling over the full schedule (`steps = T`).
pub fn sample_ddpm(
    pred: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    n: usize,
    cond: Cond,
    guidance: Guidance,
    seed: u64,
    record_traj: bool,
) -> Result<SampleRun> {
    let t_steps = schedule.len();
    let mut run = RunBuilder::new(n, record_traj);
    for chain in 0..n {
        let mut rng = substream(seed, stream::SAMPLER_CHAIN + chain as u64);
        let mut x = gauss2(&mut rng);
        let mut traj = record_traj.then(|| vec![(1.0, x)]);
        for t in (0..t_steps).rev() {
            let eps_hat = evaluate_eps(pred, x, t, cond, guidance, &mut run.nfe)?;
            let noise = if t > 0 { gauss2(&mut rng) } else { Vec2::ZERO };
            x = schedule.ddpm_step(x, eps_hat, t, noise)?;
            if let Some(tr) = traj.as_mut() {
                tr.push((t as f64 / t_steps as f64, x));
            }
        }
        run.samples.push(x);
        if let (Some(trs), Some(tr)) = (run.trajectories.as_mut(), traj) {
            trs.push(tr);
        }
    }
    Ok(SampleRun {
        samples: run.samples,
        trajectories: run.trajectories,
        nfe: run.nfe,
        guidance,
        steps: t_steps,
        seed,
        source: String::new(),
    })
}

fn evaluate_eps(
    pred: &dyn EpsPredictor,
    x: Vec2,
    t: usize,
    cond: Cond,
    guidance: Guidance,
    nfe: &mut u64,
) -> Result<Vec2> {
    match guidance {
        Guidance::None => {
            *nfe += 1;
            pred.eps(x, t, cond)
        }
        Guidance::Cfg { w } => {
            let pred_c = pred.eps(x, t, cond)?;
            let pred_null = pred.eps(x, t, Cond::Empty)?;
            *nfe += 2;
            Ok(cfg_combine(pred_c, pred_null, w))
        }
    }
}

fn evaluate_flow(
    pred: &dyn FlowPredictor,
    x: Vec2,
    t: f64,
    cond: Cond,
    guidance: Guidance,
    nfe: &mut u64,
) -> Result<Vec2> {
    match guidance {
        Guidance::None => {
            *nfe += 1;
            pred.flow(x, t, cond)
        }
        Guidance::Cfg { w } => {
            let pred_c = pred.flow(x, t, cond)?;
            let pred_null = pred.flow(x, t, Cond::Empty)?;
            *nfe += 2;
            Ok(cfg_combine(pred_c, pred_null, w))
        }
    }
}

/// Deterministic Euler integration of the flow, noise toward data:
/// `x <- x + ds * u` with `s = 1 - t` running from 0 to 1.
pub fn sample_flow_euler(
    pred: &dyn FlowPredictor,
    n: usize,
    cond: Cond,
    steps: usize,
    guidance: Guidance,
    seed: u64,
    record_traj: bool,
) -> Result<SampleRun> {
    sample_flow_impl(
        pred,
        n,
        cond,
        steps,
        0.0,
        guidance,
        seed,
        record_traj,
        false,
    )
}

/// Euler-Maruyama integration: the Euler drift plus `sqrt(ds) * noise_scale`
/// Gaussian kicks, suppressed on the final step.
pub fn sample_flow_em(
    pred: &dyn FlowPredictor,
    n: usize,
    cond: Cond,
    steps: usize,
    noise_scale: f64,
    guidance: Guidance,
    seed: u64,
    record_traj: bool,
) -> Result<SampleRun> {
    if noise_scale < 0.0 {
        return Err(Error::InvalidRange(format!(
            "noise scale must be nonnegative, got {noise_scale}"
        )));
    }
    sample_flow_impl(
        pred,
        n,
        cond,
        steps,
        noise_scale,
        guidance,
        seed,
        record_traj,
        true,
    )
}

#[allow(clippy::too_many_arguments)]
fn sample_flow_impl(
    pred: &dyn FlowPredictor,
    n: usize,
    cond: Cond,
    steps: usize,
    noise_scale: f64,
    guidance: Guidance,
    seed: u64,
    record_traj: bool,
    stochastic: bool,
) -> Result<SampleRun> {
    if steps < 1 {
        return Err(Error::InvalidRange(
            "flow sampler needs at least one step".into(),
        ));
    }
    let ds = 1.0 / steps as f64;
    let mut run = RunBuilder::new(n, record_traj);
    for chain in 0..n {
        let mut rng = substream(seed, stream::SAMPLER_CHAIN + chain as u64);
        let mut x = gauss2(&mut rng);
        let mut traj = record_traj.then(|| vec![(1.0, x)]);
        for k in 0..steps {
            let t = 1.0 - k as f64 * ds;
            let u = evaluate_flow(pred, x, t, cond, guidance, &mut run.nfe)?;
            x += ds * u;
            if stochastic && k + 1 < steps {
                let kick = gauss2(&mut rng);
                x += (ds.sqrt() * noise_scale) * kick;
            }
            if let Some(tr) = traj.as_mut() {
                tr.push((1.0 - (k + 1) as f64 * ds, x));
            }
        }
        run.samples.push(x);
        if let (Some(trs), Some(tr)) = (run.trajectories.as_mut(), traj) {
            trs.push(tr);
        }
    }
    Ok(SampleRun {
        samples: run.samples,
        trajectories: run.trajectories,
        nfe: run.nfe,
        guidance,
        steps,
        seed,
        source: String::new(),
    })
}
