//! The learnable conditional predictor: a small feed-forward network over
//! `(x, t, class[, w])` with sinusoidal time features, a class-embedding table
//! (one extra row for the empty class), an optional guidance-scale projection,
//! and analytic reverse-mode gradients.
//!
//! Parameters live in one flat `f64` buffer addressed through a layout derived
//! from the architecture descriptor. Every stored value is kept exactly
//! representable as an `f32` (updates round through `f32`), so the 32-bit
//! checkpoint format round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::vec2::Vec2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Condition fed to the predictor: a class label or the empty class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    Empty,
}

/// Architecture descriptor. `w_input` controls whether the network accepts a
/// guidance-scale input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub time_freqs: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub w_input: bool,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 1
            || self.hidden_width < 1
            || self.time_freqs < 1
            || self.num_classes < 1
            || self.embed_dim < 1
        {
            return Err(Error::InvalidArchitecture(format!("{self:?}")));
        }
        Ok(())
    }

    /// Width of the concatenated input vector.
    pub fn input_dim(&self) -> usize {
        2 + 2 * self.time_freqs + self.embed_dim + if self.w_input { self.embed_dim } else { 0 }
    }

    /// Rows in the class-embedding table; the last row is the empty class.
    pub fn embed_rows(&self) -> usize {
        self.num_classes + 1
    }
}

/// Tensor offsets into the flat parameter buffer, in declaration order:
/// class embedding, optional w projection (weight, bias), hidden layers
/// (weight, bias each), output layer (weight, bias).
#[derive(Debug, Clone)]
struct Layout {
    class_embed: (usize, usize),
    w_proj_w: (usize, usize),
    w_proj_b: (usize, usize),
    /// Per hidden layer: (weight offset, weight len, bias offset, bias len).
    layers: Vec<(usize, usize, usize, usize)>,
    out_w: (usize, usize),
    out_b: (usize, usize),
    total: usize,
}

impl Layout {
    fn new(arch: &ArchDescriptor) -> Layout {
        let mut off = 0;
        let mut take = |len: usize| {
            let start = off;
            off += len;
            (start, len)
        };
        let class_embed = take(arch.embed_rows() * arch.embed_dim);
        let (w_proj_w, w_proj_b) = if arch.w_input {
            (take(arch.embed_dim), take(arch.embed_dim))
        } else {
            (take(0), take(0))
        };
        let mut layers = Vec::with_capacity(arch.hidden_layers);
        let mut fan_in = arch.input_dim();
        for _ in 0..arch.hidden_layers {
            let w = take(arch.hidden_width * fan_in);
            let b = take(arch.hidden_width);
            layers.push((w.0, w.1, b.0, b.1));
            fan_in = arch.hidden_width;
        }
        let out_w = take(2 * arch.hidden_width);
        let out_b = take(2);
        Layout {
            class_embed,
            w_proj_w,
            w_proj_b,
            layers,
            out_w,
            out_b,
            total: off,
        }
    }
}

/// Snap every entry to the nearest `f32`; stored parameters stay exactly
/// representable in the 32-bit checkpoint format.
pub fn round_to_f32(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Full parameter set for one predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    arch: ArchDescriptor,
    data: Vec<f64>,
}

/// Gradients, shape-congruent with a parameter set.
#[derive(Debug, Clone)]
pub struct GradientSet {
    arch: ArchDescriptor,
    data: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(arch: ArchDescriptor) -> GradientSet {
        let layout = Layout::new(&arch);
        GradientSet {
            arch,
            data: vec![0.0; layout.total],
        }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn dsilu(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// One evaluation request for the predictor.
#[derive(Debug, Clone, Copy)]
pub struct NetInput {
    pub x: Vec2,
    /// Normalized time in [0, 1].
    pub t: f64,
    pub cond: Cond,
    /// Present iff the architecture has a w-input.
    pub w: Option<f64>,
}

struct ForwardTrace {
    input: Vec<f64>,
    /// Pre-activations per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Activations per hidden layer.
    act: Vec<Vec<f64>>,
    out: Vec2,
}

impl PredictorParams {
    /// Initialize parameters: hidden weights with fan-in scaling, zero biases,
    /// zero output layer, small-normal embeddings (std 0.02).
    pub fn init<R: Rng>(arch: ArchDescriptor, rng: &mut R) -> Result<PredictorParams> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut data = vec![0.0; layout.total];
        for i in layout.class_embed.0..layout.class_embed.0 + layout.class_embed.1 {
            data[i] = 0.02 * rng.sample::<f64, _>(StandardNormal);
        }
        for i in layout.w_proj_w.0..layout.w_proj_w.0 + layout.w_proj_w.1 {
            data[i] = 0.02 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut fan_in = arch.input_dim();
        for &(w_off, w_len, _, _) in &layout.layers {
            let std = 1.0 / (fan_in as f64).sqrt();
            for i in w_off..w_off + w_len {
                data[i] = std * rng.sample::<f64, _>(StandardNormal);
            }
            fan_in = arch.hidden_width;
        }
        // Output layer stays zero: the freshly initialized predictor is the
        // constant zero field.
        round_to_f32(&mut data);
        Ok(PredictorParams { arch, data })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Rebuild from a flat buffer (checkpoint load).
    pub fn from_flat(arch: ArchDescriptor, data: Vec<f64>) -> Result<PredictorParams> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "parameter buffer has {} entries, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(PredictorParams { arch, data })
    }

    fn embed_row(&self, cond: Cond) -> Result<usize> {
        match cond {
            Cond::Class(c) if c < self.arch.num_classes => Ok(c),
            Cond::Class(c) => Err(Error::UnknownClass {
                class: c,
                num_classes: self.arch.num_classes,
            }),
            Cond::Empty => Ok(self.arch.num_classes),
        }
    }

    fn build_input(&self, layout: &Layout, inp: &NetInput) -> Result<Vec<f64>> {
        match (self.arch.w_input, inp.w) {
            (true, None) => {
                return Err(Error::ArchitectureMismatch(
                    "architecture expects a w-input but none was given".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::ArchitectureMismatch(
                    "architecture has no w-input but one was given".into(),
                ))
            }
            _ => {}
        }
        let row = self.embed_row(inp.cond)?;
        let mut v = Vec::with_capacity(self.arch.input_dim());
        v.push(inp.x.x);
        v.push(inp.x.y);
        // Log-spaced sinusoidal time features.
        for k in 0..self.arch.time_freqs {
            let omega = std::f64::consts::TAU * (1u64 << k) as f64;
            v.push((omega * inp.t).sin());
            v.push((omega * inp.t).cos());
        }
        let e = self.arch.embed_dim;
        let emb = &self.data[layout.class_embed.0 + row * e..layout.class_embed.0 + (row + 1) * e];
        v.extend_from_slice(emb);
        if let Some(w) = inp.w {
            let pw = &self.data[layout.w_proj_w.0..layout.w_proj_w.0 + e];
            let pb = &self.data[layout.w_proj_b.0..layout.w_proj_b.0 + e];
            for i in 0..e {
                v.push(pw[i] * w + pb[i]);
            }
        }
        Ok(v)
    }

    fn forward_trace(&self, layout: &Layout, inp: &NetInput) -> Result<ForwardTrace> {
        let input = self.build_input(layout, inp)?;
        let h = self.arch.hidden_width;
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden_layers);
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden_layers);
        for (li, &(w_off, _, b_off, _)) in layout.layers.iter().enumerate() {
            let prev: &[f64] = if li == 0 { &input } else { &act[li - 1] };
            let fan_in = prev.len();
            let mut z = vec![0.0; h];
            for (row, zr) in z.iter_mut().enumerate() {
                let w_row = &self.data[w_off + row * fan_in..w_off + (row + 1) * fan_in];
                let mut acc = self.data[b_off + row];
                for (wi, pi) in w_row.iter().zip(prev) {
                    acc += wi * pi;
                }
                *zr = acc;
            }
            let a: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            pre.push(z);
            act.push(a);
        }
        let last = act.last().unwrap();
        let mut out = [0.0; 2];
        for (row, o) in out.iter_mut().enumerate() {
            let w_row = &self.data[layout.out_w.0 + row * h..layout.out_w.0 + (row + 1) * h];
            let mut acc = self.data[layout.out_b.0 + row];
            for (wi, ai) in w_row.iter().zip(last) {
                acc += wi * ai;
            }
            *o = acc;
        }
        Ok(ForwardTrace {
            input,
            pre,
            act,
            out: Vec2::new(out[0], out[1]),
        })
    }

    /// Deterministic forward evaluation.
    pub fn forward(&self, inp: &NetInput) -> Result<Vec2> {
        let layout = Layout::new(&self.arch);
        Ok(self.forward_trace(&layout, inp)?.out)
    }

    /// Mean-squared-error loss over a batch with constant targets, plus the
    /// exact gradient with respect to every parameter. Targets never propagate
    /// gradient (the stop-gradient contract): they enter only as constants.
    pub fn loss_and_grad(
        &self,
        batch: &[NetInput],
        targets: &[Vec2],
    ) -> Result<(f64, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if batch.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} inputs but {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let layout = Layout::new(&self.arch);
        let mut grads = GradientSet::zeros(self.arch);
        let g = &mut grads.data;
        let h = self.arch.hidden_width;
        let e = self.arch.embed_dim;
        let inv_norm = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (inp, target) in batch.iter().zip(targets) {
            let trace = self.forward_trace(&layout, inp)?;
            let diff = trace.out - *target;
            loss += 0.5 * diff.norm_sq() * inv_norm;
            let d_out = [diff.x * inv_norm, diff.y * inv_norm];
            // Output layer.
            let last = trace.act.last().unwrap();
            let mut delta = vec![0.0; h];
            for row in 0..2 {
                for col in 0..h {
                    g[layout.out_w.0 + row * h + col] += d_out[row] * last[col];
                    delta[col] += self.data[layout.out_w.0 + row * h + col] * d_out[row];
                }
                g[layout.out_b.0 + row] += d_out[row];
            }
            // Hidden layers, back to front.
            for (li, &(w_off, _, b_off, _)) in layout.layers.iter().enumerate().rev() {
                let z = &trace.pre[li];
                let below: &[f64] = if li == 0 {
                    &trace.input
                } else {
                    &trace.act[li - 1]
                };
                let fan_in = below.len();
                let mut delta_z = vec![0.0; h];
                for row in 0..h {
                    delta_z[row] = delta[row] * dsilu(z[row]);
                }
                let mut delta_below = vec![0.0; fan_in];
                for row in 0..h {
                    let dz = delta_z[row];
                    let w_row_off = w_off + row * fan_in;
                    for col in 0..fan_in {
                        g[w_row_off + col] += dz * below[col];
                        delta_below[col] += self.data[w_row_off + col] * dz;
                    }
                    g[b_off + row] += dz;
                }
                delta = delta_below;
            }
            // `delta` is now the gradient on the concatenated input vector.
            let emb_start = 2 + 2 * self.arch.time_freqs;
            let row = self.embed_row(inp.cond)?;
            for i in 0..e {
                g[layout.class_embed.0 + row * e + i] += delta[emb_start + i];
            }
            if let Some(w) = inp.w {
                let w_start = emb_start + e;
                for i in 0..e {
                    g[layout.w_proj_w.0 + i] += delta[w_start + i] * w;
                    g[layout.w_proj_b.0 + i] += delta[w_start + i];
                }
            }
        }
        Ok((loss, grads))
    }

    /// EMA update toward `online`: `self <- decay * self + (1 - decay) * online`.
    pub fn ema_update(&mut self, online: &PredictorParams, decay: f64) -> Result<()> {
        if self.arch != online.arch || self.data.len() != online.data.len() {
            return Err(Error::ShapeMismatch(
                "EMA and online parameter sets differ in shape".into(),
            ));
        }
        for (e, o) in self.data.iter_mut().zip(&online.data) {
            *e = decay * *e + (1.0 - decay) * o;
        }
        round_to_f32(&mut self.data);
        Ok(())
    }
}
