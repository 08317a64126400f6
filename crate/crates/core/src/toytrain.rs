//! A small differentiable pan-sharpener and its training loop.
//!
//! The model maps `(m2, p1)` to an output on `p1`'s grid:
//!
//! ```text
//! U = bicubic(m2)            H = p1 - box_mean(p1, highpass_window)
//! D = conv_L(tanh(... tanh(conv_1([U, p1]))))
//! G_b = U_b + alpha_b * H + D_b
//! ```
//!
//! Convolutions are 3x3 with replicate padding. `alpha` and the last
//! convolution start at zero, so an untrained model returns the bicubic
//! upsample exactly. Parameters are stored as one flat `f64` vector.
//!
//! Training uses AdamW on either a plain squared-error objective against the
//! level-1 MS target or the S3 loss. Evaluation at the original scale feeds
//! `(m1, p0)` through the same operator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrmap::{corr_map, CorrMap};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{evaluate_scene, EvalConfig, MetricReport, MetricRow};
use crate::raster::{kernel, Plane, Raster};
use crate::s3loss::{s3_loss, s3_loss_grad, LossConfig, LossGrad};
use crate::scalar::Scalar;
use crate::scalepipe::{make_training_pair, upsample, ScenePair};

/// Upper bound on the number of model parameters.
pub const MAX_PARAMS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTopology {
    pub bands: usize,
    /// Channels of the hidden convolutions.
    pub hidden: usize,
    /// Number of 3x3 convolutions, 1 to 3.
    pub layers: usize,
    /// Box window of the PAN high-pass.
    pub highpass_window: usize,
    /// Resolution ratio between the MS input and the output.
    pub scale: usize,
}

impl Default for ToyTopology {
    fn default() -> Self {
        ToyTopology {
            bands: 3,
            hidden: 8,
            layers: 2,
            highpass_window: 5,
            scale: crate::scalepipe::DEFAULT_SCALE,
        }
    }
}

impl ToyTopology {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput("bands and hidden channels must be nonzero".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::InvalidInput(format!("layers must be 1 to 3, got {}", self.layers)));
        }
        if self.highpass_window.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "high-pass window must be odd, got {}",
                self.highpass_window
            )));
        }
        if self.scale < 2 {
            return Err(Error::InvalidInput(format!("scale must be at least 2, got {}", self.scale)));
        }
        let n = self.param_count();
        if n > MAX_PARAMS {
            return Err(Error::InvalidInput(format!("{n} parameters exceed the limit of {MAX_PARAMS}")));
        }
        Ok(())
    }

    /// `(in, out)` channels of each convolution.
    fn conv_channels(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let cin = if l == 0 { self.bands + 1 } else { self.hidden };
                let cout = if l + 1 == self.layers { self.bands } else { self.hidden };
                (cin, cout)
            })
            .collect()
    }

    /// Offsets of each convolution's weights and biases in the flat vector.
    fn conv_offsets(&self) -> Vec<ConvSlot> {
        let mut at = self.bands;
        self.conv_channels()
            .into_iter()
            .map(|(cin, cout)| {
                let slot = ConvSlot {
                    cin,
                    cout,
                    weights: at,
                    bias: at + cout * cin * 9,
                };
                at = slot.bias + cout;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.bands
            + self
                .conv_channels()
                .iter()
                .map(|(cin, cout)| cout * cin * 9 + cout)
                .sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    cin: usize,
    cout: usize,
    weights: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelParams {
    topology: ToyTopology,
    theta: Vec<f64>,
}

impl ToyModelParams {
    /// Seeded initialization with a zero detail path: `alpha = 0` and a zero
    /// last convolution. Hidden convolutions get uniform weights in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(topology: ToyTopology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; topology.param_count()];
        let slots = topology.conv_offsets();
        for slot in &slots[..slots.len() - 1] {
            let a = 1.0 / ((slot.cin * 9) as f64).sqrt();
            for v in &mut theta[slot.weights..slot.bias] {
                *v = rng.gen_range(-a..a);
            }
        }
        Ok(ToyModelParams { topology, theta })
    }

    pub fn from_vec(topology: ToyTopology, theta: Vec<f64>) -> Result<Self> {
        topology.validate()?;
        if theta.len() != topology.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                topology.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(ToyModelParams { topology, theta })
    }

    pub fn topology(&self) -> &ToyTopology {
        &self.topology
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Per-band PAN high-pass gains.
    pub fn alpha(&self) -> &[f64] {
        &self.theta[..self.topology.bands]
    }
}

/// Precomputed model inputs on the output grid. These do not depend on the
/// parameters, so training computes them once per scene.
#[derive(Clone, Debug)]
struct Inputs {
    w: usize,
    h: usize,
    /// Bicubic upsample of the MS input, one vector per band.
    u: Vec<Vec<f64>>,
    pan: Vec<f64>,
    highpass: Vec<f64>,
}

impl Inputs {
    fn new<T: Scalar>(topology: &ToyTopology, ms: &Raster<T>, pan: &Plane<T>) -> Result<Self> {
        if ms.num_bands() != topology.bands {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bands", topology.bands),
                found: format!("{} bands", ms.num_bands()),
            });
        }
        let expect = (ms.width() * topology.scale, ms.height() * topology.scale);
        if pan.dims() != expect {
            return Err(crate::error::dims_mismatch(expect, pan.dims()));
        }
        let (w, h) = pan.dims();
        let up = upsample(ms, topology.scale)?;
        let u = up.bands().iter().map(|b| b.to_f64_vec()).collect();
        let p = pan.to_f64_vec();
        let mean = kernel::box_mean(&p, w, h, topology.highpass_window);
        let highpass = p.iter().zip(&mean).map(|(a, m)| a - m).collect();
        Ok(Inputs {
            w,
            h,
            u,
            pan: p,
            highpass,
        })
    }

    fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Inputs {
        Inputs {
            w: cw,
            h: ch,
            u: self.u.iter().map(|b| crop_vec(b, self.w, x0, y0, cw, ch)).collect(),
            pan: crop_vec(&self.pan, self.w, x0, y0, cw, ch),
            highpass: crop_vec(&self.highpass, self.w, x0, y0, cw, ch),
        }
    }
}

fn crop_vec(v: &[f64], w: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cw * ch);
    for y in y0..y0 + ch {
        out.extend_from_slice(&v[y * w + x0..y * w + x0 + cw]);
    }
    out
}

/// Replicate-padded copy, `(w + 2) x (h + 2)`.
fn pad(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; pw * (h + 2)];
    for py in 0..h + 2 {
        let sy = py.saturating_sub(1).min(h - 1);
        let row = &v[sy * w..sy * w + w];
        let dst = &mut out[py * pw..py * pw + pw];
        dst[0] = row[0];
        dst[1..=w].copy_from_slice(row);
        dst[w + 1] = row[w - 1];
    }
    out
}

/// Adjoint of [`pad`]: folds border gradients back onto the edge pixels.
fn pad_adjoint(g: &[f64], w: usize, h: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; w * h];
    for py in 0..h + 2 {
        let sy = py.saturating_sub(1).min(h - 1);
        for px in 0..pw {
            let sx = px.saturating_sub(1).min(w - 1);
            out[sy * w + sx] += g[py * pw + px];
        }
    }
    out
}

fn conv_forward(theta: &[f64], slot: &ConvSlot, padded: &[Vec<f64>], w: usize, h: usize) -> Vec<Vec<f64>> {
    let pw = w + 2;
    (0..slot.cout)
        .map(|o| {
            let mut z = vec![theta[slot.bias + o]; w * h];
            for (i, src) in padded.iter().enumerate() {
                for k in 0..9 {
                    let wt = theta[slot.weights + (o * slot.cin + i) * 9 + k];
                    if wt == 0.0 {
                        continue;
                    }
                    let (ky, kx) = (k / 3, k % 3);
                    for y in 0..h {
                        let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        for (zv, s) in z[y * w..y * w + w].iter_mut().zip(row) {
                            *zv += wt * s;
                        }
                    }
                }
            }
            z
        })
        .collect()
}

/// Accumulates weight and bias gradients into `grad` and, when asked,
/// returns the gradient with respect to the padded inputs.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    theta: &[f64],
    slot: &ConvSlot,
    padded: &[Vec<f64>],
    dz: &[Vec<f64>],
    w: usize,
    h: usize,
    grad: &mut [f64],
    want_input: bool,
) -> Option<Vec<Vec<f64>>> {
    let pw = w + 2;
    let mut dpad = if want_input { vec![vec![0.0; pw * (h + 2)]; slot.cin] } else { Vec::new() };
    for (o, dzo) in dz.iter().enumerate() {
        grad[slot.bias + o] += dzo.iter().sum::<f64>();
        for (i, src) in padded.iter().enumerate() {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let idx = slot.weights + (o * slot.cin + i) * 9 + k;
                let mut acc = 0.0;
                for y in 0..h {
                    let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    acc += dzo[y * w..y * w + w].iter().zip(row).map(|(d, s)| d * s).sum::<f64>();
                }
                grad[idx] += acc;
                if want_input {
                    let wt = theta[idx];
                    if wt == 0.0 {
                        continue;
                    }
                    let dst = &mut dpad[i];
                    for y in 0..h {
                        let drow = &mut dst[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        for (dv, d) in drow.iter_mut().zip(&dzo[y * w..y * w + w]) {
                            *dv += wt * d;
                        }
                    }
                }
            }
        }
    }
    want_input.then_some(dpad)
}

/// Activations kept for the backward pass.
struct Tape {
    /// Padded input of each convolution.
    padded: Vec<Vec<Vec<f64>>>,
    /// Post-tanh activations of the hidden convolutions.
    hidden: Vec<Vec<Vec<f64>>>,
    out: Vec<Vec<f64>>,
}

fn forward_tape(params: &ToyModelParams, x: &Inputs) -> Tape {
    let topo = &params.topology;
    let theta = &params.theta;
    let (w, h) = (x.w, x.h);
    let slots = topo.conv_offsets();
    let mut act: Vec<Vec<f64>> = x.u.iter().cloned().chain(std::iter::once(x.pan.clone())).collect();
    let mut padded = Vec::with_capacity(slots.len());
    let mut hidden = Vec::with_capacity(slots.len() - 1);
    let mut detail = Vec::new();
    for (l, slot) in slots.iter().enumerate() {
        let p: Vec<Vec<f64>> = act.iter().map(|c| pad(c, w, h)).collect();
        let mut z = conv_forward(theta, slot, &p, w, h);
        padded.push(p);
        if l + 1 < slots.len() {
            z.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = v.tanh()));
            hidden.push(z.clone());
            act = z;
        } else {
            detail = z;
        }
    }
    let out = (0..topo.bands)
        .map(|b| {
            let a = theta[b];
            x.u[b]
                .iter()
                .zip(&x.highpass)
                .zip(&detail[b])
                .map(|((u, hp), d)| u + a * hp + d)
                .collect()
        })
        .collect();
    Tape { padded, hidden, out }
}

/// Adds the parameter gradient for upstream `d_out` into `grad`.
fn backward_tape(params: &ToyModelParams, x: &Inputs, tape: &Tape, d_out: &[Vec<f64>], grad: &mut [f64]) {
    let topo = &params.topology;
    let (w, h) = (x.w, x.h);
    for (b, d) in d_out.iter().enumerate() {
        grad[b] += d.iter().zip(&x.highpass).map(|(d, hp)| d * hp).sum::<f64>();
    }
    let slots = topo.conv_offsets();
    let mut dz: Vec<Vec<f64>> = d_out.to_vec();
    for l in (0..slots.len()).rev() {
        let dpad = conv_backward(&params.theta, &slots[l], &tape.padded[l], &dz, w, h, grad, l > 0);
        if let Some(dpad) = dpad {
            dz = dpad
                .iter()
                .zip(&tape.hidden[l - 1])
                .map(|(dp, a)| {
                    pad_adjoint(dp, w, h)
                        .into_iter()
                        .zip(a)
                        .map(|(g, a)| g * (1.0 - a * a))
                        .collect()
                })
                .collect();
        }
    }
}

fn to_raster<T: Scalar>(bands: &[Vec<f64>], w: usize, h: usize, level: crate::raster::Level) -> Result<Raster<T>> {
    let planes = bands.iter().map(|b| Plane::from_f64(w, h, b)).collect();
    Raster::new(planes, level)
}

/// Output on `pan`'s grid with `ms`'s band count.
pub fn forward<T: Scalar>(params: &ToyModelParams, ms: &Raster<T>, pan: &Plane<T>) -> Result<Raster<T>> {
    let x = Inputs::new(&params.topology, ms, pan)?;
    let tape = forward_tape(params, &x);
    if tape.out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("model produced non-finite output".into()));
    }
    to_raster(&tape.out, x.w, x.h, ms.level().saturating_sub(1))
}

/// Gradient of a scalar loss with respect to the parameters, given the
/// loss gradient `upstream` with respect to the model output.
pub fn backward<T: Scalar>(
    params: &ToyModelParams,
    ms: &Raster<T>,
    pan: &Plane<T>,
    upstream: &LossGrad<T>,
) -> Result<Vec<f64>> {
    let x = Inputs::new(&params.topology, ms, pan)?;
    let d = &upstream.d_g;
    if d.dims() != (x.w, x.h) || d.num_bands() != params.topology.bands {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x{}", x.w, x.h, params.topology.bands),
            found: crate::raster::shape_string(d),
        });
    }
    let tape = forward_tape(params, &x);
    let d_out: Vec<Vec<f64>> = d.bands().iter().map(|b| b.to_f64_vec()).collect();
    let mut grad = vec![0.0; params.len()];
    backward_tape(params, &x, &tape, &d_out, &mut grad);
    Ok(grad)
}

/// Original-scale inference: `g0 = forward(m1, p0)`.
pub fn infer_original_scale<T: Scalar>(params: &ToyModelParams, scene: &ScenePair<T>) -> Result<Raster<T>> {
    Ok(forward(params, &scene.m1, &scene.p0)?.with_level(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `sum (G - M)^2` against the level-1 MS target.
    #[default]
    SpectralL2,
    /// The S3 loss with a per-scene correlation map.
    S3,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_l2" | "spectral-l2" | "l2" => Ok(LossMode::SpectralL2),
            "s3" => Ok(LossMode::S3),
            _ => Err(Error::InvalidInput(format!("unknown loss mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub model: ToyTopology,
    pub w_a: f64,
    pub gamma: f64,
    pub window: usize,
    pub eps: f64,
    pub use_corr_map: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    /// Iteration at which learning rate and weight decay drop; `None` means
    /// half of `iterations`.
    pub drop_at: Option<usize>,
    pub drop_factor: f64,
    pub seed: u64,
    pub batch: usize,
    /// Side of the square level-1 training crops; 0 trains on whole scenes.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainConfig {
            mode: LossMode::SpectralL2,
            model: ToyTopology::default(),
            w_a: loss.w_a,
            gamma: loss.corr.gamma,
            window: loss.stat.window,
            eps: loss.stat.eps,
            use_corr_map: true,
            lr: 2e-3,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 2000,
            drop_at: None,
            drop_factor: 10.0,
            seed: 0,
            batch: 2,
            crop: 64,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        let stat = crate::raster::StatConfig::new(self.window, self.eps)?;
        let mut cfg = LossConfig {
            w_a: self.w_a,
            use_corr_map: self.use_corr_map,
            ..LossConfig::default()
        }
        .with_stat(stat);
        cfg.corr.gamma = self.gamma;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_config()?;
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidInput("weight decay must be nonnegative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidInput("Adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0 && self.drop_factor >= 1.0) {
            return Err(Error::InvalidInput("adam_eps must be positive and drop_factor at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidInput("batch must be at least 1".into()));
        }
        Ok(())
    }

    fn drop_iteration(&self) -> usize {
        self.drop_at.unwrap_or(self.iterations / 2)
    }
}

/// A training scene with its parameter-independent inputs precomputed.
struct Prepared {
    inputs: Inputs,
    target: Vec<Vec<f64>>,
    s: Option<Vec<f64>>,
}

impl Prepared {
    fn new<T: Scalar>(scene: &ScenePair<T>, cfg: &TrainConfig, loss: &LossConfig) -> Result<Self> {
        let sp = match (&scene.m2, &scene.p1) {
            (Some(_), Some(_)) => scene.clone(),
            _ => make_training_pair(scene)?,
        };
        let (m2, p1) = (sp.m2.as_ref().expect("filled"), sp.p1.as_ref().expect("filled"));
        if sp.scale != cfg.model.scale {
            return Err(Error::InvalidInput(format!(
                "scene scale {} differs from model scale {}",
                sp.scale, cfg.model.scale
            )));
        }
        let inputs = Inputs::new(&cfg.model, m2, p1)?;
        if cfg.crop > inputs.w.min(inputs.h) {
            return Err(Error::InvalidInput(format!(
                "crop {} exceeds the {}x{} training scene",
                cfg.crop, inputs.w, inputs.h
            )));
        }
        let s = match cfg.mode {
            LossMode::S3 if loss.use_corr_map => Some(corr_map(&sp.m1, p1, &loss.corr)?.into_plane().to_f64_vec()),
            _ => None,
        };
        Ok(Prepared {
            inputs,
            target: sp.m1.bands().iter().map(|b| b.to_f64_vec()).collect(),
            s,
        })
    }

    fn sample(&self, crop: usize, rng: &mut ChaCha8Rng) -> Sample {
        let (w, h) = (self.inputs.w, self.inputs.h);
        if crop == 0 {
            return Sample {
                inputs: self.inputs.clone(),
                target: self.target.clone(),
                s: self.s.clone(),
            };
        }
        let x0 = rng.gen_range(0..=w - crop);
        let y0 = rng.gen_range(0..=h - crop);
        Sample {
            inputs: self.inputs.crop(x0, y0, crop, crop),
            target: self.target.iter().map(|b| crop_vec(b, w, x0, y0, crop, crop)).collect(),
            s: self.s.as_ref().map(|s| crop_vec(s, w, x0, y0, crop, crop)),
        }
    }
}

struct Sample {
    inputs: Inputs,
    target: Vec<Vec<f64>>,
    s: Option<Vec<f64>>,
}

/// Loss of one sample and its gradient with respect to the model output.
fn sample_loss(out: &[Vec<f64>], sample: &Sample, mode: LossMode, loss: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    match mode {
        LossMode::SpectralL2 => {
            let mut total = 0.0;
            let grad = out
                .iter()
                .zip(&sample.target)
                .map(|(g, m)| {
                    g.iter()
                        .zip(m)
                        .map(|(g, m)| {
                            let r = g - m;
                            total += r * r;
                            2.0 * r
                        })
                        .collect()
                })
                .collect();
            Ok((total, grad))
        }
        LossMode::S3 => {
            let (w, h) = (sample.inputs.w, sample.inputs.h);
            let g: Raster<f64> = to_raster(out, w, h, 1)?;
            let m: Raster<f64> = to_raster(&sample.target, w, h, 1)?;
            let pan = Plane::from_f64(w, h, &sample.inputs.pan);
            let s = match &sample.s {
                Some(s) => CorrMap::from_plane(Plane::from_f64(w, h, s))?,
                None => CorrMap::ones(w, h),
            };
            let value = s3_loss(&g, &m, &pan, &s, loss)?.l_s3;
            let d = s3_loss_grad(&g, &m, &pan, &s, loss)?;
            Ok((value, d.d_g.bands().iter().map(|b| b.to_f64_vec()).collect()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

#[derive(Debug)]
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            *p -= lr * (update + wd * *p);
        }
    }
}

/// Trains a model from its seeded initialization.
pub fn train<T: Scalar>(scenes: &[ScenePair<T>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = ToyModelParams::init(cfg.model, cfg.seed)?;
    train_from(init, scenes, cfg)
}

/// Trains starting from `params`. Each iteration draws `batch` scenes (and
/// crops) from a generator seeded by `cfg.seed`.
pub fn train_from<T: Scalar>(params: ToyModelParams, scenes: &[ScenePair<T>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.topology != cfg.model {
        return Err(Error::InvalidInput("parameters do not match the configured topology".into()));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidInput("training needs at least one scene".into()));
    }
    let loss = cfg.loss_config()?;
    let data = scenes
        .iter()
        .map(|s| Prepared::new(s, cfg, &loss))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut params = params;
    let mut opt = AdamW::new(params.len());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut grad = vec![0.0; params.len()];
    for it in 0..cfg.iterations {
        let (lr, wd) = if it >= cfg.drop_iteration() {
            (cfg.lr / cfg.drop_factor, cfg.weight_decay / cfg.drop_factor)
        } else {
            (cfg.lr, cfg.weight_decay)
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let scene = &data[rng.gen_range(0..data.len())];
            let sample = scene.sample(cfg.crop, &mut rng);
            let tape = forward_tape(&params, &sample.inputs);
            let (value, d_out) = sample_loss(&tape.out, &sample, cfg.mode, &loss)?;
            total += value;
            backward_tape(&params, &sample.inputs, &tape, &d_out, &mut grad);
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss: total });
        }
        losses.push(total);
        opt.step(&mut params.theta, &grad, cfg, lr, wd);
    }
    Ok(TrainOutcome { params, losses })
}

/// Training objective summed over every whole scene, under the same loss
/// setup `train` uses.
pub fn dataset_loss<T: Scalar>(params: &ToyModelParams, scenes: &[ScenePair<T>], cfg: &TrainConfig) -> Result<f64> {
    let loss = cfg.loss_config()?;
    let mut total = 0.0;
    for scene in scenes {
        let sample = Prepared::new(scene, &TrainConfig { crop: 0, ..cfg.clone() }, &loss)?
            .sample(0, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = forward_tape(params, &sample.inputs);
        total += sample_loss(&tape.out, &sample, cfg.mode, &loss)?.0;
    }
    Ok(total)
}

/// Original-scale metric reports of two models on the same test scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeComparison {
    pub spectral: MetricReport,
    pub s3: MetricReport,
}

impl ModeComparison {
    /// One row per scene plus `mean` and `stderr`, spectral columns first.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let cols = MetricRow::COLUMNS;
        let mut out = String::from("scene");
        for prefix in ["spectral", "s3"] {
            for c in cols {
                out.push_str(&format!(",{prefix}_{c}"));
            }
        }
        out.push('\n');
        let mut line = |name: &str, a: &MetricRow, b: &MetricRow| {
            out.push_str(name);
            for v in a.values().into_iter().chain(b.values()) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        };
        for (i, (a, b)) in self.spectral.rows.iter().zip(&self.s3.rows).enumerate() {
            let name = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
            line(&name, a, b);
        }
        line("mean", &self.spectral.mean, &self.s3.mean);
        line("stderr", &self.spectral.std_error, &self.s3.std_error);
        out
    }
}

pub fn evaluate_model<T: Scalar>(params: &ToyModelParams, testset: &[ScenePair<T>], eval: &EvalConfig) -> Result<MetricReport> {
    let rows = testset
        .iter()
        .map(|scene| {
            let g0 = infer_original_scale(params, scene)?;
            evaluate_scene(&scene.clone().with_g0(g0)?, eval)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows)
}

pub fn compare_modes<T: Scalar>(
    testset: &[ScenePair<T>],
    spectral: &ToyModelParams,
    s3: &ToyModelParams,
    eval: &EvalConfig,
) -> Result<ModeComparison> {
    Ok(ModeComparison {
        spectral: evaluate_model(spectral, testset, eval)?,
        s3: evaluate_model(s3, testset, eval)?,
    })
}

const PARAM_FORMAT_TAG: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
struct ParamManifest {
    format: String,
    count: usize,
    topology: ToyTopology,
}

/// Path of the JSON manifest written next to a parameter file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes little-endian `f64` parameters to `path` and a JSON manifest to
/// `path` + `.json`.
pub fn save_params(params: &ToyModelParams, path: &Path) -> Result<()> {
    let manifest = ParamManifest {
        format: PARAM_FORMAT_TAG.into(),
        count: params.len(),
        topology: params.topology,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let bytes: Vec<u8> = params.theta.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), text.as_bytes())
}

pub fn load_params(path: &Path) -> Result<ToyModelParams> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ParamManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != PARAM_FORMAT_TAG {
        return Err(Error::format(&mpath, format!("unsupported format `{}`", manifest.format)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != manifest.count * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", manifest.count * 8, bytes.len()),
        ));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ToyModelParams::from_vec(manifest.topology, theta).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::gray;
    use crate::s3loss::spectral_loss;
    use crate::scalepipe::{synth_scene, SynthConfig};
    use rand::Rng;

    fn random_raster(w: usize, h: usize, bands: usize, seed: u64) -> Raster<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..bands)
            .map(|_| Plane::from_fn(w, h, |_, _| rng.gen_range(0.1..0.9)))
            .collect();
        Raster::new(planes, 2).unwrap()
    }

    fn random_params(topo: ToyTopology, seed: u64) -> ToyModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..topo.param_count()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        ToyModelParams::from_vec(topo, theta).unwrap()
    }

    fn small_topo() -> ToyTopology {
        ToyTopology {
            hidden: 4,
            layers: 3,
            ..ToyTopology::default()
        }
    }

    #[test]
    fn parameter_budget() {
        assert_eq!(ToyTopology::default().param_count(), 3 + (4 * 8 * 9 + 8) + (8 * 3 * 9 + 3));
        assert!(ToyTopology { hidden: 32, layers: 3, ..Default::default() }.validate().is_err());
        assert!(ToyTopology { layers: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn untrained_model_is_bicubic() {
        let ms = random_raster(6, 5, 3, 1);
        let pan = random_raster(24, 20, 1, 2).into_bands().remove(0);
        let params = ToyModelParams::init(ToyTopology::default(), 7).unwrap();
        let g = forward(&params, &ms, &pan).unwrap();
        assert_eq!(g, upsample(&ms, 4).unwrap());
        assert_eq!(g.level(), 1);
    }

    #[test]
    fn constant_inputs_give_constant_output() {
        let ms = Raster::new(
            vec![Plane::filled(4, 4, 0.2f64), Plane::filled(4, 4, 0.5), Plane::filled(4, 4, 0.7)],
            2,
        )
        .unwrap();
        let pan = Plane::filled(16, 16, 0.45);
        let g = forward(&random_params(small_topo(), 3), &ms, &pan).unwrap();
        for band in g.bands() {
            let first = band.as_slice()[0];
            assert!(band.as_slice().iter().all(|&v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let ms = random_raster(5, 5, 3, 4);
        let pan = random_raster(20, 20, 1, 5).into_bands().remove(0);
        let p = random_params(small_topo(), 6);
        assert_eq!(forward(&p, &ms, &pan).unwrap(), forward(&p, &ms, &pan).unwrap());
        let bad = random_raster(21, 20, 1, 5).into_bands().remove(0);
        assert!(matches!(forward(&p, &ms, &bad), Err(Error::ShapeMismatch { .. })));
        let two = random_raster(5, 5, 2, 4);
        assert!(forward(&p, &two, &pan).is_err());
    }

    /// `L = sum c * G` for a fixed random `c`, so `dL/dG = c`.
    fn linear_loss(p: &ToyModelParams, ms: &Raster<f64>, pan: &Plane<f64>, c: &Raster<f64>) -> f64 {
        let g = forward(p, ms, pan).unwrap();
        g.bands()
            .iter()
            .zip(c.bands())
            .map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let ms = random_raster(3, 3, 3, 8);
        let pan = random_raster(12, 12, 1, 9).into_bands().remove(0);
        let c = random_raster(12, 12, 3, 10);
        let p = random_params(small_topo(), 11);
        let grad = backward(&p, &ms, &pan, &LossGrad { d_g: c.clone() }).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for k in 0..p.len() {
            let mut plus = p.theta.clone();
            plus[k] += h;
            let mut minus = p.theta.clone();
            minus[k] -= h;
            let lp = linear_loss(&ToyModelParams::from_vec(p.topology, plus).unwrap(), &ms, &pan, &c);
            let lm = linear_loss(&ToyModelParams::from_vec(p.topology, minus).unwrap(), &ms, &pan, &c);
            let fd = (lp - lm) / (2.0 * h);
            if grad[k].abs() > 1e-6 {
                let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs());
                assert!(rel <= 1e-4, "param {k}: analytic {} vs fd {fd}", grad[k]);
                checked += 1;
            }
        }
        assert!(checked > p.len() / 2);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let ms = random_raster(3, 3, 3, 12);
        let pan = random_raster(12, 12, 1, 13).into_bands().remove(0);
        let p = random_params(small_topo(), 14);
        let zero = Raster::zeros(12, 12, 3, 1);
        assert!(backward(&p, &ms, &pan, &LossGrad { d_g: zero }).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn alpha_gradient_closed_form() {
        let ms = random_raster(4, 4, 3, 15);
        let pan = random_raster(16, 16, 1, 16).into_bands().remove(0);
        let target = random_raster(16, 16, 3, 17);
        let p = random_params(ToyTopology::default(), 18);
        let g = forward(&p, &ms, &pan).unwrap();

        // naive 5x5 clipped box mean for the high-pass
        let hp = Plane::from_fn(16, 16, |x, y| {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(2)..(y + 3).min(16) {
                for xx in x.saturating_sub(2)..(x + 3).min(16) {
                    s += pan.get(xx, yy);
                    n += 1.0;
                }
            }
            pan.get(x, y) - s / n
        });
        let s = CorrMap::ones(16, 16);
        let cfg = LossConfig { w_a: 0.0, use_corr_map: false, ..LossConfig::default() };
        let d = s3_loss_grad(&g, &target, &pan, &s, &cfg).unwrap();
        let grad = backward(&p, &ms, &pan, &d).unwrap();
        for (b, got) in grad.iter().take(3).enumerate() {
            let mut expect = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    let r: f64 = g.band(b).get(x, y) - target.band(b).get(x, y);
                    expect += r.signum() * hp.get(x, y);
                }
            }
            assert!((got - expect).abs() < 1e-9, "band {b}");
        }
    }

    fn tiny_scenes(n: usize, shift: f64) -> Vec<ScenePair<f64>> {
        (0..n as u64)
            .map(|seed| {
                let cfg = SynthConfig {
                    size: (32, 32),
                    window: 7,
                    seed,
                    global_shift: (shift, 0.0),
                    ..SynthConfig::default()
                };
                make_training_pair(&synth_scene(&cfg).unwrap()).unwrap()
            })
            .collect()
    }

    fn quick_cfg(mode: LossMode) -> TrainConfig {
        TrainConfig {
            mode,
            window: 7,
            iterations: 200,
            crop: 16,
            lr: 5e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_descends_in_both_modes() {
        let scenes = tiny_scenes(8, 2.0);
        for mode in [LossMode::SpectralL2, LossMode::S3] {
            let cfg = quick_cfg(mode);
            let init = ToyModelParams::init(cfg.model, cfg.seed).unwrap();
            let out = train(&scenes, &cfg).unwrap();
            let before = dataset_loss(&init, &scenes, &cfg).unwrap();
            let after = dataset_loss(&out.params, &scenes, &cfg).unwrap();
            assert!(after < before, "{mode:?}: {after} !< {before}");
            let best = out.losses.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(best < out.losses[0]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let scenes = tiny_scenes(1, 0.0);
        let cfg = TrainConfig { lr: 0.0, iterations: 5, crop: 0, batch: 1, ..quick_cfg(LossMode::S3) };
        let out = train(&scenes, &cfg).unwrap();
        assert_eq!(out.params, ToyModelParams::init(cfg.model, cfg.seed).unwrap());
        assert!(out.losses.iter().all(|&l| l == out.losses[0]));
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = tiny_scenes(2, 2.0);
        let cfg = TrainConfig { iterations: 20, ..quick_cfg(LossMode::S3) };
        assert_eq!(train(&scenes, &cfg).unwrap(), train(&scenes, &cfg).unwrap());
    }

    #[test]
    fn s3_mode_without_map_or_spatial_term_is_the_spectral_loss() {
        let scenes = tiny_scenes(1, 2.0);
        let cfg = TrainConfig {
            w_a: 0.0,
            use_corr_map: false,
            iterations: 1,
            crop: 0,
            batch: 1,
            ..quick_cfg(LossMode::S3)
        };
        let out = train(&scenes, &cfg).unwrap();
        let sp = &scenes[0];
        let init = ToyModelParams::init(cfg.model, cfg.seed).unwrap();
        let g = forward(&init, sp.m2.as_ref().unwrap(), sp.p1.as_ref().unwrap()).unwrap();
        let ones = CorrMap::ones(32, 32);
        let expect = spectral_loss(&g, &sp.m1, &ones, &cfg.loss_config().unwrap()).unwrap();
        assert_eq!(out.losses[0], expect);
    }

    #[test]
    fn divergence_is_reported() {
        let scenes = tiny_scenes(1, 0.0);
        let cfg = TrainConfig { lr: 1e300, iterations: 50, ..quick_cfg(LossMode::SpectralL2) };
        assert!(matches!(train(&scenes, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn original_scale_shape_contract() {
        let sp = tiny_scenes(1, 0.0).remove(0);
        let p = random_params(ToyTopology::default(), 3);
        let g0 = infer_original_scale(&p, &sp).unwrap();
        assert_eq!(g0.dims(), sp.p0.dims());
        assert_eq!(g0.num_bands(), sp.m1.num_bands());
        assert_eq!(gray(&g0).dims(), (128, 128));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.params");
        let p = random_params(small_topo(), 21);
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
        fs::write(&path, [0u8; 12]).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format { .. })));
    }
}
