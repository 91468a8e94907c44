//! A small MLP score network with time embedding, optional class embedding
//! and a hand-written reverse-mode gradient.
//!
//! The network sees `concat(c_in(t)·z, embed(t) + class_embedding[c])`,
//! runs `hidden_depth` SiLU layers of width `hidden_width`, and a linear
//! head feeds the noise prediction `ε̂`. The score is `−ε̂ / σ_t`.
//! `c_in(t) = 1/√(α_t² s_data² + σ_t²)` keeps the input at unit scale
//! across noise levels. With [`Preconditioning::Gaussian`] (the default)
//! the head is a correction to the Gaussian-data optimum, so the
//! zero-initialised network starts at the score of `N(0, s_data² I)`;
//! with [`Preconditioning::None`] a zero head is the zero score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::config::{fmt_f64, KeyValues};
use crate::dataset::ByteCursor;
use crate::error::{Error, Result};
use crate::model::ScoreModel;
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Base of the geometric frequency ladder of the positional embedding.
const POSITIONAL_BASE: f64 = 10_000.0;
/// Times are mapped to `[0, 1000]` before the positional embedding, the
/// discrete-timestep convention the embedding was designed for.
const POSITIONAL_TIME_SCALE: f64 = 1000.0;
/// Samples per gradient partial sum. Fixed so the reduction order, and
/// hence every bit of the gradient, is independent of the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEmbedding {
    Positional,
    Fourier,
}

impl FromStr for TimeEmbedding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "positional" => Ok(Self::Positional),
            "fourier" => Ok(Self::Fourier),
            other => Err(format!("unknown time embedding {other:?}")),
        }
    }
}

impl fmt::Display for TimeEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Positional => "positional",
            Self::Fourier => "fourier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x · sigmoid(x)`.
    Silu,
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "silu" => Ok(Self::Silu),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("silu")
    }
}

/// The scalar fed to the time embedding, normalised to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeInput {
    /// `t / T`.
    Linear,
    /// `ln σ_t` rescaled between `ln σ(t_min)` and `ln σ(T)`; resolves the
    /// low-noise end, where `t / T` barely moves.
    LogSigma,
}

impl FromStr for TimeInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "log_sigma" => Ok(Self::LogSigma),
            other => Err(format!("unknown time input {other:?}")),
        }
    }
}

impl fmt::Display for TimeInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::LogSigma => "log_sigma",
        })
    }
}

/// How the head output becomes the noise prediction `ε̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioning {
    /// `ε̂ = head`.
    None,
    /// `ε̂ = σ c_in² z + α s_data c_in · head`: the head corrects the exact
    /// noise prediction for Gaussian data of scale `s_data`.
    Gaussian,
}

impl FromStr for Preconditioning {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(format!("unknown preconditioning {other:?}")),
        }
    }
}

impl fmt::Display for Preconditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub time_embedding: TimeEmbedding,
    pub time_input: TimeInput,
    /// Even; sin/cos pairs.
    pub embedding_dim: usize,
    pub fourier_scale: f64,
    pub num_classes: Option<u32>,
    pub activation: Activation,
    /// Data standard deviation used by the input scaling.
    pub data_std: f64,
    pub preconditioning: Preconditioning,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn new(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden_width: 64,
            hidden_depth: 2,
            time_embedding: TimeEmbedding::Positional,
            time_input: TimeInput::LogSigma,
            embedding_dim: 16,
            fourier_scale: 16.0,
            num_classes: None,
            activation: Activation::Silu,
            data_std: 1.0,
            preconditioning: Preconditioning::Gaussian,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_width == 0 || self.hidden_depth == 0 {
            return Err(Error::invalid("data_dim, hidden_width and hidden_depth must be >= 1"));
        }
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "embedding_dim must be a positive even number, got {}",
                self.embedding_dim
            )));
        }
        if self.num_classes == Some(0) {
            return Err(Error::invalid("num_classes must be positive when present"));
        }
        if !(self.data_std > 0.0 && self.fourier_scale.is_finite()) {
            return Err(Error::invalid("data_std must be positive, fourier_scale finite"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues, data_dim: usize) -> Result<Self> {
        let d = Self::new(data_dim);
        let cfg = Self {
            data_dim: kv.get_or("data_dim", data_dim)?,
            hidden_width: kv.get_or("hidden_width", d.hidden_width)?,
            hidden_depth: kv.get_or("hidden_depth", d.hidden_depth)?,
            time_embedding: kv.get_or("time_embedding", d.time_embedding)?,
            time_input: kv.get_or("time_input", d.time_input)?,
            embedding_dim: kv.get_or("embedding_dim", d.embedding_dim)?,
            fourier_scale: kv.get_or("fourier_scale", d.fourier_scale)?,
            num_classes: kv.get("num_classes")?,
            activation: kv.get_or("activation", d.activation)?,
            data_std: kv.get_or("data_std", d.data_std)?,
            preconditioning: kv.get_or("preconditioning", d.preconditioning)?,
            init_seed: kv.get_or("init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("data_dim", self.data_dim);
        kv.set("hidden_width", self.hidden_width);
        kv.set("hidden_depth", self.hidden_depth);
        kv.set("time_embedding", self.time_embedding);
        kv.set("time_input", self.time_input);
        kv.set("embedding_dim", self.embedding_dim);
        kv.set("fourier_scale", fmt_f64(self.fourier_scale));
        if let Some(c) = self.num_classes {
            kv.set("num_classes", c);
        }
        kv.set("activation", self.activation);
        kv.set("data_std", fmt_f64(self.data_std));
        kv.set("preconditioning", self.preconditioning);
        kv.set("init_seed", self.init_seed);
        kv
    }
}

/// Offsets of one dense layer inside the flat parameter vector. Weights are
/// row-major `rows × cols`, followed by `rows` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlot {
    pub weight: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    /// Hidden layers followed by the head.
    pub dense: Vec<DenseSlot>,
    /// `num_classes × embedding_dim` table, if conditional.
    pub class_table: Option<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &NetConfig) -> Self {
        let mut offset = 0;
        let mut dense = Vec::with_capacity(cfg.hidden_depth + 1);
        let mut cols = cfg.data_dim + cfg.embedding_dim;
        for layer in 0..=cfg.hidden_depth {
            let rows = if layer == cfg.hidden_depth {
                cfg.data_dim
            } else {
                cfg.hidden_width
            };
            dense.push(DenseSlot {
                weight: offset,
                bias: offset + rows * cols,
                rows,
                cols,
            });
            offset += rows * cols + rows;
            cols = rows;
        }
        let class_table = cfg.num_classes.map(|c| {
            let at = offset;
            offset += c as usize * cfg.embedding_dim;
            at
        });
        Self {
            dense,
            class_table,
            total: offset,
        }
    }
}

/// All trainable parameters, flattened according to a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Rounded to the single precision used in checkpoints.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|v| *v *= k);
    }
}

/// One network evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub z: &'a [f64],
    pub t: f64,
    pub class: Option<u32>,
}

/// Network architecture plus its frozen, non-trainable pieces (schedule and
/// Fourier frequencies). Parameters live in a separate [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    config: NetConfig,
    schedule: NoiseSchedule,
    layout: ParamLayout,
    frequencies: Vec<f64>,
    /// `(ln σ(t_min), ln σ(T))`.
    log_sigma_range: (f64, f64),
}

/// Per-sample activations kept for the backward pass.
struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    out: Vec<f64>,
    sigma: f64,
    /// `ε̂ = skip + out_scale · out`.
    skip: Vec<f64>,
    out_scale: f64,
}

impl Tape {
    fn score(&self) -> Vec<f64> {
        self.out
            .iter()
            .zip(&self.skip)
            .map(|(o, k)| -(k + self.out_scale * o) / self.sigma)
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Dot product with four independent accumulators in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

impl ScoreNet {
    pub fn new(config: NetConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let layout = ParamLayout::new(&config);
        let half = config.embedding_dim / 2;
        let frequencies = match config.time_embedding {
            TimeEmbedding::Positional => (0..half)
                .map(|k| POSITIONAL_BASE.powf(-(k as f64) / half as f64))
                .collect(),
            TimeEmbedding::Fourier => {
                let mut r = rng::stream(rng::derive_seed(config.init_seed, "fourier"), 0);
                let normal = Normal::new(0.0, config.fourier_scale)
                    .map_err(|e| Error::invalid(format!("fourier_scale: {e}")))?;
                (0..half).map(|_| normal.sample(&mut r)).collect()
            }
        };
        let lo = schedule.sigma(schedule.t_min)?.ln();
        let hi = schedule.sigma(schedule.t_max)?.ln();
        if !(lo.is_finite() && hi > lo) {
            return Err(Error::invalid(format!(
                "schedule {schedule} needs 0 < sigma(t_min) < sigma(t_max) for the network"
            )));
        }
        Ok(Self {
            config,
            schedule,
            layout,
            frequencies,
            log_sigma_range: (lo, hi),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn net_schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Fan-in scaled Gaussian hidden weights, zero biases, zero head, unit
    /// Gaussian class embeddings. Deterministic in `init_seed`.
    pub fn init_params(&self) -> ParamVector {
        let mut p = vec![0.0; self.layout.total];
        let mut r = rng::stream(rng::derive_seed(self.config.init_seed, "init"), 0);
        let hidden = &self.layout.dense[..self.layout.dense.len() - 1];
        for slot in hidden {
            let std = (1.0 / slot.cols as f64).sqrt();
            for w in &mut p[slot.weight..slot.weight + slot.rows * slot.cols] {
                let e: f64 = StandardNormal.sample(&mut r);
                *w = std * e;
            }
        }
        if let (Some(at), Some(c)) = (self.layout.class_table, self.config.num_classes) {
            for v in &mut p[at..at + c as usize * self.config.embedding_dim] {
                *v = StandardNormal.sample(&mut r);
            }
        }
        ParamVector(p)
    }

    /// Sinusoidal features of `t`, interleaved as `(sin, cos)` pairs.
    pub fn embed_time(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.embedding_dim];
        self.embed_time_into(t, self.schedule.sigma(t)?, &mut out);
        Ok(out)
    }

    fn time_coordinate(&self, t: f64, sigma: f64) -> f64 {
        match self.config.time_input {
            TimeInput::Linear => t / self.schedule.t_max,
            TimeInput::LogSigma => {
                let (lo, hi) = self.log_sigma_range;
                (sigma.ln() - lo) / (hi - lo)
            }
        }
    }

    fn embed_time_into(&self, t: f64, sigma: f64, out: &mut [f64]) {
        let u = self.time_coordinate(t, sigma);
        let arg_scale = match self.config.time_embedding {
            TimeEmbedding::Positional => POSITIONAL_TIME_SCALE * u,
            TimeEmbedding::Fourier => std::f64::consts::TAU * u,
        };
        for (k, f) in self.frequencies.iter().enumerate() {
            let (s, c) = (arg_scale * f).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    fn check_input(&self, input: &NetInput<'_>) -> Result<()> {
        if input.z.len() != self.config.data_dim {
            return Err(Error::ShapeMismatch {
                expected: self.config.data_dim,
                got: input.z.len(),
            });
        }
        match (self.config.num_classes, input.class) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::invalid("class given to an unconditional network")),
            (Some(_), None) => Err(Error::invalid("conditional network needs a class")),
            (Some(c), Some(k)) if k >= c => Err(Error::UnknownClass {
                class: k,
                num_classes: c,
            }),
            _ => Ok(()),
        }
    }

    fn run(&self, theta: &[f64], input: &NetInput<'_>) -> Result<Tape> {
        self.check_input(input)?;
        let t = input.t;
        let alpha = self.schedule.alpha(t)?;
        let sigma = self.schedule.sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::numerical(format!("sigma({t}) = {sigma}: score undefined")));
        }
        let d = self.config.data_dim;
        let e = self.config.embedding_dim;
        let c_in = 1.0 / (alpha * alpha * self.config.data_std.powi(2) + sigma * sigma).sqrt();

        let mut x = vec![0.0; d + e];
        for (xi, zi) in x.iter_mut().zip(input.z) {
            *xi = c_in * zi;
        }
        self.embed_time_into(t, sigma, &mut x[d..]);
        if let (Some(at), Some(c)) = (self.layout.class_table, input.class) {
            let row = &theta[at + c as usize * e..at + (c as usize + 1) * e];
            axpy(1.0, row, &mut x[d..]);
        }

        let depth = self.layout.dense.len();
        let mut pre = Vec::with_capacity(depth - 1);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(depth - 1);
        let mut out = Vec::new();
        for (l, slot) in self.layout.dense.iter().enumerate() {
            let h = if l == 0 { &x } else { &post[l - 1] };
            let w = &theta[slot.weight..slot.bias];
            let b = &theta[slot.bias..slot.bias + slot.rows];
            let a: Vec<f64> = (0..slot.rows)
                .map(|j| dot(&w[j * slot.cols..(j + 1) * slot.cols], h) + b[j])
                .collect();
            if let Some(j) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite activation in layer {l}, unit {j} at t={t} (sigma={sigma})"
                )));
            }
            if l + 1 == depth {
                out = a;
            } else {
                post.push(a.iter().map(|&v| silu(v)).collect());
                pre.push(a);
            }
        }
        let (skip, out_scale) = match self.config.preconditioning {
            Preconditioning::None => (vec![0.0; d], 1.0),
            Preconditioning::Gaussian => (
                input.z.iter().map(|zi| sigma * c_in * c_in * zi).collect(),
                alpha * self.config.data_std * c_in,
            ),
        };
        Ok(Tape {
            input: x,
            pre,
            post,
            out,
            sigma,
            skip,
            out_scale,
        })
    }

    /// Score at one point.
    pub fn forward(&self, params: &ParamVector, input: NetInput<'_>) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let tape = self.run(params.as_slice(), &input)?;
        Ok(tape.score())
    }

    /// Scores for a batch; row-major output.
    pub fn forward_batch(&self, params: &ParamVector, batch: &[NetInput<'_>]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let rows: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|input| self.forward(params, *input))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::ShapeMismatch {
                expected: self.layout.total,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Accumulates the gradient of one sample's loss into `grad`, given
    /// `dL/dscore`.
    fn backprop(&self, theta: &[f64], input: &NetInput<'_>, tape: &Tape, d_score: &[f64], grad: &mut [f64]) {
        let d = self.config.data_dim;
        let e = self.config.embedding_dim;
        let depth = self.layout.dense.len();
        let k = -tape.out_scale / tape.sigma;
        let mut delta: Vec<f64> = d_score.iter().map(|g| k * g).collect();
        for l in (0..depth).rev() {
            let slot = self.layout.dense[l];
            let h = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            for (j, &dj) in delta.iter().enumerate() {
                let row = slot.weight + j * slot.cols;
                axpy(dj, h, &mut grad[row..row + slot.cols]);
                grad[slot.bias + j] += dj;
            }
            let mut dh = vec![0.0; slot.cols];
            for (j, &dj) in delta.iter().enumerate() {
                let row = slot.weight + j * slot.cols;
                axpy(dj, &theta[row..row + slot.cols], &mut dh);
            }
            if l == 0 {
                if let (Some(at), Some(c)) = (self.layout.class_table, input.class) {
                    let off = at + c as usize * e;
                    axpy(1.0, &dh[d..], &mut grad[off..off + e]);
                }
            } else {
                for (v, a) in dh.iter_mut().zip(&tape.pre[l - 1]) {
                    *v *= silu_grad(*a);
                }
                delta = dh;
            }
        }
    }

    /// Mean loss over `batch` and its exact gradient with respect to the
    /// parameters. `loss` maps (sample index, score) to the sample's loss
    /// and its derivative with respect to the score.
    pub fn backward<F>(
        &self,
        params: &ParamVector,
        batch: &[NetInput<'_>],
        loss: F,
    ) -> Result<(f64, ParamVector)>
    where
        F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
    {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let theta = params.as_slice();
        let partials: Vec<(f64, ParamVector)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(chunk, inputs)| {
                let mut grad = vec![0.0; self.layout.total];
                let mut total = 0.0;
                for (k, input) in inputs.iter().enumerate() {
                    let i = chunk * GRAD_CHUNK + k;
                    let tape = self.run(theta, input)?;
                    let score = tape.score();
                    let (l, d_score) = loss(i, &score);
                    if !l.is_finite() || d_score.iter().any(|g| !g.is_finite()) {
                        return Err(Error::numerical(format!(
                            "non-finite loss {l} for sample {i} at t={} (sigma={})",
                            input.t, tape.sigma
                        )));
                    }
                    total += l;
                    self.backprop(theta, input, &tape, &d_score, &mut grad);
                }
                Ok((total, ParamVector(grad)))
            })
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        let mut grad = ParamVector::zeros(self.layout.total);
        for (l, g) in &partials {
            loss_sum += l;
            grad.add_assign(g);
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        Ok((loss_sum / n, grad))
    }

    pub fn bind(&self, params: ParamVector) -> Result<NetScoreModel> {
        self.check_params(&params)?;
        Ok(NetScoreModel {
            net: self.clone(),
            params,
        })
    }
}

/// A network with fixed parameters, usable wherever a [`ScoreModel`] is.
#[derive(Debug, Clone)]
pub struct NetScoreModel {
    net: ScoreNet,
    params: ParamVector,
}

impl NetScoreModel {
    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }
}

impl ScoreModel for NetScoreModel {
    fn dim(&self) -> usize {
        self.net.config.data_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.net.schedule
    }

    fn num_classes(&self) -> Option<u32> {
        self.net.config.num_classes
    }

    fn score_into(&self, z: &[f64], t: f64, class: Option<u32>, out: &mut [f64]) -> Result<()> {
        let tape = self.net.run(self.params.as_slice(), &NetInput { z, t, class })?;
        out.copy_from_slice(&tape.score());
        Ok(())
    }
}

/// A saved network: architecture, schedule, raw and EMA parameters, and
/// free-form metadata stored alongside the configuration block.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamVector,
    pub ema: ParamVector,
    pub metadata: KeyValues,
}

impl Checkpoint {
    pub fn net(&self) -> Result<ScoreNet> {
        ScoreNet::new(self.config.clone(), self.schedule)
    }

    /// `DMNN` · u32 version · u32 config length · config text · u64 count ·
    /// f32 params · f32 EMA params, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut kv = KeyValues::new();
        kv.merge_section("net", &self.config.to_kv());
        kv.merge_section("schedule", &self.schedule.to_kv());
        kv.merge_section("meta", &self.metadata);
        let text = kv.to_text();
        let n = self.params.len();
        let mut out = Vec::with_capacity(20 + text.len() + 8 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in self.params.as_slice().iter().chain(self.ema.as_slice()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take_array::<4>("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = cur.u32("config length")? as usize;
        let text = std::str::from_utf8(cur.take(len, "config block")?)
            .map_err(|e| Error::Format(format!("config block is not UTF-8: {e}")))?;
        let kv = KeyValues::parse(text, "checkpoint config")?;
        let schedule = NoiseSchedule::from_kv(&kv.section("schedule"))?;
        let net_kv = kv.section("net");
        let config = NetConfig::from_kv(&net_kv, net_kv.require("data_dim")?)?;
        let n = cur.u64("parameter count")? as usize;
        let expected = ParamLayout::new(&config).total;
        if n != expected {
            return Err(Error::Format(format!(
                "parameter count {n} does not match the configured layout ({expected})"
            )));
        }
        let mut read = |what: &str| -> Result<ParamVector> {
            (0..n)
                .map(|_| cur.f32(what).map(f64::from))
                .collect::<Result<Vec<_>>>()
                .map(ParamVector)
        };
        let params = read("parameters")?;
        let ema = read("EMA parameters")?;
        if cur.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(Self {
            config,
            schedule,
            params,
            ema,
            metadata: kv.section("meta"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes)
    }
}
