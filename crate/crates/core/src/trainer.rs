//! Denoising score matching training with AdamW, EMA and linear warmup.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{fmt_f64, KeyValues};
use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::model::ScoreModel;
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::score_net::{Checkpoint, NetInput, ParamVector, ScoreNet};

/// The per-time weight `λ(t)` of the DSM objective, written in terms of
/// `σ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// `λ = σ_t²`: the noise-prediction loss `½‖ε̂ − ε‖²`.
    #[default]
    Sigma2,
    /// `λ = 1`.
    Uniform,
}

impl LossWeighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            Self::Sigma2 => sigma * sigma,
            Self::Uniform => 1.0,
        }
    }
}

impl FromStr for LossWeighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sigma2" => Ok(Self::Sigma2),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown loss weighting {other:?}")),
        }
    }
}

impl fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sigma2 => "sigma2",
            Self::Uniform => "uniform",
        })
    }
}

/// Density of training times on `[ξ, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeSampling {
    #[default]
    Uniform,
    LogUniform,
}

impl TimeSampling {
    pub fn sample(self, schedule: &NoiseSchedule, rng: &mut Rng) -> f64 {
        let (lo, hi) = (schedule.t_min, schedule.t_max);
        match self {
            Self::Uniform => lo + (hi - lo) * rng.random::<f64>(),
            Self::LogUniform => (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp(),
        }
    }
}

impl FromStr for TimeSampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "log-uniform" => Ok(Self::LogUniform),
            other => Err(format!("unknown time sampling {other:?}")),
        }
    }
}

impl fmt::Display for TimeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::LogUniform => "log-uniform",
        })
    }
}

/// One forward-process draw: a time and a standard normal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub eps: Vec<f64>,
}

pub fn draw_noise(
    count: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    sampling: TimeSampling,
    rng: &mut Rng,
) -> Vec<NoiseDraw> {
    (0..count)
        .map(|_| {
            let t = sampling.sample(schedule, rng);
            let eps = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            NoiseDraw { t, eps }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr_per_unit: f64,
    pub weight_decay: f64,
    pub ema_rate: f64,
    pub warmup_epochs: u64,
    pub loss_weighting: LossWeighting,
    pub t_sampling: TimeSampling,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Defaults to `max(1, epochs / 50)`.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 512,
            base_lr_per_unit: 2e-4 / 512.0,
            weight_decay: 0.0,
            ema_rate: 0.99929,
            warmup_epochs: 200,
            loss_weighting: LossWeighting::Sigma2,
            t_sampling: TimeSampling::Uniform,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::invalid(format!("ema_rate {} not in [0, 1)", self.ema_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(self.base_lr_per_unit >= 0.0) {
            return Err(Error::invalid("weight_decay and learning rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be >= 1"));
        }
        Ok(())
    }

    /// Batch actually used on a set of `n` points.
    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.min(n).max(1)
    }

    /// Linear scaling rule: `base_lr_per_unit · B`.
    pub fn learning_rate(&self, n: usize) -> f64 {
        self.base_lr_per_unit * self.effective_batch(n) as f64
    }

    pub fn warmup_factor(&self, epoch: u64) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every.unwrap_or((self.epochs / 50).max(1))
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            base_lr_per_unit: kv.get_or("base_lr_per_unit", d.base_lr_per_unit)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            ema_rate: kv.get_or("ema_rate", d.ema_rate)?,
            warmup_epochs: kv.get_or("warmup_epochs", d.warmup_epochs)?,
            loss_weighting: kv.get_or("loss_weighting", d.loss_weighting)?,
            t_sampling: kv.get_or("t_sampling", d.t_sampling)?,
            seed: kv.get_or("seed", d.seed)?,
            adam_beta1: kv.get_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.get_or("adam_beta2", d.adam_beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            checkpoint_every: kv.get("checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("base_lr_per_unit", fmt_f64(self.base_lr_per_unit));
        kv.set("weight_decay", fmt_f64(self.weight_decay));
        kv.set("ema_rate", fmt_f64(self.ema_rate));
        kv.set("warmup_epochs", self.warmup_epochs);
        kv.set("loss_weighting", self.loss_weighting);
        kv.set("t_sampling", self.t_sampling);
        kv.set("seed", self.seed);
        kv.set("adam_beta1", fmt_f64(self.adam_beta1));
        kv.set("adam_beta2", fmt_f64(self.adam_beta2));
        kv.set("adam_eps", fmt_f64(self.adam_eps));
        if let Some(every) = self.checkpoint_every {
            kv.set("checkpoint_every", every);
        }
        kv
    }
}

fn row_class(net: &ScoreNet, set: &TrainingSet, n: usize) -> Result<Option<u32>> {
    if net.config().num_classes.is_none() {
        return Ok(None);
    }
    set.label(n)
        .map(Some)
        .ok_or_else(|| Error::invalid("conditional network needs a labeled training set"))
}

/// DSM loss `mean λ(t)·½‖s_θ(α_t x + σ_t ε, t, y) + ε/σ_t‖²` over
/// `rows` paired with `draws`, and its gradient.
pub fn dsm_loss_on_draws(
    net: &ScoreNet,
    params: &ParamVector,
    set: &TrainingSet,
    rows: &[usize],
    draws: &[NoiseDraw],
    weighting: LossWeighting,
) -> Result<(f64, ParamVector)> {
    if rows.is_empty() || rows.len() != draws.len() {
        return Err(Error::invalid(format!(
            "need a non-empty batch with one draw per row ({} rows, {} draws)",
            rows.len(),
            draws.len()
        )));
    }
    let schedule = net.net_schedule();
    let mut zs = Vec::with_capacity(rows.len());
    let mut classes = Vec::with_capacity(rows.len());
    let mut sigmas = Vec::with_capacity(rows.len());
    for (&n, draw) in rows.iter().zip(draws) {
        let alpha = schedule.alpha(draw.t)?;
        let sigma = schedule.sigma(draw.t)?;
        zs.push(
            set.row(n)
                .iter()
                .zip(&draw.eps)
                .map(|(x, e)| alpha * x + sigma * e)
                .collect::<Vec<f64>>(),
        );
        classes.push(row_class(net, set, n)?);
        sigmas.push(sigma);
    }
    let inputs: Vec<NetInput> = zs
        .iter()
        .zip(draws)
        .zip(&classes)
        .map(|((z, d), &class)| NetInput { z, t: d.t, class })
        .collect();
    net.backward(params, &inputs, |i, s| {
        let sigma = sigmas[i];
        let lambda = weighting.weight(sigma);
        let r: Vec<f64> = s.iter().zip(&draws[i].eps).map(|(si, e)| si + e / sigma).collect();
        let loss = lambda * 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        (loss, r.into_iter().map(|v| lambda * v).collect())
    })
}

/// Draws per-sample times and noise from `rng` and evaluates
/// [`dsm_loss_on_draws`].
#[allow(clippy::too_many_arguments)]
pub fn dsm_minibatch_loss(
    net: &ScoreNet,
    params: &ParamVector,
    set: &TrainingSet,
    rows: &[usize],
    weighting: LossWeighting,
    sampling: TimeSampling,
    rng: &mut Rng,
) -> Result<(f64, ParamVector)> {
    let draws = draw_noise(rows.len(), set.dim(), net.net_schedule(), sampling, rng);
    dsm_loss_on_draws(net, params, set, rows, &draws, weighting)
}

/// DSM loss of any score model on matched `(row, draw)` pairs; no
/// gradient. Conditional models receive each row's label.
pub fn evaluate_dsm_loss<M: ScoreModel + ?Sized>(
    model: &M,
    set: &TrainingSet,
    draws: &[(usize, NoiseDraw)],
    weighting: LossWeighting,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::invalid("no Monte-Carlo draws"));
    }
    let schedule = model.schedule();
    let conditional = model.num_classes().is_some();
    let mut z = vec![0.0; set.dim()];
    let mut s = vec![0.0; set.dim()];
    let mut total = 0.0;
    for (n, draw) in draws {
        let alpha = schedule.alpha(draw.t)?;
        let sigma = schedule.sigma(draw.t)?;
        for ((zi, x), e) in z.iter_mut().zip(set.row(*n)).zip(&draw.eps) {
            *zi = alpha * x + sigma * e;
        }
        let class = if conditional { set.label(*n) } else { None };
        model.score_into(&z, draw.t, class, &mut s)?;
        let r: f64 = s.iter().zip(&draw.eps).map(|(si, e)| (si + e / sigma).powi(2)).sum();
        total += weighting.weight(sigma) * 0.5 * r;
    }
    Ok(total / draws.len() as f64)
}

/// Adam moments for an AdamW update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One AdamW step: decoupled decay `θ ← θ − lr·λ_wd·θ` followed by the
    /// bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let decay = lr * cfg.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            *p -= decay * *p + lr * update;
        }
    }
}

pub fn ema_update(ema: &mut [f64], params: &[f64], rate: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = rate * *e + (1.0 - rate) * p;
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamVector,
    pub ema: ParamVector,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: u64,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(net: &ScoreNet, seed: u64) -> Self {
        let params = net.init_params();
        Self {
            ema: params.clone(),
            adam: AdamState::new(params.len()),
            params,
            step: 0,
            epoch: 0,
            rng: rng::stream(rng::derive_seed(seed, "train"), 0),
        }
    }
}

/// One row of the training curve; the loss is the epoch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub ema_rate: f64,
    pub wall_ms: u64,
}

pub const CURVE_HEADER: &str = "epoch,step,loss,lr,ema_rate,wall_ms";

/// Curve CSV. With `wall_clock = false` the time column is written as 0
/// so repeated runs are byte-identical.
pub fn curve_csv(history: &[CurvePoint], wall_clock: bool) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.epoch,
            p.step,
            fmt_f64(p.loss),
            fmt_f64(p.lr),
            fmt_f64(p.ema_rate),
            if wall_clock { p.wall_ms } else { 0 }
        ));
    }
    out
}

/// Parameters kept at a checkpoint epoch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: u64,
    pub step: u64,
    pub params: ParamVector,
    pub ema: ParamVector,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<CurvePoint>,
    pub snapshots: Vec<Snapshot>,
}

/// Where `train` writes its checkpoints and curve, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    pub wall_clock: bool,
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("ckpt_{epoch:06}.dmnn"))
}

/// Trains `net` on `set` for `cfg.epochs` epochs. Each epoch visits every
/// row once in a fresh random order, in minibatches of `min(B, N)`.
pub fn train(
    set: &TrainingSet,
    net: &ScoreNet,
    cfg: &TrainConfig,
    output: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if set.dim() != net.config().data_dim {
        return Err(Error::ShapeMismatch {
            expected: net.config().data_dim,
            got: set.dim(),
        });
    }
    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut state = TrainState::new(net, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    let mut snapshots = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let batch = cfg.effective_batch(set.len());
    let base_lr = cfg.learning_rate(set.len());
    let every = cfg.checkpoint_interval();
    let started = Instant::now();
    let mut order: Vec<usize> = (0..set.len()).collect();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let warm = cfg.warmup_factor(epoch);
        let lr = base_lr * warm;
        let rate = cfg.ema_rate * warm;
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(batch) {
            let diverged = |detail: String, step: u64| Error::Diverged {
                epoch,
                step,
                detail,
                last_checkpoint: last_checkpoint.clone(),
            };
            let (loss, grad) = match dsm_minibatch_loss(
                net,
                &state.params,
                set,
                rows,
                cfg.loss_weighting,
                cfg.t_sampling,
                &mut state.rng,
            ) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), state.step)),
                Err(e) => return Err(e),
            };
            state.adam.step(state.params.as_mut_slice(), grad.as_slice(), lr, cfg);
            if !state.params.is_finite() {
                return Err(diverged("non-finite parameters after update".into(), state.step));
            }
            ema_update(state.ema.as_mut_slice(), state.params.as_slice(), rate);
            state.step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        history.push(CurvePoint {
            epoch,
            step: state.step,
            loss: epoch_loss / batches as f64,
            lr,
            ema_rate: rate,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if (epoch + 1) % every == 0 || epoch + 1 == cfg.epochs {
            let path = match &output.dir {
                Some(dir) => {
                    let path = checkpoint_path(dir, epoch + 1);
                    let mut meta = KeyValues::new();
                    meta.set("epoch", epoch + 1);
                    meta.set("step", state.step);
                    meta.merge_section("train", &cfg.to_kv());
                    Checkpoint {
                        config: net.config().clone(),
                        schedule: *net.net_schedule(),
                        params: state.params.clone(),
                        ema: state.ema.clone(),
                        metadata: meta,
                    }
                    .save(&path)?;
                    last_checkpoint = Some(path.clone());
                    Some(path)
                }
                None => None,
            };
            snapshots.push(Snapshot {
                epoch: epoch + 1,
                step: state.step,
                params: state.params.clone(),
                ema: state.ema.clone(),
                path,
            });
        }
    }
    state.epoch = cfg.epochs;
    if let Some(dir) = &output.dir {
        let path = dir.join("curve.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
        f.write_all(curve_csv(&history, output.wall_clock).as_bytes())
            .map_err(|e| Error::file(&path, e))?;
    }
    Ok(TrainOutcome {
        state,
        history,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_net::{NetConfig, Preconditioning};

    fn tiny_set() -> TrainingSet {
        TrainingSet::unlabeled(vec![1.0, 0.5, -0.5, 2.0, 0.0, -1.0, 1.5, 1.5], 2).unwrap()
    }

    fn tiny_net() -> ScoreNet {
        let cfg = NetConfig {
            hidden_width: 8,
            hidden_depth: 1,
            embedding_dim: 4,
            preconditioning: Preconditioning::None,
            ..NetConfig::new(2)
        };
        ScoreNet::new(cfg, NoiseSchedule::edm()).unwrap()
    }

    fn short(epochs: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            base_lr_per_unit: 1e-3,
            warmup_epochs: 2,
            ema_rate: 0.9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_model_loss_matches_per_sample_recomputation() {
        let net = tiny_net();
        let set = tiny_set();
        let p = ParamVector::zeros(net.param_count());
        let rows = [0, 1, 2, 3];
        let schedule = NoiseSchedule::edm();
        let mut a = rng::stream(4, 0);
        let mut b = a.clone();
        let (loss, _) =
            dsm_minibatch_loss(&net, &p, &set, &rows, LossWeighting::Uniform, TimeSampling::Uniform, &mut a).unwrap();
        let draws = draw_noise(4, 2, &schedule, TimeSampling::Uniform, &mut b);
        let want: f64 = draws
            .iter()
            .map(|d| {
                let s = schedule.sigma(d.t).unwrap();
                0.5 * d.eps.iter().map(|e| (e / s).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss - want).abs() <= 1e-14 * want);
    }

    #[test]
    fn lr_scales_linearly_with_batch() {
        let a = TrainConfig { batch_size: 32, ..TrainConfig::default() };
        let b = TrainConfig { batch_size: 64, ..TrainConfig::default() };
        assert_eq!(b.learning_rate(1000), 2.0 * a.learning_rate(1000));
        assert_eq!(a.learning_rate(8), a.base_lr_per_unit * 8.0);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig { warmup_epochs: 4, ..TrainConfig::default() };
        let f: Vec<f64> = (0..6).map(|e| c.warmup_factor(e)).collect();
        assert_eq!(f, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_ema_rate_tracks_params() {
        let cfg = TrainConfig { ema_rate: 0.0, ..short(3) };
        let out = train(&tiny_set(), &tiny_net(), &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(out.state.ema, out.state.params);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let net = tiny_net();
        let cfg = TrainConfig { base_lr_per_unit: 0.0, ..short(5) };
        let out = train(&tiny_set(), &net, &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(out.state.params, net.init_params());
        assert_eq!(out.state.step, 10);
    }

    #[test]
    fn zero_decay_matches_plain_adam() {
        let cfg = short(1);
        let mut p = vec![0.5, -1.0, 2.0];
        let g = [0.1, -0.2, 0.3];
        let mut adam = AdamState::new(3);
        adam.step(&mut p, &g, 0.01, &cfg);
        // First Adam step moves each coordinate by lr·sign(g)·|g|/(|g|+eps).
        for (pi, (p0, gi)) in p.iter().zip([0.5, -1.0, 2.0].iter().zip(&g)) {
            let want = p0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = TrainConfig { weight_decay: 0.1, ..short(1) };
        let mut p = vec![2.0];
        AdamState::new(1).step(&mut p, &[0.0], 0.5, &cfg);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = short(4);
        let a = train(&tiny_set(), &tiny_net(), &cfg, &TrainOutput::default()).unwrap();
        let b = train(&tiny_set(), &tiny_net(), &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(curve_csv(&a.history, false), curve_csv(&b.history, false));
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn writes_checkpoints_and_curve() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: Some(2), ..short(5) };
        let out = TrainOutput { dir: Some(dir.path().to_path_buf()), wall_clock: false };
        let res = train(&tiny_set(), &tiny_net(), &cfg, &out).unwrap();
        let epochs: Vec<u64> = res.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 5]);
        let ck = Checkpoint::load(&checkpoint_path(dir.path(), 5)).unwrap();
        assert_eq!(ck.ema, res.state.ema.quantized());
        let curve = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert!(curve.starts_with(CURVE_HEADER));
        assert_eq!(curve.lines().count(), 6);
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { base_lr_per_unit: 1e300, warmup_epochs: 0, checkpoint_every: Some(1), ..short(50) };
        let out = TrainOutput { dir: Some(dir.path().to_path_buf()), wall_clock: false };
        match train(&tiny_set(), &tiny_net(), &cfg, &out) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig { checkpoint_every: Some(3), t_sampling: TimeSampling::LogUniform, ..short(7) };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = cfg.to_kv();
        kv.set("ema_rate", 1.0);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }
}
