//! Euler integrators for the backward probability-flow ODE and reverse SDE.
//!
//! Times run on the grid `0 = t_0 < ξ = t_1 < … < t_n = T`. One step maps
//! `z` at `t_{k+1}` to `t_k`:
//!
//! ```text
//! ODE: z ← (α_k/α_{k+1}) z − c s(z, t_{k+1})
//! SDE: z ← (α_k/α_{k+1}) z − 2c s(z, t_{k+1}) + √(2c (t_k − t_{k+1})) ε
//! c   = σ_{k+1} σ_k − α_k σ_{k+1}² / α_{k+1}
//! ```
//!
//! The last step to `t_0 = 0` uses the same formula with `α_0 = 1`,
//! `σ_0 = 0`, which is the finite closed form `z_ξ/α_ξ + (σ_ξ²/α_ξ) s`; the
//! score is never evaluated at `σ = 0`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::model::ScoreModel;
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    OdeEuler,
    SdeEuler,
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ode-euler" => Ok(Self::OdeEuler),
            "sde-euler" => Ok(Self::SdeEuler),
            other => Err(format!("unknown sampler method {other:?}")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OdeEuler => "ode-euler",
            Self::SdeEuler => "sde-euler",
        })
    }
}

/// Spacing of `t_1 = ξ, …, t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeGrid {
    #[default]
    Uniform,
    /// Constant ratio between consecutive times.
    Geometric,
}

impl FromStr for TimeGrid {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "geometric" => Ok(Self::Geometric),
            other => Err(format!("unknown time grid {other:?}")),
        }
    }
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Geometric => "geometric",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    /// Number of updates including the final one to `t = 0`.
    pub n_steps: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Trajectories integrated per parallel work item.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::OdeEuler,
            n_steps: 100,
            grid: TimeGrid::Uniform,
            seed: 0,
            batch_size: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::invalid(format!("n_steps must be >= 2, got {}", self.n_steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            method: kv.get_or("method", d.method)?,
            n_steps: kv.get_or("n_steps", d.n_steps)?,
            grid: kv.get_or("grid", d.grid)?,
            seed: kv.get_or("seed", d.seed)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("method", self.method);
        kv.set("n_steps", self.n_steps);
        kv.set("grid", self.grid);
        kv.set("seed", self.seed);
        kv.set("batch_size", self.batch_size);
        kv
    }
}

/// Ascending grid `[0, ξ, …, T]` of length `n_steps + 1`.
pub fn time_grid(schedule: &NoiseSchedule, n_steps: usize, grid: TimeGrid) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(Error::invalid(format!("n_steps must be >= 2, got {n_steps}")));
    }
    let (xi, t_max) = (schedule.t_min, schedule.t_max);
    if !(xi > 0.0 && xi < t_max) {
        return Err(Error::invalid(format!("need 0 < xi < T, got xi={xi}, T={t_max}")));
    }
    let last = (n_steps - 1) as f64;
    let mut ts = Vec::with_capacity(n_steps + 1);
    ts.push(0.0);
    for k in 0..n_steps {
        let u = k as f64 / last;
        ts.push(match grid {
            TimeGrid::Uniform => xi + (t_max - xi) * u,
            TimeGrid::Geometric => xi * (t_max / xi).powf(u),
        });
    }
    ts[n_steps] = t_max;
    Ok(ts)
}

/// `(α_to/α_from, c)` for a step from `t_from` down to `t_to`.
pub fn step_coefficients(schedule: &NoiseSchedule, t_from: f64, t_to: f64) -> Result<(f64, f64)> {
    if !(t_to < t_from) {
        return Err(Error::invalid(format!("step must go backward in time: {t_from} -> {t_to}")));
    }
    let (a1, s1) = (schedule.alpha(t_from)?, schedule.sigma(t_from)?);
    let (a0, s0) = (schedule.alpha(t_to)?, schedule.sigma(t_to)?);
    if s1 <= 0.0 {
        return Err(Error::numerical(format!("sigma({t_from}) = {s1}: cannot step from a noiseless state")));
    }
    if a1 <= 0.0 {
        return Err(Error::numerical(format!("alpha({t_from}) = {a1} is not positive")));
    }
    Ok((a0 / a1, s1 * s0 - a0 * s1 * s1 / a1))
}

pub fn ode_step<M: ScoreModel + ?Sized>(
    model: &M,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    class: Option<u32>,
) -> Result<Vec<f64>> {
    let (ratio, c) = step_coefficients(model.schedule(), t_from, t_to)?;
    let s = model.score(z, t_from, class)?;
    Ok(z.iter().zip(&s).map(|(zi, si)| ratio * zi - c * si).collect())
}

/// Euler–Maruyama step with an explicit standard normal draw `eps`.
pub fn sde_step<M: ScoreModel + ?Sized>(
    model: &M,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    class: Option<u32>,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let (ratio, c) = step_coefficients(model.schedule(), t_from, t_to)?;
    let var = 2.0 * c * (t_to - t_from);
    if !(var >= 0.0) {
        return Err(Error::numerical(format!(
            "negative SDE step variance {var} between t={t_from} and t={t_to}"
        )));
    }
    let noise = var.sqrt();
    let s = model.score(z, t_from, class)?;
    Ok(z.iter()
        .zip(&s)
        .zip(eps)
        .map(|((zi, si), e)| ratio * zi - 2.0 * c * si + noise * e)
        .collect())
}

/// Standard deviation of the prior at `T`.
pub fn prior_std(schedule: &NoiseSchedule) -> f64 {
    match schedule.kind {
        ScheduleKind::Vp { .. } => 1.0,
        ScheduleKind::Edm | ScheduleKind::Ve { .. } => schedule.sigma_at(schedule.t_max),
    }
}

/// Condition assigned to each generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelection {
    Unconditional,
    Fixed(u32),
    /// Sample `i` gets class `i mod C`.
    Cycle,
}

impl ClassSelection {
    fn class_of(self, index: usize, num_classes: Option<u32>) -> Option<u32> {
        match (self, num_classes) {
            (Self::Unconditional, _) => None,
            (Self::Fixed(c), _) => Some(c),
            (Self::Cycle, Some(c)) => Some((index % c as usize) as u32),
            (Self::Cycle, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    /// Row-major `count × dim`.
    pub data: Vec<f64>,
    pub classes: Option<Vec<u32>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// The samples as an unlabeled set (values rounded to single precision).
    pub fn to_training_set(&self) -> Result<TrainingSet> {
        TrainingSet::unlabeled(self.data.clone(), self.dim)
    }
}

fn check_selection<M: ScoreModel + ?Sized>(model: &M, classes: ClassSelection) -> Result<()> {
    match (model.num_classes(), classes) {
        (None, ClassSelection::Unconditional) => Ok(()),
        (None, _) => Err(Error::invalid("class requested from an unconditional model")),
        (Some(_), ClassSelection::Unconditional) => {
            Err(Error::invalid("conditional model needs a class selection"))
        }
        (Some(c), ClassSelection::Fixed(k)) if k >= c => Err(Error::UnknownClass {
            class: k,
            num_classes: c,
        }),
        _ => Ok(()),
    }
}

/// Integrates one trajectory from a prior draw at `T` down to `t = 0`.
/// Trajectory `index` draws all of its randomness from its own stream.
pub fn trajectory<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    grid: &[f64],
    index: u64,
    class: Option<u32>,
) -> Result<Vec<f64>> {
    let schedule = model.schedule();
    let d = model.dim();
    let mut r = rng::stream(rng::derive_seed(cfg.seed, "sample"), index);
    let std = prior_std(schedule);
    let mut z: Vec<f64> = (0..d)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect();
    let mut eps = vec![0.0; d];
    for k in (0..grid.len() - 1).rev() {
        z = match cfg.method {
            Method::OdeEuler => ode_step(model, &z, grid[k + 1], grid[k], class)?,
            Method::SdeEuler => {
                eps.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut r));
                sde_step(model, &z, grid[k + 1], grid[k], class, &eps)?
            }
        };
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "trajectory {index} became non-finite in coordinate {i} at t={}",
                grid[k]
            )));
        }
    }
    Ok(z)
}

/// Generates `count` samples. Output is a deterministic function of the
/// model, the configuration and its seed, independent of thread count.
pub fn sample<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    count: usize,
    classes: ClassSelection,
) -> Result<SampleBatch> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    check_selection(model, classes)?;
    let grid = time_grid(model.schedule(), cfg.n_steps, cfg.grid)?;
    let num_classes = model.num_classes();
    let d = model.dim();
    let mut data = vec![0.0; count * d];
    data.par_chunks_mut(cfg.batch_size * d)
        .enumerate()
        .try_for_each(|(b, chunk)| {
            for (j, out) in chunk.chunks_mut(d).enumerate() {
                let i = b * cfg.batch_size + j;
                let z = trajectory(model, cfg, &grid, i as u64, classes.class_of(i, num_classes))?;
                out.copy_from_slice(&z);
            }
            Ok::<_, Error>(())
        })?;
    let classes = num_classes.map(|_| {
        (0..count)
            .map(|i| classes.class_of(i, num_classes).unwrap_or(0))
            .collect()
    });
    Ok(SampleBatch { dim: d, data, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::dataset::squared_distance;
    use crate::kernel_score::KernelScoreModel;

    fn kernel(points: Vec<f64>, schedule: NoiseSchedule) -> KernelScoreModel {
        KernelScoreModel::new(Arc::new(TrainingSet::unlabeled(points, 2).unwrap()), schedule).unwrap()
    }

    #[test]
    fn grid_orientation() {
        let s = NoiseSchedule::edm();
        for grid in [TimeGrid::Uniform, TimeGrid::Geometric] {
            let ts = time_grid(&s, 5, grid).unwrap();
            assert_eq!(ts.len(), 6);
            assert_eq!(ts[0], 0.0);
            assert_eq!(ts[1], s.t_min);
            assert_eq!(ts[5], s.t_max);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(time_grid(&s, 1, TimeGrid::Uniform).is_err());
    }

    #[test]
    fn single_point_collapses_to_it() {
        let m = kernel(vec![0.75, -0.25], NoiseSchedule::edm());
        let cfg = SamplerConfig { n_steps: 10, ..SamplerConfig::default() };
        let b = sample(&m, &cfg, 20, ClassSelection::Unconditional).unwrap();
        for row in b.rows() {
            assert!((row[0] - 0.75).abs() < 1e-12 && (row[1] + 0.25).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn two_step_edm_matches_hand_unrolled() {
        let pts = [1.0, 0.0, -1.0, 0.5];
        let m = kernel(pts.to_vec(), NoiseSchedule::edm());
        let (xi, big_t) = (1e-3, 80.0);
        let z_t = [3.0, -2.0];
        // Kernel score at σ = t by direct evaluation.
        let score = |z: &[f64], s: f64| {
            let l: Vec<f64> = (0..2)
                .map(|n| -((pts[2 * n] - z[0]).powi(2) + (pts[2 * n + 1] - z[1]).powi(2)) / (2.0 * s * s))
                .collect();
            let mx = l[0].max(l[1]);
            let w: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
            let tot = w[0] + w[1];
            let mut out = [0.0; 2];
            for n in 0..2 {
                for i in 0..2 {
                    out[i] += w[n] / tot * (pts[2 * n + i] - z[i]) / (s * s);
                }
            }
            out
        };
        let s1 = score(&z_t, big_t);
        let c1 = big_t * xi - big_t * big_t;
        let z_xi = [z_t[0] - c1 * s1[0], z_t[1] - c1 * s1[1]];
        let s0 = score(&z_xi, xi);
        let z_0 = [z_xi[0] + xi * xi * s0[0], z_xi[1] + xi * xi * s0[1]];

        let mid = ode_step(&m, &z_t, big_t, xi, None).unwrap();
        let out = ode_step(&m, &mid, xi, 0.0, None).unwrap();
        for i in 0..2 {
            assert!((mid[i] - z_xi[i]).abs() < 1e-10);
            assert!((out[i] - z_0[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn final_ode_step_is_the_convex_combination() {
        let m = kernel(vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0], NoiseSchedule::vp());
        let xi = m.schedule().t_min;
        let z = [0.4, 0.9];
        let out = ode_step(&m, &z, xi, 0.0, None).unwrap();
        let alpha = m.schedule().alpha(xi).unwrap();
        let w = m.weights(&z, xi, None).unwrap();
        let mut want = [0.0; 2];
        for (&n, &wn) in w.indices.iter().zip(&w.weights) {
            want[0] += wn * m.training_set().row(n)[0];
            want[1] += wn * m.training_set().row(n)[1];
        }
        for i in 0..2 {
            assert!((out[i] - want[i]).abs() < 1e-10, "{out:?} vs {want:?} (alpha {alpha})");
        }
    }

    #[test]
    fn zero_noise_sde_is_deterministic() {
        let m = kernel(vec![1.0, 1.0, -1.0, 0.0], NoiseSchedule::edm());
        let grid = time_grid(m.schedule(), 8, TimeGrid::Uniform).unwrap();
        let run = || {
            let mut z = vec![5.0, 5.0];
            for k in (0..8).rev() {
                z = sde_step(&m, &z, grid[k + 1], grid[k], None, &[0.0, 0.0]).unwrap();
            }
            z
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampling_is_seed_deterministic_and_batch_independent() {
        let m = kernel(vec![1.0, 1.0, -1.0, 0.0, 0.3, 0.2], NoiseSchedule::edm());
        let cfg = SamplerConfig { method: Method::SdeEuler, n_steps: 20, batch_size: 3, ..SamplerConfig::default() };
        let a = sample(&m, &cfg, 10, ClassSelection::Unconditional).unwrap();
        let b = sample(&m, &SamplerConfig { batch_size: 7, ..cfg.clone() }, 10, ClassSelection::Unconditional).unwrap();
        assert_eq!(a, b);
        let c = sample(&m, &SamplerConfig { seed: 1, ..cfg }, 10, ClassSelection::Unconditional).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn errors() {
        let m = kernel(vec![1.0, 1.0], NoiseSchedule::edm());
        let cfg = SamplerConfig::default();
        assert!(sample(&m, &cfg, 0, ClassSelection::Unconditional).is_err());
        assert!(sample(&m, &cfg, 1, ClassSelection::Fixed(0)).is_err());
        assert!(ode_step(&m, &[0.0, 0.0], 0.0, 0.0, None).is_err());
        // A constant-zero VE schedule has σ = 0 everywhere.
        let flat = NoiseSchedule {
            kind: ScheduleKind::Ve { sigma_min: 0.0, sigma_max: 0.0 },
            t_min: 0.1,
            t_max: 1.0,
        };
        let e = step_coefficients(&flat, 0.5, 0.1).unwrap_err();
        assert!(e.is_numerical());
    }

    #[test]
    fn ode_samples_replicate_training_points() {
        let pts: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64) / 3.0 - 1.5).collect();
        let m = kernel(pts.clone(), NoiseSchedule::edm());
        let b = sample(&m, &SamplerConfig::default(), 200, ClassSelection::Unconditional).unwrap();
        let diam = m.training_set().diameter();
        for row in b.rows() {
            let nn = pts.chunks(2).map(|x| squared_distance(x, row)).fold(f64::INFINITY, f64::min);
            assert!(nn.sqrt() < 1e-2 * diam);
        }
    }
}
