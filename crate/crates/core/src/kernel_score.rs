//! The closed-form minimizer of the empirical denoising score matching
//! objective.
//!
//! For a training set `{x_n}` the optimum is a softmax-weighted pull toward
//! the scaled training points,
//!
//! ```text
//! s*(z, t) = Σ_n S_n(z, t) · (α_t x_n − z) / σ_t²,
//! S_n      = softmax_n(−‖α_t x_n − z‖² / (2σ_t²)),
//! ```
//!
//! and the class-conditional optimum restricts the softmax to the rows with
//! the requested label. Exponents are shifted by their maximum before
//! exponentiation; at small `σ_t` they reach `−1e6` and the unshifted form
//! underflows to `0/0`.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::dataset::TrainingSet;
use crate::error::{Error, Result};
use crate::model::ScoreModel;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::trainer::{LossWeighting, NoiseDraw, TimeSampling};

#[derive(Debug, Clone)]
pub struct KernelScoreModel {
    set: Arc<TrainingSet>,
    schedule: NoiseSchedule,
    conditional: bool,
    sq_norms: Vec<f64>,
    members: Vec<Vec<usize>>,
}

/// Posterior point-mass weights over the active training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    /// Training-row index of each weight.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl KernelScoreModel {
    pub fn new(set: Arc<TrainingSet>, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        let sq_norms = set.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
        Ok(Self {
            set,
            schedule,
            conditional: false,
            sq_norms,
            members: Vec::new(),
        })
    }

    /// Class-conditional optimum; requires a labeled set.
    pub fn conditional(set: Arc<TrainingSet>, schedule: NoiseSchedule) -> Result<Self> {
        let c = set
            .num_classes()
            .ok_or_else(|| Error::invalid("conditional kernel model needs a labeled set"))?;
        let mut members = vec![Vec::new(); c as usize];
        for (i, &l) in set.labels().unwrap_or(&[]).iter().enumerate() {
            members[l as usize].push(i);
        }
        Ok(Self {
            members,
            conditional: true,
            ..Self::new(set, schedule)?
        })
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.set
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    fn active(&self, class: Option<u32>) -> Result<Option<&[usize]>> {
        match (self.conditional, class) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::invalid(
                "class given to an unconditional kernel model",
            )),
            (true, None) => Err(Error::invalid("conditional kernel model needs a class")),
            (true, Some(c)) => {
                let members = self.members.get(c as usize).ok_or(Error::UnknownClass {
                    class: c,
                    num_classes: self.members.len() as u32,
                })?;
                if members.is_empty() {
                    return Err(Error::EmptyClass(c));
                }
                Ok(Some(members.as_slice()))
            }
        }
    }

    fn coefficients(&self, z: &[f64], t: f64) -> Result<(f64, f64)> {
        if z.len() != self.set.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.set.dim(),
                got: z.len(),
            });
        }
        let alpha = self.schedule.alpha(t)?;
        let sigma = self.schedule.sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::numerical(format!(
                "sigma({t}) = {sigma}: the kernel posterior is degenerate"
            )));
        }
        Ok((alpha, sigma))
    }

    /// Fills `w` with the stabilized softmax over the active rows.
    fn softmax_into(
        &self,
        z: &[f64],
        alpha: f64,
        sigma: f64,
        active: Option<&[usize]>,
        w: &mut Vec<f64>,
    ) {
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let scale = 1.0 / (2.0 * sigma * sigma);
        let exponent = |n: usize| {
            let dot: f64 = self.set.row(n).iter().zip(z).map(|(x, zi)| x * zi).sum();
            let d2 = alpha * alpha * self.sq_norms[n] - 2.0 * alpha * dot + zz;
            -d2.max(0.0) * scale
        };
        w.clear();
        match active {
            None => w.extend((0..self.set.len()).map(exponent)),
            Some(idx) => w.extend(idx.iter().map(|&n| exponent(n))),
        }
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in w.iter_mut() {
            *v /= total;
        }
    }

    /// Accumulates `Σ_n w_n · term(x_n)` into `out`.
    fn weighted_sum(
        &self,
        z: &[f64],
        t: f64,
        class: Option<u32>,
        out: &mut [f64],
        term: impl Fn(f64, f64, f64, f64) -> f64,
    ) -> Result<()> {
        let (alpha, sigma) = self.coefficients(z, t)?;
        let active = self.active(class)?;
        if out.len() != z.len() {
            return Err(Error::ShapeMismatch {
                expected: z.len(),
                got: out.len(),
            });
        }
        let mut w = Vec::new();
        self.softmax_into(z, alpha, sigma, active, &mut w);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut add = |n: usize, wn: f64| {
            for ((o, x), zi) in out.iter_mut().zip(self.set.row(n)).zip(z) {
                *o += wn * term(*x, *zi, alpha, sigma);
            }
        };
        match active {
            None => w.iter().enumerate().for_each(|(n, &wn)| add(n, wn)),
            Some(idx) => idx.iter().zip(&w).for_each(|(&n, &wn)| add(n, wn)),
        }
        Ok(())
    }

    pub fn weights(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<PosteriorWeights> {
        let (alpha, sigma) = self.coefficients(z, t)?;
        let active = self.active(class)?;
        let mut weights = Vec::new();
        self.softmax_into(z, alpha, sigma, active, &mut weights);
        let indices = match active {
            None => (0..self.set.len()).collect(),
            Some(idx) => idx.to_vec(),
        };
        Ok(PosteriorWeights { indices, weights })
    }

    /// Monte-Carlo estimate of the irreducible part of the DSM loss,
    /// `E λ(t) ½‖s*(z_t, t) + ε/σ_t‖²`, over the supplied draws. Each draw
    /// pairs a training row index with its time and noise.
    pub fn optimum_residual_on_draws(
        &self,
        draws: &[(usize, NoiseDraw)],
        weighting: LossWeighting,
    ) -> Result<f64> {
        if draws.is_empty() {
            return Err(Error::invalid("no Monte-Carlo draws"));
        }
        let d = self.set.dim();
        let mut z = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut total = 0.0;
        for (n, draw) in draws {
            let (alpha, sigma) = (self.schedule.alpha(draw.t)?, self.schedule.sigma(draw.t)?);
            for ((zi, x), e) in z.iter_mut().zip(self.set.row(*n)).zip(&draw.eps) {
                *zi = alpha * x + sigma * e;
            }
            let class = if self.conditional {
                self.set.label(*n)
            } else {
                None
            };
            self.score_into(&z, draw.t, class, &mut s)?;
            let r: f64 = s
                .iter()
                .zip(&draw.eps)
                .map(|(si, e)| (si + e / sigma).powi(2))
                .sum();
            total += weighting.weight(sigma) * 0.5 * r;
        }
        Ok(total / draws.len() as f64)
    }

    /// Draws `mc_samples` (row, time, noise) triples and evaluates
    /// [`Self::optimum_residual_on_draws`].
    pub fn optimum_residual(
        &self,
        weighting: LossWeighting,
        sampling: TimeSampling,
        mc_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        if mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        let draws = residual_draws(&self.set, &self.schedule, sampling, mc_samples, seed);
        self.optimum_residual_on_draws(&draws, weighting)
    }
}

/// Matched Monte-Carlo draws for comparing a model's DSM loss against the
/// optimum residual: uniformly chosen rows with per-draw time and noise.
pub fn residual_draws(
    set: &TrainingSet,
    schedule: &NoiseSchedule,
    sampling: TimeSampling,
    count: usize,
    seed: u64,
) -> Vec<(usize, NoiseDraw)> {
    use rand::Rng as _;
    let mut rng = rng::stream(rng::derive_seed(seed, "residual-draws"), 0);
    (0..count)
        .map(|_| {
            let n = rng.random_range(0..set.len());
            let t = sampling.sample(schedule, &mut rng);
            let eps = (0..set.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            (n, NoiseDraw { t, eps })
        })
        .collect()
}

/// The irreducible DSM loss of `ts` under `schedule` with the trainer's
/// default weighting and time sampling.
pub fn dsm_loss_at_optimum_residual(
    ts: Arc<TrainingSet>,
    schedule: NoiseSchedule,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    KernelScoreModel::new(ts, schedule)?.optimum_residual(
        LossWeighting::default(),
        TimeSampling::default(),
        mc_samples,
        seed,
    )
}

impl ScoreModel for KernelScoreModel {
    fn dim(&self) -> usize {
        self.set.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn num_classes(&self) -> Option<u32> {
        self.conditional.then_some(self.members.len() as u32)
    }

    fn score_into(&self, z: &[f64], t: f64, class: Option<u32>, out: &mut [f64]) -> Result<()> {
        self.weighted_sum(z, t, class, out, |x, zi, alpha, sigma| {
            (alpha * x - zi) / (sigma * sigma)
        })
    }

    fn noise_prediction(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; z.len()];
        self.weighted_sum(z, t, class, &mut out, |x, zi, alpha, sigma| {
            (zi - alpha * x) / sigma
        })?;
        Ok(out)
    }

    /// Posterior mean of the clean point: a convex combination of the
    /// active training rows.
    fn denoise(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<Vec<f64>> {
        if self.schedule.alpha(t)? <= 0.0 {
            return Err(Error::numerical(format!("alpha({t}) is not positive")));
        }
        let mut out = vec![0.0; z.len()];
        self.weighted_sum(z, t, class, &mut out, |x, _, _, _| x)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(points: &[f64]) -> KernelScoreModel {
        let ts = TrainingSet::unlabeled(points.to_vec(), 2).unwrap();
        KernelScoreModel::new(Arc::new(ts), NoiseSchedule::edm()).unwrap()
    }

    /// Unstabilized softmax, straight from the definition.
    fn naive_weights(points: &[[f64; 2]], z: [f64; 2], alpha: f64, sigma: f64) -> Vec<f64> {
        let e: Vec<f64> = points
            .iter()
            .map(|x| {
                let d2 = (alpha * x[0] - z[0]).powi(2) + (alpha * x[1] - z[1]).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    #[test]
    fn equidistant_points_share_weight() {
        let m = model(&[1.0, 0.0, -1.0, 0.0]);
        let w = m.weights(&[0.0, 3.0], 0.7, None).unwrap();
        assert!((w.weights[0] - 0.5).abs() < 1e-15);
        assert!((w.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_sigma_is_one_hot() {
        let m = model(&[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let w = m.weights(&[0.9, 0.2], 1e-3, None).unwrap();
        assert_eq!(w.weights, vec![0.0, 1.0, 0.0]);
        assert!(w.weights.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn two_point_weights_match_naive_formula() {
        let m = model(&[0.0, 0.0, 2.0, 0.0]);
        let w = m.weights(&[0.5, 0.0], 1.0, None).unwrap();
        let naive = naive_weights(&[[0.0, 0.0], [2.0, 0.0]], [0.5, 0.0], 1.0, 1.0);
        // exp(−0.125), exp(−1.125) normalized.
        assert!((naive[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        for (a, b) in w.weights.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_score() {
        let m = model(&[1.0, 0.0]);
        assert_eq!(m.score(&[0.0, 0.0], 1.0, None).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let m = model(&[1.0, 0.0, -1.0, 0.0]);
        let s = m.score(&[0.0, 0.0], 1.0, None).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_point_score_and_denoiser() {
        let m = model(&[0.0, 0.0, 2.0, 0.0]);
        let naive = naive_weights(&[[0.0, 0.0], [2.0, 0.0]], [0.5, 0.0], 1.0, 1.0);
        let expected_score = naive[0] * (-0.5) + naive[1] * 1.5;
        assert!((expected_score - 0.037_882_842_739_990_2).abs() < 1e-12);
        let s = m.score(&[0.5, 0.0], 1.0, None).unwrap();
        assert!((s[0] - expected_score).abs() < 1e-12);
        assert!(s[1].abs() < 1e-15);
        let d = m.denoise(&[0.5, 0.0], 1.0, None).unwrap();
        assert!((d[0] - 0.537_882_842_739_990_2).abs() < 1e-12);
        assert!((d[0] - (s[0] + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_point_denoises_to_itself() {
        let m = model(&[0.25, -1.5]);
        for (z, t) in [([3.0, 4.0], 0.01), ([-10.0, 2.0], 50.0), ([0.0, 0.0], 1.0)] {
            let d = m.denoise(&z, t, None).unwrap();
            assert_eq!(d, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn huge_sigma_denoises_to_mean() {
        let ts = TrainingSet::unlabeled(vec![0.0, 0.0, 2.0, 0.0, 1.0, 3.0], 2).unwrap();
        let schedule = NoiseSchedule::edm().with_range(1e-3, 1e7);
        let m = KernelScoreModel::new(Arc::new(ts), schedule).unwrap();
        let d = m.denoise(&[0.3, -0.2], 1e6, None).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_sigma_is_degenerate() {
        let m = model(&[1.0, 0.0]);
        assert!(m.score(&[0.0, 0.0], 0.0, None).unwrap_err().is_numerical());
    }

    #[test]
    fn conditional_restricts_to_class() {
        let ts = TrainingSet::new(vec![0.0, 0.0, 5.0, 5.0, 6.0, 5.0], 2, Some(vec![0, 1, 1]), Some(3))
            .unwrap();
        let m = KernelScoreModel::conditional(Arc::new(ts), NoiseSchedule::edm()).unwrap();
        let w = m.weights(&[0.0, 0.0], 2.0, Some(1)).unwrap();
        assert_eq!(w.indices, vec![1, 2]);
        assert_eq!(m.denoise(&[5.5, 5.0], 30.0, Some(0)).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(m.weights(&[0.0, 0.0], 1.0, Some(2)), Err(Error::EmptyClass(2))));
        assert!(matches!(
            m.weights(&[0.0, 0.0], 1.0, Some(7)),
            Err(Error::UnknownClass { .. })
        ));
        assert!(m.weights(&[0.0, 0.0], 1.0, None).is_err());
    }

    #[test]
    fn single_point_residual_vanishes() {
        let ts = Arc::new(TrainingSet::unlabeled(vec![0.7, -0.3], 2).unwrap());
        let m = KernelScoreModel::new(ts.clone(), NoiseSchedule::edm()).unwrap();
        let draws = residual_draws(&ts, &NoiseSchedule::edm(), TimeSampling::Uniform, 500, 3);
        for d in &draws {
            let r = m
                .optimum_residual_on_draws(std::slice::from_ref(d), LossWeighting::Sigma2)
                .unwrap();
            // z = αx + σε is rounded once, so only rounding error remains.
            assert!(r < 1e-24, "residual {r} at t={}", d.1.t);
        }
    }

    #[test]
    fn separated_pair_at_small_noise_has_tiny_residual() {
        let ts = Arc::new(TrainingSet::unlabeled(vec![-5.0, 0.0, 5.0, 0.0], 2).unwrap());
        let schedule = NoiseSchedule::edm().with_range(1e-3, 0.5);
        let m = KernelScoreModel::new(ts, schedule).unwrap();
        let r = m
            .optimum_residual(LossWeighting::Sigma2, TimeSampling::Uniform, 2000, 1)
            .unwrap();
        assert!(r < 1e-12, "{r}");
    }

    #[test]
    fn residual_is_permutation_invariant() {
        let a = Arc::new(TrainingSet::unlabeled(vec![0.0, 0.0, 1.0, 0.5, -0.5, 1.0], 2).unwrap());
        let b = Arc::new(a.select(&[2, 0, 1]));
        let schedule = NoiseSchedule::edm();
        let draws = residual_draws(&a, &schedule, TimeSampling::Uniform, 1000, 5);
        // Same physical rows under the permuted indexing.
        let inverse = [1usize, 2, 0];
        let draws_b: Vec<_> = draws.iter().map(|(n, d)| (inverse[*n], d.clone())).collect();
        let ra = KernelScoreModel::new(a, schedule)
            .unwrap()
            .optimum_residual_on_draws(&draws, LossWeighting::Sigma2)
            .unwrap();
        let rb = KernelScoreModel::new(b, schedule)
            .unwrap()
            .optimum_residual_on_draws(&draws_b, LossWeighting::Sigma2)
            .unwrap();
        assert!((ra - rb).abs() <= 1e-12 * ra.abs().max(1e-300));
    }
}
