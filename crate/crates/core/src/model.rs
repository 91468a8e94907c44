//! The interface shared by the closed-form optimum and the trained network.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A score model `s(z, t, c) ≈ ∇_z log q_t(z | c)` together with the
/// schedule it was built for.
///
/// The noise-prediction and denoiser forms follow from the score through
/// `ε = −σ_t s` and `D = (σ_t² s + z) / α_t`; implementors may override
/// them with a more direct evaluation.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Number of condition classes, `None` for unconditional models.
    fn num_classes(&self) -> Option<u32> {
        None
    }

    fn score_into(&self, z: &[f64], t: f64, class: Option<u32>, out: &mut [f64]) -> Result<()>;

    fn score(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(z, t, class, &mut out)?;
        Ok(out)
    }

    fn noise_prediction(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<Vec<f64>> {
        let sigma = self.schedule().sigma(t)?;
        let mut s = self.score(z, t, class)?;
        s.iter_mut().for_each(|v| *v *= -sigma);
        Ok(s)
    }

    fn denoise(&self, z: &[f64], t: f64, class: Option<u32>) -> Result<Vec<f64>> {
        let alpha = self.schedule().alpha(t)?;
        if alpha <= 0.0 {
            return Err(Error::numerical(format!("alpha({t}) = {alpha} is not positive")));
        }
        let sigma = self.schedule().sigma(t)?;
        let mut s = self.score(z, t, class)?;
        for (v, zi) in s.iter_mut().zip(z) {
            *v = (sigma * sigma * *v + zi) / alpha;
        }
        Ok(s)
    }

    /// Scores for a row-major batch of points at a common time. `classes`
    /// is either absent or holds one class per point.
    fn score_batch(&self, zs: &[f64], t: f64, classes: Option<&[u32]>) -> Result<Vec<f64>> {
        let d = self.dim();
        if zs.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: zs.len() % d,
            });
        }
        let count = zs.len() / d;
        if let Some(c) = classes {
            if c.len() != count {
                return Err(Error::ShapeMismatch {
                    expected: count,
                    got: c.len(),
                });
            }
        }
        let mut out = vec![0.0; zs.len()];
        out.par_chunks_mut(d)
            .zip(zs.par_chunks(d))
            .enumerate()
            .try_for_each(|(i, (o, z))| self.score_into(z, t, classes.map(|c| c[i]), o))?;
        Ok(out)
    }
}
