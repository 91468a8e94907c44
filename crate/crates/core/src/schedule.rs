//! Forward-process coefficients `α_t`, `σ_t` and the drift/diffusion pair
//! `f(t) = d log α_t / dt`, `g²(t) = dσ_t²/dt − 2 f(t) σ_t²`.
//!
//! All derivatives are analytic. Finite differences live in the tests.

use std::fmt;
use std::str::FromStr;

use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Variance preserving: `α_t = exp(−¼t²(β_max−β_min) − ½tβ_min)`,
    /// `σ_t² = 1 − α_t²`.
    Vp { beta_min: f64, beta_max: f64 },
    /// Variance exploding: `α_t = 1`,
    /// `σ_t² = σ_min²((σ_max/σ_min)^{2t} − 1)`, which vanishes at `t = 0`.
    Ve { sigma_min: f64, sigma_max: f64 },
    /// `α_t = 1`, `σ_t = t`.
    Edm,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Vp { .. } => "vp",
            ScheduleKind::Ve { .. } => "ve",
            ScheduleKind::Edm => "edm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Smallest sampling time ξ.
    pub t_min: f64,
    /// Largest time T.
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::edm()
    }
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}, {}]", self.kind.name(), self.t_min, self.t_max)
    }
}

impl NoiseSchedule {
    pub fn edm() -> Self {
        Self {
            kind: ScheduleKind::Edm,
            t_min: 1e-3,
            t_max: 80.0,
        }
    }

    pub fn vp() -> Self {
        Self {
            kind: ScheduleKind::Vp {
                beta_min: 0.1,
                beta_max: 20.0,
            },
            t_min: 1e-3,
            t_max: 1.0,
        }
    }

    pub fn ve() -> Self {
        Self {
            kind: ScheduleKind::Ve {
                sigma_min: 0.01,
                sigma_max: 50.0,
            },
            t_min: 1e-3,
            t_max: 1.0,
        }
    }

    pub fn with_range(mut self, t_min: f64, t_max: f64) -> Self {
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                if !(beta_min >= 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(Error::invalid("VP schedule needs 0 <= beta_min <= beta_max"));
                }
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_max >= sigma_min && sigma_max.is_finite()) {
                    return Err(Error::invalid("VE schedule needs 0 < sigma_min <= sigma_max"));
                }
            }
            ScheduleKind::Edm => {}
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.t_max
            )))
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.alpha_at(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma_at(t))
    }

    /// `f(t)` and `g²(t)` of the backward SDE.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        if !(t > 0.0 && t <= self.t_max) {
            return Err(Error::invalid(format!(
                "time {t} outside (0, {}]",
                self.t_max
            )));
        }
        let f = self.dlog_alpha_dt(t);
        let s = self.sigma_at(t);
        let g2 = self.dsigma2_dt(t) - 2.0 * f * s * s;
        if !(f.is_finite() && g2.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite drift/diffusion at t={t} ({self})"
            )));
        }
        // Cancellation can leave tiny negative values for VP.
        Ok((f, g2.max(0.0)))
    }

    pub(crate) fn alpha_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp { .. } => self.vp_log_alpha(t).exp(),
            ScheduleKind::Ve { .. } | ScheduleKind::Edm => 1.0,
        }
    }

    pub(crate) fn sigma_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp { .. } => (-(2.0 * self.vp_log_alpha(t)).exp_m1()).max(0.0).sqrt(),
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                let ln_ratio = (sigma_max / sigma_min).ln();
                (sigma_min * sigma_min * (2.0 * t * ln_ratio).exp_m1())
                    .max(0.0)
                    .sqrt()
            }
            ScheduleKind::Edm => t,
        }
    }

    fn vp_log_alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min
            }
            _ => 0.0,
        }
    }

    /// `d log α_t / dt`.
    pub fn dlog_alpha_dt(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => -0.5 * (beta_min + t * (beta_max - beta_min)),
            ScheduleKind::Ve { .. } | ScheduleKind::Edm => 0.0,
        }
    }

    /// `d σ_t² / dt`.
    pub fn dsigma2_dt(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp { .. } => {
                let a = self.alpha_at(t);
                -2.0 * a * a * self.dlog_alpha_dt(t)
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                let ln_ratio = (sigma_max / sigma_min).ln();
                2.0 * ln_ratio * sigma_min * sigma_min * (2.0 * t * ln_ratio).exp()
            }
            ScheduleKind::Edm => 2.0 * t,
        }
    }

    /// Parses `kind`, `t_min`, `t_max` and the kind-specific keys from a
    /// `schedule` section.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let kind: String = kv.get_or("kind", "edm".to_string())?;
        let base = match kind.as_str() {
            "edm" => Self::edm(),
            "vp" => {
                let d = Self::vp();
                let ScheduleKind::Vp { beta_min, beta_max } = d.kind else {
                    unreachable!()
                };
                Self {
                    kind: ScheduleKind::Vp {
                        beta_min: kv.get_or("beta_min", beta_min)?,
                        beta_max: kv.get_or("beta_max", beta_max)?,
                    },
                    ..d
                }
            }
            "ve" => {
                let d = Self::ve();
                let ScheduleKind::Ve {
                    sigma_min,
                    sigma_max,
                } = d.kind
                else {
                    unreachable!()
                };
                Self {
                    kind: ScheduleKind::Ve {
                        sigma_min: kv.get_or("sigma_min", sigma_min)?,
                        sigma_max: kv.get_or("sigma_max", sigma_max)?,
                    },
                    ..d
                }
            }
            other => {
                return Err(Error::parse(
                    "schedule.kind",
                    format!("unknown schedule {other:?}"),
                ))
            }
        };
        let s = Self {
            t_min: kv.get_or("t_min", base.t_min)?,
            t_max: kv.get_or("t_max", base.t_max)?,
            ..base
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", self.kind.name());
        kv.set("t_min", fmt_f64(self.t_min));
        kv.set("t_max", fmt_f64(self.t_max));
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                kv.set("beta_min", fmt_f64(beta_min));
                kv.set("beta_max", fmt_f64(beta_max));
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                kv.set("sigma_min", fmt_f64(sigma_min));
                kv.set("sigma_max", fmt_f64(sigma_max));
            }
            ScheduleKind::Edm => {}
        }
        kv
    }
}

impl FromStr for NoiseSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "edm" => Ok(Self::edm()),
            "vp" => Ok(Self::vp()),
            "ve" => Ok(Self::ve()),
            other => Err(format!("unknown schedule {other:?}")),
        }
    }
}
