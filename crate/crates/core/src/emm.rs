//! Effective model memorization: the largest training-set size whose
//! memorization ratio stays at or above `1 − ε`, read off a measured
//! size/ratio curve by interpolating its first downward crossing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};
use crate::memorization::parse_report_summary;

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const CURVE_HEADER: &str = "N,ratio";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemCurve {
    points: Vec<(u64, f64)>,
    pub metadata: KeyValues,
}

impl MemCurve {
    /// Points must have strictly increasing sizes and ratios in `[0, 1]`.
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empty memorization curve"));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(format!(
                    "curve sizes must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((n, r)) = points.iter().find(|(_, r)| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid(format!("ratio {r} at N={n} outside [0, 1]")));
        }
        Ok(Self {
            points,
            metadata: KeyValues::new(),
        })
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            out.push_str(&format!("# config_hash={h}\n"));
        }
        out.push_str(CURVE_HEADER);
        out.push('\n');
        for (n, r) in &self.points {
            out.push_str(&format!("{n},{}\n", fmt_f64(*r)));
        }
        out
    }

    /// Parses `N,ratio` CSV. `#` lines and the header are skipped; rows may
    /// come in any order.
    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.eq_ignore_ascii_case(CURVE_HEADER) {
                continue;
            }
            let at = || format!("{origin}:{}", i + 1);
            let (n, r) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(at(), format!("expected `N,ratio`, found {line:?}")))?;
            let n = n.trim().parse::<u64>().map_err(|e| Error::parse(at(), format!("size: {e}")))?;
            let r = r.trim().parse::<f64>().map_err(|e| Error::parse(at(), format!("ratio: {e}")))?;
            points.push((n, r));
        }
        if points.is_empty() {
            return Err(Error::parse(origin, "no curve points"));
        }
        points.sort_by_key(|p| p.0);
        if let Some(w) = points.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::parse(origin, format!("duplicate size N={}", w[0].0)));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Builds a curve from memorization report files, one per training-set
/// size.
pub fn curve_from_runs<P: AsRef<Path>>(paths: &[P]) -> Result<MemCurve> {
    let mut by_size = BTreeMap::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
        let s = parse_report_summary(&text, &p.display().to_string())?;
        if by_size.insert(s.train_size, s.ratio).is_some() {
            return Err(Error::invalid(format!("duplicate size N={} in run reports", s.train_size)));
        }
    }
    MemCurve::new(by_size.into_iter().collect())
}

/// Adjacent index pairs `(i, i + 1)` where the ratio increases with N.
pub fn check_monotonicity(curve: &MemCurve) -> Vec<(usize, usize)> {
    curve
        .points
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].1 > w[0].1)
        .map(|(i, _)| (i, i + 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Linear,
    /// Linear in `log N`.
    Log,
}

impl FromStr for Interpolation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "log" => Ok(Self::Log),
            other => Err(format!("unknown interpolation {other:?}")),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Log => "log",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Censoring {
    ExactInterpolated,
    /// Every measured ratio is at or above the level; EMM is at least the
    /// largest size.
    LowerBound,
    /// Every measured ratio is below the level; EMM is below the smallest
    /// size.
    UpperBound,
}

impl fmt::Display for Censoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ExactInterpolated => "exact-interpolated",
            Self::LowerBound => "lower-bound",
            Self::UpperBound => "upper-bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmmEstimate {
    pub epsilon: f64,
    pub value: f64,
    pub censoring: Censoring,
    pub bracket: Option<(u64, u64)>,
    pub warnings: Vec<String>,
}

impl EmmEstimate {
    pub fn level(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn summary(&self) -> String {
        match self.censoring {
            Censoring::ExactInterpolated => format!("EMM = {:.4} (level {})", self.value, self.level()),
            Censoring::LowerBound => format!("EMM >= {} (censored, level {})", self.value, self.level()),
            Censoring::UpperBound => format!("EMM < {} (censored, level {})", self.value, self.level()),
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epsilon", fmt_f64(self.epsilon));
        kv.set("value", fmt_f64(self.value));
        kv.set("censoring", self.censoring);
        if let Some((lo, hi)) = self.bracket {
            kv.set("bracket", format!("{lo},{hi}"));
        }
        kv.set("warnings", self.warnings.len());
        kv
    }
}

pub fn estimate_emm(curve: &MemCurve, epsilon: f64) -> Result<EmmEstimate> {
    estimate_emm_with(curve, epsilon, Interpolation::Linear)
}

/// Interpolates the first pair `(N_i, N_{i+1})` with
/// `ratio_i ≥ 1 − ε > ratio_{i+1}` at level `1 − ε`.
pub fn estimate_emm_with(curve: &MemCurve, epsilon: f64, interpolation: Interpolation) -> Result<EmmEstimate> {
    if curve.is_empty() {
        return Err(Error::invalid("empty memorization curve"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let level = 1.0 - epsilon;
    let pts = &curve.points;
    let mut warnings: Vec<String> = check_monotonicity(curve)
        .into_iter()
        .map(|(i, j)| {
            format!(
                "ratio increases from N={} ({}) to N={} ({}); using the first crossing",
                pts[i].0, pts[i].1, pts[j].0, pts[j].1
            )
        })
        .collect();
    let crossing = pts.windows(2).position(|w| w[0].1 >= level && w[1].1 < level);
    let Some(i) = crossing else {
        let last = pts[pts.len() - 1];
        let (value, censoring) = if last.1 >= level {
            (last.0 as f64, Censoring::LowerBound)
        } else {
            (pts[0].0 as f64, Censoring::UpperBound)
        };
        if censoring == Censoring::LowerBound && pts[0].1 < level {
            warnings.push("curve starts below the level and ends above it".into());
        }
        return Ok(EmmEstimate {
            epsilon,
            value,
            censoring,
            bracket: None,
            warnings,
        });
    };
    let ((n0, r0), (n1, r1)) = (pts[i], pts[i + 1]);
    let frac = (r0 - level) / (r0 - r1);
    let value = match interpolation {
        Interpolation::Linear => n0 as f64 + frac * (n1 - n0) as f64,
        Interpolation::Log => ((n0 as f64).ln() + frac * ((n1 as f64).ln() - (n0 as f64).ln())).exp(),
    };
    Ok(EmmEstimate {
        epsilon,
        value,
        censoring: Censoring::ExactInterpolated,
        bracket: Some((n0, n1)),
        warnings,
    })
}
