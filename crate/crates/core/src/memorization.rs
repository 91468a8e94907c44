//! Nearest-neighbour memorization criterion and the memorization ratio.
//!
//! A generated sample `x` counts as memorized when
//! `‖x − NN₁(x, D)‖ < τ · ‖x − NN₂(x, D)‖`, with `τ = 1/3` by default.

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::fmt_f64;
use crate::dataset::{squared_distance, TrainingSet};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TAU: f64 = 1.0 / 3.0;
pub const REPORT_HEADER: &str = "sample_id,nn1_index,nn1_dist,nn2_dist,memorized";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbors {
    pub nn1_index: usize,
    pub nn1_dist: f64,
    pub nn2_dist: f64,
}

/// Exact first and second nearest neighbours of every query row by brute
/// force. Ties for the nearest row go to the lowest index.
pub fn nn2(queries: &[f64], set: &TrainingSet) -> Result<Vec<Neighbors>> {
    let d = set.dim();
    if set.len() < 2 {
        return Err(Error::invalid(format!(
            "nearest-neighbour ratio needs at least 2 training rows, got {}",
            set.len()
        )));
    }
    if queries.len() % d != 0 {
        return Err(Error::ShapeMismatch {
            expected: d,
            got: queries.len() % d,
        });
    }
    Ok(queries
        .par_chunks(d)
        .map(|q| {
            let (mut i1, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
            for (n, x) in set.rows().enumerate() {
                let dist = squared_distance(q, x);
                if dist < d1 {
                    d2 = d1;
                    d1 = dist;
                    i1 = n;
                } else if dist < d2 {
                    d2 = dist;
                }
            }
            Neighbors {
                nn1_index: i1,
                nn1_dist: d1.sqrt(),
                nn2_dist: d2.sqrt(),
            }
        })
        .collect())
}

pub fn is_memorized(nn: &Neighbors, tau: f64) -> bool {
    nn.nn1_dist < tau * nn.nn2_dist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub resample_size: usize,
    pub mean: f64,
    /// Sample standard deviation across replicates.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationReport {
    pub tau: f64,
    pub neighbors: Vec<Neighbors>,
    pub memorized: Vec<bool>,
    pub ratio: f64,
    /// Samples whose second neighbour is at distance zero, i.e. that sit on
    /// a duplicated training row. They are never counted as memorized.
    pub duplicates: usize,
    pub bootstrap: Option<BootstrapSummary>,
}

impl MemorizationReport {
    pub fn sample_count(&self) -> usize {
        self.memorized.len()
    }

    pub fn memorized_count(&self) -> usize {
        self.memorized.iter().filter(|&&m| m).count()
    }

    pub fn duplicate_warning(&self) -> Option<String> {
        (self.duplicates > 0).then(|| {
            format!(
                "{} samples coincide with duplicated training rows (second-neighbour distance 0); counted as not memorized",
                self.duplicates
            )
        })
    }

    /// Report CSV: `#`-prefixed header lines, one row per sample, then
    /// footer lines including `ratio,<value>`.
    pub fn to_csv(&self, config_hash: &str, train_size: usize) -> String {
        let mut out = format!(
            "# config_hash={config_hash}\n# train_size={train_size}\n# tau={}\n# distance=l2 over raw flattened vectors\n{REPORT_HEADER}\n",
            fmt_f64(self.tau)
        );
        for (i, (nn, m)) in self.neighbors.iter().zip(&self.memorized).enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                nn.nn1_index,
                fmt_f64(nn.nn1_dist),
                fmt_f64(nn.nn2_dist),
                u8::from(*m)
            ));
        }
        if let Some(b) = &self.bootstrap {
            out.push_str(&format!(
                "bootstrap_replicates,{}\nbootstrap_size,{}\nbootstrap_mean,{}\nbootstrap_std,{}\n",
                b.replicates,
                b.resample_size,
                fmt_f64(b.mean),
                fmt_f64(b.std)
            ));
        }
        out.push_str(&format!("ratio,{}\n", fmt_f64(self.ratio)));
        out
    }
}

/// The training-set size and ratio recorded in a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub train_size: u64,
    pub ratio: f64,
    pub config_hash: Option<String>,
}

pub fn parse_report_summary(text: &str, origin: &str) -> Result<ReportSummary> {
    let mut train_size = None;
    let mut ratio = None;
    let mut config_hash = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        let at = || format!("{origin}:{}", i + 1);
        if let Some(v) = line.strip_prefix("# train_size=") {
            train_size = Some(v.parse::<u64>().map_err(|e| Error::parse(at(), e.to_string()))?);
        } else if let Some(v) = line.strip_prefix("# config_hash=") {
            config_hash = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("ratio,") {
            ratio = Some(v.parse::<f64>().map_err(|e| Error::parse(at(), e.to_string()))?);
        }
    }
    match (train_size, ratio) {
        (Some(train_size), Some(ratio)) => Ok(ReportSummary {
            train_size,
            ratio,
            config_hash,
        }),
        (None, _) => Err(Error::parse(origin, "missing `# train_size=` header")),
        (_, None) => Err(Error::parse(origin, "missing `ratio,` footer")),
    }
}

pub fn memorization_ratio(samples: &[f64], set: &TrainingSet, tau: f64) -> Result<MemorizationReport> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let neighbors = nn2(samples, set)?;
    if neighbors.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let memorized: Vec<bool> = neighbors.iter().map(|nn| is_memorized(nn, tau)).collect();
    let duplicates = neighbors.iter().filter(|nn| nn.nn2_dist == 0.0).count();
    let ratio = memorized.iter().filter(|&&m| m).count() as f64 / memorized.len() as f64;
    Ok(MemorizationReport {
        tau,
        neighbors,
        memorized,
        ratio,
        duplicates,
        bootstrap: None,
    })
}

/// Mean and standard deviation of the ratio over `replicates` resamples of
/// `size` verdicts drawn with replacement.
pub fn bootstrap_verdicts(verdicts: &[bool], size: usize, replicates: usize, seed: u64) -> Result<BootstrapSummary> {
    if verdicts.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one sample"));
    }
    if size == 0 || replicates < 2 {
        return Err(Error::invalid("bootstrap needs resample size >= 1 and >= 2 replicates"));
    }
    let mut r = rng::stream(rng::derive_seed(seed, "bootstrap"), 0);
    let ratios: Vec<f64> = (0..replicates)
        .map(|_| {
            let hits = (0..size).filter(|_| verdicts[r.random_range(0..verdicts.len())]).count();
            hits as f64 / size as f64
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / replicates as f64;
    let var = ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64;
    Ok(BootstrapSummary {
        replicates,
        resample_size: size,
        mean,
        std: var.sqrt(),
    })
}

pub fn bootstrap_ratio(
    samples: &[f64],
    set: &TrainingSet,
    tau: f64,
    size: usize,
    replicates: usize,
    seed: u64,
) -> Result<MemorizationReport> {
    let mut report = memorization_ratio(samples, set, tau)?;
    report.bootstrap = Some(bootstrap_verdicts(&report.memorized, size, replicates, seed)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> TrainingSet {
        TrainingSet::unlabeled(vec![0.0, 0.0, 3.0, 0.0, 10.0, 0.0], 2).unwrap()
    }

    #[test]
    fn hand_distances() {
        let nn = nn2(&[1.0, 0.0], &line()).unwrap();
        assert_eq!(nn, vec![Neighbors { nn1_index: 0, nn1_dist: 1.0, nn2_dist: 2.0 }]);
        let exact = nn2(&[3.0, 0.0], &line()).unwrap();
        assert_eq!(exact[0].nn1_dist, 0.0);
        assert_eq!(exact[0].nn1_index, 1);
    }

    #[test]
    fn threshold_examples() {
        let tau = DEFAULT_TAU;
        let nn = |d1, d2| Neighbors { nn1_index: 0, nn1_dist: d1, nn2_dist: d2 };
        assert!(is_memorized(&nn(0.1, 0.4), tau));
        assert!(!is_memorized(&nn(0.2, 0.3), tau));
        assert!(is_memorized(&nn(0.0, 0.5), tau));
        assert!(!is_memorized(&nn(0.7, 0.7), 0.999));
    }

    #[test]
    fn needs_two_rows() {
        let one = TrainingSet::unlabeled(vec![0.0, 0.0], 2).unwrap();
        assert!(nn2(&[1.0, 1.0], &one).is_err());
    }

    #[test]
    fn duplicate_rows_are_flagged_and_not_memorized() {
        let set = TrainingSet::unlabeled(vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0], 2).unwrap();
        let r = memorization_ratio(&[1.0, 1.0], &set, DEFAULT_TAU).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert_eq!(r.duplicates, 1);
        assert!(r.duplicate_warning().is_some());
    }

    #[test]
    fn copies_give_ratio_one() {
        let set = line();
        let r = memorization_ratio(set.data(), &set, DEFAULT_TAU).unwrap();
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let b = bootstrap_verdicts(&[true; 10], 5, 20, 1).unwrap();
        assert_eq!((b.mean, b.std), (1.0, 0.0));
        let v = [true, false, false, true, true];
        assert_eq!(bootstrap_verdicts(&v, 4, 2, 9).unwrap(), bootstrap_verdicts(&v, 4, 2, 9).unwrap());
        assert!(bootstrap_verdicts(&[], 4, 2, 9).is_err());
        assert!(bootstrap_verdicts(&v, 4, 1, 9).is_err());
    }

    #[test]
    fn report_csv_summary_round_trip() {
        let set = line();
        let r = bootstrap_ratio(&[1.0, 0.0, 6.0, 0.0], &set, DEFAULT_TAU, 10, 5, 0).unwrap();
        let csv = r.to_csv("abc", 3);
        assert!(csv.contains(REPORT_HEADER));
        assert!(csv.trim_end().ends_with(&format!("ratio,{}", fmt_f64(r.ratio))));
        let s = parse_report_summary(&csv, "r").unwrap();
        assert_eq!((s.train_size, s.ratio, s.config_hash.as_deref()), (3, 0.0, Some("abc")));
        assert!(parse_report_summary("", "r").is_err());
    }
}
