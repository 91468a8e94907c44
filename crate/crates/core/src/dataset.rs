//! Training sets: generation, labeling, subsampling, pooling and the `DMEM`
//! binary format.
//!
//! Values are held as `f64` but always rounded to single precision on
//! construction, which is the precision of the on-disk format. This keeps
//! save/load bit-exact and makes every downstream computation see the same
//! numbers whether a set came from memory or from disk.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_MAGIC: [u8; 4] = *b"DMEM";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 4;

#[derive(Debug, Clone)]
pub struct TrainingSet {
    data: Vec<f64>,
    len: usize,
    dim: usize,
    labels: Option<Vec<u32>>,
    num_classes: Option<u32>,
    seed: u64,
}

/// Equality covers the persisted content. The generating seed is provenance
/// metadata and is not stored in the file format.
impl PartialEq for TrainingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.len == other.len
            && self.labels == other.labels
            && self.num_classes == other.num_classes
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl TrainingSet {
    /// Builds a set from row-major data. Entries are rounded to `f32`.
    pub fn new(
        data: Vec<f64>,
        dim: usize,
        labels: Option<Vec<u32>>,
        num_classes: Option<u32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "data length {} is not a positive multiple of dimension {dim}",
                data.len()
            )));
        }
        let len = data.len() / dim;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        validate_labels(labels.as_deref(), num_classes, len)?;
        let data = data.into_iter().map(|v| f64::from(v as f32)).collect();
        Ok(Self {
            data,
            len,
            dim,
            labels,
            num_classes,
            seed: 0,
        })
    }

    pub fn unlabeled(data: Vec<f64>, dim: usize) -> Result<Self> {
        Self::new(data, dim, None, None)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `len × dim` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn num_classes(&self) -> Option<u32> {
        self.num_classes
    }

    /// Indices of the rows carrying label `class`.
    pub fn class_members(&self, class: u32) -> Vec<usize> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| (l == class).then_some(i))
                .collect(),
            None => Vec::new(),
        }
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            len: indices.len(),
            dim: self.dim,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    pub fn with_labels(&self, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        validate_labels(Some(&labels), Some(num_classes), self.len)?;
        Ok(Self {
            labels: Some(labels),
            num_classes: Some(num_classes),
            ..self.clone()
        })
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            num_classes: None,
            ..self.clone()
        }
    }

    /// Largest Euclidean distance between any two rows.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len {
            for j in (i + 1)..self.len {
                best = best.max(squared_distance(self.row(i), self.row(j)));
            }
        }
        best.sqrt()
    }
}

fn validate_labels(labels: Option<&[u32]>, num_classes: Option<u32>, len: usize) -> Result<()> {
    match (labels, num_classes) {
        (None, None) => Ok(()),
        (None, Some(_)) => Err(Error::invalid("class count given without labels")),
        (Some(_), None) => Err(Error::invalid("labels given without a class count")),
        (Some(labels), Some(c)) => {
            if c == 0 {
                return Err(Error::invalid("class count must be positive"));
            }
            if labels.len() != len {
                return Err(Error::ShapeMismatch {
                    expected: len,
                    got: labels.len(),
                });
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
            Ok(())
        }
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelingMode {
    None,
    /// Labels come from the generating component/pattern.
    True,
    /// Labels drawn uniformly from `[0, C)` once per dataset.
    Random,
    /// Label `i` for the `i`-th row, `C = N`.
    Unique,
}

impl FromStr for LabelingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "true" => Ok(Self::True),
            "random" => Ok(Self::Random),
            "unique" => Ok(Self::Unique),
            other => Err(format!("unknown labeling mode {other:?}")),
        }
    }
}

impl fmt::Display for LabelingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::True => "true",
            Self::Random => "random",
            Self::Unique => "unique",
        })
    }
}

/// Where rows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Isotropic Gaussian components with means drawn uniformly from
    /// `[-spread, spread]^dim`.
    GaussianMixture {
        dim: usize,
        components: u32,
        spread: f64,
        component_std: f64,
    },
    /// Single-channel `side × side` grating patches; each pattern class has
    /// its own orientation and frequency, with random phase and contrast.
    ImagePatches {
        side: usize,
        patterns: u32,
        noise: f64,
    },
    File { path: PathBuf },
}

impl Source {
    pub fn dim(&self) -> Option<usize> {
        match self {
            Source::GaussianMixture { dim, .. } => Some(*dim),
            Source::ImagePatches { side, .. } => Some(side * side),
            Source::File { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Source::GaussianMixture {
                dim,
                components,
                spread,
                component_std,
            } => {
                if *dim == 0 || *components == 0 {
                    return Err(Error::invalid("mixture needs dim >= 1 and components >= 1"));
                }
                if !(spread.is_finite() && *spread >= 0.0)
                    || !(component_std.is_finite() && *component_std >= 0.0)
                {
                    return Err(Error::invalid("mixture spread and std must be finite and >= 0"));
                }
            }
            Source::ImagePatches {
                side,
                patterns,
                noise,
            } => {
                if *side == 0 || *patterns == 0 || !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::invalid("patch source needs side >= 1, patterns >= 1, noise >= 0"));
                }
            }
            Source::File { .. } => {}
        }
        Ok(())
    }

    /// Draws `count` rows and their generating class.
    fn draw(&self, count: usize, seed: u64) -> Result<(Vec<f64>, usize, Option<(Vec<u32>, u32)>)> {
        match self {
            Source::GaussianMixture {
                dim,
                components,
                spread,
                component_std,
            } => {
                let k = *components as usize;
                let mut mean_rng = rng::stream(rng::derive_seed(seed, "mixture-means"), 0);
                let means: Vec<f64> = (0..k * dim)
                    .map(|_| mean_rng.random_range(-1.0..=1.0) * spread)
                    .collect();
                let mut rng = rng::stream(rng::derive_seed(seed, "mixture-draws"), 0);
                let mut data = Vec::with_capacity(count * dim);
                let mut labels = Vec::with_capacity(count);
                for i in 0..count {
                    let c = i % k;
                    for j in 0..*dim {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        data.push(means[c * dim + j] + component_std * e);
                    }
                    labels.push(c as u32);
                }
                Ok((data, *dim, Some((labels, *components))))
            }
            Source::ImagePatches {
                side,
                patterns,
                noise,
            } => {
                let s = *side;
                let mut rng = rng::stream(rng::derive_seed(seed, "patches"), 0);
                let mut data = Vec::with_capacity(count * s * s);
                let mut labels = Vec::with_capacity(count);
                for i in 0..count {
                    let c = (i % *patterns as usize) as u32;
                    let angle = std::f64::consts::PI * f64::from(c) / f64::from(*patterns);
                    let freq = 1.0 + f64::from(c % 3);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let contrast = rng.random_range(0.5..1.0);
                    let (dy, dx) = angle.sin_cos();
                    for r in 0..s {
                        for col in 0..s {
                            let u = (dx * col as f64 + dy * r as f64) / s as f64;
                            let e: f64 = StandardNormal.sample(&mut rng);
                            let v = contrast * (std::f64::consts::TAU * freq * u + phase).sin();
                            data.push(v + noise * e);
                        }
                    }
                    labels.push(c);
                }
                Ok((data, s * s, Some((labels, *patterns))))
            }
            Source::File { path } => {
                let parent = load(path)?;
                if count > parent.len() {
                    return Err(Error::invalid(format!(
                        "{} holds {} rows, {count} requested",
                        path.display(),
                        parent.len()
                    )));
                }
                let picked = subsample(&parent, count, seed)?;
                let dim = picked.dim();
                let labels = picked.labels.clone().zip(picked.num_classes);
                Ok((picked.data, dim, labels))
            }
        }
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        let kind: String = kv.get_or("source", "gaussian-mixture".to_string())?;
        match kind.as_str() {
            "gaussian-mixture" => Ok(Source::GaussianMixture {
                dim: kv.get_or("dim", 2)?,
                components: kv.get_or("components", 8)?,
                spread: kv.get_or("spread", 2.0)?,
                component_std: kv.get_or("component_std", 0.5)?,
            }),
            "grid-image-patches" => Ok(Source::ImagePatches {
                side: kv.get_or("side", 8)?,
                patterns: kv.get_or("patterns", 4)?,
                noise: kv.get_or("noise", 0.05)?,
            }),
            "file" => Ok(Source::File {
                path: PathBuf::from(kv.require::<String>("path")?),
            }),
            other => Err(Error::parse(
                "dataset.source",
                format!("unknown source {other:?}"),
            )),
        }
    }

    fn write_kv(&self, kv: &mut KeyValues) {
        match self {
            Source::GaussianMixture {
                dim,
                components,
                spread,
                component_std,
            } => {
                kv.set("source", "gaussian-mixture");
                kv.set("dim", dim);
                kv.set("components", components);
                kv.set("spread", fmt_f64(*spread));
                kv.set("component_std", fmt_f64(*component_std));
            }
            Source::ImagePatches {
                side,
                patterns,
                noise,
            } => {
                kv.set("source", "grid-image-patches");
                kv.set("side", side);
                kv.set("patterns", patterns);
                kv.set("noise", fmt_f64(*noise));
            }
            Source::File { path } => {
                kv.set("source", "file");
                kv.set("path", path.display());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blend {
    /// Fraction of rows drawn from `source`.
    pub ratio: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    pub size: usize,
    pub blend: Option<Blend>,
    pub class_count: Option<u32>,
    pub labeling: LabelingMode,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn mixture(size: usize, seed: u64) -> Self {
        Self {
            source: Source::GaussianMixture {
                dim: 2,
                components: 8,
                spread: 2.0,
                component_std: 0.5,
            },
            size,
            blend: None,
            class_count: None,
            labeling: LabelingMode::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("dataset size must be at least 1"));
        }
        self.source.validate()?;
        if let Some(blend) = &self.blend {
            if !(0.0..=1.0).contains(&blend.ratio) {
                return Err(Error::invalid(format!(
                    "blend ratio {} outside [0, 1]",
                    blend.ratio
                )));
            }
            blend.source.validate()?;
            if let (Some(a), Some(b)) = (self.source.dim(), blend.source.dim()) {
                if a != b {
                    return Err(Error::invalid(format!(
                        "blend sources disagree on dimension ({a} vs {b})"
                    )));
                }
            }
        }
        match self.labeling {
            LabelingMode::Random => match self.class_count {
                Some(c) if c > 0 => {}
                _ => return Err(Error::invalid("random labeling needs class_count >= 1")),
            },
            LabelingMode::True => {
                if self.class_count == Some(0) {
                    return Err(Error::invalid("class_count must be positive"));
                }
            }
            LabelingMode::None | LabelingMode::Unique => {}
        }
        Ok(())
    }

    /// Parses keys under `dataset.` (or at top level when no such section
    /// exists).
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let section = kv.section("dataset");
        let kv = if section.is_empty() { kv.clone() } else { section };
        let source = Source::from_kv(&kv)?;
        let blend_kv = kv.section("blend");
        let blend = match blend_kv.get::<f64>("ratio")? {
            Some(ratio) => Some(Blend {
                ratio,
                source: Source::from_kv(&blend_kv)?,
            }),
            None => None,
        };
        let spec = Self {
            source,
            size: kv.require("size")?,
            blend,
            class_count: kv.get("class_count")?,
            labeling: kv.get_or("labeling", LabelingMode::None)?,
            seed: kv.get_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Keys relative to the `dataset.` section.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.source.write_kv(&mut kv);
        kv.set("size", self.size);
        if let Some(blend) = &self.blend {
            let mut b = KeyValues::new();
            blend.source.write_kv(&mut b);
            b.set("ratio", fmt_f64(blend.ratio));
            kv.merge_section("blend", &b);
        }
        if let Some(c) = self.class_count {
            kv.set("class_count", c);
        }
        kv.set("labeling", self.labeling);
        kv.set("seed", self.seed);
        kv
    }
}

/// Number of rows drawn from the secondary source.
pub fn blend_count(size: usize, ratio: f64) -> usize {
    ((ratio * size as f64).round() as usize).min(size)
}

/// Generates a training set; see [`generate_with_provenance`].
pub fn generate(spec: &DatasetSpec) -> Result<TrainingSet> {
    generate_with_provenance(spec).map(|(ts, _)| ts)
}

/// Generates a training set and reports, per row, whether it came from the
/// blend source.
pub fn generate_with_provenance(spec: &DatasetSpec) -> Result<(TrainingSet, Vec<bool>)> {
    spec.validate()?;
    let n = spec.size;
    let n_secondary = spec.blend.as_ref().map_or(0, |b| blend_count(n, b.ratio));
    let n_primary = n - n_secondary;

    let (mut data, dim, primary_labels) = if n_primary > 0 {
        spec.source.draw(n_primary, rng::derive_seed(spec.seed, "source-a"))?
    } else {
        (Vec::new(), spec.source.dim().unwrap_or(0), None)
    };
    let mut from_secondary = vec![false; n_primary];
    let mut true_labels = primary_labels;

    if let Some(blend) = spec.blend.as_ref().filter(|_| n_secondary > 0) {
        let (b_data, b_dim, b_labels) =
            blend.source.draw(n_secondary, rng::derive_seed(spec.seed, "source-b"))?;
        if n_primary > 0 && b_dim != dim {
            return Err(Error::invalid(format!(
                "blend sources disagree on dimension ({dim} vs {b_dim})"
            )));
        }
        let dim = b_dim;
        data.extend(b_data);
        from_secondary.extend(std::iter::repeat_n(true, n_secondary));
        true_labels = match (true_labels, b_labels) {
            (Some((mut la, ca)), Some((lb, cb))) => {
                la.extend(lb);
                Some((la, ca.max(cb)))
            }
            (None, Some((lb, cb))) if n_primary == 0 => Some((lb, cb)),
            _ => None,
        };

        // Mix the two sources so that prefixes of the set are blended too.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(rng::derive_seed(spec.seed, "blend-shuffle"), 0));
        let mut mixed = Vec::with_capacity(data.len());
        for &i in &perm {
            mixed.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        data = mixed;
        from_secondary = perm.iter().map(|&i| from_secondary[i]).collect();
        true_labels = true_labels.map(|(l, c)| (perm.iter().map(|&i| l[i]).collect(), c));
        let ts = TrainingSet::unlabeled(data, dim)?.with_seed(spec.seed);
        let ts = apply_labeling(ts, spec, true_labels)?;
        return Ok((ts, from_secondary));
    }

    let ts = TrainingSet::unlabeled(data, dim)?.with_seed(spec.seed);
    let ts = apply_labeling(ts, spec, true_labels)?;
    Ok((ts, from_secondary))
}

fn apply_labeling(
    ts: TrainingSet,
    spec: &DatasetSpec,
    true_labels: Option<(Vec<u32>, u32)>,
) -> Result<TrainingSet> {
    match spec.labeling {
        LabelingMode::True => {
            let (labels, c) = true_labels
                .ok_or_else(|| Error::invalid("source provides no true labels"))?;
            if let Some(want) = spec.class_count {
                if want != c {
                    return Err(Error::invalid(format!(
                        "class_count {want} does not match the source's {c} classes"
                    )));
                }
            }
            if ts.len() < c as usize {
                return Err(Error::invalid(format!(
                    "true labeling needs N >= C, got N={} C={c}",
                    ts.len()
                )));
            }
            let ts = ts.with_labels(labels, c)?;
            ensure_populated(&ts)?;
            Ok(ts)
        }
        mode => relabel(&ts, mode, spec.class_count, rng::derive_seed(spec.seed, "labels")),
    }
}

/// Replaces the labels of `ts` according to `mode`. `True` keeps the
/// existing labels and checks that every class is populated.
pub fn relabel(
    ts: &TrainingSet,
    mode: LabelingMode,
    class_count: Option<u32>,
    seed: u64,
) -> Result<TrainingSet> {
    match mode {
        LabelingMode::None => Ok(ts.without_labels()),
        LabelingMode::Unique => {
            let n = u32::try_from(ts.len())
                .map_err(|_| Error::invalid("too many rows for unique labels"))?;
            ts.with_labels((0..n).collect(), n)
        }
        LabelingMode::Random => {
            let c = class_count
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::invalid("random labeling needs class_count >= 1"))?;
            let mut rng = rng::stream(seed, 0);
            let labels = (0..ts.len()).map(|_| rng.random_range(0..c)).collect();
            ts.with_labels(labels, c)
        }
        LabelingMode::True => {
            if ts.labels().is_none() {
                return Err(Error::invalid("true labeling needs a labeled set"));
            }
            ensure_populated(ts)?;
            Ok(ts.clone())
        }
    }
}

fn ensure_populated(ts: &TrainingSet) -> Result<()> {
    let c = ts.num_classes().unwrap_or(0);
    let mut seen = vec![false; c as usize];
    for &l in ts.labels().unwrap_or(&[]) {
        seen[l as usize] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(empty) => Err(Error::EmptyClass(empty as u32)),
        None => Ok(()),
    }
}

/// Random `n`-row subset of `parent`, without replacement, in parent order.
///
/// The subset is the first `n` entries of a seeded permutation, so for a
/// fixed seed subsets of increasing size are nested.
pub fn subsample(parent: &TrainingSet, n: usize, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::invalid("subsample size must be at least 1"));
    }
    if n > parent.len() {
        return Err(Error::invalid(format!(
            "cannot take {n} rows from a set of {}",
            parent.len()
        )));
    }
    let mut perm: Vec<usize> = (0..parent.len()).collect();
    perm.shuffle(&mut rng::stream(rng::derive_seed(seed, "subsample"), 0));
    let mut picked = perm[..n].to_vec();
    picked.sort_unstable();
    Ok(parent.select(&picked).with_seed(seed))
}

/// Average-pools `channels × side × side` images by `factor` in each
/// spatial direction.
pub fn downsample_images(
    ts: &TrainingSet,
    side: usize,
    factor: usize,
    channels: usize,
) -> Result<TrainingSet> {
    if factor == 0 || channels == 0 || side == 0 {
        return Err(Error::invalid("side, factor and channels must be positive"));
    }
    if ts.dim() != channels * side * side {
        return Err(Error::ShapeMismatch {
            expected: channels * side * side,
            got: ts.dim(),
        });
    }
    if side % factor != 0 {
        return Err(Error::invalid(format!(
            "side {side} is not divisible by factor {factor}"
        )));
    }
    let out_side = side / factor;
    let area = (factor * factor) as f64;
    let mut data = Vec::with_capacity(ts.len() * channels * out_side * out_side);
    for row in ts.rows() {
        for ch in 0..channels {
            let plane = &row[ch * side * side..(ch + 1) * side * side];
            for by in 0..out_side {
                for bx in 0..out_side {
                    let mut acc = 0.0;
                    for y in by * factor..(by + 1) * factor {
                        acc += plane[y * side + bx * factor..y * side + (bx + 1) * factor]
                            .iter()
                            .sum::<f64>();
                    }
                    data.push(acc / area);
                }
            }
        }
    }
    Ok(TrainingSet::new(
        data,
        channels * out_side * out_side,
        ts.labels.clone(),
        ts.num_classes,
    )?
    .with_seed(ts.seed))
}

/// Serializes to the `DMEM` little-endian layout.
pub fn encode(ts: &TrainingSet) -> Vec<u8> {
    let labels = ts.labels();
    let mut out = Vec::with_capacity(
        HEADER_LEN + ts.data.len() * 4 + labels.map_or(0, |l| l.len() * 4),
    );
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ts.len as u32).to_le_bytes());
    out.extend_from_slice(&(ts.dim as u32).to_le_bytes());
    out.push(u8::from(labels.is_some()));
    out.extend_from_slice(&ts.num_classes.unwrap_or(0).to_le_bytes());
    for v in &ts.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TrainingSet> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.take_array::<4>("magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let has_labels = match cur.take_array::<1>("label flag")?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("label flag must be 0 or 1, found {other}"))),
    };
    let c = cur.u32("class count")?;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("empty shape {n}x{d}")));
    }
    let values = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let mut data = Vec::with_capacity(values);
    for _ in 0..values {
        data.push(f64::from(cur.f32("sample payload")?));
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(cur.u32("label payload")?);
        }
        Some(labels)
    } else {
        None
    };
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload (label flag inconsistent with payload length?)",
            cur.remaining()
        )));
    }
    if !has_labels && c != 0 {
        return Err(Error::Format(format!("unlabeled file declares {c} classes")));
    }
    let num_classes = has_labels.then_some(c);
    TrainingSet::new(data, d, labels, num_classes).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(ts: &TrainingSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ts)).map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<TrainingSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

/// Little-endian reader that reports which field ran out of bytes.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn take_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, what)?);
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_array(what)?))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take_array(what)?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
