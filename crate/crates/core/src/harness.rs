//! End-to-end experiments: nested subsets of one data pool, a model per
//! size, memorization ratios at every checkpoint, the size/ratio curve and
//! its EMM.
//!
//! Every seed is derived from the master seed and the repeat index, so a
//! sweep is a pure function of its configuration. Written CSVs carry a
//! `# config_hash=` line and contain no wall-clock values.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::config::{fmt_f64, KeyValues};
use crate::dataset::{self, DatasetSpec, LabelingMode, TrainingSet};
use crate::emm::{self, EmmEstimate, Interpolation, MemCurve};
use crate::error::{Error, Result};
use crate::kernel_score::KernelScoreModel;
use crate::memorization::{self, MemorizationReport, DEFAULT_TAU};
use crate::model::ScoreModel;
use crate::rng::derive_seed;
use crate::sampler::{self, ClassSelection, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::score_net::{NetConfig, ScoreNet};
use crate::trainer::{self, TrainConfig, TrainOutput};

/// How training rows are labelled before a conditional model sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    None,
    True,
    /// Labels drawn uniformly from `[0, C)` once per data pool.
    Random(u32),
    /// Row `i` of each subset gets class `i`.
    Unique,
}

impl FromStr for Conditioning {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "true" => Ok(Self::True),
            "unique" => Ok(Self::Unique),
            other => match other.strip_prefix("random:") {
                Some(c) => match c.parse::<u32>() {
                    Ok(c) if c > 0 => Ok(Self::Random(c)),
                    _ => Err(format!("bad class count in {other:?}")),
                },
                None => Err(format!("unknown conditioning mode {other:?}")),
            },
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::True => f.write_str("true"),
            Self::Random(c) => write!(f, "random:{c}"),
            Self::Unique => f.write_str("unique"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    /// The closed-form optimum of the empirical objective; no training.
    Kernel,
    Net(NetConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub tau: f64,
    pub samples: usize,
    /// Resample size and replicate count.
    pub bootstrap: Option<(usize, usize)>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            samples: 10_000,
            bootstrap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// The data pool; its size is raised to the largest sweep size.
    pub dataset: DatasetSpec,
    pub sizes: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub model: ModelChoice,
    pub train: TrainConfig,
    /// Replaces the epoch count by `ceil(fixed_steps / steps_per_epoch)`
    /// for every size, so all sizes get the same number of updates.
    pub fixed_steps: Option<u64>,
    /// Evenly spaced checkpoints evaluated per trained model; overrides
    /// `train.checkpoint_every`.
    pub checkpoints: Option<u64>,
    pub sampler: SamplerConfig,
    pub metric: MetricConfig,
    pub conditioning: Conditioning,
    pub epsilon: f64,
    pub interpolation: Interpolation,
    /// Independent data pools; the curve averages their per-size maxima.
    pub repeats: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// A 2-D mixture sweep with a small network.
    pub fn desk_default(sizes: Vec<usize>, seed: u64) -> Self {
        let pool = sizes.iter().copied().max().unwrap_or(1);
        Self {
            dataset: DatasetSpec::mixture(pool, 0),
            sizes,
            schedule: NoiseSchedule::edm(),
            model: ModelChoice::Net(NetConfig::new(2)),
            train: TrainConfig::default(),
            fixed_steps: None,
            checkpoints: None,
            sampler: SamplerConfig::default(),
            metric: MetricConfig::default(),
            conditioning: Conditioning::None,
            epsilon: emm::DEFAULT_EPSILON,
            interpolation: Interpolation::Linear,
            repeats: 1,
            seed,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::invalid("empty size sweep"));
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) || self.sizes[0] < 2 {
            return Err(Error::invalid(format!(
                "sizes must be strictly increasing and >= 2, got {:?}",
                self.sizes
            )));
        }
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if let ModelChoice::Net(net) = &self.model {
            net.validate()?;
            if let Some(d) = self.dataset.source.dim() {
                if d != net.data_dim {
                    return Err(Error::invalid(format!(
                        "network data_dim {} does not match the dataset dimension {d}",
                        net.data_dim
                    )));
                }
            }
        }
        if !(self.metric.tau > 0.0) || self.metric.samples == 0 {
            return Err(Error::invalid("metric.tau must be positive and metric.samples >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if self.repeats == 0 || self.fixed_steps == Some(0) || self.checkpoints == Some(0) {
            return Err(Error::invalid("repeats, fixed_steps and checkpoints must be >= 1"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let sizes: Vec<usize> = kv
            .get_list("sizes")?
            .ok_or_else(|| Error::parse("experiment config", "missing required key \"sizes\""))?;
        let pool = sizes.iter().copied().max().unwrap_or(1);
        let mut ds_kv = kv.section("dataset");
        if !ds_kv.contains("size") {
            ds_kv.set("size", pool);
        }
        let mut dataset = DatasetSpec::from_kv(&ds_kv)?;
        dataset.size = dataset.size.max(pool);
        let schedule = NoiseSchedule::from_kv(&kv.section("schedule"))?;
        let model = match kv.get_or("model", "net".to_string())?.as_str() {
            "kernel" => ModelChoice::Kernel,
            "net" => {
                let dim = dataset.source.dim().unwrap_or(2);
                ModelChoice::Net(NetConfig::from_kv(&kv.section("net"), dim)?)
            }
            other => return Err(Error::invalid(format!("unknown model {other:?} (kernel or net)"))),
        };
        let m = kv.section("metric");
        let bootstrap = match m.get_list::<usize>("bootstrap")? {
            None => None,
            Some(v) if v.len() == 2 => Some((v[0], v[1])),
            Some(v) => return Err(Error::invalid(format!("metric.bootstrap needs M,B, got {v:?}"))),
        };
        let d = MetricConfig::default();
        let cfg = Self {
            dataset,
            sizes,
            schedule,
            model,
            train: TrainConfig::from_kv(&kv.section("train"))?,
            fixed_steps: kv.get("fixed_steps")?,
            checkpoints: kv.get("checkpoints")?,
            sampler: SamplerConfig::from_kv(&kv.section("sampler"))?,
            metric: MetricConfig {
                tau: m.get_or("tau", d.tau)?,
                samples: m.get_or("samples", d.samples)?,
                bootstrap,
            },
            conditioning: kv.get_or("conditioning", Conditioning::None)?,
            epsilon: kv.get_or("epsilon", emm::DEFAULT_EPSILON)?,
            interpolation: kv.get_or("interpolation", Interpolation::Linear)?,
            repeats: kv.get_or("repeats", 1)?,
            seed: kv.get_or("seed", 0)?,
            output_dir: kv.get::<String>("output_dir")?.map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    /// Canonical form; its hash identifies the experiment. The output
    /// directory is excluded so relocating a run keeps its identity.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set(
            "sizes",
            self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.merge_section("dataset", &self.dataset.to_kv());
        kv.merge_section("schedule", &self.schedule.to_kv());
        match &self.model {
            ModelChoice::Kernel => kv.set("model", "kernel"),
            ModelChoice::Net(net) => {
                kv.set("model", "net");
                kv.merge_section("net", &net.to_kv());
            }
        }
        kv.merge_section("train", &self.train.to_kv());
        if let Some(steps) = self.fixed_steps {
            kv.set("fixed_steps", steps);
        }
        if let Some(k) = self.checkpoints {
            kv.set("checkpoints", k);
        }
        kv.merge_section("sampler", &self.sampler.to_kv());
        kv.set("metric.tau", fmt_f64(self.metric.tau));
        kv.set("metric.samples", self.metric.samples);
        if let Some((m, b)) = self.metric.bootstrap {
            kv.set("metric.bootstrap", format!("{m},{b}"));
        }
        kv.set("conditioning", self.conditioning);
        kv.set("epsilon", fmt_f64(self.epsilon));
        kv.set("interpolation", self.interpolation);
        kv.set("repeats", self.repeats);
        kv.set("seed", self.seed);
        kv
    }

    pub fn config_hash(&self) -> String {
        self.to_kv().hash()
    }
}

/// Ratio of one checkpoint of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRatio {
    pub size: usize,
    pub repeat: usize,
    pub epoch: u64,
    pub ratio: f64,
}

#[derive(Debug)]
pub struct StageFailure {
    pub size: usize,
    pub repeat: usize,
    pub error: Error,
}

#[derive(Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub checkpoints: Vec<CheckpointRatio>,
    /// `(size, repeat, max ratio over checkpoints)`.
    pub max_ratios: Vec<(usize, usize, f64)>,
    pub curve: Option<MemCurve>,
    pub emm: Option<EmmEstimate>,
    pub wall_ms: u128,
    pub artifacts: Vec<PathBuf>,
    pub failures: Vec<StageFailure>,
}

impl RunRecord {
    pub fn max_ratio(&self, size: usize, repeat: usize) -> Option<f64> {
        self.max_ratios
            .iter()
            .find(|(s, r, _)| *s == size && *r == repeat)
            .map(|m| m.2)
    }

    /// Ratios of one model in checkpoint order.
    pub fn trajectory(&self, size: usize, repeat: usize) -> Vec<(u64, f64)> {
        self.checkpoints
            .iter()
            .filter(|c| c.size == size && c.repeat == repeat)
            .map(|c| (c.epoch, c.ratio))
            .collect()
    }

    /// First checkpoint epoch whose ratio reaches `level`.
    pub fn epochs_to_reach(&self, size: usize, repeat: usize, level: f64) -> Option<u64> {
        self.trajectory(size, repeat)
            .into_iter()
            .find(|(_, r)| *r >= level)
            .map(|(e, _)| e)
    }

    pub fn checkpoints_csv(&self) -> String {
        let mut out = format!("# config_hash={}\nN,repeat,epoch,ratio\n", self.config_hash);
        for c in &self.checkpoints {
            out.push_str(&format!("{},{},{},{}\n", c.size, c.repeat, c.epoch, fmt_f64(c.ratio)));
        }
        out
    }

    pub fn max_ratios_csv(&self) -> String {
        let mut out = format!("# config_hash={}\nN,repeat,max_ratio\n", self.config_hash);
        for (s, r, v) in &self.max_ratios {
            out.push_str(&format!("{s},{r},{}\n", fmt_f64(*v)));
        }
        out
    }
}

fn write(path: &Path, text: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))?;
    artifacts.push(path.to_path_buf());
    Ok(())
}

fn repeat_seed(master: u64, repeat: usize) -> u64 {
    derive_seed(master, &format!("repeat-{repeat}"))
}

/// The labelled data pool of one repeat.
pub fn data_pool(cfg: &ExperimentConfig, repeat: usize) -> Result<TrainingSet> {
    let seed = repeat_seed(cfg.seed, repeat);
    let mut spec = cfg.dataset.clone();
    spec.seed = derive_seed(seed, "dataset");
    spec.size = spec.size.max(*cfg.sizes.last().unwrap_or(&1));
    spec.labeling = if cfg.conditioning == Conditioning::True {
        LabelingMode::True
    } else {
        LabelingMode::None
    };
    let pool = dataset::generate(&spec)?;
    match cfg.conditioning {
        Conditioning::Random(c) => {
            dataset::relabel(&pool, LabelingMode::Random, Some(c), derive_seed(seed, "labels"))
        }
        _ => Ok(pool),
    }
}

/// The nested training subset of `size` rows for one repeat.
pub fn training_subset(cfg: &ExperimentConfig, pool: &TrainingSet, size: usize, repeat: usize) -> Result<TrainingSet> {
    let seed = repeat_seed(cfg.seed, repeat);
    let subset = dataset::subsample(pool, size, derive_seed(seed, "subsample"))?;
    match cfg.conditioning {
        Conditioning::Unique => dataset::relabel(&subset, LabelingMode::Unique, None, 0),
        Conditioning::True => dataset::relabel(&subset, LabelingMode::True, None, 0),
        _ => Ok(subset),
    }
}

struct Evaluation {
    epoch: u64,
    report: MemorizationReport,
}

fn evaluate<M: ScoreModel + ?Sized>(
    cfg: &ExperimentConfig,
    model: &M,
    set: &TrainingSet,
    sampler_cfg: &SamplerConfig,
    epoch: u64,
    dir: Option<&Path>,
    hash: &str,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Evaluation> {
    let selection = if model.num_classes().is_some() {
        ClassSelection::Cycle
    } else {
        ClassSelection::Unconditional
    };
    let batch = sampler::sample(model, sampler_cfg, cfg.metric.samples, selection)
        .map_err(|e| e.in_stage(format!("sample epoch {epoch}")))?;
    let samples = batch.to_training_set()?;
    let report = match cfg.metric.bootstrap {
        Some((m, b)) => memorization::bootstrap_ratio(
            samples.data(),
            set,
            cfg.metric.tau,
            m,
            b,
            derive_seed(sampler_cfg.seed, "bootstrap"),
        ),
        None => memorization::memorization_ratio(samples.data(), set, cfg.metric.tau),
    }
    .map_err(|e| e.in_stage(format!("metric epoch {epoch}")))?;
    if let Some(dir) = dir {
        let path = dir.join(format!("samples_e{epoch:06}.dmem"));
        dataset::save(&samples, &path)?;
        artifacts.push(path);
        write(
            &dir.join(format!("report_e{epoch:06}.csv")),
            &report.to_csv(hash, set.len()),
            artifacts,
        )?;
    }
    Ok(Evaluation { epoch, report })
}

fn run_one(
    cfg: &ExperimentConfig,
    set: &TrainingSet,
    size: usize,
    repeat: usize,
    hash: &str,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Vec<Evaluation>> {
    let seed = repeat_seed(cfg.seed, repeat);
    let dir = match &cfg.output_dir {
        Some(root) => {
            let d = root.join(format!("N{size}_r{repeat}"));
            fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
            dataset::save(set, &d.join("train.dmem"))?;
            artifacts.push(d.join("train.dmem"));
            Some(d)
        }
        None => None,
    };
    let sampler_cfg = SamplerConfig {
        seed: derive_seed(seed, &format!("sampler-{size}")),
        ..cfg.sampler.clone()
    };
    match &cfg.model {
        ModelChoice::Kernel => {
            let shared = Arc::new(set.clone());
            let model = if set.labels().is_some() {
                KernelScoreModel::conditional(shared, cfg.schedule)?
            } else {
                KernelScoreModel::new(shared, cfg.schedule)?
            };
            Ok(vec![evaluate(cfg, &model, set, &sampler_cfg, 0, dir.as_deref(), hash, artifacts)?])
        }
        ModelChoice::Net(net_cfg) => {
            let net_cfg = NetConfig {
                num_classes: set.num_classes(),
                init_seed: derive_seed(seed, &format!("init-{size}")),
                ..net_cfg.clone()
            };
            let net = ScoreNet::new(net_cfg, cfg.schedule)?;
            let mut train_cfg = TrainConfig {
                seed: derive_seed(seed, &format!("train-{size}")),
                ..cfg.train.clone()
            };
            if let Some(steps) = cfg.fixed_steps {
                let per_epoch = set.len().div_ceil(train_cfg.effective_batch(set.len())) as u64;
                train_cfg.epochs = steps.div_ceil(per_epoch).max(1);
            }
            if let Some(k) = cfg.checkpoints {
                train_cfg.checkpoint_every = Some((train_cfg.epochs / k).max(1));
            }
            let output = TrainOutput {
                dir: dir.as_ref().map(|d| d.join("train")),
                wall_clock: false,
            };
            let outcome = trainer::train(set, &net, &train_cfg, &output).map_err(|e| e.in_stage("train"))?;
            if let Some(d) = &output.dir {
                artifacts.push(d.join("curve.csv"));
                artifacts.extend(outcome.snapshots.iter().filter_map(|s| s.path.clone()));
            }
            outcome
                .snapshots
                .iter()
                .map(|snap| {
                    let model = net.bind(snap.ema.quantized())?;
                    evaluate(cfg, &model, set, &sampler_cfg, snap.epoch, dir.as_deref(), hash, artifacts)
                })
                .collect()
        }
    }
}

/// Runs the whole sweep. A failing (size, repeat) is recorded and skipped;
/// the remaining models still run and are written out.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.config_hash();
    let mut artifacts = Vec::new();
    if let Some(root) = &cfg.output_dir {
        fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
        write(&root.join("config.txt"), &cfg.to_kv().to_text(), &mut artifacts)?;
    }
    let mut checkpoints = Vec::new();
    let mut max_ratios = Vec::new();
    let mut failures = Vec::new();
    for repeat in 0..cfg.repeats {
        let pool = data_pool(cfg, repeat).map_err(|e| e.in_stage("dataset"))?;
        for &size in &cfg.sizes {
            let result = training_subset(cfg, &pool, size, repeat)
                .map_err(|e| e.in_stage("subsample"))
                .and_then(|set| run_one(cfg, &set, size, repeat, &hash, &mut artifacts));
            match result {
                Ok(evals) => {
                    let mut best = 0.0f64;
                    for ev in &evals {
                        best = best.max(ev.report.ratio);
                        checkpoints.push(CheckpointRatio {
                            size,
                            repeat,
                            epoch: ev.epoch,
                            ratio: ev.report.ratio,
                        });
                    }
                    max_ratios.push((size, repeat, best));
                }
                Err(error) => failures.push(StageFailure {
                    size,
                    repeat,
                    error: error.in_stage(format!("N={size} repeat={repeat}")),
                }),
            }
        }
    }

    let mut points = Vec::new();
    for &size in &cfg.sizes {
        let vals: Vec<f64> = max_ratios.iter().filter(|m| m.0 == size).map(|m| m.2).collect();
        if vals.len() == cfg.repeats {
            points.push((size as u64, vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    let curve = if points.is_empty() {
        None
    } else {
        let mut c = MemCurve::new(points)?;
        c.metadata.set("config_hash", &hash);
        c.metadata.set("nested", true);
        Some(c)
    };
    let emm = match &curve {
        Some(c) => Some(emm::estimate_emm_with(c, cfg.epsilon, cfg.interpolation)?),
        None => None,
    };
    let mut record = RunRecord {
        config_hash: hash.clone(),
        checkpoints,
        max_ratios,
        curve,
        emm,
        wall_ms: 0,
        artifacts,
        failures,
    };
    if let Some(root) = &cfg.output_dir {
        let mut arts = std::mem::take(&mut record.artifacts);
        write(&root.join("checkpoints.csv"), &record.checkpoints_csv(), &mut arts)?;
        write(&root.join("max_ratios.csv"), &record.max_ratios_csv(), &mut arts)?;
        if let Some(c) = &record.curve {
            write(&root.join("curve.csv"), &c.to_csv(Some(&hash)), &mut arts)?;
        }
        if let Some(e) = &record.emm {
            write(&root.join("emm.txt"), &e.to_kv().to_text(), &mut arts)?;
        }
        record.artifacts = arts;
    }
    record.wall_ms = started.elapsed().as_millis();
    if let Some(root) = &cfg.output_dir {
        let mut kv = KeyValues::new();
        kv.set("config_hash", &hash);
        kv.set("wall_ms", record.wall_ms);
        kv.set("models", record.max_ratios.len());
        kv.set("failures", record.failures.len());
        for (i, f) in record.failures.iter().enumerate() {
            kv.set(format!("failure.{i}"), &f.error);
        }
        let path = root.join("run.txt");
        fs::write(&path, kv.to_text()).map_err(|e| Error::file(&path, e))?;
    }
    Ok(record)
}

/// Per-mode sweeps sharing master seed, data pools and subset chains.
#[derive(Debug)]
pub struct ConditioningTable {
    pub rows: Vec<(Conditioning, RunRecord)>,
}

impl ConditioningTable {
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nmode,N,repeat,max_ratio\n");
        for (mode, rec) in &self.rows {
            for (s, r, v) in &rec.max_ratios {
                out.push_str(&format!("{mode},{s},{r},{}\n", fmt_f64(*v)));
            }
        }
        out
    }

    pub fn checkpoints_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nmode,N,repeat,epoch,ratio\n");
        for (mode, rec) in &self.rows {
            for c in &rec.checkpoints {
                out.push_str(&format!("{mode},{},{},{},{}\n", c.size, c.repeat, c.epoch, fmt_f64(c.ratio)));
            }
        }
        out
    }

    pub fn record(&self, mode: Conditioning) -> Option<&RunRecord> {
        self.rows.iter().find(|(m, _)| *m == mode).map(|(_, r)| r)
    }
}

pub fn compare_conditioning(cfg: &ExperimentConfig, modes: &[Conditioning]) -> Result<ConditioningTable> {
    if modes.is_empty() {
        return Err(Error::invalid("no conditioning modes to compare"));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let sub = ExperimentConfig {
            conditioning: mode,
            output_dir: cfg
                .output_dir
                .as_ref()
                .map(|d| d.join(mode.to_string().replace(':', "_"))),
            ..cfg.clone()
        };
        rows.push((mode, run_sweep(&sub).map_err(|e| e.in_stage(format!("mode {mode}")))?));
    }
    let table = ConditioningTable { rows };
    if let Some(root) = &cfg.output_dir {
        let hash = cfg.config_hash();
        fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
        let path = root.join("conditioning.csv");
        fs::write(&path, table.to_csv(&hash)).map_err(|e| Error::file(&path, e))?;
        let path = root.join("conditioning_checkpoints.csv");
        fs::write(&path, table.checkpoints_csv(&hash)).map_err(|e| Error::file(&path, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel_cfg(sizes: Vec<usize>) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelChoice::Kernel,
            metric: MetricConfig { samples: 100, ..MetricConfig::default() },
            sampler: SamplerConfig { n_steps: 40, ..SamplerConfig::default() },
            ..ExperimentConfig::desk_default(sizes, 3)
        }
    }

    #[test]
    fn conditioning_parse() {
        for s in ["none", "true", "random:16", "unique"] {
            assert_eq!(s.parse::<Conditioning>().unwrap().to_string(), s);
        }
        assert!("random:0".parse::<Conditioning>().is_err());
        assert!("sometimes".parse::<Conditioning>().is_err());
    }

    #[test]
    fn subsets_are_nested() {
        let cfg = kernel_cfg(vec![8, 32, 128]);
        let pool = data_pool(&cfg, 0).unwrap();
        let small = training_subset(&cfg, &pool, 8, 0).unwrap();
        let big = training_subset(&cfg, &pool, 32, 0).unwrap();
        for row in small.rows() {
            assert!(big.rows().any(|r| r == row));
        }
    }

    #[test]
    fn kernel_sweep_memorizes_everywhere() {
        let rec = run_sweep(&kernel_cfg(vec![8, 32, 128])).unwrap();
        assert!(rec.failures.is_empty());
        for &(_, _, r) in &rec.max_ratios {
            assert_eq!(r, 1.0);
        }
        assert_eq!(rec.emm.unwrap().censoring, emm::Censoring::LowerBound);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig {
            metric: MetricConfig { bootstrap: Some((100, 20)), ..MetricConfig::default() },
            conditioning: Conditioning::Random(4),
            fixed_steps: Some(500),
            checkpoints: Some(10),
            ..ExperimentConfig::desk_default(vec![8, 64], 11)
        };
        let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        let mut kv = cfg.to_kv();
        kv.set("sizes", "64,8");
        assert!(ExperimentConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn empty_modes_rejected() {
        assert!(compare_conditioning(&kernel_cfg(vec![8]), &[]).is_err());
    }
}
