use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use memlab::config::KeyValues;
use memlab::dataset::{self, DatasetSpec};
use memlab::emm::{self, Interpolation, MemCurve};
use memlab::harness::{self, Conditioning, ExperimentConfig};
use memlab::kernel_score::KernelScoreModel;
use memlab::memorization::{self, DEFAULT_TAU};
use memlab::model::ScoreModel;
use memlab::sampler::{self, ClassSelection, SamplerConfig};
use memlab::schedule::NoiseSchedule;
use memlab::score_net::{Checkpoint, NetConfig, ScoreNet};
use memlab::trainer::{self, TrainConfig, TrainOutput};
use memlab::{Error, Result};

const SEED_ENV: &str = "MEMLAB_SEED";

#[derive(Parser)]
#[command(name = "memlab", version, about = "Memorization laboratory for diffusion models")]
struct Cli {
    /// Worker threads (default: all logical cores). 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or subsample training sets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Evaluate the closed-form optimal score at given points.
    ScoreEval(ScoreEvalArgs),
    /// Train a score network with denoising score matching.
    Train(TrainArgs),
    /// Generate samples from the kernel optimum or a checkpoint.
    Sample(SampleArgs),
    /// Nearest-neighbour memorization ratio of generated samples.
    MemRatio(MemRatioArgs),
    /// Effective model memorization from a size/ratio curve.
    Emm(EmmArgs),
    /// Run a full size sweep from an experiment config.
    Sweep(SweepArgs),
    /// Run the same sweep under several conditioning modes.
    CompareCond(CompareArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a set from a dataset spec file.
    Make {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested random subset of an existing set.
    Subsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScoreEvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Schedule config file, or one of edm, vp, ve.
    #[arg(long, default_value = "edm")]
    schedule: String,
    /// Query points: a dataset file or CSV rows of coordinates.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    t: f64,
    /// Condition on this class (uses the conditional optimum).
    #[arg(long)]
    class: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Network config (`net.` keys or bare keys).
    #[arg(long)]
    net: Option<PathBuf>,
    /// Training config (`train.` keys or bare keys).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value = "edm")]
    schedule: String,
    #[arg(long)]
    out: PathBuf,
    /// Record wall-clock milliseconds in the training curve.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// `kernel` or `checkpoint:<path>`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    sampler: Option<PathBuf>,
    #[arg(long, default_value = "edm")]
    schedule: String,
    #[arg(long)]
    count: usize,
    /// A class index, or `cycle` to go through all classes.
    #[arg(long)]
    class: Option<String>,
    /// Sample from raw instead of EMA checkpoint parameters.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MemRatioArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Resample size and replicate count, `M,B`.
    #[arg(long)]
    bootstrap: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmmArgs {
    /// Curve CSV with `N,ratio` rows.
    #[arg(long, conflicts_with = "runs")]
    curve: Option<PathBuf>,
    /// Memorization report files, comma separated.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = emm::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value = "linear")]
    interpolation: Interpolation,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    modes: Vec<Conditioning>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::InvalidArgument(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// Keys under `prefix.` if the file has any, otherwise the whole file.
fn load_section(path: &Path, prefix: &str) -> Result<KeyValues> {
    let kv = KeyValues::load(path)?;
    let section = kv.section(prefix);
    Ok(if section.is_empty() { kv } else { section })
}

fn parse_schedule(arg: &str) -> Result<NoiseSchedule> {
    if let Ok(s) = arg.parse::<NoiseSchedule>() {
        return Ok(s);
    }
    NoiseSchedule::from_kv(&load_section(Path::new(arg), "schedule")?)
}

fn read_points(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.starts_with(&dataset::DATASET_MAGIC) {
        return Ok(dataset::decode(&bytes)?.data().to_vec());
    }
    let text = String::from_utf8_lossy(&bytes);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = match row {
            Ok(r) => r,
            Err(_) if out.is_empty() => continue,
            Err(e) => {
                return Err(Error::Parse {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: e.to_string(),
                })
            }
        };
        if row.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: row.len() });
        }
        out.extend(row);
    }
    Ok(out)
}

fn stdout_line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn dataset_cmd(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Make { spec, out } => {
            let mut spec = DatasetSpec::from_kv(&KeyValues::load(&spec)?)?;
            if let Some(seed) = seed_override()? {
                spec.seed = seed;
            }
            let ts = dataset::generate(&spec)?;
            dataset::save(&ts, &out)?;
            eprintln!("wrote {} rows of dimension {} to {}", ts.len(), ts.dim(), out.display());
        }
        DatasetCommand::Subsample { input, n, seed, out } => {
            let parent = dataset::load(&input)?;
            let ts = dataset::subsample(&parent, n, seed_override()?.unwrap_or(seed))?;
            dataset::save(&ts, &out)?;
            eprintln!("wrote {} of {} rows to {}", ts.len(), parent.len(), out.display());
        }
    }
    Ok(())
}

fn score_eval(args: ScoreEvalArgs) -> Result<()> {
    let set = Arc::new(dataset::load(&args.dataset)?);
    let schedule = parse_schedule(&args.schedule)?;
    let model = match args.class {
        Some(_) => KernelScoreModel::conditional(set.clone(), schedule)?,
        None => KernelScoreModel::new(set.clone(), schedule)?,
    };
    let d = set.dim();
    let points = read_points(&args.points, d)?;
    let mut out = String::from("point");
    for i in 0..d {
        out.push_str(&format!(",score_{i}"));
    }
    for i in 0..d {
        out.push_str(&format!(",denoise_{i}"));
    }
    out.push_str(",top_index,top_weight\n");
    for (p, z) in points.chunks(d).enumerate() {
        let s = model.score(z, args.t, args.class)?;
        let den = model.denoise(z, args.t, args.class)?;
        let w = model.weights(z, args.t, args.class)?;
        let (top, weight) = w
            .indices
            .iter()
            .zip(&w.weights)
            .fold((0, f64::NEG_INFINITY), |best, (&i, &v)| if v > best.1 { (i, v) } else { best });
        out.push_str(&p.to_string());
        for v in s.iter().chain(&den) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{top},{weight:?}\n"));
    }
    stdout_line(&out);
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let set = dataset::load(&args.dataset)?;
    let schedule = parse_schedule(&args.schedule)?;
    let net_kv = match &args.net {
        Some(p) => load_section(p, "net")?,
        None => KeyValues::new(),
    };
    let mut net_cfg = NetConfig::from_kv(&net_kv, set.dim())?;
    if net_cfg.num_classes.is_none() && net_kv.raw("conditional") == Some("true") {
        net_cfg.num_classes = set.num_classes();
    }
    let mut train_cfg = match &args.train {
        Some(p) => TrainConfig::from_kv(&load_section(p, "train")?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        train_cfg.seed = seed;
    }
    let net = ScoreNet::new(net_cfg, schedule)?;
    let outcome = trainer::train(
        &set,
        &net,
        &train_cfg,
        &TrainOutput {
            dir: Some(args.out.clone()),
            wall_clock: args.wall_clock,
        },
    )?;
    let last = outcome.history.last().map(|p| p.loss).unwrap_or(f64::NAN);
    stdout_line(&format!(
        "epochs = {}\nsteps = {}\nfinal_loss = {last:?}\ncheckpoints = {}\n",
        train_cfg.epochs,
        outcome.state.step,
        outcome.snapshots.len()
    ));
    Ok(())
}

fn sample_cmd(args: SampleArgs) -> Result<()> {
    let set = Arc::new(dataset::load(&args.dataset)?);
    let mut cfg = match &args.sampler {
        Some(p) => SamplerConfig::from_kv(&load_section(p, "sampler")?)?,
        None => SamplerConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let model: Box<dyn ScoreModel> = if args.model == "kernel" {
        let schedule = parse_schedule(&args.schedule)?;
        if args.class.is_some() {
            Box::new(KernelScoreModel::conditional(set.clone(), schedule)?)
        } else {
            Box::new(KernelScoreModel::new(set.clone(), schedule)?)
        }
    } else if let Some(path) = args.model.strip_prefix("checkpoint:") {
        let ck = Checkpoint::load(Path::new(path))?;
        let params = if args.raw { ck.params.clone() } else { ck.ema.clone() };
        Box::new(ck.net()?.bind(params)?)
    } else {
        return Err(Error::InvalidArgument(format!(
            "--model must be `kernel` or `checkpoint:<path>`, got {:?}",
            args.model
        )));
    };
    let selection = match args.class.as_deref() {
        None => ClassSelection::Unconditional,
        Some("cycle") => ClassSelection::Cycle,
        Some(c) => ClassSelection::Fixed(
            c.parse()
                .map_err(|e| Error::InvalidArgument(format!("--class {c:?}: {e}")))?,
        ),
    };
    let batch = sampler::sample(model.as_ref(), &cfg, args.count, selection)?;
    let samples = batch.to_training_set()?;
    dataset::save(&samples, &args.out)?;
    eprintln!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn mem_ratio(args: MemRatioArgs) -> Result<()> {
    let samples = dataset::load(&args.samples)?;
    let set = dataset::load(&args.dataset)?;
    if samples.dim() != set.dim() {
        return Err(Error::ShapeMismatch {
            expected: set.dim(),
            got: samples.dim(),
        });
    }
    let report = match &args.bootstrap {
        Some(spec) => {
            let parts: Vec<usize> = spec
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("--bootstrap {spec:?}: {e}")))?;
            let [m, b] = parts[..] else {
                return Err(Error::InvalidArgument(format!("--bootstrap needs M,B, got {spec:?}")));
            };
            let seed = seed_override()?.unwrap_or(args.seed);
            memorization::bootstrap_ratio(samples.data(), &set, args.tau, m, b, seed)?
        }
        None => memorization::memorization_ratio(samples.data(), &set, args.tau)?,
    };
    if let Some(w) = report.duplicate_warning() {
        eprintln!("warning: {w}");
    }
    let mut kv = KeyValues::new();
    kv.set("tau", format!("{:?}", args.tau));
    kv.set("samples", args.samples.display());
    kv.set("dataset", args.dataset.display());
    let csv = report.to_csv(&kv.hash(), set.len());
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| Error::File {
            path: out.clone(),
            source: e,
        })?;
    }
    let mut summary = format!(
        "ratio = {:?}\nmemorized = {}\nsamples = {}\n",
        report.ratio,
        report.memorized_count(),
        report.sample_count()
    );
    if let Some(b) = report.bootstrap {
        summary.push_str(&format!("bootstrap_mean = {:?}\nbootstrap_std = {:?}\n", b.mean, b.std));
    }
    stdout_line(&summary);
    Ok(())
}

fn emm_cmd(args: EmmArgs) -> Result<()> {
    let curve = match (&args.curve, args.runs.is_empty()) {
        (Some(path), _) => MemCurve::load(path)?,
        (None, false) => emm::curve_from_runs(&args.runs)?,
        (None, true) => return Err(Error::InvalidArgument("give --curve or --runs".into())),
    };
    let est = emm::estimate_emm_with(&curve, args.epsilon, args.interpolation)?;
    for w in &est.warnings {
        eprintln!("warning: {w}");
    }
    stdout_line(&format!("{}\n{}", est.summary(), est.to_kv().to_text()));
    Ok(())
}

fn load_experiment(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut kv = KeyValues::load(path)?;
    if let Some(seed) = seed_override()? {
        kv.set("seed", seed);
    }
    let mut cfg = ExperimentConfig::from_kv(&kv)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let cfg = load_experiment(&args.config, args.out)?;
    let record = harness::run_sweep(&cfg)?;
    let mut text = record.max_ratios_csv();
    if let Some(c) = &record.curve {
        text.push_str(&c.to_csv(None));
    }
    if let Some(e) = &record.emm {
        text.push_str(&format!("{}\n", e.summary()));
    }
    stdout_line(&text);
    match record.failures.into_iter().next() {
        Some(f) => Err(f.error),
        None => Ok(()),
    }
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let cfg = load_experiment(&args.config, args.out)?;
    let table = harness::compare_conditioning(&cfg, &args.modes)?;
    stdout_line(&table.to_csv(&cfg.config_hash()));
    for (_, rec) in table.rows {
        if let Some(f) = rec.failures.into_iter().next() {
            return Err(f.error);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(cmd) => dataset_cmd(cmd),
        Command::ScoreEval(args) => score_eval(args),
        Command::Train(args) => train_cmd(args),
        Command::Sample(args) => sample_cmd(args),
        Command::MemRatio(args) => mem_ratio(args),
        Command::Emm(args) => emm_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::CompareCond(args) => compare_cmd(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
