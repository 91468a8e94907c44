use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn memlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memlab"))
        .args(args)
        .env_remove("MEMLAB_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const SPEC: &str = "size = 200\nsource = gaussian-mixture\ncomponents = 4\nseed = 5\n";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(memlab(&["bogus"]).status.code(), Some(1));
}

#[test]
fn missing_input_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = memlab(&[
        "dataset",
        "subsample",
        "--in",
        p(&dir.path().join("absent.dmem")),
        "--n",
        "3",
        "--out",
        p(&dir.path().join("x.dmem")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.dmem"));
}

#[test]
fn make_then_subsample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let full = dir.path().join("full.dmem");
    ok(&memlab(&["dataset", "make", "--spec", p(&spec), "--out", p(&full)]));
    let sub = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        ok(&memlab(&["dataset", "subsample", "--in", p(&full), "--n", "50", "--seed", seed, "--out", p(&path)]));
        fs::read(path).unwrap()
    };
    assert_eq!(sub("a.dmem", "3"), sub("b.dmem", "3"));
    assert_ne!(sub("a.dmem", "3"), sub("c.dmem", "4"));
    assert!(sub("a.dmem", "3").len() < fs::read(&full).unwrap().len());
}

#[test]
fn seed_variable_overrides_the_spec_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let make = |name: &str, seed: Option<&str>| {
        let path = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_memlab"));
        cmd.args(["dataset", "make", "--spec", p(&spec), "--out", p(&path)]).env_remove("MEMLAB_SEED");
        if let Some(s) = seed {
            cmd.env("MEMLAB_SEED", s);
        }
        ok(&cmd.output().unwrap());
        fs::read(path).unwrap()
    };
    let plain = make("plain.dmem", None);
    assert_eq!(plain, make("same.dmem", Some("5")));
    assert_ne!(plain, make("other.dmem", Some("6")));

    let mut bad = Command::new(env!("CARGO_BIN_EXE_memlab"));
    bad.args(["dataset", "make", "--spec", p(&spec), "--out", p(&dir.path().join("bad.dmem"))])
        .env("MEMLAB_SEED", "not-a-number");
    assert_eq!(bad.output().unwrap().status.code(), Some(2));
}

fn find(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut hits = Vec::new();
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            hits.extend(find(&path, name));
        } else if path.file_name().unwrap().to_str().unwrap().starts_with(name) {
            hits.push(path);
        }
    }
    hits.sort();
    hits
}

/// Drops the config-hash line, which names the producing command.
fn body(csv: &str) -> String {
    csv.lines().filter(|l| !l.starts_with("# config_hash")).collect::<Vec<_>>().join("\n")
}

#[test]
fn stored_samples_reproduce_the_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.txt");
    fs::write(&config, "sizes = 8,16\nseed = 2\nmodel = kernel\nsampler.n_steps = 30\nmetric.samples = 64\n").unwrap();
    let out = dir.path().join("run");
    ok(&memlab(&["sweep", "--config", p(&config), "--out", p(&out)]));

    let samples = find(&out, "samples_e");
    assert!(!samples.is_empty());
    for s in samples {
        let run_dir = s.parent().unwrap();
        let train = find(run_dir, "train.dmem");
        let train = train.first().cloned().unwrap_or_else(|| run_dir.parent().unwrap().join("train.dmem"));
        let report = s.with_file_name(s.file_name().unwrap().to_str().unwrap().replace("samples_", "report_").replace(".dmem", ".csv"));
        let again = dir.path().join("again.csv");
        ok(&memlab(&["mem-ratio", "--samples", p(&s), "--dataset", p(&train), "--out", p(&again)]));
        assert_eq!(
            body(&fs::read_to_string(&again).unwrap()),
            body(&fs::read_to_string(&report).unwrap()),
            "{}",
            s.display()
        );
    }
}

#[test]
fn emm_prints_the_interpolated_size() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    fs::write(&curve, "N,ratio\n1000,0.9209\n2000,0.6093\n").unwrap();
    let out = memlab(&["emm", "--curve", p(&curve)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("censoring = exact-interpolated"), "{text}");
    assert!(text.contains("bracket = 1000,2000"), "{text}");
    let value: f64 = text.lines().find_map(|l| l.strip_prefix("value = ")).unwrap().parse().unwrap();
    // 1000 + 1000 * (0.9209 - 0.9) / (0.9209 - 0.6093)
    assert!((value - 1067.073_170_731_707_5).abs() < 1e-9, "{value}");
}
