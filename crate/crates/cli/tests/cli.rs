use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vind::TrialSet;

const SMALL: &str = r#"
seed = 5

[generate]
n_trials = 6
trial_len = 20
split = [0.5, 0.25, 0.25]

[train]
epochs = 4
batch_size = 2
contraction_trials = 1
contraction_probes = 4

[train.model]
d_z = 2
recognition_widths = [8]
evolution_widths = [8]
observation_widths = [8]

[fit]
checkpoint_every = 2

[eval]
k_max = 3
"#;

fn vind(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vind"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = vind(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["print-defaults"]);
    assert!(text.contains("n_trials = 100"));
    assert!(text.contains("trial_len = 250"));
    let cfg = write_config(tmp.path(), "defaults.toml", &text);
    let loaded: vind_cli::RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(loaded, vind_cli::RunConfig::default());
    ok(tmp.path(), &["--config", &cfg, "demo-intractability"]);
}

#[test]
fn generate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&a, &["--config", &cfg, "generate"]);
    ok(&b, &["--config", &cfg, "generate"]);
    for part in ["train", "test", "validation"] {
        assert_eq!(dir_bytes(&a.join("data").join(part)), dir_bytes(&b.join("data").join(part)));
    }
    let train = TrialSet::load(&a.join("data/train")).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train.d_x(), Some(10));
    let c = tmp.path().join("c");
    ok(&c, &["--config", &cfg, "--seed", "6", "generate"]);
    assert_ne!(dir_bytes(&a.join("data/train")), dir_bytes(&c.join("data/train")));
}

#[test]
fn single_trial_dataset_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[generate]\nn_trials = 1\ntrial_len = 30\nsplit = [1.0, 0.0, 0.0]\n",
    );
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    let set = TrialSet::load(&tmp.path().join("data/train")).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.trials[0].shape(), (30, 10));
    let again = tmp.path().join("again");
    set.save(&again).unwrap();
    assert_eq!(TrialSet::load(&again).unwrap(), set);
}

#[test]
fn fit_eval_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    let out = ok(tmp.path(), &["--config", &cfg, "fit"]);
    assert!(out.starts_with("VIND fit: 4 epochs"), "{out}");
    let history = fs::read_to_string(tmp.path().join("fit/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    assert!(history.starts_with("epoch,elbo,smoothness,contraction,fpi_residual"));

    ok(tmp.path(), &["--config", &cfg, "eval"]);
    let csv = fs::read_to_string(tmp.path().join("eval/validation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["train"]["epochs"], 4);
    assert_eq!(manifest["details"]["label"], "VIND");
    for sub in ["data", "eval"] {
        assert!(tmp.path().join(sub).join("manifest.json").is_file());
    }
}

#[test]
fn eval_with_zero_horizon_is_the_standard_r2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &SMALL.replace("k_max = 3", "k_max = 0"));
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    ok(tmp.path(), &["--config", &cfg, "fit"]);
    ok(tmp.path(), &["--config", &cfg, "eval"]);
    let csv = fs::read_to_string(tmp.path().join("eval/train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn zero_epochs_checkpoints_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = SMALL.replace("epochs = 4", "epochs = 0");
    let cfg = write_config(tmp.path(), "c.toml", &cfg_text);
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    ok(tmp.path(), &["--config", &cfg, "fit"]);
    let run: vind_cli::RunConfig = toml::from_str(&cfg_text).unwrap();
    let mut train = run.train.clone();
    train.seed = run.seed;
    let model = vind::VindModel::load(&tmp.path().join("fit/model.vind")).unwrap();
    assert_eq!(model, vind::VindModel::init(&train.model, train.seed).unwrap());
    assert!(tmp.path().join("fit/checkpoint.ckpt").is_file());
}

#[test]
fn linear_run_is_labelled_as_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &SMALL.replace("d_z = 2", "d_z = 2\nalpha = 0.0"));
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    let out = ok(tmp.path(), &["--config", &cfg, "fit"]);
    assert!(out.starts_with("GfLDS"), "{out}");
    let h: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit/history.json")).unwrap()).unwrap();
    assert_eq!(h["label"], "GfLDS");
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let o = vind(tmp.path(), &["--config", &cfg, "eval"]);
    assert_eq!(o.status.code(), Some(5));

    let bad = write_config(tmp.path(), "bad.toml", "[train]\nlearning_rat = 0.1\n");
    let o = vind(tmp.path(), &["--config", &bad, "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let missing = tmp.path().join("nope.toml");
    let o = vind(tmp.path(), &["--config", missing.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(3));

    let o = vind(tmp.path(), &["--config", &cfg, "fit", "--resume"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn sweep_reports_every_latent_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[sweep]\nd_z = [1, 2]\nseeds = [0, 1]\n").replace("epochs = 4", "epochs = 2");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    ok(tmp.path(), &["--config", &cfg, "generate"]);
    ok(tmp.path(), &["--config", &cfg, "sweep"]);
    let median = fs::read_to_string(tmp.path().join("sweep/median.csv")).unwrap();
    let lines: Vec<&str> = median.lines().collect();
    assert_eq!(lines[0], "d_z,r2_0,r2_1,r2_2,r2_3");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert_eq!(fs::read_to_string(tmp.path().join("sweep/runs.csv")).unwrap().lines().count(), 5);
    for run in ["dz1_seed0", "dz1_seed1", "dz2_seed0", "dz2_seed1"] {
        assert!(tmp.path().join("sweep").join(run).join("validation.csv").is_file());
    }
}

#[test]
fn demo_reports_linear_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[demo]\nmap = \"linear\"\n");
    ok(tmp.path(), &["--config", &cfg, "demo-intractability"]);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("demo/report.json")).unwrap()).unwrap();
    assert!(r["relative_deviation"].as_f64().unwrap() <= 1e-6);
    let narrow = write_config(tmp.path(), "n.toml", "[demo.quadrature]\nlo = -1.0\nhi = 1.0\n");
    let o = vind(tmp.path(), &["--config", &narrow, "demo-intractability"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widen"));
}
