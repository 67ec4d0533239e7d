//! Commands behind the `vind` binary. Every command writes its outputs plus a
//! `manifest.json` carrying the effective config, its hash and the crate
//! version.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vind::intractability::toy_intractability_demo;
use vind::lorenz::{lorenz_generate, synth_observations};
use vind::training::{fit_from, init_state, load_checkpoint, save_checkpoint, FitOutput, History, TrainConfig};
use vind::{evaluate, split, EvalReport, TrialSet, VindError, VindModel};

pub use config::RunConfig;
use config::DemoMap;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("no trained model at {0} (run `fit` first)")]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Core(#[from] VindError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(VindError::InvalidConfig(_) | VindError::WidenDomain { .. }) => 2,
            CliError::Io { .. }
            | CliError::Core(VindError::Io(_) | VindError::Json(_) | VindError::Format(_) | VindError::InvalidData(_)) => 3,
            CliError::Core(VindError::TrainingDiverged { .. }) => 4,
            CliError::MissingCheckpoint(_) => 5,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Manifest<'a, E: Serialize> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    config: &'a RunConfig,
    outputs: Vec<String>,
    details: E,
}

fn write_manifest<E: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[&str], details: E) -> Result<()> {
    let m = Manifest {
        command,
        version: VERSION,
        config_hash: config_hash(cfg)?,
        config: cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        details,
    };
    let text = serde_json::to_string_pretty(&m).map_err(VindError::from)?;
    write_text(&dir.join("manifest.json"), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> vind::Result<()>,
{
    let file = File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn load_split(data_dir: &Path, name: &str) -> Result<TrialSet> {
    let dir = data_dir.join(name);
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Config(format!(
            "no {name} data at {} (run `generate` first or set paths.data_dir)",
            dir.display()
        )));
    }
    Ok(TrialSet::load(&dir)?)
}

/// Simulates the Lorenz data set and writes its three partitions.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let g = &cfg.generate;
    let latents = lorenz_generate(&g.lorenz, g.n_trials, g.trial_len, cfg.seed)?;
    let mut set = synth_observations(&latents, &g.observation, cfg.seed.wrapping_add(1))?;
    set.meta.generator = serde_json::json!({ "lorenz": g.lorenz, "observation": g.observation });
    let (train, test, validation) = split(&set, g.split, cfg.seed.wrapping_add(2))?;
    let dir = cfg.data_dir(out);
    create_dir(&dir)?;
    let extra = serde_json::json!({ "version": VERSION, "config_hash": config_hash(cfg)? });
    for (name, part) in [("train", &train), ("test", &test), ("validation", &validation)] {
        part.save_with_extra(&dir.join(name), extra.clone())?;
    }
    write_manifest(
        &dir,
        "generate",
        cfg,
        &["train", "test", "validation"],
        serde_json::json!({ "sizes": [train.len(), test.len(), validation.len()] }),
    )?;
    log::info!("wrote {} + {} + {} trials to {}", train.len(), test.len(), validation.len(), dir.display());
    Ok(dir)
}

fn write_history(dir: &Path, history: &History) -> Result<()> {
    write_with(&dir.join("history.csv"), |w| history.write_csv(w))?;
    let json = serde_json::to_string_pretty(history).map_err(VindError::from)?;
    write_text(&dir.join("history.json"), &json)
}

fn train_into(dir: &Path, train: &TrainConfig, trials: &[vind::nn::Mat], resume: bool, every: usize) -> Result<FitOutput> {
    create_dir(dir)?;
    let ckpt = dir.join("checkpoint.ckpt");
    let state = if resume {
        if !ckpt.is_file() {
            return Err(CliError::MissingCheckpoint(ckpt));
        }
        let (state, saved) = load_checkpoint(&ckpt)?;
        if saved.model != train.model || saved.seed != train.seed {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained with a different model or seed",
                ckpt.display()
            )));
        }
        log::info!("resuming from epoch {}", state.epoch);
        state
    } else {
        init_state(train, trials)?
    };
    let every = every.max(1);
    let out = fit_from(state, trials, train, |st| {
        if let Some(r) = st.history.records.last() {
            log::info!("epoch {} elbo {:?} contraction {:?}", r.epoch, r.elbo, r.contraction);
        }
        if st.epoch % every == 0 {
            save_checkpoint(&ckpt, st, train)?;
        }
        Ok(())
    });
    let out = match out {
        Ok(o) => o,
        Err(VindError::TrainingDiverged { epoch, reason, history }) => {
            write_history(dir, &history)?;
            return Err(VindError::TrainingDiverged { epoch, reason, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, &out.state, train)?;
    out.model().save(&dir.join("model.vind"))?;
    write_history(dir, out.history())?;
    Ok(out)
}

/// Trains on the `train` partition; `resume` continues from the checkpoint.
pub fn cmd_fit(cfg: &RunConfig, out: &Path, resume: bool) -> Result<FitOutput> {
    let train = load_split(&cfg.data_dir(out), "train")?;
    let dir = cfg.fit_dir(out);
    let fitted = train_into(&dir, &cfg.train, &train.trials, resume, cfg.fit.checkpoint_every)?;
    write_manifest(
        &dir,
        "fit",
        cfg,
        &["checkpoint.ckpt", "model.vind", "history.csv", "history.json"],
        serde_json::json!({
            "label": fitted.history().label,
            "epochs": fitted.state.epoch,
            "resumed": resume,
        }),
    )?;
    log::info!("{} fit finished after {} epochs", fitted.history().label, fitted.state.epoch);
    Ok(fitted)
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    write_with(&dir.join(format!("{name}.csv")), |w| report.write_csv(w))?;
    write_text(&dir.join(format!("{name}.json")), &report.to_json()?)
}

/// R²_k / MSE_k reports for each configured partition.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<EvalReport>> {
    let model_path = cfg.fit_dir(out).join("model.vind");
    if !model_path.is_file() {
        return Err(CliError::MissingCheckpoint(model_path));
    }
    let model = VindModel::load(&model_path)?;
    let dir = out.join("eval");
    create_dir(&dir)?;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for name in &cfg.eval.splits {
        let set = load_split(&cfg.data_dir(out), name)?;
        let report = evaluate(&model, &set.trials, &cfg.eval.settings(), name)?;
        write_report(&dir, name, &report)?;
        files.push(format!("{name}.csv"));
        files.push(format!("{name}.json"));
        reports.push(report);
    }
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, "eval", cfg, &refs, serde_json::json!({ "model": model_path }))?;
    Ok(reports)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub d_z: usize,
    pub seed: u64,
    pub r2: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits every (d_Z, seed) pair and reports validation R²_k, one report per
/// run plus a per-d_Z median summary.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let data = cfg.data_dir(out);
    let train = load_split(&data, "train")?;
    let validation = load_split(&data, "validation")?;
    let dir = out.join("sweep");
    create_dir(&dir)?;
    let mut rows = Vec::new();
    for &d in &cfg.sweep.d_z {
        for &seed in &cfg.sweep.seeds {
            let mut tc = cfg.train.clone();
            tc.model.d_z = d;
            tc.seed = seed;
            let run = dir.join(format!("dz{d}_seed{seed}"));
            let fitted = train_into(&run, &tc, &train.trials, false, cfg.fit.checkpoint_every)?;
            let report = evaluate(fitted.model(), &validation.trials, &cfg.eval.settings(), "validation")?;
            write_report(&run, "validation", &report)?;
            log::info!("d_z {d} seed {seed}: validation R2_0 {}", report.rows[0].r2);
            rows.push(SweepRow {
                d_z: d,
                seed,
                r2: report.rows.iter().map(|r| r.r2).collect(),
            });
        }
    }
    let k_max = cfg.eval.k_max;
    let header: Vec<String> = (0..=k_max).map(|k| format!("r2_{k}")).collect();
    let mut runs = format!("d_z,seed,{}\n", header.join(","));
    for r in &rows {
        let vals: Vec<String> = r.r2.iter().map(|v| v.to_string()).collect();
        runs.push_str(&format!("{},{},{}\n", r.d_z, r.seed, vals.join(",")));
    }
    write_text(&dir.join("runs.csv"), &runs)?;
    let mut medians = format!("d_z,{}\n", header.join(","));
    for &d in &cfg.sweep.d_z {
        let vals: Vec<String> = (0..=k_max)
            .map(|k| {
                let mut v: Vec<f64> = rows.iter().filter(|r| r.d_z == d).map(|r| r.r2[k]).collect();
                median(&mut v).to_string()
            })
            .collect();
        medians.push_str(&format!("{d},{}\n", vals.join(",")));
    }
    write_text(&dir.join("median.csv"), &medians)?;
    write_manifest(&dir, "sweep", cfg, &["runs.csv", "median.csv"], serde_json::json!({}))?;
    Ok(rows)
}

pub fn cmd_demo_intractability(cfg: &RunConfig, out: &Path) -> Result<vind::intractability::DemoReport> {
    let d = &cfg.demo;
    let gain = d.gain;
    let report = match d.map {
        DemoMap::Linear => toy_intractability_demo(&|z| z, &d.params, &d.quadrature)?,
        DemoMap::Tanh => toy_intractability_demo(&|z| z + gain * z.tanh(), &d.params, &d.quadrature)?,
    };
    let dir = out.join("demo");
    create_dir(&dir)?;
    let text = serde_json::to_string_pretty(&report).map_err(VindError::from)?;
    write_text(&dir.join("report.json"), &text)?;
    write_manifest(&dir, "demo-intractability", cfg, &["report.json"], serde_json::json!({}))?;
    Ok(report)
}
