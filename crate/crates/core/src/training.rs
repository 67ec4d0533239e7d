//! Alternating path refinement and stochastic gradient ascent on the summed
//! per-trial ELBO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VindError};
use crate::io::{read_container, write_container};
use crate::model::{component_seed, ModelConfig, VindModel};
use crate::nn::Mat;
use crate::posterior::{contraction_bound, fpi_map, laplace_posterior, FpiMode, LaplacePosterior};
use crate::EvolutionModel;

const CHECKPOINT_MAGIC: &[u8; 8] = b"VINDCKP1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Extra fixed-point applications per trial after each update.
    pub nfpis: usize,
    /// Trials per update; 0 means all of them.
    pub batch_size: usize,
    pub seed: u64,
    pub fpi_tol: f64,
    pub smoothness_threshold: f64,
    /// Moving-average window for early stopping and health reporting.
    pub ma_window: usize,
    /// Stop after this many epochs without moving-average improvement; 0 disables.
    pub patience: usize,
    /// Relative improvement that resets the patience counter.
    pub stop_tol: f64,
    /// Number of leading trials whose contraction bound is recorded each epoch.
    pub contraction_trials: usize,
    pub contraction_probes: usize,
    /// Halvings of `α` tried when a path refresh fails.
    pub max_rollbacks: usize,
    /// Consecutive skipped updates tolerated before giving up.
    pub max_skipped_updates: usize,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            epochs: 200,
            nfpis: 2,
            batch_size: 0,
            seed: 0,
            fpi_tol: 1e-6,
            smoothness_threshold: 0.1,
            ma_window: 20,
            patience: 0,
            stop_tol: 1e-4,
            contraction_trials: 4,
            contraction_probes: 16,
            max_rollbacks: 3,
            max_skipped_updates: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(VindError::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.fpi_tol > 0.0) {
            return bad(format!("fpi_tol must be positive, got {}", self.fpi_tol));
        }
        if !(self.smoothness_threshold > 0.0) {
            return bad(format!("smoothness_threshold must be positive, got {}", self.smoothness_threshold));
        }
        if self.ma_window == 0 {
            return bad("ma_window must be positive".into());
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("stop_tol must be non-negative, got {}", self.stop_tol));
        }
        Ok(())
    }

    /// `GfLDS` when the dynamics are linear, `VIND` otherwise.
    pub fn label(&self) -> &'static str {
        if self.model.alpha == 0.0 || !self.model.nonlinear {
            "GfLDS"
        } else {
            "VIND"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of the one-sample ELBOs of the trials that entered an update.
    pub elbo: Option<f64>,
    pub smoothness: f64,
    pub contraction: Option<f64>,
    /// Largest max-abs change of a cached path in its last refresh step.
    pub fpi_residual: f64,
    pub rollbacks: usize,
    pub skipped_refreshes: usize,
    pub skipped_updates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub label: String,
    pub initial_smoothness: f64,
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl History {
    pub fn elbo_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.elbo.unwrap_or(f64::NAN)).collect()
    }

    /// Trailing moving averages of the ELBO, one per epoch from `window` on.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let e = self.elbo_series();
        if window == 0 || e.len() < window {
            return Vec::new();
        }
        e.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,elbo,smoothness,contraction,fpi_residual,rollbacks,skipped_refreshes,skipped_updates")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                opt(r.elbo),
                r.smoothness,
                opt(r.contraction),
                r.fpi_residual,
                r.rollbacks,
                r.skipped_refreshes,
                r.skipped_updates
            )?;
        }
        Ok(())
    }

    fn should_stop(&self, cfg: &TrainConfig) -> bool {
        if cfg.patience == 0 {
            return false;
        }
        let ma = self.moving_average(cfg.ma_window);
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        for &v in &ma {
            if v > best + cfg.stop_tol * best.abs() || best == f64::NEG_INFINITY {
                best = v;
                since = 0;
            } else {
                since += 1;
            }
        }
        since >= cfg.patience
    }
}

/// Adaptive-moment ascent state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    /// Moves `params` uphill along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.first[i] = BETA1 * self.first[i] + (1.0 - BETA1) * grad[i];
            self.second[i] = BETA2 * self.second[i] + (1.0 - BETA2) * grad[i] * grad[i];
            params[i] += lr * (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: VindModel,
    pub optimizer: Adam,
    /// Current estimate of each trial's posterior mean.
    pub paths: Vec<Mat>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: History,
}

/// Largest entry of `|A(z) − I|` over every point of every path.
pub fn smoothness_monitor(evo: &EvolutionModel, paths: &[Mat]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in paths {
        for a in evo.a_matrices(p)? {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    let id = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((a[(i, j)] - id).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn check_trials(cfg: &TrainConfig, trials: &[Mat]) -> Result<()> {
    if trials.is_empty() {
        return Err(VindError::InvalidData("no training trials".into()));
    }
    for (i, x) in trials.iter().enumerate() {
        if x.ncols() != cfg.model.d_x {
            return Err(VindError::InvalidData(format!(
                "trial {i} has {} observation columns, config says d_x = {}",
                x.ncols(),
                cfg.model.d_x
            )));
        }
        if x.nrows() == 0 {
            return Err(VindError::InvalidData(format!("trial {i} is empty")));
        }
    }
    Ok(())
}

pub fn init_state(cfg: &TrainConfig, trials: &[Mat]) -> Result<TrainState> {
    cfg.validate()?;
    check_trials(cfg, trials)?;
    let model = VindModel::init(&cfg.model, cfg.seed)?;
    let paths = trials
        .iter()
        .map(|x| model.encode(x).map(|e| e.m))
        .collect::<Result<Vec<_>>>()?;
    let initial_smoothness = smoothness_monitor(&model.evolution, &paths)?;
    if initial_smoothness > cfg.smoothness_threshold {
        log::warn!(
            "initial dynamics are far from identity: max |A(z) - I| = {initial_smoothness} > {}",
            cfg.smoothness_threshold
        );
    }
    let n = model.param_count();
    Ok(TrainState {
        model,
        optimizer: Adam::new(n),
        paths,
        epoch: 0,
        history: History {
            label: cfg.label().to_string(),
            initial_smoothness,
            records: Vec::new(),
        },
    })
}

fn trial_noise(seed: u64, trial: usize, epoch: usize, t: usize, d: usize) -> Mat {
    let s = component_seed(component_seed(seed, trial as u64 + 1), epoch as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut eps = Mat::zeros(t, d);
    for r in 0..t {
        for c in 0..d {
            eps[(r, c)] = rng.sample(StandardNormal);
        }
    }
    eps
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

struct Refresh {
    path: Mat,
    residual: f64,
    rollbacks: usize,
    skipped: bool,
}

fn refresh_path(model: &VindModel, x: &Mat, start: &Mat, fallback: &Mat, cfg: &TrainConfig) -> Result<Refresh> {
    if cfg.nfpis == 0 {
        return Ok(Refresh {
            path: start.clone(),
            residual: max_abs_diff(start, fallback),
            rollbacks: 0,
            skipped: false,
        });
    }
    let enc = model.encode(x)?;
    let mut evo = model.evolution.clone();
    for attempt in 0..=cfg.max_rollbacks {
        if attempt > 0 {
            evo.alpha *= 0.5;
        }
        let mut p = start.clone();
        let mut residual = 0.0;
        let mut ok = true;
        for _ in 0..cfg.nfpis {
            match fpi_map(&evo, &enc, &p, FpiMode::Default) {
                Ok(next) if next.iter().all(|v| v.is_finite()) => {
                    residual = max_abs_diff(&next, &p);
                    p = next;
                }
                Ok(_) | Err(VindError::NotPositiveDefinite { .. }) | Err(VindError::Numerical(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok(Refresh {
                path: p,
                residual,
                rollbacks: attempt,
                skipped: false,
            });
        }
    }
    Ok(Refresh {
        path: fallback.clone(),
        residual: 0.0,
        rollbacks: cfg.max_rollbacks,
        skipped: true,
    })
}

/// One pass over the trials: per batch, gradients at the cached paths, one
/// parameter update, then `nfpis` fixed-point refreshes under the new
/// parameters.
pub fn train_epoch(state: &mut TrainState, trials: &[Mat], cfg: &TrainConfig) -> Result<()> {
    let n = trials.len();
    if state.paths.len() != n {
        return Err(VindError::InvalidData(format!(
            "state caches {} paths for {n} trials",
            state.paths.len()
        )));
    }
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    if batch < n {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(component_seed(cfg.seed, 0x5eed_0000 + epoch as u64)));
    }
    let d = state.model.d_z();

    let mut elbo_sum = 0.0;
    let mut any_elbo = false;
    let mut rollbacks = 0;
    let mut skipped_refreshes = 0;
    let mut skipped_updates = 0;
    let mut consecutive_skips = 0;
    let mut fpi_residual: f64 = 0.0;

    for chunk in order.chunks(batch) {
        let model = &state.model;
        let paths = &state.paths;
        let evals: Vec<Result<crate::model::TrialElbo>> = chunk
            .par_iter()
            .map(|&i| {
                let x = &trials[i];
                let eps = trial_noise(cfg.seed, i, epoch, x.nrows(), d);
                model.trial_elbo(x, &paths[i], &eps)
            })
            .collect();

        let mut failure = None;
        let mut grad = vec![0.0; model.param_count()];
        let mut value = 0.0;
        let mut means = Vec::with_capacity(chunk.len());
        for r in evals {
            match r {
                Ok(t) => {
                    value += t.bundle.value;
                    for (g, v) in grad.iter_mut().zip(&t.bundle.grad) {
                        *g += v;
                    }
                    means.push(t.mean);
                }
                Err(e @ (VindError::NotPositiveDefinite { .. } | VindError::Numerical(_))) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = failure {
            skipped_updates += 1;
            consecutive_skips += 1;
            log::warn!("epoch {epoch}: update skipped ({reason})");
            if consecutive_skips > cfg.max_skipped_updates {
                return Err(VindError::TrainingDiverged {
                    epoch,
                    reason,
                    history: Box::new(state.history.clone()),
                });
            }
            continue;
        }
        consecutive_skips = 0;
        elbo_sum += value;
        any_elbo = true;

        let mut params = state.model.params();
        state.optimizer.ascend(&mut params, &grad, cfg.learning_rate);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(VindError::TrainingDiverged {
                epoch,
                reason: "parameters became non-finite".into(),
                history: Box::new(state.history.clone()),
            });
        }
        state.model.set_params(&params)?;

        let model = &state.model;
        let refreshed: Vec<Result<Refresh>> = chunk
            .par_iter()
            .zip(means.par_iter())
            .map(|(&i, mean)| refresh_path(model, &trials[i], mean, &state.paths[i], cfg))
            .collect();
        for (&i, r) in chunk.iter().zip(refreshed) {
            let r = r?;
            rollbacks += r.rollbacks;
            skipped_refreshes += usize::from(r.skipped);
            fpi_residual = fpi_residual.max(r.residual);
            state.paths[i] = r.path;
        }
    }

    let smoothness = smoothness_monitor(&state.model.evolution, &state.paths)?;
    let mut contraction: Option<f64> = None;
    for i in 0..cfg.contraction_trials.min(n) {
        let enc = state.model.encode(&trials[i])?;
        match contraction_bound(&state.model.evolution, &enc, &state.paths[i], cfg.contraction_probes, FpiMode::Default) {
            Ok(b) => contraction = Some(contraction.map_or(b, |c| c.max(b))),
            Err(VindError::NotPositiveDefinite { .. } | VindError::Numerical(_)) => {
                contraction = Some(f64::INFINITY);
            }
            Err(e) => return Err(e),
        }
    }
    state.history.records.push(EpochRecord {
        epoch: epoch + 1,
        elbo: any_elbo.then_some(elbo_sum),
        smoothness,
        contraction,
        fpi_residual,
        rollbacks,
        skipped_refreshes,
        skipped_updates,
    });
    state.epoch += 1;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub state: TrainState,
    pub posteriors: Vec<LaplacePosterior>,
}

impl FitOutput {
    pub fn model(&self) -> &VindModel {
        &self.state.model
    }

    pub fn history(&self) -> &History {
        &self.state.history
    }
}

/// Runs epochs from `state` until `cfg.epochs` are done or the ELBO moving
/// average stalls. `after_epoch` sees every completed epoch.
pub fn fit_from<F>(mut state: TrainState, trials: &[Mat], cfg: &TrainConfig, mut after_epoch: F) -> Result<FitOutput>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    check_trials(cfg, trials)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| VindError::InvalidConfig(format!("thread pool: {e}")))?;
    while state.epoch < cfg.epochs && !state.history.should_stop(cfg) {
        pool.install(|| train_epoch(&mut state, trials, cfg))?;
        after_epoch(&state)?;
    }
    let posteriors = trials
        .iter()
        .zip(&state.paths)
        .map(|(x, p)| laplace_posterior(&state.model.evolution, &state.model.encode(x)?, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitOutput { state, posteriors })
}

pub fn fit(cfg: &TrainConfig, trials: &[Mat]) -> Result<FitOutput> {
    let state = init_state(cfg, trials)?;
    fit_from(state, trials, cfg, |_| Ok(()))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    param_count: usize,
    path_shapes: Vec<(usize, usize)>,
    history: History,
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: cfg.clone(),
        epoch: state.epoch,
        adam_step: state.optimizer.step,
        param_count: state.model.param_count(),
        path_shapes: state.paths.iter().map(|p| p.shape()).collect(),
        history: state.history.clone(),
    };
    let mut payload = state.model.params();
    payload.extend_from_slice(&state.optimizer.first);
    payload.extend_from_slice(&state.optimizer.second);
    for p in &state.paths {
        payload.extend(crate::posterior::path_to_vec(p));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, CHECKPOINT_MAGIC, &header, &payload)?;
    w.flush()?;
    Ok(())
}

/// Restores a state and the config it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let (h, payload): (CheckpointHeader, Vec<f64>) = read_container(&mut r, CHECKPOINT_MAGIC)?;
    if h.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(VindError::Format(format!("unsupported checkpoint version {}", h.format_version)));
    }
    let mut model = VindModel::init(&h.config.model, h.config.seed)?;
    let n = model.param_count();
    let path_len: usize = h.path_shapes.iter().map(|(t, d)| t * d).sum();
    if n != h.param_count || payload.len() != 3 * n + path_len {
        return Err(VindError::Format(format!(
            "checkpoint payload of {} values does not match {} parameters and {path_len} path entries",
            payload.len(),
            h.param_count
        )));
    }
    model.set_params(&payload[..n])?;
    let optimizer = Adam {
        first: payload[n..2 * n].to_vec(),
        second: payload[2 * n..3 * n].to_vec(),
        step: h.adam_step,
    };
    let mut k = 3 * n;
    let mut paths = Vec::with_capacity(h.path_shapes.len());
    for &(t, d) in &h.path_shapes {
        paths.push(crate::posterior::vec_to_path(&payload[k..k + t * d], t, d));
        k += t * d;
    }
    Ok((
        TrainState {
            model,
            optimizer,
            paths,
            epoch: h.epoch,
            history: h.history,
        },
        h.config,
    ))
}
