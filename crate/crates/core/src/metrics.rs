//! Forward interpolation and the k-step error metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, VindError};
use crate::model::VindModel;
use crate::nn::Mat;
use crate::posterior::{fpi_solve, FpiMode};

/// Decoded `k`-step predictions from the posterior mean `p`.
///
/// Row `i` of the result predicts `x_{i+k}`: the latent `p_i` is evolved `k`
/// times with the learned dynamics and decoded.
pub fn forward_interpolate(model: &VindModel, p: &Mat, k: usize) -> Result<Mat> {
    Ok(forward_interpolate_all(model, p, k)?.pop().expect("k + 1 entries"))
}

/// Predictions for every horizon `0..=k_max`, reusing the evolved states.
pub fn forward_interpolate_all(model: &VindModel, p: &Mat, k_max: usize) -> Result<Vec<Mat>> {
    let t = p.nrows();
    if k_max >= t {
        return Err(VindError::InvalidConfig(format!("horizon {k_max} needs more than {t} time steps")));
    }
    let mut z = p.clone();
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        if k > 0 {
            z = z.rows(0, t - k).into_owned();
            let a = model.evolution.a_matrices(&z)?;
            for (s, a_s) in a.iter().enumerate() {
                let next = a_s * z.row(s).transpose();
                z.row_mut(s).copy_from(&next.transpose());
            }
        }
        out.push(model.observation.decode(&z)?);
    }
    Ok(out)
}

/// Pooled sums behind `MSE_k` and `R²_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KStats {
    /// `Σ_t ‖x_{t+k} − x̂_{t+k}‖²`
    pub sse: f64,
    /// `Σ_t ‖x_{t+k} − x̄‖²` with `x̄` the trial mean over all steps
    pub sst: f64,
    pub n_points: usize,
}

impl KStats {
    /// `x̂` holds `T − k` rows aligned with times `k..T`.
    pub fn compute(x: &Mat, xhat: &Mat, k: usize) -> Result<Self> {
        let t = x.nrows();
        if t <= k {
            return Err(VindError::InvalidConfig(format!("horizon {k} needs more than {t} time steps")));
        }
        if xhat.shape() != (t - k, x.ncols()) {
            return shape_err(format!("predictions {:?} vs expected ({}, {})", xhat.shape(), t - k, x.ncols()));
        }
        let mean = x.row_mean();
        let mut s = KStats::default();
        for i in 0..t - k {
            for j in 0..x.ncols() {
                let v = x[(i + k, j)];
                s.sse += (v - xhat[(i, j)]).powi(2);
                s.sst += (v - mean[j]).powi(2);
            }
        }
        s.n_points = (t - k) * x.ncols();
        Ok(s)
    }

    pub fn merge(self, other: KStats) -> KStats {
        KStats {
            sse: self.sse + other.sse,
            sst: self.sst + other.sst,
            n_points: self.n_points + other.n_points,
        }
    }

    pub fn mse(&self) -> f64 {
        self.sse
    }

    pub fn r2(&self) -> f64 {
        1.0 - self.sse / self.sst
    }
}

pub fn mse_k(x: &Mat, xhat: &Mat, k: usize) -> Result<f64> {
    Ok(KStats::compute(x, xhat, k)?.mse())
}

pub fn r2_k(x: &Mat, xhat: &Mat, k: usize) -> Result<f64> {
    Ok(KStats::compute(x, xhat, k)?.r2())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub mse: f64,
    pub r2: f64,
    pub n_points: usize,
}

impl From<(usize, KStats)> for EvalRow {
    fn from((k, s): (usize, KStats)) -> Self {
        EvalRow {
            k,
            mse: s.mse(),
            r2: s.r2(),
            n_points: s.n_points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Pooled over trials, one row per `k`.
    pub rows: Vec<EvalRow>,
    pub per_trial: Vec<Vec<EvalRow>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub k_max: usize,
    /// Fixed-point iterations used to infer each trial's latent path.
    pub fpi_iters: usize,
    pub fpi_tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k_max: 30,
            fpi_iters: 50,
            fpi_tol: 1e-6,
        }
    }
}

impl EvalReport {
    pub fn row(&self, k: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "k,mse,r2,n_points")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.k, r.mse, r.r2, r.n_points)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Infers each trial's path from its encoding and scores forward
/// interpolation for `k = 0..=k_max`. Trials shorter than `k + 1` steps are
/// left out of that horizon.
pub fn evaluate(model: &VindModel, trials: &[Mat], settings: &EvalSettings, label: &str) -> Result<EvalReport> {
    let mut pooled = vec![KStats::default(); settings.k_max + 1];
    let mut per_trial = Vec::with_capacity(trials.len());
    for x in trials {
        let enc = model.encode(x)?;
        let (p, _) = fpi_solve(&model.evolution, &enc, &enc.m, settings.fpi_iters, settings.fpi_tol, FpiMode::Default)?;
        let k_top = settings.k_max.min(x.nrows().saturating_sub(1));
        let preds = forward_interpolate_all(model, &p, k_top)?;
        let mut rows = Vec::with_capacity(k_top + 1);
        for (k, xhat) in preds.iter().enumerate() {
            let s = KStats::compute(x, xhat, k)?;
            pooled[k] = pooled[k].merge(s);
            rows.push(EvalRow::from((k, s)));
        }
        per_trial.push(rows);
    }
    Ok(EvalReport {
        label: label.to_string(),
        rows: pooled
            .into_iter()
            .enumerate()
            .filter(|(_, s)| s.n_points > 0)
            .map(EvalRow::from)
            .collect(),
        per_trial,
    })
}
