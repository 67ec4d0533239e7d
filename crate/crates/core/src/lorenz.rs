//! Euler-discretized stochastic Lorenz system and synthetic observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{TrialSet, TrialSetMeta};
use crate::error::{Result, VindError};
use crate::nn::{mlp_init, Activation, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzParams {
    pub dt: f64,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub process_noise_sd: f64,
    /// Initial conditions are drawn uniformly from `[-init_range, init_range]³`.
    pub init_range: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            process_noise_sd: 0.1,
            init_range: 10.0,
        }
    }
}

impl LorenzParams {
    pub fn field(&self, z: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (z[1] - z[0]),
            z[0] * (self.rho - z[2]) - z[1],
            z[0] * z[1] - self.beta * z[2],
        ]
    }

    /// One Euler step with the given standard-normal draws.
    pub fn step(&self, z: [f64; 3], eps: [f64; 3]) -> [f64; 3] {
        let f = self.field(z);
        let s = self.process_noise_sd * self.dt.sqrt();
        [
            z[0] + self.dt * f[0] + s * eps[0],
            z[1] + self.dt * f[1] + s * eps[1],
            z[2] + self.dt * f[2] + s * eps[2],
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.process_noise_sd >= 0.0) || !(self.init_range >= 0.0) {
            return Err(VindError::InvalidConfig(format!(
                "need dt > 0, process_noise_sd ≥ 0, init_range ≥ 0 (got {}, {}, {})",
                self.dt, self.process_noise_sd, self.init_range
            )));
        }
        Ok(())
    }
}

/// Integrates from `z0` for `t` states (including `z0`).
pub fn lorenz_path(params: &LorenzParams, z0: [f64; 3], t: usize, rng: Option<&mut ChaCha8Rng>) -> Mat {
    let mut out = Mat::zeros(t, 3);
    let mut z = z0;
    let mut rng = rng;
    for s in 0..t {
        for i in 0..3 {
            out[(s, i)] = z[i];
        }
        let eps = match rng.as_deref_mut() {
            Some(r) if params.process_noise_sd > 0.0 => [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)],
            _ => [0.0; 3],
        };
        z = params.step(z, eps);
    }
    out
}

/// `n_trials` latent paths of length `t` from random initial conditions.
pub fn lorenz_generate(params: &LorenzParams, n_trials: usize, t: usize, seed: u64) -> Result<Vec<Mat>> {
    params.validate()?;
    if t == 0 {
        return Err(VindError::InvalidConfig("trial length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_trials)
        .map(|_| {
            let r = params.init_range;
            let z0 = if r > 0.0 {
                [rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r)]
            } else {
                [0.0; 3]
            };
            lorenz_path(params, z0, t, Some(&mut rng))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSynth {
    pub d_x: usize,
    pub hidden: usize,
    pub obs_noise_sd: f64,
    /// Latents are divided by this before entering the frozen network.
    pub latent_scale: f64,
}

impl Default for ObservationSynth {
    fn default() -> Self {
        Self {
            d_x: 10,
            hidden: 32,
            obs_noise_sd: 0.1,
            latent_scale: 10.0,
        }
    }
}

/// Maps each latent path through a frozen random tanh network and adds
/// i.i.d. Gaussian noise. Ground-truth latents are kept.
pub fn synth_observations(latents: &[Mat], cfg: &ObservationSynth, seed: u64) -> Result<TrialSet> {
    if cfg.d_x == 0 || cfg.hidden == 0 || !(cfg.obs_noise_sd >= 0.0) || !(cfg.latent_scale > 0.0) {
        return Err(VindError::InvalidConfig(format!("invalid observation synthesis settings {cfg:?}")));
    }
    let d_latent = latents.first().map_or(3, |z| z.ncols());
    let net = mlp_init(d_latent, &[cfg.hidden], cfg.d_x, Activation::Tanh, seed, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0b5e));
    let mut trials = Vec::with_capacity(latents.len());
    for z in latents {
        let mut x = net.apply_rows(&(z / cfg.latent_scale))?;
        if cfg.obs_noise_sd > 0.0 {
            // row-major draw order
            for t in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let e: f64 = rng.sample(StandardNormal);
                    x[(t, j)] += cfg.obs_noise_sd * e;
                }
            }
        }
        trials.push(x);
    }
    let meta = TrialSetMeta {
        seed,
        generator: serde_json::to_value(cfg)?,
        ..TrialSetMeta::default()
    };
    TrialSet::new(trials, Some(latents.to_vec()), meta)
}
