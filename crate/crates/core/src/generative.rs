//! Observation models and the generative joint density.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dynamics::{EvolutionModel, LN_2PI};
use crate::error::{shape_err, Result, VindError};
use crate::nn::tape::softplus;
use crate::nn::{mlp_init, Activation, Mat, Mlp, MlpVars, Tape, Var};
use crate::posterior::{entropy, sample_posterior, LaplacePosterior};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationKind {
    #[default]
    Gaussian,
    Poisson,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObservationModel {
    /// `x_t ~ N(m(z_t), diag(σ²))`
    Gaussian { m_net: Mlp, log_sigma: DVector<f64> },
    /// `x_t ~ Poisson(softplus(net(z_t)))`
    Poisson { rate_net: Mlp },
}

impl ObservationModel {
    pub fn init(
        kind: ObservationKind,
        d_z: usize,
        d_x: usize,
        widths: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let net = mlp_init(d_z, widths, d_x, activation, seed, 1.0)?;
        Ok(match kind {
            ObservationKind::Gaussian => ObservationModel::Gaussian {
                m_net: net,
                log_sigma: DVector::zeros(d_x),
            },
            ObservationKind::Poisson => ObservationModel::Poisson { rate_net: net },
        })
    }

    pub fn kind(&self) -> ObservationKind {
        match self {
            ObservationModel::Gaussian { .. } => ObservationKind::Gaussian,
            ObservationModel::Poisson { .. } => ObservationKind::Poisson,
        }
    }

    pub fn net(&self) -> &Mlp {
        match self {
            ObservationModel::Gaussian { m_net, .. } => m_net,
            ObservationModel::Poisson { rate_net } => rate_net,
        }
    }

    pub fn d_x(&self) -> usize {
        self.net().out_dim()
    }

    pub fn d_z(&self) -> usize {
        self.net().in_dim()
    }

    pub fn param_count(&self) -> usize {
        match self {
            ObservationModel::Gaussian { m_net, log_sigma } => m_net.param_count() + log_sigma.len(),
            ObservationModel::Poisson { rate_net } => rate_net.param_count(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            ObservationModel::Gaussian { m_net, log_sigma } => {
                m_net.write_params(out);
                out.extend(log_sigma.iter());
            }
            ObservationModel::Poisson { rate_net } => rate_net.write_params(out),
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        match self {
            ObservationModel::Gaussian { m_net, log_sigma } => {
                let mut k = m_net.read_params(src);
                for v in log_sigma.iter_mut() {
                    *v = src[k];
                    k += 1;
                }
                k
            }
            ObservationModel::Poisson { rate_net } => rate_net.read_params(src),
        }
    }

    /// Observation mean for every row of `z`: `m(z)` or the Poisson rate.
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        match self {
            ObservationModel::Gaussian { m_net, .. } => m_net.apply_rows(z),
            ObservationModel::Poisson { rate_net } => Ok(rate_net.apply_rows(z)?.map(softplus)),
        }
    }

    /// `Σ_t log f(x_t | z_t)` with all normalizers.
    pub fn logdensity(&self, x: &Mat, z: &Mat) -> Result<f64> {
        if x.nrows() != z.nrows() || x.ncols() != self.d_x() || z.ncols() != self.d_z() {
            return shape_err(format!(
                "observations {:?} and latents {:?} vs model ({}, {})",
                x.shape(),
                z.shape(),
                self.d_z(),
                self.d_x()
            ));
        }
        let mean = self.decode(z)?;
        match self {
            ObservationModel::Gaussian { log_sigma, .. } => {
                let mut total = 0.0;
                for j in 0..x.ncols() {
                    let inv_var = (-2.0 * log_sigma[j]).exp();
                    for t in 0..x.nrows() {
                        let r = x[(t, j)] - mean[(t, j)];
                        total += -0.5 * LN_2PI - log_sigma[j] - 0.5 * inv_var * r * r;
                    }
                }
                Ok(total)
            }
            ObservationModel::Poisson { .. } => {
                check_counts(x)?;
                Ok(x.iter()
                    .zip(mean.iter())
                    .map(|(&k, &rate)| k * rate.ln() - rate - ln_gamma(k + 1.0))
                    .sum())
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, flat: Var, offset: usize) -> (ObservationVars, usize) {
        match self {
            ObservationModel::Gaussian { m_net, log_sigma } => {
                let (net, k) = m_net.bind(tape, flat, offset);
                let ls = tape.slice_row_major(flat, k, 1, log_sigma.len());
                (ObservationVars::Gaussian { net, log_sigma: ls }, k + log_sigma.len())
            }
            ObservationModel::Poisson { rate_net } => {
                let (net, k) = rate_net.bind(tape, flat, offset);
                (ObservationVars::Poisson { net }, k)
            }
        }
    }
}

/// Rejects anything that is not a non-negative integer count.
pub fn check_counts(x: &Mat) -> Result<()> {
    for (i, &v) in x.iter().enumerate() {
        if !(v >= 0.0) || v.fract() != 0.0 || !v.is_finite() {
            let (t, j) = (i % x.nrows(), i / x.nrows());
            return Err(VindError::InvalidData(format!("count data must be non-negative integers, got {v} at ({t}, {j})")));
        }
    }
    Ok(())
}

/// Observation parameters recorded on a tape.
#[derive(Clone, Debug)]
pub enum ObservationVars {
    Gaussian { net: MlpVars, log_sigma: Var },
    Poisson { net: MlpVars },
}

impl ObservationVars {
    /// Observation log-density of the constant data `x` given latent node `z`.
    pub fn logdensity(&self, tape: &mut Tape, x: &Mat, z: Var) -> Var {
        let (t, d) = x.shape();
        match self {
            ObservationVars::Gaussian { net, log_sigma } => {
                let mean = net.forward(tape, z);
                let xv = tape.constant(x.clone());
                let r = tape.sub(xv, mean);
                let rsq = tape.hadamard(r, r);
                let neg2 = tape.scale(*log_sigma, -2.0);
                let inv_var = tape.exp(neg2);
                let w = tape.repeat_row(inv_var, t);
                let q = tape.dot(rsq, w);
                let q = tape.scale(q, -0.5);
                let ls = tape.sum(*log_sigma);
                let ls = tape.scale(ls, -(t as f64));
                let c = tape.scalar_const(-0.5 * LN_2PI * (t * d) as f64);
                let partial = tape.add(q, ls);
                tape.add(partial, c)
            }
            ObservationVars::Poisson { net } => {
                let pre = net.forward(tape, z);
                let rate = tape.softplus(pre);
                let log_rate = tape.ln(rate);
                let xv = tape.constant(x.clone());
                let a = tape.dot(xv, log_rate);
                let b = tape.sum(rate);
                let ab = tape.sub(a, b);
                let c = tape.scalar_const(-x.iter().map(|&k| ln_gamma(k + 1.0)).sum::<f64>());
                tape.add(ab, c)
            }
        }
    }
}

/// `log p(X, Z)` split into the observation and evolution terms.
pub fn joint_logdensity(evo: &EvolutionModel, obs: &ObservationModel, x: &Mat, z: &Mat) -> Result<f64> {
    Ok(obs.logdensity(x, z)? + evo.logdensity(z)?)
}

/// One-sample reparameterized ELBO: `log p(X, P + L⁻ᵀε) + H[q]`.
pub fn elbo_estimate(
    evo: &EvolutionModel,
    obs: &ObservationModel,
    x: &Mat,
    post: &LaplacePosterior,
    eps: &Mat,
) -> Result<f64> {
    let z = sample_posterior(post, eps)?;
    Ok(joint_logdensity(evo, obs, x, &z)? + entropy(post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::tests::random_evolution;
    use crate::nn::{finite_diff_check, Objective};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(t: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn counts(t: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(t, d, |_, _| rng.random_range(0..6) as f64)
    }

    #[test]
    fn gaussian_at_mean_with_unit_variance() {
        let obs = ObservationModel::init(ObservationKind::Gaussian, 2, 3, &[4], Activation::Tanh, 1).unwrap();
        let z = rand_mat(5, 2, 2);
        let x = obs.decode(&z).unwrap();
        let want = -(5.0 * 3.0 / 2.0) * LN_2PI;
        assert!((obs.logdensity(&x, &z).unwrap() - want).abs() < 1e-12);
    }

    /// Poisson model whose rate is the constant `rate` everywhere.
    fn constant_rate(d_x: usize, rate: f64) -> ObservationModel {
        let mut net = mlp_init(1, &[2], d_x, Activation::Tanh, 0, 0.0).unwrap();
        let last = net.layers().len() - 1;
        // softplus⁻¹(rate)
        net.layers_mut()[last].bias.fill((rate.exp() - 1.0).ln());
        ObservationModel::Poisson { rate_net: net }
    }

    #[test]
    fn poisson_hand_values() {
        let obs = constant_rate(2, 1.0);
        let z = Mat::zeros(3, 1);
        let v = obs.logdensity(&Mat::zeros(3, 2), &z).unwrap();
        assert!((v + 6.0).abs() < 1e-12);
        let obs = constant_rate(1, 2.0);
        let x = Mat::from_element(1, 1, 3.0);
        let want = 3.0 * 2f64.ln() - 2.0 - 6f64.ln();
        assert!((obs.logdensity(&x, &Mat::zeros(1, 1)).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn poisson_rejects_bad_counts() {
        let obs = constant_rate(1, 1.0);
        for bad in [-1.0, 0.5, f64::NAN] {
            let x = Mat::from_element(1, 1, bad);
            assert!(matches!(obs.logdensity(&x, &Mat::zeros(1, 1)), Err(VindError::InvalidData(_))));
        }
    }

    #[test]
    fn joint_cases() {
        let evo = random_evolution(2, 0.5, 3);
        let obs = ObservationModel::init(ObservationKind::Gaussian, 2, 3, &[4], Activation::Tanh, 4).unwrap();
        let z = rand_mat(4, 2, 5);
        let x = rand_mat(4, 3, 6);
        let want = obs.logdensity(&x, &z).unwrap() + evo.logdensity(&z).unwrap();
        assert_eq!(joint_logdensity(&evo, &obs, &x, &z).unwrap(), want);

        let z1 = rand_mat(1, 2, 7);
        let x1 = rand_mat(1, 3, 8);
        let g0 = evo.gamma0();
        let mut prior = 0.0;
        for i in 0..2 {
            prior += 0.5 * (g0[i].ln() - LN_2PI) - 0.5 * g0[i] * (z1[(0, i)] - evo.a0[i]).powi(2);
        }
        let one = obs.logdensity(&x1, &z1).unwrap();
        assert!((joint_logdensity(&evo, &obs, &x1, &z1).unwrap() - prior - one).abs() < 1e-13);
    }

    #[test]
    fn moving_latent_toward_data_raises_observation_term() {
        let mut obs = ObservationModel::init(ObservationKind::Gaussian, 1, 1, &[2], Activation::Tanh, 0).unwrap();
        if let ObservationModel::Gaussian { m_net, .. } = &mut obs {
            // identity map
            *m_net = Mlp::from_layers(
                vec![crate::nn::Layer {
                    weight: Mat::identity(1, 1),
                    bias: DVector::zeros(1),
                }],
                vec![],
            )
            .unwrap();
        }
        let x = Mat::from_element(1, 1, 1.0);
        let far = obs.logdensity(&x, &Mat::from_element(1, 1, -1.0)).unwrap();
        let near = obs.logdensity(&x, &Mat::from_element(1, 1, 0.5)).unwrap();
        assert!(near > far);
    }

    #[test]
    fn gaussian_is_quadratic_in_data() {
        let obs = ObservationModel::init(ObservationKind::Gaussian, 2, 2, &[3], Activation::Tanh, 9).unwrap();
        let z = rand_mat(1, 2, 10);
        let f = |v: f64| obs.logdensity(&Mat::from_row_slice(1, 2, &[v, 0.3]), &z).unwrap();
        let h = 0.25;
        let second: Vec<f64> = (0..5)
            .map(|k| {
                let x = -1.0 + 0.5 * k as f64;
                f(x + h) - 2.0 * f(x) + f(x - h)
            })
            .collect();
        for s in &second {
            assert!((s - second[0]).abs() < 1e-12);
        }
    }

    struct ObsInParams {
        obs: ObservationModel,
        x: Mat,
        z: Mat,
    }

    impl Objective for ObsInParams {
        fn record(&self, tape: &mut Tape, p: Var) -> Result<Var> {
            let (vars, _) = self.obs.bind(tape, p, 0);
            let z = tape.constant(self.z.clone());
            Ok(vars.logdensity(tape, &self.x, z))
        }

        fn value(&self, p: &[f64]) -> Result<f64> {
            let mut obs = self.obs.clone();
            obs.read_params(p);
            obs.logdensity(&self.x, &self.z)
        }
    }

    #[test]
    fn observation_gradients_match_finite_differences() {
        for kind in [ObservationKind::Gaussian, ObservationKind::Poisson] {
            for seed in 0..5 {
                let obs = ObservationModel::init(kind, 2, 3, &[5], Activation::Tanh, seed).unwrap();
                let z = rand_mat(6, 2, seed + 10);
                let x = match kind {
                    ObservationKind::Gaussian => rand_mat(6, 3, seed + 20),
                    ObservationKind::Poisson => counts(6, 3, seed + 20),
                };
                let mut params = Vec::new();
                obs.write_params(&mut params);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
                for p in params.iter_mut() {
                    *p += rng.random_range(-0.2..0.2);
                }
                let o = ObsInParams { obs, x, z };
                let err = finite_diff_check(&o, &params, 1e-5).unwrap();
                assert!(err <= 1e-5, "{kind:?} seed {seed}: {err}");
            }
        }
    }
}
