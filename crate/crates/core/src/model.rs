//! The complete parameter set and the differentiable per-trial ELBO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{EvolutionInit, EvolutionModel, LN_2PI};
use crate::error::{Result, VindError};
use crate::generative::{ObservationKind, ObservationModel};
use crate::io::{read_container, write_container};
use crate::nn::{Activation, GradBundle, Mat, Mlp, MlpShape, Tape, Var};
use crate::recognition::{Encoding, RecognitionNet};

const MODEL_MAGIC: &[u8; 8] = b"VINDMDL1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Architecture and initialization choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub alpha: f64,
    /// `false` drops the state-dependent branch: linear dynamics.
    pub nonlinear: bool,
    pub recognition_widths: Vec<usize>,
    pub evolution_widths: Vec<usize>,
    pub observation_widths: Vec<usize>,
    pub activation: Activation,
    /// Scale of the final layer of the `B` network at initialization.
    pub b_output_scale: f64,
    pub observation: ObservationKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 10,
            d_z: 3,
            alpha: 0.1,
            nonlinear: true,
            recognition_widths: vec![32, 32],
            evolution_widths: vec![32, 32],
            observation_widths: vec![32, 32],
            activation: Activation::Tanh,
            b_output_scale: 0.1,
            observation: ObservationKind::Gaussian,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VindError::InvalidConfig(m));
        if self.d_x == 0 || self.d_z == 0 {
            return bad(format!("d_x and d_z must be positive (got {}, {})", self.d_x, self.d_z));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.b_output_scale >= 0.0) || !self.b_output_scale.is_finite() {
            return bad(format!("b_output_scale must be finite and non-negative, got {}", self.b_output_scale));
        }
        for (name, w) in [
            ("recognition_widths", &self.recognition_widths),
            ("evolution_widths", &self.evolution_widths),
            ("observation_widths", &self.observation_widths),
        ] {
            if w.contains(&0) {
                return bad(format!("{name} contains a zero width"));
            }
        }
        Ok(())
    }
}

/// Derives a component seed so that each network's draw does not depend on
/// which other components exist.
pub(crate) fn component_seed(seed: u64, component: u64) -> u64 {
    let mut z = seed ^ component.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VindModel {
    pub recognition: RecognitionNet,
    pub evolution: EvolutionModel,
    pub observation: ObservationModel,
}

/// A named contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSection {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    d_x: usize,
    d_z: usize,
    alpha: f64,
    mu_net: MlpShape,
    prec_net: MlpShape,
    b_net: Option<MlpShape>,
    observation: ObservationKind,
    observation_net: MlpShape,
    layout: Vec<ParamSection>,
    param_count: usize,
}

/// ELBO nodes for one trial.
#[derive(Clone, Debug)]
pub struct TapeElbo {
    pub elbo: Var,
    /// `T × d_Z` posterior mean after one fixed-point step.
    pub mean: Var,
}

/// Value, gradient and refreshed mean of one trial's ELBO.
#[derive(Clone, Debug)]
pub struct TrialElbo {
    pub bundle: GradBundle,
    pub mean: Mat,
}

impl VindModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let recognition = RecognitionNet::init(
            cfg.d_x,
            cfg.d_z,
            &cfg.recognition_widths,
            cfg.activation,
            component_seed(seed, 1),
        )?;
        let evolution = EvolutionModel::init(
            &EvolutionInit {
                d_z: cfg.d_z,
                alpha: cfg.alpha,
                widths: cfg.evolution_widths.clone(),
                activation: cfg.activation,
                output_scale: cfg.b_output_scale,
                nonlinear: cfg.nonlinear,
            },
            component_seed(seed, 3),
        )?;
        let observation = ObservationModel::init(
            cfg.observation,
            cfg.d_z,
            cfg.d_x,
            &cfg.observation_widths,
            cfg.activation,
            component_seed(seed, 4),
        )?;
        Ok(Self {
            recognition,
            evolution,
            observation,
        })
    }

    pub fn d_x(&self) -> usize {
        self.recognition.d_x()
    }

    pub fn d_z(&self) -> usize {
        self.evolution.dim()
    }

    pub fn param_count(&self) -> usize {
        self.recognition.param_count() + self.evolution.param_count() + self.observation.param_count()
    }

    /// Canonical flat order: recognition (`μ` net, precision net), evolution
    /// (`𝔸`, `log Γ`, `a₀`, `log Γ₀`, `B` net), observation (net, then `log σ`).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.recognition.write_params(&mut out);
        self.evolution.write_params(&mut out);
        self.observation.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(VindError::Shape(format!(
                "parameter vector of length {} vs model with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut k = self.recognition.read_params(flat);
        k += self.evolution.read_params(&flat[k..]);
        self.observation.read_params(&flat[k..]);
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamSection> {
        let d = self.d_z();
        let mut sections = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, len: usize| {
            sections.push(ParamSection {
                name: name.to_string(),
                offset,
                len,
            });
            offset += len;
        };
        push("recognition.mu_net", self.recognition.mu_net.param_count());
        push("recognition.prec_net", self.recognition.prec_net.param_count());
        push("evolution.base", d * d);
        push("evolution.log_gamma", d);
        push("evolution.a0", d);
        push("evolution.log_gamma0", d);
        if let Some(b) = &self.evolution.b_net {
            push("evolution.b_net", b.param_count());
        }
        match &self.observation {
            ObservationModel::Gaussian { m_net, log_sigma } => {
                push("observation.m_net", m_net.param_count());
                push("observation.log_sigma", log_sigma.len());
            }
            ObservationModel::Poisson { rate_net } => push("observation.rate_net", rate_net.param_count()),
        }
        sections
    }

    pub fn encode(&self, x: &Mat) -> Result<Encoding> {
        if x.ncols() != self.d_x() {
            return Err(VindError::InvalidData(format!(
                "trial has {} observation columns, model expects {}",
                x.ncols(),
                self.d_x()
            )));
        }
        self.recognition.encode(x)
    }

    fn header(&self) -> ModelHeader {
        ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            d_x: self.d_x(),
            d_z: self.d_z(),
            alpha: self.evolution.alpha,
            mu_net: self.recognition.mu_net.shape(),
            prec_net: self.recognition.prec_net.shape(),
            b_net: self.evolution.b_net.as_ref().map(Mlp::shape),
            observation: self.observation.kind(),
            observation_net: self.observation.net().shape(),
            layout: self.layout(),
            param_count: self.param_count(),
        }
    }

    fn from_header(h: &ModelHeader, params: &[f64]) -> Result<Self> {
        if h.format_version != MODEL_FORMAT_VERSION {
            return Err(VindError::Format(format!("unsupported model format version {}", h.format_version)));
        }
        let zeros = |s: &MlpShape| Mlp::from_shape(s, &vec![0.0; s.param_count()]);
        let observation = match h.observation {
            ObservationKind::Gaussian => ObservationModel::Gaussian {
                m_net: zeros(&h.observation_net)?,
                log_sigma: nalgebra::DVector::zeros(h.d_x),
            },
            ObservationKind::Poisson => ObservationModel::Poisson {
                rate_net: zeros(&h.observation_net)?,
            },
        };
        let mut model = VindModel {
            recognition: RecognitionNet {
                mu_net: zeros(&h.mu_net)?,
                prec_net: zeros(&h.prec_net)?,
            },
            evolution: EvolutionModel {
                base: Mat::zeros(h.d_z, h.d_z),
                alpha: h.alpha,
                b_net: h.b_net.as_ref().map(zeros).transpose()?,
                log_gamma: nalgebra::DVector::zeros(h.d_z),
                a0: nalgebra::DVector::zeros(h.d_z),
                log_gamma0: nalgebra::DVector::zeros(h.d_z),
            },
            observation,
        };
        if model.param_count() != h.param_count || model.layout() != h.layout {
            return Err(VindError::Format("header layout does not match the declared architecture".into()));
        }
        model.set_params(params)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, MODEL_MAGIC, &self.header(), &self.params())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (h, params): (ModelHeader, Vec<f64>) = read_container(r, MODEL_MAGIC)?;
        Self::from_header(&h, &params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Records the one-sample ELBO of trial `x` with parameters read from `flat`.
    ///
    /// The path `p_prev` is a constant: the transition matrices inside the
    /// precision are evaluated there, and gradients reach the parameters
    /// through one fixed-point step and the reparameterized sample
    /// `Z = P + L⁻ᵀ ε`.
    pub fn record_elbo(&self, tape: &mut Tape, flat: Var, x: &Mat, p_prev: &Mat, eps: &Mat) -> Result<TapeElbo> {
        let (t, d) = (x.nrows(), self.d_z());
        if p_prev.shape() != (t, d) || eps.shape() != (t, d) || x.ncols() != self.d_x() {
            return Err(VindError::Shape(format!(
                "trial {:?}, path {:?}, noise {:?} for model ({}, {})",
                x.shape(),
                p_prev.shape(),
                eps.shape(),
                self.d_x(),
                d
            )));
        }
        let (rec, k) = self.recognition.bind(tape, flat, 0);
        let (evo, k) = self.evolution.bind(tape, flat, k);
        let (obs, _) = self.observation.bind(tape, flat, k);

        let xv = tape.constant(x.clone());
        let (m, lam) = rec.encode(tape, xv);
        let (s_diag, s_lower) = evo.s_blocks(tape, p_prev);

        let lm = tape.hadamard(lam, m);
        let g0 = evo.gamma0(tape);
        let prior = tape.matmul(g0, evo.a0());

        // block Cholesky of C = Λ + S
        let mut l_diag = Vec::with_capacity(t);
        let mut l_lower: Vec<Var> = Vec::with_capacity(t.saturating_sub(1));
        for s in 0..t {
            let lam_s = tape.row(lam, s);
            let lam_s = tape.diag(lam_s);
            let mut c = tape.add(s_diag[s], lam_s);
            if s > 0 {
                let prev = l_lower[s - 1];
                let outer = tape.matmul_nt(prev, prev);
                c = tape.sub(c, outer);
            }
            let l = tape.cholesky(c).map_err(|e| match e {
                VindError::NotPositiveDefinite { .. } => VindError::NotPositiveDefinite { block: s },
                other => other,
            })?;
            l_diag.push(l);
            if s + 1 < t {
                let bt = tape.transpose(s_lower[s]);
                let sol = tape.solve_lower(l, bt);
                l_lower.push(tape.transpose(sol));
            }
        }

        // forward substitution L w = Y
        let mut w = Vec::with_capacity(t);
        for s in 0..t {
            let mut y = tape.row_as_column(lm, s);
            if s == 0 {
                y = tape.add(y, prior);
            } else {
                let carry = tape.matmul(l_lower[s - 1], w[s - 1]);
                y = tape.sub(y, carry);
            }
            w.push(tape.solve_lower(l_diag[s], y));
        }

        // back substitution for the mean (Lᵀ P = w) and the sample (Lᵀ Z = w + ε)
        let eps_col = |tape: &mut Tape, s: usize| tape.constant(Mat::from_iterator(d, 1, eps.row(s).iter().copied()));
        let mut mean_rows = vec![None; t];
        let mut z_rows = vec![None; t];
        let mut next_p: Option<Var> = None;
        let mut next_z: Option<Var> = None;
        for s in (0..t).rev() {
            let e = eps_col(tape, s);
            let mut rp = w[s];
            let mut rz = tape.add(w[s], e);
            if let (Some(np), Some(nz)) = (next_p, next_z) {
                let cp = tape.matmul_tn(l_lower[s], np);
                rp = tape.sub(rp, cp);
                let cz = tape.matmul_tn(l_lower[s], nz);
                rz = tape.sub(rz, cz);
            }
            let p = tape.solve_lower_t(l_diag[s], rp);
            let z = tape.solve_lower_t(l_diag[s], rz);
            next_p = Some(p);
            next_z = Some(z);
            mean_rows[s] = Some(tape.transpose(p));
            z_rows[s] = Some(tape.transpose(z));
        }
        let mean_rows: Vec<Var> = mean_rows.into_iter().map(|v| v.expect("filled")).collect();
        let z_rows: Vec<Var> = z_rows.into_iter().map(|v| v.expect("filled")).collect();
        let mean = tape.vstack(&mean_rows);
        let z = tape.vstack(&z_rows);

        let mut logdet = tape.log_diag_sum(l_diag[0]);
        for &l in &l_diag[1..] {
            let v = tape.log_diag_sum(l);
            logdet = tape.add(logdet, v);
        }
        // H[q] = ½ n (1 + log 2π) − ½ log det C, with log det C = 2 Σ log Lᵢᵢ
        let neg_half_logdet = tape.scale(logdet, -1.0);
        let h_const = tape.scalar_const(0.5 * (t * d) as f64 * (1.0 + LN_2PI));
        let entropy = tape.add(h_const, neg_half_logdet);

        let evo_ld = evo.logdensity(tape, z);
        let obs_ld = obs.logdensity(tape, x, z);
        let joint = tape.add(evo_ld, obs_ld);
        let elbo = tape.add(joint, entropy);
        Ok(TapeElbo { elbo, mean })
    }

    /// ELBO value, its gradient in the canonical parameter order, and the
    /// refreshed posterior mean, for one trial.
    pub fn trial_elbo(&self, x: &Mat, p_prev: &Mat, eps: &Mat) -> Result<TrialElbo> {
        let params = self.params();
        let mut tape = Tape::new();
        let flat = tape.input(Mat::from_column_slice(params.len(), 1, &params));
        let rec = self.record_elbo(&mut tape, flat, x, p_prev, eps)?;
        tape.check_finite()?;
        let adj = tape.backward(rec.elbo);
        let grad = adj.get_or_zeros(&tape, flat).as_slice().to_vec();
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(VindError::Numerical(format!("non-finite ELBO partial for parameter {i}")));
        }
        Ok(TrialElbo {
            bundle: GradBundle {
                value: tape.scalar(rec.elbo),
                grad,
            },
            mean: tape.value(rec.mean).clone(),
        })
    }
}
