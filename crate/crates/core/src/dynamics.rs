//! Locally linear latent evolution: `z_{t+1} ~ N(A(z_t) z_t, Γ⁻¹)` with
//! `A(z) = 𝔸 + α·sym(B(z))`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::blocktri::BlockTriSym;
use crate::error::{shape_err, Result};
use crate::nn::{mlp_init, Activation, Mat, Mlp, MlpVars, Tape, Var};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of free entries of a symmetric `d × d` matrix.
pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Position of entry `(i, j)` in the row-major upper-triangle packing.
pub fn packed_index(i: usize, j: usize, d: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Expands a packed upper triangle into a symmetric matrix.
pub fn sym_from_packed(v: &[f64], d: usize) -> Mat {
    Mat::from_fn(d, d, |i, j| v[packed_index(i, j, d)])
}

/// Evolution half of the model: base matrix, nonlinearity, noise precisions
/// and the initial-state prior. Precisions are diagonal and log-parameterized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionModel {
    pub base: Mat,
    pub alpha: f64,
    /// `None` disables the state-dependent branch entirely (linear dynamics).
    pub b_net: Option<Mlp>,
    pub log_gamma: DVector<f64>,
    pub a0: DVector<f64>,
    pub log_gamma0: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionInit {
    pub d_z: usize,
    pub alpha: f64,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output_scale: f64,
    /// Build the `B` network. Without it `A(z) ≡ 𝔸`.
    pub nonlinear: bool,
}

impl EvolutionModel {
    /// `𝔸 = I`, `a₀ = 0`, `Γ = Γ₀ = I`.
    pub fn init(cfg: &EvolutionInit, seed: u64) -> Result<Self> {
        let d = cfg.d_z;
        let b_net = if cfg.nonlinear {
            Some(mlp_init(d, &cfg.widths, packed_len(d), cfg.activation, seed, cfg.output_scale)?)
        } else {
            None
        };
        Ok(Self {
            base: Mat::identity(d, d),
            alpha: cfg.alpha,
            b_net,
            log_gamma: DVector::zeros(d),
            a0: DVector::zeros(d),
            log_gamma0: DVector::zeros(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn gamma(&self) -> DVector<f64> {
        self.log_gamma.map(f64::exp)
    }

    pub fn gamma0(&self) -> DVector<f64> {
        self.log_gamma0.map(f64::exp)
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        d * d + 3 * d + self.b_net.as_ref().map_or(0, Mlp::param_count)
    }

    /// Canonical order: `𝔸` row-major, `log Γ`, `a₀`, `log Γ₀`, then the `B` network.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                out.push(self.base[(i, j)]);
            }
        }
        out.extend(self.log_gamma.iter());
        out.extend(self.a0.iter());
        out.extend(self.log_gamma0.iter());
        if let Some(net) = &self.b_net {
            net.write_params(out);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let d = self.dim();
        let mut k = 0;
        for i in 0..d {
            for j in 0..d {
                self.base[(i, j)] = src[k];
                k += 1;
            }
        }
        for v in [&mut self.log_gamma, &mut self.a0, &mut self.log_gamma0] {
            for x in v.iter_mut() {
                *x = src[k];
                k += 1;
            }
        }
        if let Some(net) = &mut self.b_net {
            k += net.read_params(&src[k..]);
        }
        k
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return shape_err(format!("latent of length {} vs d_Z = {}", z.len(), self.dim()));
        }
        Ok(())
    }

    /// `A(z) = 𝔸 + α·sym(B(z))`
    pub fn a_matrix(&self, z: &[f64]) -> Result<Mat> {
        self.check_dim(z)?;
        let d = self.dim();
        match &self.b_net {
            None => Ok(self.base.clone()),
            Some(net) => {
                let b = net.apply(z)?;
                Ok(&self.base + sym_from_packed(&b, d) * self.alpha)
            }
        }
    }

    /// `A(z_t)` for every row of `z`.
    pub fn a_matrices(&self, z: &Mat) -> Result<Vec<Mat>> {
        let d = self.dim();
        if z.ncols() != d {
            return shape_err(format!("latent path has {} columns vs d_Z = {d}", z.ncols()));
        }
        match &self.b_net {
            None => Ok(vec![self.base.clone(); z.nrows()]),
            Some(net) => {
                let b = net.apply_rows(z)?;
                Ok((0..z.nrows())
                    .map(|t| {
                        let row: Vec<f64> = b.row(t).iter().copied().collect();
                        &self.base + sym_from_packed(&row, d) * self.alpha
                    })
                    .collect())
            }
        }
    }

    /// `A(z)·z`
    pub fn evolve_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        let a = self.a_matrix(z)?;
        Ok((a * DVector::from_column_slice(z)).as_slice().to_vec())
    }

    fn check_path(&self, z: &Mat) -> Result<()> {
        if z.ncols() != self.dim() || z.nrows() == 0 {
            return shape_err(format!(
                "latent path {:?} incompatible with d_Z = {}",
                z.shape(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// `½ Σ_t rₜᵀ Γ rₜ + ½ (z₀ − a₀)ᵀ Γ₀ (z₀ − a₀)` with `rₜ = z_{t+1} − A(z_t) z_t`.
    pub fn energy(&self, z: &Mat) -> Result<f64> {
        self.check_path(z)?;
        let (t, d) = (z.nrows(), self.dim());
        let g = self.gamma();
        let g0 = self.gamma0();
        let mut e = 0.0;
        for i in 0..d {
            let r = z[(0, i)] - self.a0[i];
            e += 0.5 * g0[i] * r * r;
        }
        if t > 1 {
            let a = self.a_matrices(&z.rows(0, t - 1).into_owned())?;
            for s in 0..t - 1 {
                let zs = z.row(s).transpose();
                let pred = &a[s] * zs;
                for i in 0..d {
                    let r = z[(s + 1, i)] - pred[i];
                    e += 0.5 * g[i] * r * r;
                }
            }
        }
        Ok(e)
    }

    /// `log N(z₀; a₀, Γ₀⁻¹) + Σ log N(z_t; A(z_{t−1}) z_{t−1}, Γ⁻¹)` with normalizers.
    pub fn logdensity(&self, z: &Mat) -> Result<f64> {
        let (t, d) = (z.nrows() as f64, self.dim() as f64);
        let norm0 = 0.5 * self.log_gamma0.sum() - 0.5 * d * LN_2PI;
        let norm = 0.5 * self.log_gamma.sum() - 0.5 * d * LN_2PI;
        Ok(-self.energy(z)? + norm0 + (t - 1.0) * norm)
    }

    /// `Γ₀ a₀`, the linear term the initial-state prior contributes to the
    /// stationarity equations.
    pub fn prior_linear_term(&self) -> Vec<f64> {
        self.gamma0().component_mul(&self.a0).as_slice().to_vec()
    }

    /// Negative Hessian of the evolution log-density in `Z` with every
    /// `A_t = A(P_t)` held fixed.
    pub fn assemble_s(&self, p: &Mat, include_prior: bool) -> Result<BlockTriSym> {
        self.check_path(p)?;
        let (t, d) = (p.nrows(), self.dim());
        let g = self.gamma();
        let a = if t > 1 {
            self.a_matrices(&p.rows(0, t - 1).into_owned())?
        } else {
            Vec::new()
        };
        let mut s = BlockTriSym::zeros(t, d);
        if include_prior {
            s.add_to_diagonal(0, self.gamma0().as_slice());
        }
        for k in 0..t.saturating_sub(1) {
            let ga = Mat::from_fn(d, d, |i, j| g[i] * a[k][(i, j)]);
            let atga = a[k].tr_mul(&ga);
            let blk = s.diag_block_mut(k);
            for i in 0..d {
                for j in 0..d {
                    blk[i * d + j] += atga[(i, j)];
                }
            }
            s.add_to_diagonal(k + 1, g.as_slice());
            let low = s.lower_block_mut(k);
            for i in 0..d {
                for j in 0..d {
                    low[i * d + j] = -ga[(i, j)];
                }
            }
        }
        Ok(s)
    }

    /// Iterates `z ← A(z) z` (plus `Γ^{-1/2} ε` when noise is given) `k` times.
    /// Row `i` of the result is the state after `i + 1` steps.
    pub fn simulate(&self, z0: &[f64], k: usize, noise_eps: Option<&Mat>) -> Result<Mat> {
        self.check_dim(z0)?;
        let d = self.dim();
        if let Some(e) = noise_eps {
            if e.shape() != (k, d) {
                return shape_err(format!("noise {:?} vs ({k}, {d})", e.shape()));
            }
        }
        let sd = self.log_gamma.map(|l| (-0.5 * l).exp());
        let mut out = Mat::zeros(k, d);
        let mut z = z0.to_vec();
        for s in 0..k {
            z = self.evolve_mean(&z)?;
            if let Some(e) = noise_eps {
                for i in 0..d {
                    z[i] += sd[i] * e[(s, i)];
                }
            }
            for i in 0..d {
                out[(s, i)] = z[i];
            }
        }
        Ok(out)
    }

    /// Tape views of the evolution parameters read from `flat` at `offset`.
    pub fn bind(&self, tape: &mut Tape, flat: Var, offset: usize) -> (EvolutionVars, usize) {
        let d = self.dim();
        let mut k = offset;
        let base = tape.slice_row_major(flat, k, d, d);
        k += d * d;
        let log_gamma = tape.slice_row_major(flat, k, 1, d);
        k += d;
        let a0 = tape.slice_row_major(flat, k, d, 1);
        k += d;
        let log_gamma0 = tape.slice_row_major(flat, k, 1, d);
        k += d;
        let b_net = self.b_net.as_ref().map(|net| {
            let (vars, next) = net.bind(tape, flat, k);
            k = next;
            vars
        });
        (
            EvolutionVars {
                d,
                alpha: self.alpha,
                base,
                log_gamma,
                a0,
                log_gamma0,
                b_net,
            },
            k,
        )
    }
}

/// Evolution parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct EvolutionVars {
    d: usize,
    alpha: f64,
    base: Var,
    log_gamma: Var,
    a0: Var,
    log_gamma0: Var,
    b_net: Option<MlpVars>,
}

/// Gather map taking row `t` of an `n × packed_len(d)` matrix to a symmetric `d × d` block.
fn sym_gather_map(t: usize, n: usize, d: usize) -> Vec<u32> {
    let mut map = vec![0u32; d * d];
    for j in 0..d {
        for i in 0..d {
            map[j * d + i] = (packed_index(i, j, d) * n + t) as u32;
        }
    }
    map
}

impl EvolutionVars {
    pub fn a0(&self) -> Var {
        self.a0
    }

    /// `Γ` as a `d × d` diagonal node.
    pub fn gamma(&self, tape: &mut Tape) -> Var {
        let g = tape.exp(self.log_gamma);
        tape.diag(g)
    }

    pub fn gamma0(&self, tape: &mut Tape) -> Var {
        let g = tape.exp(self.log_gamma0);
        tape.diag(g)
    }

    /// `A(p_t)` for each row `t` of the constant path `p`.
    pub fn a_blocks(&self, tape: &mut Tape, p: &Mat) -> Vec<Var> {
        let n = p.nrows();
        match &self.b_net {
            // one node per step either way, so the base matrix collects its
            // adjoint in the same order with or without the branch
            None => (0..n).map(|_| tape.scale(self.base, 1.0)).collect(),
            Some(net) => {
                let pv = tape.constant(p.clone());
                let b = net.forward(tape, pv);
                (0..n)
                    .map(|t| {
                        let sym = tape.gather(b, self.d, self.d, sym_gather_map(t, n, self.d));
                        let scaled = tape.scale(sym, self.alpha);
                        tape.add(self.base, scaled)
                    })
                    .collect()
            }
        }
    }

    /// Diagonal and lower blocks of `S(p)` (initial prior included).
    pub fn s_blocks(&self, tape: &mut Tape, p: &Mat) -> (Vec<Var>, Vec<Var>) {
        let t = p.nrows();
        let gamma = self.gamma(tape);
        let gamma0 = self.gamma0(tape);
        let a = if t > 1 {
            self.a_blocks(tape, &p.rows(0, t - 1).into_owned())
        } else {
            Vec::new()
        };
        let mut diag = Vec::with_capacity(t);
        let mut lower = Vec::with_capacity(t.saturating_sub(1));
        let mut carry = gamma0;
        for &ak in &a {
            let ga = tape.matmul(gamma, ak);
            let atga = tape.matmul_tn(ak, ga);
            diag.push(tape.add(carry, atga));
            lower.push(tape.scale(ga, -1.0));
            carry = gamma;
        }
        diag.push(carry);
        (diag, lower)
    }

    /// Evolution log-density of the `T × d` node `z`, normalizers included.
    pub fn logdensity(&self, tape: &mut Tape, z: Var) -> Var {
        let (t, d) = tape.value(z).shape();
        let dz = d as f64;
        // initial prior
        let z0 = tape.row_as_column(z, 0);
        let r0 = tape.sub(z0, self.a0);
        let g0 = tape.exp(self.log_gamma0);
        let r0sq = tape.hadamard(r0, r0);
        let r0t = tape.transpose(r0sq);
        let q0 = tape.dot(r0t, g0);
        let mut total = tape.scale(q0, -0.5);
        let lg0 = tape.sum(self.log_gamma0);
        let lg0 = tape.scale(lg0, 0.5);
        total = tape.add(total, lg0);
        let c0 = tape.scalar_const(-0.5 * dz * LN_2PI);
        total = tape.add(total, c0);
        if t == 1 {
            return total;
        }
        let head = tape.rows(z, 0, t - 1);
        let tail = tape.rows(z, 1, t);
        let mut pred = tape.matmul_nt(head, self.base);
        if let Some(net) = &self.b_net {
            let b = net.forward(tape, head);
            // (sym(b_t) z_t)_i = Σ_j b_t[pack(i,j)] z_tj, vectorized over t
            let n = t - 1;
            let mut bmap = vec![0u32; n * d * d];
            let mut zmap = vec![0u32; n * d * d];
            for i in 0..d {
                for j in 0..d {
                    let col = i * d + j;
                    for s in 0..n {
                        bmap[col * n + s] = (packed_index(i, j, d) * n + s) as u32;
                        zmap[col * n + s] = (j * n + s) as u32;
                    }
                }
            }
            let bfull = tape.gather(b, n, d * d, bmap);
            let zrep = tape.gather(head, n, d * d, zmap);
            let prod = tape.hadamard(bfull, zrep);
            let summer = tape.constant(Mat::from_fn(d * d, d, |r, c| if r / d == c { 1.0 } else { 0.0 }));
            let nl = tape.matmul(prod, summer);
            let nl = tape.scale(nl, self.alpha);
            pred = tape.add(pred, nl);
        }
        let r = tape.sub(tail, pred);
        let rsq = tape.hadamard(r, r);
        let g = tape.exp(self.log_gamma);
        let grep = tape.repeat_row(g, t - 1);
        let q = tape.dot(rsq, grep);
        let q = tape.scale(q, -0.5);
        total = tape.add(total, q);
        let lg = tape.sum(self.log_gamma);
        let lg = tape.scale(lg, 0.5 * (t - 1) as f64);
        total = tape.add(total, lg);
        let c = tape.scalar_const(-0.5 * dz * LN_2PI * (t - 1) as f64);
        tape.add(total, c)
    }
}
