//! Laplace child of the parent posterior: fixed-point iteration for the mean,
//! block-tridiagonal precision, sampling, entropy and convergence diagnostics.

use serde::{Deserialize, Serialize};

use crate::blocktri::{BlockCholesky, BlockTriSym};
use crate::dynamics::{packed_index, packed_len, EvolutionModel, LN_2PI};
use crate::error::{shape_err, Result};
use crate::nn::{Mat, Tape};
use crate::recognition::{recognition_logdensity, Encoding};

/// How the right-hand side of the fixed-point equation is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpiMode {
    /// `Y = ΛM + Γ₀a₀`; the path dependence of the transition matrices is ignored.
    #[default]
    Default,
    /// Also subtracts the gradient contribution of `A(z)`, so fixed points are
    /// exact stationary points of the parent density.
    Exact,
}

/// Flattens a `T × d` path to the time-major vector layout used by [`BlockTriSym`].
pub fn path_to_vec(p: &Mat) -> Vec<f64> {
    p.transpose().as_slice().to_vec()
}

pub fn vec_to_path(v: &[f64], t: usize, d: usize) -> Mat {
    Mat::from_row_slice(t, d, v)
}

#[derive(Clone, Debug)]
pub struct LaplacePosterior {
    pub mean: Mat,
    pub factor: BlockCholesky,
    pub logdet: f64,
}

impl LaplacePosterior {
    pub fn from_precision(mean: Mat, precision: &BlockTriSym) -> Result<Self> {
        if mean.nrows() != precision.blocks() || mean.ncols() != precision.block_size() {
            return shape_err(format!(
                "mean {:?} vs precision with {} blocks of size {}",
                mean.shape(),
                precision.blocks(),
                precision.block_size()
            ));
        }
        let factor = precision.factor()?;
        let logdet = factor.logdet();
        Ok(Self { mean, factor, logdet })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpiDiagnostics {
    /// `‖P⁽ⁿ⁾ − P⁽ⁿ⁻¹⁾‖_max` for each iteration performed.
    pub residuals: Vec<f64>,
    pub contraction: Option<f64>,
    pub converged: bool,
}

impl FpiDiagnostics {
    /// Number of map applications after which the iterate stopped moving
    /// (the first iteration whose successor has residual within `tol`).
    pub fn fixed_point_after(&self, tol: f64) -> Option<usize> {
        self.residuals.iter().position(|&r| r <= tol)
    }
}

fn check_shapes(evo: &EvolutionModel, enc: &Encoding, z: &Mat) -> Result<()> {
    if z.shape() != enc.m.shape() || z.ncols() != evo.dim() {
        return shape_err(format!(
            "path {:?}, encoding {:?}, latent dimension {}",
            z.shape(),
            enc.m.shape(),
            evo.dim()
        ));
    }
    Ok(())
}

/// Parent log-density up to its normalizing constant: the recognition
/// quadratic plus the evolution quadratic.
pub fn parent_logdensity(evo: &EvolutionModel, enc: &Encoding, z: &Mat) -> Result<f64> {
    check_shapes(evo, enc, z)?;
    Ok(recognition_logdensity(enc, z)? - evo.energy(z)?)
}

/// `∇_Z` of [`parent_logdensity`].
pub fn parent_gradient(evo: &EvolutionModel, enc: &Encoding, z: &Mat) -> Result<Mat> {
    check_shapes(evo, enc, z)?;
    let mut flat = Vec::new();
    evo.write_params(&mut flat);
    let mut tape = Tape::new();
    let fv = tape.constant(Mat::from_column_slice(flat.len(), 1, &flat));
    let (vars, _) = evo.bind(&mut tape, fv, 0);
    let zv = tape.input(z.clone());
    let m = tape.constant(enc.m.clone());
    let l = tape.constant(enc.lambda.clone());
    let r = tape.sub(zv, m);
    let rl = tape.hadamard(r, l);
    let q = tape.dot(rl, r);
    let rec = tape.scale(q, -0.5);
    let evo_ld = vars.logdensity(&mut tape, zv);
    let out = tape.add(rec, evo_ld);
    tape.check_finite()?;
    Ok(tape.backward(out).get_or_zeros(&tape, zv))
}

/// `C = Λ + S(P)` with transition matrices frozen at `P`.
pub fn laplace_precision(evo: &EvolutionModel, enc: &Encoding, p: &Mat) -> Result<BlockTriSym> {
    check_shapes(evo, enc, p)?;
    let mut c = evo.assemble_s(p, true)?;
    for t in 0..p.nrows() {
        let row: Vec<f64> = enc.lambda.row(t).iter().copied().collect();
        c.add_to_diagonal(t, &row);
    }
    Ok(c)
}

pub fn laplace_posterior(evo: &EvolutionModel, enc: &Encoding, p: &Mat) -> Result<LaplacePosterior> {
    LaplacePosterior::from_precision(p.clone(), &laplace_precision(evo, enc, p)?)
}

/// `∇_{P̃} ½ Pᵀ S(P̃) P` at `P̃ = P`: what the frozen-matrix precision leaves
/// out of the exact stationarity condition.
pub fn curvature_correction(evo: &EvolutionModel, p: &Mat) -> Result<Mat> {
    let (t, d) = p.shape();
    let mut out = Mat::zeros(t, d);
    let Some(net) = &evo.b_net else {
        return Ok(out);
    };
    if t < 2 {
        return Ok(out);
    }
    let head = p.rows(0, t - 1).into_owned();
    let a = evo.a_matrices(&head)?;
    let g = evo.gamma();
    // coefficient of each packed output in ⟨∂/∂A_s, sym(B)⟩
    let mut coef = Mat::zeros(t - 1, packed_len(d));
    for s in 0..t - 1 {
        let zs = p.row(s).transpose();
        let r = p.row(s + 1).transpose() - &a[s] * &zs;
        for i in 0..d {
            for j in 0..d {
                coef[(s, packed_index(i, j, d))] -= g[i] * r[i] * zs[j];
            }
        }
    }
    let mut tape = Tape::new();
    let zin = tape.input(head);
    let vars = net.bind_const(&mut tape);
    let b = vars.forward(&mut tape, zin);
    let cv = tape.constant(coef);
    let y = tape.dot(b, cv);
    tape.check_finite()?;
    let grad = tape.backward(y).get_or_zeros(&tape, zin);
    for s in 0..t - 1 {
        for i in 0..d {
            out[(s, i)] = evo.alpha * grad[(s, i)];
        }
    }
    Ok(out)
}

/// Right-hand side of the fixed-point equation `(Λ + S(P)) P' = Y(P)`.
pub fn fpi_rhs(evo: &EvolutionModel, enc: &Encoding, p: &Mat, mode: FpiMode) -> Result<Mat> {
    check_shapes(evo, enc, p)?;
    let mut y = enc.weighted_mean();
    for (i, v) in evo.prior_linear_term().into_iter().enumerate() {
        y[(0, i)] += v;
    }
    if mode == FpiMode::Exact {
        y -= curvature_correction(evo, p)?;
    }
    Ok(y)
}

/// One fixed-point step `P' = (Λ + S(P))⁻¹ Y(P)`.
pub fn fpi_map(evo: &EvolutionModel, enc: &Encoding, p: &Mat, mode: FpiMode) -> Result<Mat> {
    let c = laplace_precision(evo, enc, p)?;
    let y = fpi_rhs(evo, enc, p, mode)?;
    let x = c.factor()?.solve(&path_to_vec(&y))?;
    Ok(vec_to_path(&x, p.nrows(), p.ncols()))
}

/// Iterates [`fpi_map`] up to `n_iters` times, stopping once the max-norm
/// residual drops to `tol`.
pub fn fpi_solve(
    evo: &EvolutionModel,
    enc: &Encoding,
    p0: &Mat,
    n_iters: usize,
    tol: f64,
    mode: FpiMode,
) -> Result<(Mat, FpiDiagnostics)> {
    let mut p = p0.clone();
    let mut diag = FpiDiagnostics::default();
    for _ in 0..n_iters {
        let next = fpi_map(evo, enc, &p, mode)?;
        let r = (&next - &p).abs().max();
        diag.residuals.push(r);
        p = next;
        if r <= tol {
            diag.converged = true;
            break;
        }
    }
    Ok((p, diag))
}

/// Max absolute row sum of the Jacobian of [`fpi_map`] at `p`.
///
/// Small problems (`T·d ≤ 64`) and the exact mode use a dense central-difference
/// Jacobian. Larger problems in the default mode use the closed-form Jacobian
/// `−C⁻¹ (∂S/∂P) P'` on up to `probes` evenly spaced time steps.
pub fn contraction_bound(evo: &EvolutionModel, enc: &Encoding, p: &Mat, probes: usize, mode: FpiMode) -> Result<f64> {
    if p.len() <= 64 || mode == FpiMode::Exact {
        contraction_bound_dense(evo, enc, p, mode)
    } else {
        contraction_bound_rows(evo, enc, p, probes)
    }
}

pub fn contraction_bound_dense(evo: &EvolutionModel, enc: &Encoding, p: &Mat, mode: FpiMode) -> Result<f64> {
    let (t, d) = p.shape();
    let n = t * d;
    let base = path_to_vec(p);
    let mut jac = Mat::zeros(n, n);
    let mut x = base.clone();
    for j in 0..n {
        let h = 1e-5 * (1.0 + base[j].abs());
        x[j] = base[j] + h;
        let up = path_to_vec(&fpi_map(evo, enc, &vec_to_path(&x, t, d), mode)?);
        x[j] = base[j] - h;
        let down = path_to_vec(&fpi_map(evo, enc, &vec_to_path(&x, t, d), mode)?);
        x[j] = base[j];
        for i in 0..n {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok((0..n).map(|i| jac.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max))
}

/// Closed-form default-mode Jacobian rows for the time steps picked by `probes`.
pub fn contraction_bound_rows(evo: &EvolutionModel, enc: &Encoding, p: &Mat, probes: usize) -> Result<f64> {
    let (t, d) = p.shape();
    if evo.b_net.is_none() || t < 2 || probes == 0 {
        return Ok(0.0);
    }
    let c = laplace_precision(evo, enc, p)?;
    let f = c.factor()?;
    let y = fpi_rhs(evo, enc, p, FpiMode::Default)?;
    let x = vec_to_path(&f.solve(&path_to_vec(&y))?, t, d);
    let head = p.rows(0, t - 1).into_owned();
    let a = evo.a_matrices(&head)?;
    let g = evo.gamma();

    // w[(s, c)] holds the two nonzero blocks of (∂S/∂P_{s,c}) x
    let mut w: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity((t - 1) * d);
    for s in 0..t - 1 {
        let zs: Vec<f64> = p.row(s).iter().copied().collect();
        let xs = x.row(s).transpose();
        let xn = x.row(s + 1).transpose();
        for comp in 0..d {
            let h = 1e-5 * (1.0 + zs[comp].abs());
            let mut zp = zs.clone();
            zp[comp] += h;
            let mut zm = zs.clone();
            zm[comp] -= h;
            let da = (evo.a_matrix(&zp)? - evo.a_matrix(&zm)?) / (2.0 * h);
            let gda = Mat::from_fn(d, d, |i, j| g[i] * da[(i, j)]);
            let ga = Mat::from_fn(d, d, |i, j| g[i] * a[s][(i, j)]);
            let top = (da.tr_mul(&ga) + a[s].tr_mul(&gda)) * &xs - gda.tr_mul(&xn);
            let bottom = -(&gda * &xs);
            w.push((top.as_slice().to_vec(), bottom.as_slice().to_vec()));
        }
    }

    let blocks: Vec<usize> = if probes >= t {
        (0..t).collect()
    } else if probes == 1 {
        vec![t / 2]
    } else {
        let mut v: Vec<usize> = (0..probes)
            .map(|k| ((k as f64) * (t - 1) as f64 / (probes - 1) as f64).round() as usize)
            .collect();
        v.dedup();
        v
    };
    let mut best = 0.0f64;
    let mut e = vec![0.0; t * d];
    for &blk in &blocks {
        for comp in 0..d {
            let row = blk * d + comp;
            e.iter_mut().for_each(|v| *v = 0.0);
            e[row] = 1.0;
            let u = f.solve(&e)?;
            let mut sum = 0.0;
            for (j, (top, bottom)) in w.iter().enumerate() {
                let s = j / d;
                let mut v = 0.0;
                for i in 0..d {
                    v += u[s * d + i] * top[i] + u[(s + 1) * d + i] * bottom[i];
                }
                sum += v.abs();
            }
            best = best.max(sum);
        }
    }
    Ok(best)
}

/// `mean + L⁻ᵀ ε` where `C = L Lᵀ`; `eps` is `T × d`.
pub fn sample_posterior(post: &LaplacePosterior, eps: &Mat) -> Result<Mat> {
    if eps.shape() != post.mean.shape() {
        return shape_err(format!("noise {:?} vs mean {:?}", eps.shape(), post.mean.shape()));
    }
    let z = post
        .factor
        .sample_from_precision(&path_to_vec(&post.mean), &path_to_vec(eps))?;
    Ok(vec_to_path(&z, post.mean.nrows(), post.mean.ncols()))
}

/// `½ n (1 + log 2π) − ½ log det C`
pub fn entropy(post: &LaplacePosterior) -> f64 {
    0.5 * post.dim() as f64 * (1.0 + LN_2PI) - 0.5 * post.logdet
}
