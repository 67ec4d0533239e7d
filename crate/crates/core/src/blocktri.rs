//! Symmetric positive-definite block-tridiagonal matrices.
//!
//! Factorization, solves, log-determinants and sampling all run in
//! `O(T·d³)` time for `T` blocks of size `d × d`, which is what keeps posterior
//! inference linear in the sequence length.
//!
//! Blocks are stored row-major in flat buffers. Vectors conformal with the
//! matrix are flat, time-major: entry `t·d + i` is coordinate `i` of step `t`.

use nalgebra::DMatrix;

use crate::error::{shape_err, Result, VindError};

/// Symmetric block-tridiagonal matrix with `t` diagonal blocks and `t − 1`
/// sub-diagonal blocks `(t+1, t)`. Super-diagonal blocks are implied.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTriSym {
    t: usize,
    d: usize,
    diag: Vec<f64>,
    lower: Vec<f64>,
}

/// Block lower-bidiagonal factor `L` with `L·Lᵀ = M`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCholesky {
    t: usize,
    d: usize,
    /// Lower-triangular diagonal blocks, row-major.
    diag: Vec<f64>,
    lower: Vec<f64>,
}

fn symmetrize(block: &mut [f64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (block[i * d + j] + block[j * d + i]);
            block[i * d + j] = m;
            block[j * d + i] = m;
        }
    }
}

/// In-place lower Cholesky of a row-major `d × d` block; upper triangle zeroed.
fn chol_block(a: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        let ljj = s.sqrt();
        a[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / ljj;
        }
        for k in (j + 1)..d {
            a[j * d + k] = 0.0;
        }
    }
    true
}

/// `x ← L⁻¹ x` for a lower-triangular row-major block.
fn forward_sub(l: &[f64], x: &mut [f64], d: usize) {
    for i in 0..d {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * d + k] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
}

/// `x ← L⁻ᵀ x` for a lower-triangular row-major block.
fn backward_sub_t(l: &[f64], x: &mut [f64], d: usize) {
    for i in (0..d).rev() {
        let mut s = x[i];
        for k in (i + 1)..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
}

impl BlockTriSym {
    /// Builds from flat row-major blocks; diagonal blocks are symmetrized.
    pub fn new(t: usize, d: usize, mut diag: Vec<f64>, lower: Vec<f64>) -> Result<Self> {
        if t == 0 || d == 0 {
            return shape_err("block-tridiagonal matrix needs at least one block of positive size");
        }
        if diag.len() != t * d * d || lower.len() != (t - 1) * d * d {
            return shape_err(format!(
                "expected {} diagonal and {} lower entries for T={t}, d={d}; got {} and {}",
                t * d * d,
                (t - 1) * d * d,
                diag.len(),
                lower.len()
            ));
        }
        for b in diag.chunks_mut(d * d) {
            symmetrize(b, d);
        }
        Ok(Self { t, d, diag, lower })
    }

    pub fn zeros(t: usize, d: usize) -> Self {
        Self {
            t,
            d,
            diag: vec![0.0; t * d * d],
            lower: vec![0.0; t.saturating_sub(1) * d * d],
        }
    }

    pub fn identity(t: usize, d: usize) -> Self {
        let mut m = Self::zeros(t, d);
        for s in 0..t {
            for i in 0..d {
                m.diag[s * d * d + i * d + i] = 1.0;
            }
        }
        m
    }

    pub fn from_blocks(diag: &[DMatrix<f64>], lower: &[DMatrix<f64>]) -> Result<Self> {
        let t = diag.len();
        if t == 0 {
            return shape_err("no diagonal blocks");
        }
        let d = diag[0].nrows();
        if lower.len() + 1 != t {
            return shape_err(format!("{t} diagonal blocks need {} lower blocks, got {}", t - 1, lower.len()));
        }
        let mut flat_d = Vec::with_capacity(t * d * d);
        let mut flat_l = Vec::with_capacity((t - 1) * d * d);
        for (buf, blocks) in [(&mut flat_d, diag), (&mut flat_l, lower)] {
            for b in blocks {
                if b.shape() != (d, d) {
                    return shape_err(format!("block of shape {:?}, expected ({d}, {d})", b.shape()));
                }
                for i in 0..d {
                    for j in 0..d {
                        buf.push(b[(i, j)]);
                    }
                }
            }
        }
        Self::new(t, d, flat_d, flat_l)
    }

    /// Extracts the block-tridiagonal band of a dense matrix.
    pub fn from_dense(m: &DMatrix<f64>, t: usize, d: usize) -> Result<Self> {
        if m.shape() != (t * d, t * d) {
            return shape_err(format!("dense matrix {:?} does not match T={t}, d={d}", m.shape()));
        }
        let diag = (0..t)
            .map(|s| m.view((s * d, s * d), (d, d)).into_owned())
            .collect::<Vec<_>>();
        let lower = (0..t.saturating_sub(1))
            .map(|s| m.view(((s + 1) * d, s * d), (d, d)).into_owned())
            .collect::<Vec<_>>();
        Self::from_blocks(&diag, &lower)
    }

    pub fn blocks(&self) -> usize {
        self.t
    }

    pub fn block_size(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.t * self.d
    }

    pub fn diag_block(&self, s: usize) -> &[f64] {
        let n = self.d * self.d;
        &self.diag[s * n..(s + 1) * n]
    }

    pub fn diag_block_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.d * self.d;
        &mut self.diag[s * n..(s + 1) * n]
    }

    /// Block `(s+1, s)`.
    pub fn lower_block(&self, s: usize) -> &[f64] {
        let n = self.d * self.d;
        &self.lower[s * n..(s + 1) * n]
    }

    pub fn lower_block_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.d * self.d;
        &mut self.lower[s * n..(s + 1) * n]
    }

    pub fn diag_matrix(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, self.diag_block(s))
    }

    pub fn lower_matrix(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, self.lower_block(s))
    }

    /// Adds `values` to the diagonal of diagonal block `s`.
    pub fn add_to_diagonal(&mut self, s: usize, values: &[f64]) {
        let d = self.d;
        let b = self.diag_block_mut(s);
        for i in 0..d {
            b[i * d + i] += values[i];
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (t, d) = (self.t, self.d);
        let mut m = DMatrix::zeros(t * d, t * d);
        for s in 0..t {
            let b = self.diag_block(s);
            for i in 0..d {
                for j in 0..d {
                    m[(s * d + i, s * d + j)] = b[i * d + j];
                }
            }
            if s + 1 < t {
                let l = self.lower_block(s);
                for i in 0..d {
                    for j in 0..d {
                        m[((s + 1) * d + i, s * d + j)] = l[i * d + j];
                        m[(s * d + j, (s + 1) * d + i)] = l[i * d + j];
                    }
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (t, d) = (self.t, self.d);
        if x.len() != t * d {
            return shape_err(format!("vector length {} vs matrix dimension {}", x.len(), t * d));
        }
        let mut y = vec![0.0; t * d];
        for s in 0..t {
            let b = self.diag_block(s);
            for i in 0..d {
                y[s * d + i] += (0..d).map(|j| b[i * d + j] * x[s * d + j]).sum::<f64>();
            }
            if s + 1 < t {
                let l = self.lower_block(s);
                for i in 0..d {
                    for j in 0..d {
                        y[(s + 1) * d + i] += l[i * d + j] * x[s * d + j];
                        y[s * d + j] += l[i * d + j] * x[(s + 1) * d + i];
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn factor(&self) -> Result<BlockCholesky> {
        let (t, d) = (self.t, self.d);
        let n = d * d;
        let mut diag = self.diag.clone();
        let mut lower = self.lower.clone();
        for s in 0..t {
            if s > 0 {
                // D_s ← D_s − L_{s,s−1} L_{s,s−1}ᵀ
                let (prev, cur) = (&lower[(s - 1) * n..s * n], &mut diag[s * n..(s + 1) * n]);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += prev[i * d + k] * prev[j * d + k];
                        }
                        cur[i * d + j] -= acc;
                    }
                }
            }
            if !chol_block(&mut diag[s * n..(s + 1) * n], d) {
                return Err(VindError::NotPositiveDefinite { block: s });
            }
            if s + 1 < t {
                // L_{s+1,s} = B_s L_s⁻ᵀ, one forward substitution per row
                let ls = &diag[s * n..(s + 1) * n];
                let b = &mut lower[s * n..(s + 1) * n];
                for row in b.chunks_mut(d) {
                    forward_sub(ls, row, d);
                }
            }
        }
        Ok(BlockCholesky { t, d, diag, lower })
    }
}

impl BlockCholesky {
    pub fn blocks(&self) -> usize {
        self.t
    }

    pub fn block_size(&self) -> usize {
        self.d
    }

    pub fn diag_factor(&self, s: usize) -> DMatrix<f64> {
        let n = self.d * self.d;
        DMatrix::from_row_slice(self.d, self.d, &self.diag[s * n..(s + 1) * n])
    }

    pub fn lower_factor(&self, s: usize) -> DMatrix<f64> {
        let n = self.d * self.d;
        DMatrix::from_row_slice(self.d, self.d, &self.lower[s * n..(s + 1) * n])
    }

    /// Dense `L`, for tests.
    pub fn to_dense_factor(&self) -> DMatrix<f64> {
        let (t, d) = (self.t, self.d);
        let mut m = DMatrix::zeros(t * d, t * d);
        for s in 0..t {
            m.view_mut((s * d, s * d), (d, d)).copy_from(&self.diag_factor(s));
            if s + 1 < t {
                m.view_mut(((s + 1) * d, s * d), (d, d)).copy_from(&self.lower_factor(s));
            }
        }
        m
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.t * self.d {
            return shape_err(format!("{what} has length {}, expected {}", v.len(), self.t * self.d));
        }
        Ok(())
    }

    /// `x ← L⁻¹ x`
    pub fn solve_l_in_place(&self, x: &mut [f64]) {
        let (t, d, n) = (self.t, self.d, self.d * self.d);
        for s in 0..t {
            if s > 0 {
                let l = &self.lower[(s - 1) * n..s * n];
                let (head, tail) = x.split_at_mut(s * d);
                let prev = &head[(s - 1) * d..];
                for i in 0..d {
                    tail[i] -= (0..d).map(|k| l[i * d + k] * prev[k]).sum::<f64>();
                }
            }
            forward_sub(&self.diag[s * n..(s + 1) * n], &mut x[s * d..(s + 1) * d], d);
        }
    }

    /// `x ← L⁻ᵀ x`
    pub fn solve_lt_in_place(&self, x: &mut [f64]) {
        let (t, d, n) = (self.t, self.d, self.d * self.d);
        for s in (0..t).rev() {
            if s + 1 < t {
                let l = &self.lower[s * n..(s + 1) * n];
                let (head, tail) = x.split_at_mut((s + 1) * d);
                let next = &tail[..d];
                let cur = &mut head[s * d..];
                for j in 0..d {
                    cur[j] -= (0..d).map(|i| l[i * d + j] * next[i]).sum::<f64>();
                }
            }
            backward_sub_t(&self.diag[s * n..(s + 1) * n], &mut x[s * d..(s + 1) * d], d);
        }
    }

    /// `M⁻¹ · rhs`
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(rhs, "right-hand side")?;
        let mut x = rhs.to_vec();
        self.solve_l_in_place(&mut x);
        self.solve_lt_in_place(&mut x);
        Ok(x)
    }

    /// `log det M = 2 Σ log Lᵢᵢ`
    pub fn logdet(&self) -> f64 {
        let (d, n) = (self.d, self.d * self.d);
        2.0 * (0..self.t)
            .map(|s| (0..d).map(|i| self.diag[s * n + i * d + i].ln()).sum::<f64>())
            .sum::<f64>()
    }

    /// `mean + L⁻ᵀ eps`; Gaussian with covariance `M⁻¹` when `eps` is standard normal
    /// and `self` factors the precision `M`.
    pub fn sample_from_precision(&self, mean: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.check_len(mean, "mean")?;
        self.check_len(eps, "noise")?;
        let mut x = eps.to_vec();
        self.solve_lt_in_place(&mut x);
        for (xi, m) in x.iter_mut().zip(mean) {
            *xi += m;
        }
        Ok(x)
    }
}
