//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every intermediate value together with the operation that
//! produced it. Calling [`Tape::backward`] on a scalar node walks the record in
//! reverse and accumulates adjoints for every node that depends on an input.
//!
//! The operation set is deliberately narrow: what the feed-forward networks,
//! Gaussian log-densities and the block-tridiagonal Cholesky route need, and no
//! more.

use nalgebra::DMatrix;

use crate::error::{Result, VindError};

pub type Mat = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather maps: the output entry is a constant zero.
pub const ZERO: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Input,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Gather(Var, Vec<u32>),
    VStack(Vec<Var>),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    LogDiagSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::MatMulTN(..) => "matmul_tn",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sum(..) => "sum",
            Op::Gather(..) => "gather",
            Op::VStack(..) => "vstack",
            Op::Cholesky(..) => "cholesky",
            Op::SolveLower(..) => "solve_lower",
            Op::SolveLowerT(..) => "solve_lower_t",
            Op::LogDiagSum(..) => "log_diag_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn tril(m: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Lower triangle with the diagonal halved.
fn phi(m: &Mat) -> Mat {
    let mut out = tril(m);
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] *= 0.5;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Errors if any recorded value is non-finite, naming the first offender.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(idx) => Err(VindError::Numerical(format!(
                "non-finite value at tape node {idx} ({})",
                self.nodes[idx].op.name()
            ))),
        }
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_element(1, 1, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Hadamard(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b).transpose();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).tr_mul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulTN(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Adds the `1 × m` row `row` to every row of the `n × m` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let mut v = self.value(a).clone();
        assert_eq!(v.ncols(), r.ncols(), "add_row width mismatch");
        for j in 0..v.ncols() {
            let b = r[(0, j)];
            for x in v.column_mut(j).iter_mut() {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `Σ aᵢⱼ bᵢⱼ` as a `1 × 1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let h = self.hadamard(a, b);
        self.sum(h)
    }

    /// Builds a `rows × cols` matrix whose column-major entry `k` is the
    /// column-major entry `map[k]` of `src`, or zero when `map[k] == ZERO`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, map: Vec<u32>) -> Var {
        assert_eq!(map.len(), rows * cols, "gather map length");
        let s = self.value(src).as_slice();
        let data: Vec<f64> = map
            .iter()
            .map(|&k| if k == ZERO { 0.0 } else { s[k as usize] })
            .collect();
        let v = Mat::from_vec(rows, cols, data);
        let ng = self.ng(src);
        self.push(v, Op::Gather(src, map), ng)
    }

    /// Row `i` of `src` as a `1 × cols` node.
    pub fn row(&mut self, src: Var, i: usize) -> Var {
        let (r, c) = self.value(src).shape();
        let map = (0..c).map(|j| (j * r + i) as u32).collect();
        self.gather(src, 1, c, map)
    }

    /// Row `i` of `src` as a `cols × 1` column.
    pub fn row_as_column(&mut self, src: Var, i: usize) -> Var {
        let (r, c) = self.value(src).shape();
        let map = (0..c).map(|j| (j * r + i) as u32).collect();
        self.gather(src, c, 1, map)
    }

    /// Rows `start..end` of `src`.
    pub fn rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.value(src).shape();
        let n = end - start;
        let mut map = Vec::with_capacity(n * c);
        for j in 0..c {
            for i in start..end {
                map.push((j * r + i) as u32);
            }
        }
        self.gather(src, n, c, map)
    }

    /// Reads `rows × cols` consecutive entries of a column vector, in row-major order.
    pub fn slice_row_major(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let mut map = vec![0u32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                map[j * rows + i] = (offset + i * cols + j) as u32;
            }
        }
        self.gather(src, rows, cols, map)
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn repeat_row(&mut self, src: Var, n: usize) -> Var {
        let c = self.value(src).ncols();
        let mut map = Vec::with_capacity(n * c);
        for j in 0..c {
            for _ in 0..n {
                map.push(j as u32);
            }
        }
        self.gather(src, n, c, map)
    }

    /// Places the entries of a `1 × d` or `d × 1` vector on the diagonal of a `d × d` matrix.
    pub fn diag(&mut self, src: Var) -> Var {
        let d = self.value(src).len();
        let mut map = vec![ZERO; d * d];
        for i in 0..d {
            map[i * d + i] = i as u32;
        }
        self.gather(src, d, d, map)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.ncols(), cols, "vstack width mismatch");
            v.rows_mut(r0, m.nrows()).copy_from(m);
            r0 += m.nrows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::VStack(parts.to_vec()), ng)
    }

    /// Lower Cholesky factor of a symmetric positive-definite node.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).clone();
        let chol = nalgebra::Cholesky::new(m).ok_or(VindError::NotPositiveDefinite { block: 0 })?;
        let l = chol.l();
        let ng = self.ng(a);
        Ok(self.push(l, Op::Cholesky(a), ng))
    }

    /// `L⁻¹ b` for lower-triangular `l`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let v = self
            .value(l)
            .solve_lower_triangular(self.value(b))
            .unwrap_or_else(|| Mat::from_element(self.value(b).nrows(), self.value(b).ncols(), f64::NAN));
        let ng = self.ng(l) || self.ng(b);
        self.push(v, Op::SolveLower(l, b), ng)
    }

    /// `L⁻ᵀ b` for lower-triangular `l`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let v = self
            .value(l)
            .tr_solve_lower_triangular(self.value(b))
            .unwrap_or_else(|| Mat::from_element(self.value(b).nrows(), self.value(b).ncols(), f64::NAN));
        let ng = self.ng(l) || self.ng(b);
        self.push(v, Op::SolveLowerT(l, b), ng)
    }

    /// `Σ ln Lᵢᵢ` as a `1 × 1` node.
    pub fn log_diag_sum(&mut self, l: Var) -> Var {
        let m = self.value(l);
        let s: f64 = (0..m.nrows()).map(|i| m[(i, i)].ln()).sum();
        let ng = self.ng(l);
        self.push(Mat::from_element(1, 1, s), Op::LogDiagSum(l), ng)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Adjoints {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Adjoints { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, contrib: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Input | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g * *s),
            Op::Hadamard(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.component_mul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.component_mul(self.value(*a)));
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b).transpose());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).tr_mul(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.tr_mul(self.value(*a)));
                }
            }
            Op::MatMulTN(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, self.value(*b) * g.transpose());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a) * g);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*r) {
                    let sums = Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    self.acc(grads, *r, sums);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.acc(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| gi * sigmoid(xi)));
            }
            Op::Exp(a) => self.acc(grads, *a, g.component_mul(&node.value)),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gi, xi| gi / xi));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Mat::from_element(r, c, g[(0, 0)]));
            }
            Op::Gather(src, map) => {
                let (r, c) = self.value(*src).shape();
                let mut out = Mat::zeros(r, c);
                {
                    let o = out.as_mut_slice();
                    for (k, &m) in map.iter().enumerate() {
                        if m != ZERO {
                            o[m as usize] += g.as_slice()[k];
                        }
                    }
                }
                self.acc(grads, *src, out);
            }
            Op::VStack(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.ng(p) {
                        self.acc(grads, p, g.rows(r0, n).into_owned());
                    }
                    r0 += n;
                }
            }
            Op::Cholesky(a) => {
                let l = &node.value;
                let p = phi(&l.tr_mul(&tril(g)));
                let u = l.tr_solve_lower_triangular(&p).expect("triangular factor");
                let s = l
                    .tr_solve_lower_triangular(&u.transpose())
                    .expect("triangular factor")
                    .transpose();
                let sym = (&s + s.transpose()) * 0.5;
                self.acc(grads, *a, sym);
            }
            Op::SolveLower(l, b) => {
                let lv = self.value(*l);
                let bbar = lv.tr_solve_lower_triangular(g).expect("triangular factor");
                if self.ng(*l) {
                    let lbar = -tril(&(&bbar * node.value.transpose()));
                    self.acc(grads, *l, lbar);
                }
                self.acc(grads, *b, bbar);
            }
            Op::SolveLowerT(l, b) => {
                let lv = self.value(*l);
                let bbar = lv.solve_lower_triangular(g).expect("triangular factor");
                if self.ng(*l) {
                    let lbar = -tril(&(&node.value * bbar.transpose()));
                    self.acc(grads, *l, lbar);
                }
                self.acc(grads, *b, bbar);
            }
            Op::LogDiagSum(l) => {
                let lv = self.value(*l);
                let n = lv.nrows();
                let mut out = Mat::zeros(n, n);
                for i in 0..n {
                    out[(i, i)] = g[(0, 0)] / lv[(i, i)];
                }
                self.acc(grads, *l, out);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Mat>>,
}

impl Adjoints {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v` with zeros filled in for unreachable nodes.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }
}
