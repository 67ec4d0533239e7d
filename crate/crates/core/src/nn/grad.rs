use super::tape::{Mat, Tape, Var};
use crate::error::{Result, VindError};

/// A scalar value and its partial derivatives, aligned with the flat
/// parameter ordering of whatever produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A scalar objective of a flat parameter vector.
///
/// `record` builds the objective on a tape given the parameters as an `n × 1`
/// input column. `value` defaults to a forward pass of the same recording;
/// implementors can override it with an independent evaluation route so that
/// [`finite_diff_check`] compares two separate code paths.
pub trait Objective {
    fn record(&self, tape: &mut Tape, params: Var) -> Result<Var>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.input(Mat::from_column_slice(params.len(), 1, params));
        let out = self.record(&mut tape, p)?;
        Ok(tape.scalar(out))
    }
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, params: Var) -> Result<Var> {
        self(tape, params)
    }
}

/// Exact reverse-mode gradient of `objective` at `params`.
pub fn grad_scalar<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Result<GradBundle> {
    let mut tape = Tape::new();
    let p = tape.input(Mat::from_column_slice(params.len(), 1, params));
    let out = objective.record(&mut tape, p)?;
    tape.check_finite()?;
    let adj = tape.backward(out);
    let grad = adj.get_or_zeros(&tape, p).as_slice().to_vec();
    let value = tape.scalar(out);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(VindError::Numerical(format!("non-finite partial for parameter {i}")));
    }
    Ok(GradBundle { value, grad })
}

/// Largest component-wise relative error between the reverse-mode gradient
/// and central differences with per-component step `step · (1 + |pᵢ|)`.
pub fn finite_diff_check<O: Objective + ?Sized>(objective: &O, point: &[f64], step: f64) -> Result<f64> {
    Ok(finite_diff_report(objective, point, step)?.max_rel_err)
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn finite_diff_report<O: Objective + ?Sized>(objective: &O, point: &[f64], step: f64) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(VindError::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = grad_scalar(objective, point)?.grad;
    let mut numeric = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let h = step * (1.0 + point[i].abs());
        p[i] = point[i] + h;
        let up = objective.value(&p)?;
        p[i] = point[i] - h;
        let down = objective.value(&p)?;
        p[i] = point[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-12);
        let e = (a - n).abs() / denom;
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
