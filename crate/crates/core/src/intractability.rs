//! Normalizer of the two-step parent density with unit variances, by
//! quadrature, compared with the Gaussian value obtained when the evolution
//! map is linear.
//!
//! With `h₀ = N(0, 1)`, `g(z₀|x₀) = N(μ₀, 1)` and the inner integral over `z₁`
//! done analytically, `κ⁻¹ = ∫ N(z; 0, 1) N(z; μ₀, 1) N(a(z); μ₁, 2) dz`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, VindError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Quadrature {
    pub lo: f64,
    pub hi: f64,
    /// Composite Simpson nodes; must be odd.
    pub nodes: usize,
    /// Largest tolerated mass outside `[lo, hi]`, relative to the integral.
    pub max_tail: f64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            lo: -12.0,
            hi: 12.0,
            nodes: 4001,
            max_tail: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoParams {
    /// Encoder mean at the first step.
    pub mu0: f64,
    /// Encoder mean at the second step.
    pub mu1: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self { mu0: 1.0, mu1: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub kappa_inv_quadrature: f64,
    /// Gaussian closed form with the map replaced by its tangent line at the
    /// mean of `h₀·g`.
    pub kappa_inv_gaussian: f64,
    pub relative_deviation: f64,
    /// Upper bound on the integrand mass outside the domain, relative to the integral.
    pub tail_bound: f64,
    pub nodes: usize,
    pub lo: f64,
    pub hi: f64,
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `κ⁻¹` for the linear map `a(z) = slope·z + offset`.
pub fn gaussian_normalizer(params: &DemoParams, slope: f64, offset: f64) -> f64 {
    // N(z;0,1) N(z;μ₀,1) = N(0;μ₀,2) N(z; μ₀/2, 1/2)
    normal_pdf(0.0, params.mu0, 2.0) * normal_pdf(slope * params.mu0 / 2.0 + offset, params.mu1, 2.0 + slope * slope / 2.0)
}

pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, nodes: usize) -> Result<f64> {
    if nodes < 3 || nodes % 2 == 0 || !(hi > lo) {
        return Err(VindError::InvalidConfig(format!(
            "Simpson rule needs an odd node count ≥ 3 and lo < hi (got {nodes}, [{lo}, {hi}])"
        )));
    }
    let h = (hi - lo) / (nodes - 1) as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..nodes - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    Ok(s * h / 3.0)
}

pub fn quadrature_normalizer(params: &DemoParams, a_map: &dyn Fn(f64) -> f64, grid: &Quadrature) -> Result<f64> {
    simpson(
        |z| normal_pdf(z, 0.0, 1.0) * normal_pdf(z, params.mu0, 1.0) * normal_pdf(a_map(z), params.mu1, 2.0),
        grid.lo,
        grid.hi,
        grid.nodes,
    )
}

pub fn toy_intractability_demo(a_map: &dyn Fn(f64) -> f64, params: &DemoParams, grid: &Quadrature) -> Result<DemoReport> {
    let value = quadrature_normalizer(params, a_map, grid)?;
    // the last factor is at most 1/√(4π); the first two integrate to a Gaussian in z
    let centre = params.mu0 / 2.0;
    let sd = 0.5f64.sqrt();
    let outside = normal_cdf((grid.lo - centre) / sd) + 1.0 - normal_cdf((grid.hi - centre) / sd);
    let tail_bound = normal_pdf(0.0, params.mu0, 2.0) * outside / (4.0 * std::f64::consts::PI).sqrt() / value;
    if !(tail_bound <= grid.max_tail) {
        return Err(VindError::WidenDomain {
            tail_mass: tail_bound,
            limit: grid.max_tail,
        });
    }
    let h = 1e-5;
    let slope = (a_map(centre + h) - a_map(centre - h)) / (2.0 * h);
    let offset = a_map(centre) - slope * centre;
    let gaussian = gaussian_normalizer(params, slope, offset);
    Ok(DemoReport {
        kappa_inv_quadrature: value,
        kappa_inv_gaussian: gaussian,
        relative_deviation: (value - gaussian).abs() / gaussian,
        tail_bound,
        nodes: grid.nodes,
        lo: grid.lo,
        hi: grid.hi,
    })
}
