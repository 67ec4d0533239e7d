use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{shape_err, Result, VindError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => super::tape::softplus(x),
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Softplus => tape.softplus(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Mat,
    pub bias: DVector<f64>,
}

/// Dense feed-forward network. Hidden layers use their declared activation,
/// the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

/// Architecture description stored in model headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub in_dim: usize,
    pub widths: Vec<usize>,
    pub out_dim: usize,
    pub activations: Vec<Activation>,
}

impl MlpShape {
    pub fn param_count(&self) -> usize {
        let mut dims = vec![self.in_dim];
        dims.extend(&self.widths);
        dims.push(self.out_dim);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Deterministic Glorot-uniform initialization with zero biases; the final
/// layer's weights are multiplied by `output_scale`.
pub fn mlp_init(
    in_dim: usize,
    widths: &[usize],
    out_dim: usize,
    activation: Activation,
    seed: u64,
    output_scale: f64,
) -> Result<Mlp> {
    if in_dim == 0 || out_dim == 0 || widths.iter().any(|&w| w == 0) {
        return Err(VindError::InvalidConfig(format!(
            "network dimensions must be positive (in {in_dim}, widths {widths:?}, out {out_dim})"
        )));
    }
    if !(output_scale >= 0.0) || !output_scale.is_finite() {
        return Err(VindError::InvalidConfig(format!(
            "output_scale must be finite and non-negative, got {output_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![in_dim];
    dims.extend_from_slice(widths);
    dims.push(out_dim);
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(li, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if li + 1 == n_layers { output_scale } else { 1.0 };
            // row-major draw order so the flat parameter layout matches the RNG stream
            let mut data = vec![0.0; fan_in * fan_out];
            for v in data.iter_mut() {
                *v = rng.random_range(-limit..limit) * scale;
            }
            Layer {
                weight: Mat::from_row_slice(fan_out, fan_in, &data),
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(Mlp {
        layers,
        activations: vec![activation; widths.len()],
    })
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(VindError::InvalidConfig("network needs at least one layer".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(VindError::InvalidConfig(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.nrows() != l.bias.len() {
                return shape_err(format!("layer {i}: bias length {} vs {} outputs", l.bias.len(), l.weight.nrows()));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return shape_err(format!("layer {i}: input {} does not chain", l.weight.ncols()));
            }
        }
        Ok(Self { layers, activations })
    }

    pub fn from_shape(shape: &MlpShape, params: &[f64]) -> Result<Self> {
        let mut dims = vec![shape.in_dim];
        dims.extend(&shape.widths);
        dims.push(shape.out_dim);
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Mat::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        let mut net = Self::from_layers(layers, shape.activations.clone())?;
        if params.len() != net.param_count() {
            return shape_err(format!("expected {} parameters, got {}", net.param_count(), params.len()));
        }
        net.read_params(params);
        Ok(net)
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            in_dim: self.in_dim(),
            widths: self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.nrows()).collect(),
            out_dim: self.out_dim(),
            activations: self.activations.clone(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Appends parameters in canonical order: per layer, weights row-major then bias.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    out.push(l.weight[(i, j)]);
                }
            }
            out.extend(l.bias.iter());
        }
    }

    /// Reads parameters in canonical order and returns how many were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    l.weight[(i, j)] = src[k];
                    k += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = src[k];
                k += 1;
            }
        }
        k
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return shape_err(format!("network expects input of length {}, got {}", self.in_dim(), x.len()));
        }
        let mut h = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = &l.weight * h + &l.bias;
            if i < last {
                let act = self.activations[i];
                h.apply(|v| *v = act.apply(*v));
            }
        }
        Ok(h.as_slice().to_vec())
    }

    /// Applies the network to every row of `x` (`n × in` → `n × out`).
    pub fn apply_rows(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.in_dim() {
            return shape_err(format!("network expects {} columns, got {}", self.in_dim(), x.ncols()));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = &h * l.weight.transpose();
            for j in 0..next.ncols() {
                let b = l.bias[j];
                for v in next.column_mut(j).iter_mut() {
                    *v += b;
                }
            }
            if i < last {
                let act = self.activations[i];
                next.apply(|v| *v = act.apply(*v));
            }
            h = next;
        }
        Ok(h)
    }

    /// Creates tape views of this network's parameters, reading them from the
    /// flat parameter column `flat` starting at `offset`.
    pub fn bind(&self, tape: &mut Tape, flat: Var, offset: usize) -> (MlpVars, usize) {
        let mut k = offset;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (o, i) = l.weight.shape();
            let w = tape.slice_row_major(flat, k, o, i);
            k += o * i;
            let b = tape.slice_row_major(flat, k, 1, o);
            k += o;
            layers.push((w, b));
        }
        (
            MlpVars {
                layers,
                activations: self.activations.clone(),
            },
            k,
        )
    }

    /// Records this network with constant parameters.
    pub fn bind_const(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.constant(l.weight.clone());
                let b = tape.constant(Mat::from_row_slice(1, l.bias.len(), l.bias.as_slice()));
                (w, b)
            })
            .collect();
        MlpVars {
            layers,
            activations: self.activations.clone(),
        }
    }
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    activations: Vec<Activation>,
}

impl MlpVars {
    /// Row-wise forward pass on the tape (`n × in` → `n × out`).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul_nt(h, w);
            h = tape.add_row(z, b);
            if i < last {
                h = self.activations[i].record(tape, h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = mlp_init(3, &[16], 6, Activation::Tanh, 7, 1.0).unwrap();
        let b = mlp_init(3, &[16], 6, Activation::Tanh, 7, 1.0).unwrap();
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        a.write_params(&mut pa);
        b.write_params(&mut pb);
        assert_eq!(pa.len(), pb.len());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = mlp_init(3, &[16], 6, Activation::Tanh, 8, 1.0).unwrap();
        let mut pc = Vec::new();
        c.write_params(&mut pc);
        assert_ne!(pa, pc);
    }

    #[test]
    fn zero_output_scale_yields_final_bias() {
        let mut net = mlp_init(4, &[8, 8], 3, Activation::Tanh, 1, 0.0).unwrap();
        let last = net.layers_mut().len() - 1;
        net.layers_mut()[last].bias = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        for x in [[0.0, 0.0, 0.0, 0.0], [1.0, -3.0, 10.0, 0.2]] {
            assert_eq!(net.apply(&x).unwrap(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let net = mlp_init(10, &[32, 32], 3, Activation::Tanh, 0, 1.0).unwrap();
        let hand = 10 * 32 + 32 + 32 * 32 + 32 + 32 * 3 + 3;
        assert_eq!(hand, 1507);
        assert_eq!(net.param_count(), hand);
        assert_eq!(net.shape().param_count(), hand);
        let mut flat = Vec::new();
        net.write_params(&mut flat);
        assert_eq!(flat.len(), hand);
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(matches!(
            mlp_init(3, &[0], 2, Activation::Tanh, 0, 1.0),
            Err(VindError::InvalidConfig(_))
        ));
        assert!(mlp_init(0, &[4], 2, Activation::Tanh, 0, 1.0).is_err());
        assert!(mlp_init(3, &[4], 2, Activation::Tanh, 0, -1.0).is_err());
    }

    #[test]
    fn identity_network() {
        let net = Mlp::from_layers(
            vec![Layer {
                weight: Mat::identity(3, 3),
                bias: DVector::zeros(3),
            }],
            vec![],
        )
        .unwrap();
        assert_eq!(net.apply(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::from_layers(
            vec![
                Layer {
                    weight: Mat::zeros(5, 2),
                    bias: DVector::zeros(5),
                },
                Layer {
                    weight: Mat::zeros(2, 5),
                    bias: DVector::zeros(2),
                },
            ],
            vec![Activation::Tanh],
        )
        .unwrap();
        assert_eq!(net.apply(&[3.0, -4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = mlp_init(3, &[5, 4], 2, Activation::Tanh, 11, 1.0).unwrap();
        let x = [0.3, -1.2, 0.7];
        let got = net.apply(&x).unwrap();
        // explicit loops over the raw weights
        let mut h: Vec<f64> = x.to_vec();
        for (li, l) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; l.weight.nrows()];
            for (i, n) in next.iter_mut().enumerate() {
                let mut s = l.bias[i];
                for (j, hj) in h.iter().enumerate() {
                    s += l.weight[(i, j)] * hj;
                }
                *n = if li + 1 < net.layers().len() { s.tanh() } else { s };
            }
            h = next;
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        let rows = net.apply_rows(&Mat::from_row_slice(1, 3, &x)).unwrap();
        assert!((rows[(0, 0)] - got[0]).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let net = mlp_init(3, &[4], 2, Activation::Softplus, 0, 1.0).unwrap();
        assert!(matches!(net.apply(&[1.0]), Err(VindError::Shape(_))));
        assert!(matches!(net.apply_rows(&Mat::zeros(2, 2)), Err(VindError::Shape(_))));
    }

    #[test]
    fn apply_is_pure() {
        let net = mlp_init(2, &[6], 2, Activation::Softplus, 3, 1.0).unwrap();
        let before = net.clone();
        let a = net.apply(&[0.1, 0.2]).unwrap();
        let _ = net.apply(&[5.0, -5.0]).unwrap();
        assert_eq!(net.apply(&[0.1, 0.2]).unwrap(), a);
        assert_eq!(net, before);
    }

    #[test]
    fn params_round_trip_through_shape() {
        let net = mlp_init(3, &[7], 4, Activation::Softplus, 5, 0.5).unwrap();
        let mut p = Vec::new();
        net.write_params(&mut p);
        let back = Mlp::from_shape(&net.shape(), &p).unwrap();
        assert_eq!(back, net);
    }
}
