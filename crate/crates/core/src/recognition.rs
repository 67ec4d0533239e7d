//! Per-time-step encoder: means `M` and diagonal precisions `Λ` from the data.

use crate::error::{shape_err, Result, VindError};
use crate::nn::{mlp_init, Activation, Mat, Mlp, MlpVars, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionNet {
    pub mu_net: Mlp,
    /// Emits log-precisions.
    pub prec_net: Mlp,
}

/// Stacked encoder outputs for one trial, both `T × d_Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub m: Mat,
    pub lambda: Mat,
}

impl RecognitionNet {
    pub fn init(d_x: usize, d_z: usize, widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Ok(Self {
            mu_net: mlp_init(d_x, widths, d_z, activation, seed, 1.0)?,
            prec_net: mlp_init(d_x, widths, d_z, activation, seed.wrapping_add(1), 1.0)?,
        })
    }

    pub fn d_x(&self) -> usize {
        self.mu_net.in_dim()
    }

    pub fn d_z(&self) -> usize {
        self.mu_net.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mu_net.param_count() + self.prec_net.param_count()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.mu_net.write_params(out);
        self.prec_net.write_params(out);
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let k = self.mu_net.read_params(src);
        k + self.prec_net.read_params(&src[k..])
    }

    pub fn encode(&self, x: &Mat) -> Result<Encoding> {
        if x.ncols() != self.d_x() {
            return shape_err(format!("observations have {} columns, encoder expects {}", x.ncols(), self.d_x()));
        }
        let m = self.mu_net.apply_rows(x)?;
        let lambda = self.prec_net.apply_rows(x)?.map(f64::exp);
        for t in 0..x.nrows() {
            let bad_m = m.row(t).iter().any(|v| !v.is_finite());
            let bad_l = lambda.row(t).iter().any(|v| !v.is_finite() || *v <= 0.0);
            if bad_m || bad_l {
                return Err(VindError::Numerical(format!("encoder output not finite at time {t}")));
            }
        }
        Ok(Encoding { m, lambda })
    }

    pub fn bind(&self, tape: &mut Tape, flat: Var, offset: usize) -> (RecognitionVars, usize) {
        let (mu, k) = self.mu_net.bind(tape, flat, offset);
        let (prec, k) = self.prec_net.bind(tape, flat, k);
        (RecognitionVars { mu, prec }, k)
    }
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.nrows() == 0
    }

    /// `Λ·M`, row by row.
    pub fn weighted_mean(&self) -> Mat {
        self.lambda.component_mul(&self.m)
    }
}

/// `−½ Σ_t (z_t − M_t)ᵀ diag(Λ_t) (z_t − M_t)`, without normalizer.
pub fn recognition_logdensity(enc: &Encoding, z: &Mat) -> Result<f64> {
    if z.shape() != enc.m.shape() {
        return shape_err(format!("path {:?} vs encoding {:?}", z.shape(), enc.m.shape()));
    }
    let r = z - &enc.m;
    Ok(-0.5 * r.component_mul(&r).component_mul(&enc.lambda).sum())
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct RecognitionVars {
    mu: MlpVars,
    prec: MlpVars,
}

impl RecognitionVars {
    /// `(M, Λ)` as `T × d_Z` nodes.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let m = self.mu.forward(tape, x);
        let log_l = self.prec.forward(tape, x);
        let l = tape.exp(log_l);
        (m, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, Objective};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(t: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(t, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_precision_net_gives_unit_precision() {
        let mut net = RecognitionNet::init(4, 2, &[6], Activation::Tanh, 1).unwrap();
        for l in net.prec_net.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let enc = net.encode(&data(5, 4, 2)).unwrap();
        assert!(enc.lambda.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_step_encoding() {
        let net = RecognitionNet::init(3, 2, &[5], Activation::Tanh, 3).unwrap();
        let x = data(1, 3, 4);
        let enc = net.encode(&x).unwrap();
        assert_eq!(enc.len(), 1);
        let want = net.mu_net.apply(&[x[(0, 0)], x[(0, 1)], x[(0, 2)]]).unwrap();
        assert_eq!(enc.m.row(0).iter().copied().collect::<Vec<_>>(), want);
    }

    #[test]
    fn rows_match_independent_application() {
        let net = RecognitionNet::init(3, 2, &[7, 5], Activation::Softplus, 5).unwrap();
        let x = data(9, 3, 6);
        let enc = net.encode(&x).unwrap();
        for t in 0..9 {
            let xt: Vec<f64> = x.row(t).iter().copied().collect();
            let m = net.mu_net.apply(&xt).unwrap();
            let l: Vec<f64> = net.prec_net.apply(&xt).unwrap().into_iter().map(f64::exp).collect();
            for i in 0..2 {
                assert!((enc.m[(t, i)] - m[i]).abs() < 1e-14);
                assert!((enc.lambda[(t, i)] - l[i]).abs() < 1e-14 * l[i]);
            }
        }
    }

    #[test]
    fn non_finite_output_names_time_index() {
        let net = RecognitionNet::init(2, 1, &[3], Activation::Tanh, 0).unwrap();
        let mut x = data(4, 2, 1);
        x[(2, 0)] = f64::NAN;
        let err = net.encode(&x).unwrap_err().to_string();
        assert!(err.contains("time 2"), "{err}");
    }

    #[test]
    fn logdensity_cases() {
        let enc = Encoding {
            m: Mat::from_row_slice(1, 1, &[1.0]),
            lambda: Mat::from_row_slice(1, 1, &[4.0]),
        };
        assert_eq!(recognition_logdensity(&enc, &enc.m).unwrap(), 0.0);
        let z = Mat::from_row_slice(1, 1, &[1.5]);
        assert!((recognition_logdensity(&enc, &z).unwrap() + 0.5).abs() < 1e-15);
        let doubled = Encoding {
            m: enc.m.clone(),
            lambda: &enc.lambda * 2.0,
        };
        assert!((recognition_logdensity(&doubled, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(recognition_logdensity(&enc, &Mat::zeros(2, 1)).is_err());
    }

    struct InZ(Encoding);

    impl Objective for InZ {
        fn record(&self, tape: &mut Tape, p: Var) -> Result<Var> {
            let (t, d) = self.0.m.shape();
            let z = tape.slice_row_major(p, 0, t, d);
            let m = tape.constant(self.0.m.clone());
            let l = tape.constant(self.0.lambda.clone());
            let r = tape.sub(z, m);
            let rl = tape.hadamard(r, l);
            let q = tape.dot(rl, r);
            Ok(tape.scale(q, -0.5))
        }

        fn value(&self, p: &[f64]) -> Result<f64> {
            let (t, d) = self.0.m.shape();
            recognition_logdensity(&self.0, &Mat::from_row_slice(t, d, p))
        }
    }

    #[test]
    fn logdensity_gradient_matches_finite_differences() {
        let net = RecognitionNet::init(3, 2, &[5], Activation::Tanh, 8).unwrap();
        let enc = net.encode(&data(6, 3, 9)).unwrap();
        let z: Vec<f64> = data(6, 2, 10).transpose().as_slice().to_vec();
        let err = finite_diff_check(&InZ(enc), &z, 1e-5).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn tape_encoding_matches_plain_route() {
        let net = RecognitionNet::init(3, 2, &[5], Activation::Tanh, 11).unwrap();
        let x = data(4, 3, 12);
        let mut flat = Vec::new();
        net.write_params(&mut flat);
        assert_eq!(flat.len(), net.param_count());
        let mut tape = Tape::new();
        let fv = tape.input(Mat::from_column_slice(flat.len(), 1, &flat));
        let (vars, end) = net.bind(&mut tape, fv, 0);
        assert_eq!(end, flat.len());
        let xv = tape.constant(x.clone());
        let (m, l) = vars.encode(&mut tape, xv);
        let enc = net.encode(&x).unwrap();
        assert!((tape.value(m) - &enc.m).abs().max() < 1e-14);
        assert!((tape.value(l) - &enc.lambda).abs().max() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn editing_one_step_changes_only_that_row(seed in 0u64..500, t in 2usize..10, pick in 0usize..100) {
            let net = RecognitionNet::init(3, 2, &[4], Activation::Tanh, seed).unwrap();
            let x = data(t, 3, seed + 1);
            let row = pick % t;
            let mut y = x.clone();
            y[(row, 1)] += 0.7;
            let a = net.encode(&x).unwrap();
            let b = net.encode(&y).unwrap();
            for s in 0..t {
                if s != row {
                    prop_assert_eq!(a.m.row(s), b.m.row(s));
                    prop_assert_eq!(a.lambda.row(s), b.lambda.row(s));
                }
            }
        }

        #[test]
        fn permuting_trials_permutes_encodings(seed in 0u64..500) {
            let net = RecognitionNet::init(3, 2, &[4], Activation::Tanh, seed).unwrap();
            let trials: Vec<Mat> = (0..3).map(|i| data(4, 3, seed * 7 + i)).collect();
            let fwd: Vec<Encoding> = trials.iter().map(|x| net.encode(x).unwrap()).collect();
            let rev: Vec<Encoding> = trials.iter().rev().map(|x| net.encode(x).unwrap()).collect();
            for i in 0..3 {
                prop_assert_eq!(&fwd[i], &rev[2 - i]);
            }
        }
    }
}
