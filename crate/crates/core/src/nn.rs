//! Fully connected networks used for the extractor, projection and
//! prediction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{gelu, Tape, Var};
use crate::tensor::{gemm, Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalActivation {
    None,
    L2Normalize,
}

/// Layer widths of an MLP. Activations sit between layers; the last linear
/// layer is followed only by `final_activation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Gelu,
            final_activation: FinalActivation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("mlp", format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    /// Glorot-uniform weights, zero biases, registered under `prefix`.
    pub fn init(&self, prefix: &str, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut ps = ParamSet::new();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            ps.insert(Self::weight_name(prefix, l), Tensor::from_raw(&[fan_in, fan_out], w))?;
            ps.insert(Self::bias_name(prefix, l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(ps)
    }

    fn check_params(&self, prefix: &str, params: &ParamSet) -> Result<()> {
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let w = params.value(&Self::weight_name(prefix, l))?;
            let b = params.value(&Self::bias_name(prefix, l))?;
            if w.shape() != [fan_in, fan_out] || b.len() != fan_out {
                return Err(Error::config(
                    format!("{prefix}.{l}"),
                    format!(
                        "expected weight {fan_in}x{fan_out} and bias {fan_out}, got {:?} and {:?}",
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim {
            return Err(Error::config(
                "input",
                format!("width {} but network expects {}", input.cols(), self.input_dim),
            ));
        }
        Ok(())
    }
}

fn check_layer(prefix: &str, layer: usize, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(
            format!("{prefix} layer {layer}"),
            "non-finite activation",
        ))
    }
}

/// Recorded forward pass; the returned node can be fed into a loss and
/// differentiated with [`Tape::backward`].
pub fn mlp_forward(spec: &MlpSpec, prefix: &str, params: &ParamSet, input: Var, tape: &mut Tape) -> Result<Var> {
    spec.check_params(prefix, params)?;
    spec.check_input(tape.value(input))?;
    let n_layers = spec.hidden_dims.len() + 1;
    let mut x = input;
    for l in 0..n_layers {
        let w = tape.param(params, &MlpSpec::weight_name(prefix, l))?;
        let b = tape.param(params, &MlpSpec::bias_name(prefix, l))?;
        let z = tape.matmul(x, w);
        x = tape.add_row(z, b);
        if l + 1 < n_layers {
            x = match spec.activation {
                Activation::Gelu => tape.gelu(x),
                Activation::Relu => tape.relu(x),
            };
        }
        check_layer(prefix, l, tape.value(x))?;
    }
    if spec.final_activation == FinalActivation::L2Normalize {
        x = tape.l2_normalize(x)?;
    }
    Ok(x)
}

/// Forward pass without recording, for the teacher and for evaluation.
/// Produces bit-identical values to [`mlp_forward`].
pub fn mlp_infer(spec: &MlpSpec, prefix: &str, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    spec.check_params(prefix, params)?;
    spec.check_input(input)?;
    let n_layers = spec.hidden_dims.len() + 1;
    let mut x = input.clone();
    for l in 0..n_layers {
        let w = params.value(&MlpSpec::weight_name(prefix, l))?;
        let b = params.value(&MlpSpec::bias_name(prefix, l))?;
        let mut z = Tensor::zeros(&[x.rows(), w.cols()]);
        gemm(&x, w, Trans { a: false, b: false }, 0.0, &mut z);
        let c = z.cols();
        for row in z.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        if l + 1 < n_layers {
            z = match spec.activation {
                Activation::Gelu => z.map(gelu),
                Activation::Relu => z.map(|v| v.max(0.0)),
            };
        }
        check_layer(prefix, l, &z)?;
        x = z;
    }
    if spec.final_activation == FinalActivation::L2Normalize {
        let c = x.cols();
        for (r, row) in x.data_mut().chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::numeric("l2_normalize", format!("row {r} has norm 0")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_layer(ps: &mut ParamSet, prefix: &str, l: usize, w: Tensor, b: Tensor) {
        ps.get_mut(&MlpSpec::weight_name(prefix, l)).unwrap().value = w;
        ps.get_mut(&MlpSpec::bias_name(prefix, l)).unwrap().value = b;
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let spec = MlpSpec::new(3, &[4], 2);
        let mut ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (_, p) in ps.iter_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, 9.]).unwrap();
        let out = mlp_infer(&spec, "m", &ps, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_copies_input() {
        let spec = MlpSpec::new(3, &[], 3);
        let mut ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        set_layer(&mut ps, "m", 0, Tensor::identity(3), Tensor::zeros(&[3]));
        let x = Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = mlp_forward(&spec, "m", &ps, xv, &mut tape).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        // W1 = [[1, -1], [2, 0.5]], b1 = [0.1, 0.2], relu, W2 = [[3], [-2]], b2 = [0.5]
        let mut spec = MlpSpec::new(2, &[2], 1);
        spec.activation = Activation::Relu;
        let mut ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        set_layer(
            &mut ps,
            "m",
            0,
            Tensor::matrix(2, 2, vec![1., -1., 2., 0.5]).unwrap(),
            Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap(),
        );
        set_layer(
            &mut ps,
            "m",
            1,
            Tensor::matrix(2, 1, vec![3., -2.]).unwrap(),
            Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        );
        // input [1, 0]: hidden = relu([1 + 0.1, -1 + 0.2]) = [1.1, 0]; out = 3.3 + 0.5
        let hidden = [f64::max(1.0 * 1.0 + 0.0 * 2.0 + 0.1, 0.0), f64::max(-1.0 + 0.2, 0.0)];
        let expected = hidden[0] * 3.0 + hidden[1] * -2.0 + 0.5;
        let x = Tensor::matrix(1, 2, vec![1., 0.]).unwrap();
        let out = mlp_infer(&spec, "m", &ps, &x).unwrap();
        assert!((out.item() - expected).abs() < 1e-15);
        assert!((expected - 3.8).abs() < 1e-12);
    }

    #[test]
    fn l2_output_rows_are_unit() {
        let mut spec = MlpSpec::new(5, &[7], 4);
        spec.final_activation = FinalActivation::L2Normalize;
        let ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let out = mlp_infer(&spec, "m", &ps, &x).unwrap();
        for r in 0..3 {
            let n: f64 = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let spec = MlpSpec::new(3, &[4], 2);
        let ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::matrix(1, 2, vec![1., 2.]).unwrap();
        assert!(matches!(mlp_infer(&spec, "m", &ps, &x), Err(Error::Config { .. })));
    }

    #[test]
    fn infer_matches_recorded_forward_bitwise() {
        let spec = MlpSpec::new(6, &[8, 5], 3);
        let ps = spec.init("m", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = mlp_forward(&spec, "m", &ps, xv, &mut tape).unwrap();
        assert_eq!(tape.value(y), &mlp_infer(&spec, "m", &ps, &x).unwrap());
    }
}
