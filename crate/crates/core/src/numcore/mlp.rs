use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{matvec_into, softplus, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    Softplus,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Softplus => 2,
            Activation::Tanh => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Identity,
            2 => Activation::Softplus,
            3 => Activation::Tanh,
            other => return Err(Error::data_msg(format!("unknown activation tag {other}"))),
        })
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// Row-major out×in weight matrix.
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Feedforward network parameters: a chain of affine layers with elementwise
/// activations. Adjacent layer dimensions must agree.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// He-style initialization: W ~ N(0, 2/fan_in), b = 0.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(dims.len() - 1, activations.len());
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| standard_normal(rng) * std)
                .collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_out, fan_in, w).expect("init shape"),
                bias: Tensor::zeros(vec![fan_out]),
                activation: *act,
            });
        }
        MlpParams { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::shape(
                    format!("mlp layers {k}/{}", k + 1),
                    pair[0].weight.rows(),
                    pair[1].weight.cols(),
                ));
            }
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::shape(
                    format!("mlp layer {k} bias"),
                    layer.weight.rows(),
                    layer.bias.len(),
                ));
            }
            if !layer.weight.all_finite() || !layer.bias.all_finite() {
                return Err(Error::Training {
                    path: format!("layer {k}"),
                    msg: "non-finite weights".into(),
                });
            }
        }
        Ok(())
    }

    /// Plain (non-recording) forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::shape("mlp_forward input", self.in_dim(), input.len()));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let rows = layer.weight.rows();
            let mut y = layer.bias.values().to_vec();
            matvec_into(layer.weight.values(), rows, layer.weight.cols(), &x, &mut y);
            for v in &mut y {
                *v = layer.activation.apply(*v);
            }
            x = y;
        }
        Ok(x)
    }

    /// Registers the parameters as gradient leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> MlpBinding {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
                activation: l.activation,
            })
            .collect();
        MlpBinding { layers }
    }

    /// Flat view of all parameter tensors, weights before biases per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    weight: Var,
    bias: Var,
    activation: Activation,
}

/// Tape-bound copy of an [`MlpParams`]; reusable for many forward passes on
/// the same tape so gradients accumulate across them.
pub struct MlpBinding {
    layers: Vec<BoundLayer>,
}

impl MlpBinding {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut x = input;
        for layer in &self.layers {
            let z = tape.affine(layer.weight, x, layer.bias)?;
            x = match layer.activation {
                Activation::Relu => tape.relu(z),
                Activation::Identity => z,
                Activation::Softplus => tape.softplus(z),
                Activation::Tanh => tape.tanh(z),
            };
        }
        Ok(x)
    }

    /// Leaf vars in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Box–Muller standard normal draw; kept local so parameter init does not
/// depend on a distributions crate version.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_single_layer_passes_through() {
        // W = I, b = 0, x = (1,2) → (1,2)
        let layer = Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
            activation: Activation::Identity,
        };
        let mlp = MlpParams { layers: vec![layer] };
        assert_eq!(mlp.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn softplus_of_zero_is_log_two() {
        let layer = Layer {
            weight: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
            activation: Activation::Softplus,
        };
        let mlp = MlpParams { layers: vec![layer] };
        let y = mlp.forward(&[5.0]).unwrap();
        assert!((y[0] - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::init(&[3, 2], &[Activation::Identity], &mut rng);
        assert!(mlp.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        // Independent oracle: explicit nested loops over the same weights.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = MlpParams::init(&[4, 5, 3], &[Activation::Relu, Activation::Identity], &mut rng);
        let x = [0.3, -1.2, 0.7, 2.1];
        let got = mlp.forward(&x).unwrap();

        let mut h = vec![0.0; 5];
        for r in 0..5 {
            let mut acc = mlp.layers[0].bias.values()[r];
            for c in 0..4 {
                acc += mlp.layers[0].weight.values()[r * 4 + c] * x[c];
            }
            h[r] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut y = vec![0.0; 3];
        for r in 0..3 {
            let mut acc = mlp.layers[1].bias.values()[r];
            for c in 0..5 {
                acc += mlp.layers[1].weight.values()[r * 5 + c] * h[c];
            }
            y[r] = acc;
        }
        for (a, b) in got.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::init(
            &[6, 8, 2],
            &[Activation::Tanh, Activation::Softplus],
            &mut rng,
        );
        let x: Vec<f64> = (0..6).map(|i| (i as f64) * 0.25 - 0.7).collect();
        let plain = mlp.forward(&x).unwrap();

        let mut tape = Tape::new();
        let binding = mlp.bind(&mut tape);
        let xin = tape.constant_vector(x);
        let out = binding.forward(&mut tape, xin).unwrap();
        for (a, b) in tape.value(out).values().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
