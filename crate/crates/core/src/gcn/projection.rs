use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; used by fixtures that need a purely affine net.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in ±1/√fan_in for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Matrix::random_uniform(output, input, bound, rng);
        let bias = Matrix::random_uniform(1, output, bound, rng).as_slice().to_vec();
        Self { weight, bias }
    }

    pub fn input_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }
}

/// Three affine layers `d_gcn → h → h → d_llm` with a nonlinearity between
/// consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionNet {
    pub layers: [Dense; 3],
    pub activation: Activation,
}

/// Values saved by [`ProjectionNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: [Vec<f64>; 3],
    pre_activations: [Vec<f64>; 2],
}

impl ProjectionNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            layers: [
                Dense::init(input, hidden, rng),
                Dense::init(hidden, hidden, rng),
                Dense::init(hidden, output, rng),
            ],
            activation,
        }
    }

    pub fn from_layers(layers: [Dense; 3], activation: Activation) -> Result<Self> {
        for k in 0..2 {
            if layers[k].output_width() != layers[k + 1].input_width() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    layers[k].output_width(),
                    k + 1,
                    layers[k + 1].input_width()
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(Error::Shape(format!("layer {k} bias has the wrong width")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Same shapes, all parameters zero. Doubles as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .clone()
                .map(|l| Dense::zeros(l.input_width(), l.output_width())),
            activation: self.activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].output_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[2].output_width()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {}",
                self.input_width(),
                x.len()
            )));
        }
        let z0 = self.layers[0].forward(x);
        let a0: Vec<f64> = z0.iter().map(|&z| self.activation.apply(z)).collect();
        let z1 = self.layers[1].forward(&a0);
        let a1: Vec<f64> = z1.iter().map(|&z| self.activation.apply(z)).collect();
        let out = self.layers[2].forward(&a1);
        Ok((
            out,
            ForwardCache {
                inputs: [x.to_vec(), a0, a1],
                pre_activations: [z0, z1],
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut ProjectionNet) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for k in (0..3).rev() {
            let g = &mut grads.layers[k];
            g.weight.add_outer(1.0, &delta, &cache.inputs[k]);
            for (b, d) in g.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut upstream = self.layers[k].weight.tr_mul_vec(&delta);
            if k > 0 {
                for (u, &z) in upstream.iter_mut().zip(&cache.pre_activations[k - 1]) {
                    *u *= self.activation.derivative(z);
                }
            }
            delta = upstream;
        }
        delta
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters: for each layer, row-major weights then bias.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha · other` over all parameters.
    pub fn axpy(&mut self, alpha: f64, other: &ProjectionNet) {
        for (p, g) in self.parameters_mut().zip(other.parameters()) {
            *p += alpha * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_maps_to_zero() {
        let net = ProjectionNet::from_layers(
            [Dense::zeros(3, 4), Dense::zeros(4, 4), Dense::zeros(4, 5)],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_layers_pass_input_through() {
        let eye = |n| Dense {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        };
        let net = ProjectionNet::from_layers([eye(3), eye(3), eye(3)], Activation::Identity).unwrap();
        let x = [0.5, -1.25, 7.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn matches_dense_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = ProjectionNet::new(5, 7, 3, Activation::Relu, &mut rng);
        let x: Vec<f64> = (0..5).map(|k| (k as f64 * 0.7).sin()).collect();

        // Independent oracle: explicit triple loops over (row, col).
        let layer = |l: &Dense, v: &[f64], relu: bool| -> Vec<f64> {
            let mut out = Vec::new();
            for r in 0..l.output_width() {
                let mut s = l.bias[r];
                for c in 0..l.input_width() {
                    s += l.weight[(r, c)] * v[c];
                }
                out.push(if relu && s < 0.0 { 0.0 } else { s });
            }
            out
        };
        let h0 = layer(&net.layers[0], &x, true);
        let h1 = layer(&net.layers[1], &h0, true);
        let expect = layer(&net.layers[2], &h1, false);
        let got = net.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn width_mismatch_and_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ProjectionNet::new(4, 6, 2, Activation::Relu, &mut rng);
        assert!(net.forward(&[0.0; 3]).is_err());
        assert!(ProjectionNet::from_layers(
            [Dense::zeros(3, 4), Dense::zeros(5, 4), Dense::zeros(4, 2)],
            Activation::Relu
        )
        .is_err());
    }

    #[test]
    fn parameter_layout_is_weights_then_bias() {
        let mut net = ProjectionNet::from_layers(
            [Dense::zeros(2, 2), Dense::zeros(2, 2), Dense::zeros(2, 1)],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(net.num_parameters(), 6 + 6 + 3);
        for (k, p) in net.parameters_mut().enumerate() {
            *p = k as f64;
        }
        assert_eq!(net.layers[0].bias, vec![4.0, 5.0]);
        assert_eq!(net.layers[2].weight.as_slice(), &[12.0, 13.0]);
    }
}
