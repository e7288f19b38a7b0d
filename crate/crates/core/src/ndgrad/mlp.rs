//! Fully connected networks on top of [`Graph`].
//!
//! Weights are stored `in x out` so a batch `x` (rows = samples) maps to
//! `x · W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var, LEAKY_SLOPE};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Linear | Activation::LeakyRelu)
    }

    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::dim(
                "layer bias",
                format!("1x{}", weight.cols()),
                format!("{}x{}", bias.rows(), bias.cols()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
            activation,
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = Tensor::matrix(inputs, outputs, draw(inputs * outputs)).unwrap();
        let bias = Tensor::row(&draw(outputs));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Output of layer `source` added to the pre-activation of layer `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    residual: Option<Residual>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, residual: Option<Residual>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("mlp needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim(
                    format!("mlp layer {} input", i + 1),
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        if let Some(res) = residual {
            if res.source >= res.target || res.target >= layers.len() {
                return Err(Error::Invalid(format!(
                    "residual {}->{} invalid for {} layers",
                    res.source,
                    res.target,
                    layers.len()
                )));
            }
            let (s, t) = (layers[res.source].outputs(), layers[res.target].outputs());
            if s != t {
                return Err(Error::dim("residual width", s, t));
            }
        }
        Ok(Self { layers, residual })
    }

    /// Randomly initialised network with widths `dims[0] -> ... -> dims[n]`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        residual: Option<Residual>,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() != activations.len() + 1 {
            return Err(Error::dim(
                "mlp activations",
                dims.len() - 1,
                activations.len(),
            ));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| Layer::init(d[0], d[1], a, rng))
            .collect();
        Self::new(layers, residual)
    }

    pub fn zeros(
        dims: &[usize],
        activations: &[Activation],
        residual: Option<Residual>,
    ) -> Result<Self> {
        if dims.len() != activations.len() + 1 {
            return Err(Error::dim(
                "mlp activations",
                dims.len() - 1,
                activations.len(),
            ));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| Layer::zeros(d[0], d[1], a))
            .collect();
        Self::new(layers, residual)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn residual(&self) -> Option<Residual> {
        self.residual
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    /// Trainable tensors in a fixed order: `w0, b0, w1, b1, ...`.
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

    /// Names matching [`MlpParams::tensors`], prefixed with `prefix`.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")])
            .collect()
    }

    /// Put the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                };
                LayerVars {
                    w,
                    b,
                    activation: l.activation,
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                }
            })
            .collect();
        MlpVars {
            layers,
            residual: self.residual,
        }
    }

    /// Plain evaluation without keeping a graph around.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = vars.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
    pub activation: Activation,
    pub inputs: usize,
    pub outputs: usize,
}

/// An [`MlpParams`] bound to a graph.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LayerVars>,
    pub residual: Option<Residual>,
}

impl MlpVars {
    /// Vars in the order of [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let width = g.try_value(input)?.cols();
        if width != self.layers[0].inputs {
            return Err(Error::dim("mlp input width", self.layers[0].inputs, width));
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (i, l) in self.layers.iter().enumerate() {
            let mut pre = g.affine(x, l.w, l.b)?;
            if let Some(res) = self.residual.filter(|r| r.target == i) {
                pre = g.add(pre, outputs[res.source])?;
            }
            x = l.activation.apply(g, pre)?;
            outputs.push(x);
        }
        Ok(x)
    }

    /// Gradient of the scalar network output with respect to each input row,
    /// built from graph operations so it can itself be differentiated with
    /// respect to the weights.
    ///
    /// Only linear and leaky-ReLU layers are accepted: their activation slopes
    /// are piecewise constant, so they enter as fixed masks and the second
    /// derivative through them is zero almost everywhere.
    pub fn input_gradient(&self, g: &mut Graph, input: &Tensor) -> Result<Var> {
        for l in &self.layers {
            if !l.activation.is_piecewise_linear() {
                return Err(Error::NotPiecewiseLinear(l.activation));
            }
        }
        let last = self.layers.last().unwrap();
        if last.outputs != 1 {
            return Err(Error::dim("critic output width", 1, last.outputs));
        }
        if input.cols() != self.layers[0].inputs {
            return Err(Error::dim(
                "critic input width",
                self.layers[0].inputs,
                input.cols(),
            ));
        }
        let n = input.rows();

        // Slope masks from a frozen forward pass.
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut pre = x.matmul(g.try_value(l.w)?)?;
            let b = g.try_value(l.b)?.data().to_vec();
            for r in 0..n {
                for (p, bb) in pre.row_slice_mut(r).iter_mut().zip(&b) {
                    *p += bb;
                }
            }
            if let Some(res) = self.residual.filter(|r| r.target == i) {
                pre.add_assign(&outs[res.source]);
            }
            let (mask, out) = match l.activation {
                Activation::LeakyRelu => (
                    Some(pre.map(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE })),
                    pre.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
                ),
                _ => (None, pre),
            };
            masks.push(mask);
            outs.push(out.clone());
            x = out;
        }

        // Reverse chain expressed in graph ops.
        let ones = g.constant(Tensor::filled(n, 1, 1.0));
        let mut upstream: Vec<Option<Var>> = vec![None; self.layers.len()];
        upstream[self.layers.len() - 1] = Some(ones);
        let mut grad_input = None;
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            let d_out = upstream[i].expect("every layer feeds the output");
            let d_pre = match masks[i].take() {
                Some(m) => g.mul_const(d_out, m)?,
                None => d_out,
            };
            if let Some(res) = self.residual.filter(|r| r.target == i) {
                upstream[res.source] = Some(accumulate(g, upstream[res.source], d_pre)?);
            }
            let d_in = g.matmul_t(d_pre, false, l.w, true)?;
            if i == 0 {
                grad_input = Some(d_in);
            } else {
                upstream[i - 1] = Some(accumulate(g, upstream[i - 1], d_in)?);
            }
        }
        Ok(grad_input.unwrap())
    }
}

fn accumulate(g: &mut Graph, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => g.add(a, v),
        None => Ok(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigmoid_net_outputs_half() {
        let mlp = MlpParams::zeros(
            &[3, 4, 2],
            &[Activation::LeakyRelu, Activation::Sigmoid],
            None,
        )
        .unwrap();
        let y = mlp.forward(&Tensor::row(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_linear_net_echoes_input() {
        let layer =
            Layer::new(Tensor::identity(3), Tensor::zeros(1, 3), Activation::Linear).unwrap();
        let mlp = MlpParams::new(vec![layer], None).unwrap();
        let x = Tensor::row(&[0.25, -4.0, 7.5]);
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        // layer 1: W1 = [[1, 2], [-1, 1]], b1 = (0, -1), leaky-relu
        // input (1, 0): pre = (1, 2) + (0, -1) = (1, 1) -> (1, 1)
        // layer 2: W2 = [[2, -3], [1, 1]], b2 = (0.5, 0), leaky-relu
        // pre = (2 + 1, -3 + 1) + (0.5, 0) = (3.5, -2) -> (3.5, -0.4)
        let l1 = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 1.0]).unwrap(),
            Tensor::row(&[0.0, -1.0]),
            Activation::LeakyRelu,
        )
        .unwrap();
        let l2 = Layer::new(
            Tensor::matrix(2, 2, vec![2.0, -3.0, 1.0, 1.0]).unwrap(),
            Tensor::row(&[0.5, 0.0]),
            Activation::LeakyRelu,
        )
        .unwrap();
        let mlp = MlpParams::new(vec![l1, l2], None).unwrap();
        let y = mlp.forward(&Tensor::row(&[1.0, 0.0])).unwrap();
        assert!((y.data()[0] - 3.5).abs() < 1e-15);
        assert!((y.data()[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn dims_must_chain() {
        let a = Layer::zeros(3, 4, Activation::Linear);
        let b = Layer::zeros(5, 2, Activation::Linear);
        assert!(MlpParams::new(vec![a.clone(), b], None).is_err());
        let c = Layer::zeros(4, 3, Activation::Linear);
        let err = MlpParams::new(
            vec![a, c],
            Some(Residual {
                source: 0,
                target: 1,
            }),
        );
        assert!(matches!(err, Err(Error::Dim { .. })));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mlp = MlpParams::zeros(&[3, 2], &[Activation::Linear], None).unwrap();
        assert!(matches!(
            mlp.forward(&Tensor::row(&[1.0, 2.0])),
            Err(Error::Dim { .. })
        ));
    }

    #[test]
    fn residual_adds_source_output() {
        // three identity layers, residual 0 -> 2: out = x + x = 2x for x > 0
        let id = || {
            Layer::new(
                Tensor::identity(2),
                Tensor::zeros(1, 2),
                Activation::LeakyRelu,
            )
            .unwrap()
        };
        let mlp = MlpParams::new(
            vec![id(), id(), id()],
            Some(Residual {
                source: 0,
                target: 2,
            }),
        )
        .unwrap();
        let y = mlp.forward(&Tensor::row(&[1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn linear_critic_input_gradient_is_weight() {
        let w = Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let mlp = MlpParams::new(
            vec![Layer::new(w, Tensor::scalar(0.3), Activation::Linear).unwrap()],
            None,
        )
        .unwrap();
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, true);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.0, 9.0]).unwrap();
        let gi = vars.input_gradient(&mut g, &x).unwrap();
        assert_eq!(g.value(gi).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn leaky_critic_input_gradient_hand_case() {
        // W1 = [[1, -1], [2, 1]] (in x out), b1 = 0; w2 = (3, 1)^T
        // x = (1, 0): pre = (1, -1) -> slopes (1, 0.2)
        // grad = W1 · diag(slopes) · w2 = [[1, -1], [2, 1]] · (3, 0.2) = (2.8, 6.2)
        let l1 = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 1.0]).unwrap(),
            Tensor::zeros(1, 2),
            Activation::LeakyRelu,
        )
        .unwrap();
        let l2 = Layer::new(
            Tensor::matrix(2, 1, vec![3.0, 1.0]).unwrap(),
            Tensor::scalar(0.0),
            Activation::Linear,
        )
        .unwrap();
        let mlp = MlpParams::new(vec![l1, l2], None).unwrap();
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, true);
        let gi = vars
            .input_gradient(&mut g, &Tensor::row(&[1.0, 0.0]))
            .unwrap();
        let d = g.value(gi).data();
        assert!(
            (d[0] - 2.8).abs() < 1e-15 && (d[1] - 6.2).abs() < 1e-15,
            "{d:?}"
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences_on_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = MlpParams::init(
            &[4, 6, 6, 6, 1],
            &[
                Activation::LeakyRelu,
                Activation::LeakyRelu,
                Activation::LeakyRelu,
                Activation::Linear,
            ],
            Some(Residual {
                source: 0,
                target: 2,
            }),
            &mut rng,
        )
        .unwrap();
        let x = Tensor::row(&[0.3, -0.2, 0.9, 0.1]);
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, false);
        let gi = vars.input_gradient(&mut g, &x).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (mlp.forward(&xp).unwrap().data()[0] - mlp.forward(&xm).unwrap().data()[0])
                / (2.0 * h);
            assert!((fd - g.value(gi).data()[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn input_gradient_rejects_smooth_activations() {
        let mlp =
            MlpParams::zeros(&[2, 2, 1], &[Activation::Tanh, Activation::Linear], None).unwrap();
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, true);
        assert!(matches!(
            vars.input_gradient(&mut g, &Tensor::row(&[1.0, 1.0])),
            Err(Error::NotPiecewiseLinear(Activation::Tanh))
        ));
    }
}
