//! Multilayer perceptrons with named parameters.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered name-to-tensor map used for optimizer state and checkpoints.
pub type ParamMap = IndexMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::LeakyRelu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Linear,
            1 => Activation::LeakyRelu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "leaky_relu" | "lrelu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl DenseLayer {
    /// `weights` is `out x in`, `bias` has length `out`.
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || weights.rows() != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "dense_layer",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Layer widths and activations; the input width comes first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl MlpSpec {
    pub fn new(input: usize) -> Self {
        MlpSpec {
            input,
            layers: Vec::new(),
        }
    }

    pub fn layer(mut self, width: usize, activation: Activation) -> Self {
        self.layers.push((width, activation));
        self
    }

    /// Hidden layers of equal activation followed by an output layer.
    pub fn with_hidden(input: usize, hidden: &[usize], hidden_act: Activation, output: usize, output_act: Activation) -> Self {
        let mut spec = MlpSpec::new(input);
        for &h in hidden {
            spec = spec.layer(h, hidden_act);
        }
        spec.layer(output, output_act)
    }
}

/// Tape handles for the weights and biases of an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Collects this network's gradients under its parameter names.
    pub fn gradients(&self, grads: &Gradients) -> ParamMap {
        let mut out = ParamMap::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.insert(weight_name(i), grads.wrt(*w).clone());
            out.insert(bias_name(i), grads.wrt(*b).clone());
        }
        out
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

fn weight_name(i: usize) -> String {
    format!("layer{i}.weights")
}

fn bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "mlp_chain",
                    left: pair[0].weights.shape().to_vec(),
                    right: pair[1].weights.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Uniform fan-based initialization, `s = sqrt(6 / (fan_in + fan_out))`,
    /// with zero biases. Pure function of `(spec, seed)`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for &(fan_out, act) in &spec.layers {
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::invalid("layer widths must be positive"));
            }
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
            layers.push(DenseLayer::new(
                Tensor::matrix(fan_out, fan_in, w)?,
                Tensor::zeros(&[fan_out]),
                act,
            )?);
            fan_in = fan_out;
        }
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(DenseLayer::out_dim)
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// Parameters in layer order, weights before bias.
    pub fn params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.insert(weight_name(i), layer.weights.clone());
            out.insert(bias_name(i), layer.bias.clone());
        }
        out
    }

    /// Rebuilds a network from flattened parameters and per-layer activations.
    pub fn from_params(params: &ParamMap, activations: &[Activation]) -> Result<Self> {
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &act) in activations.iter().enumerate() {
            let get = |name: String| params.get(&name).cloned().ok_or(Error::MissingTensor(name));
            layers.push(DenseLayer::new(get(weight_name(i))?, get(bias_name(i))?, act)?);
        }
        if params.len() != 2 * activations.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                2 * activations.len(),
                params.len()
            )));
        }
        Mlp::new(layers)
    }

    /// Overwrites parameters in place; shapes must match.
    pub fn load_params(&mut self, params: &ParamMap) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, slot) in [(weight_name(i), &mut layer.weights), (bias_name(i), &mut layer.bias)] {
                let t = params.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if t.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_params",
                        left: slot.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    /// Records parameters on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        MlpVars {
            layers: self.layers.iter().map(|l| (put(&l.weights), put(&l.bias))).collect(),
        }
    }

    fn affine(tape: &mut Tape, (w, b): (Var, Var), h: Var) -> Result<Var> {
        let wt = tape.transpose(w)?;
        let pre = tape.matmul(h, wt)?;
        tape.add_row_vector(pre, b)
    }

    /// Forward pass over a batch matrix (one example per row).
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        let mut h = input;
        for (layer, &wb) in self.layers.iter().zip(&vars.layers) {
            let pre = Self::affine(tape, wb, h)?;
            h = match layer.activation {
                Activation::Linear => pre,
                Activation::LeakyRelu => tape.leaky_relu(pre)?,
                Activation::Tanh => tape.tanh(pre)?,
                Activation::Sigmoid => tape.sigmoid(pre)?,
            };
        }
        Ok(h)
    }

    /// Forward pass together with directional derivatives.
    ///
    /// `tangents` holds `reps` input directions per example, stacked so rows
    /// `b * reps .. (b + 1) * reps` belong to example `b`. Returns the output
    /// batch and the pushed-forward directions in the same layout. Every step
    /// is an ordinary tape op, so the result is itself differentiable with
    /// respect to the parameters.
    pub fn jvp_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var, tangents: Var, reps: usize) -> Result<(Var, Var)> {
        let mut h = input;
        let mut t = tangents;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            let wt = tape.transpose(w)?;
            let pre = tape.matmul(h, wt)?;
            let pre = tape.add_row_vector(pre, b)?;
            let t_pre = tape.matmul(t, wt)?;
            let (out, slope) = match layer.activation {
                Activation::Linear => (pre, None),
                Activation::LeakyRelu => (tape.leaky_relu(pre)?, Some(tape.leaky_relu_slope(pre)?)),
                Activation::Tanh => {
                    let y = tape.tanh(pre)?;
                    let y2 = tape.square(y)?;
                    let neg = tape.scale(y2, -1.0)?;
                    (y, Some(tape.offset(neg, 1.0)?))
                }
                Activation::Sigmoid => {
                    let y = tape.sigmoid(pre)?;
                    let neg = tape.scale(y, -1.0)?;
                    let one_minus = tape.offset(neg, 1.0)?;
                    (y, Some(tape.mul(y, one_minus)?))
                }
            };
            h = out;
            t = match slope {
                None => t_pre,
                Some(d) => {
                    let d = if reps == 1 { d } else { tape.repeat_rows(d, reps)? };
                    tape.mul(d, t_pre)?
                }
            };
        }
        Ok((h, t))
    }

    /// Evaluates the network on a vector or a batch matrix.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let in_dim = self.in_dim().unwrap_or(input.cols());
        let is_vector = input.rank() == 1;
        if !(is_vector || input.rank() == 2) || input.cols() != in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                left: input.shape().to_vec(),
                right: vec![in_dim],
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(if is_vector { input.reshape(&[1, in_dim])? } else { input.clone() });
        let y = self.forward_tape(&mut tape, &vars, x)?;
        let out = tape.value(y).clone();
        if is_vector {
            let n = out.len();
            out.reshape(&[n])
        } else {
            Ok(out)
        }
    }
}
