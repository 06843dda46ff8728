use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Linear,
}

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor2>;
    fn params_mut(&mut self) -> Vec<&mut Tensor2>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Fully connected layer `act(x W + b)`; `weight` is `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Dense {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor2::from_vec(input, output, data).expect("sized"),
            bias: Tensor2::zeros(1, output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
}

impl Mlp {
    /// Builds an MLP with layer widths `dims` (input first). Every layer but
    /// the last uses `hidden`; the last uses `output` and then `head`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid MLP widths {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Ok(Self { layers, head })
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(Error::Shape(format!("layer {i} bias shape {:?}", l.bias.shape())));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Plain forward pass; rows of `input` are independent samples.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} input columns, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        input.ensure_finite("MLP input")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = bound.forward(&mut tape, x);
        let out = tape.value(y).clone();
        out.ensure_finite("MLP output")?;
        Ok(out)
    }

    /// Registers every weight and bias on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.param(l.weight.clone()),
                    tape.param(l.bias.clone()),
                    l.activation,
                )
            })
            .collect();
        BoundMlp {
            layers,
            head: self.head,
        }
    }

    /// Registers parameters as constants; used when this network must not
    /// receive gradients from the current loss.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.constant(l.weight.clone()),
                    tape.constant(l.bias.clone()),
                    l.activation,
                )
            })
            .collect();
        BoundMlp {
            layers,
            head: self.head,
        }
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor2> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
    head: Head,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Var {
        let mut x = input;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(x, w);
            let z = tape.add_row(z, b);
            x = match act {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
                Activation::Identity => z,
            };
        }
        match self.head {
            Head::Softmax => tape.softmax_rows(x),
            Head::Linear => x,
        }
    }

    /// Parameter leaves in [`Parameterized::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor2> {
        self.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }
}
