use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<E: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<E>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Config(format!("{name}: linear widths must be positive")));
        }
        let weight = params.add(format!("{name}.weight"), uniform_fan_in(&[fan_out, fan_in], fan_in, rng))?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, bound[self.weight.index()], bound[self.bias.index()])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<E>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.weight.index()], bound[self.bias.index()], self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        params: &mut ParamSet<E>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Fan-in is taken from the second weight axis, as for an ordinary conv weight.
        let fan_in = out_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            uniform_fan_in(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, bound[self.weight.index()], bound[self.bias.index()], self.stride, self.pad)
    }
}

/// One stage of a [`Sequential`] stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Activation(Activation),
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
    /// `[N, prod(dims)] -> [N, dims...]`
    Unflatten(Vec<usize>),
}

impl Layer {
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &[Var], x: Var) -> Result<Var> {
        match self {
            Layer::Linear(l) => l.forward(tape, bound, x),
            Layer::Conv(c) => c.forward(tape, bound, x),
            Layer::ConvTranspose(c) => c.forward(tape, bound, x),
            Layer::Activation(Activation::Relu) => Ok(tape.relu(x)),
            Layer::Activation(Activation::Sigmoid) => Ok(tape.sigmoid(x)),
            Layer::Flatten => Ok(tape.flatten(x)),
            Layer::Unflatten(dims) => {
                let mut shape = vec![tape.shape(x)[0]];
                shape.extend_from_slice(dims);
                tape.reshape(x, &shape)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, bound: &[Var], mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, bound, x)?;
        }
        Ok(x)
    }
}
