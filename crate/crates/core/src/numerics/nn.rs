//! Small layer helpers built on [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Affine map `x W + b` over the last axis; `x` is `[n, fan_in]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (self.fan_in + self.fan_out) as f64).sqrt();
        params.register(
            &self.w(),
            Tensor::uniform(&[self.fan_in, self.fan_out], bound, rng),
        )?;
        params.register(&self.b(), Tensor::zeros(&[self.fan_out]))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(params, &self.w())?;
        let b = g.param(params, &self.b())?;
        let y = g.matmul(x, w)?;
        g.add_bcast(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Stack of [`Linear`] layers with an activation between them (none after
/// the last layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(name: &str, sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, s)| Linear::new(format!("{name}.l{i}"), s[0], s[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(params, rng))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        mut x: Var,
    ) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, params, x)?;
            if i < last {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}
