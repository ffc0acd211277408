//! Fully connected layers shared by the autoencoder models.

use crate::error::{Error, Result};
use crate::numerics::tape::broadcast_zip;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::persist::{BlobReader, BlobWriter};

/// Negative slope of every LeakyReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Kaiming-uniform bound for fan-in `fan_in` and LeakyReLU slope `slope`.
pub fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn kaiming(fan_in: usize, fan_out: usize, slope: f64, rng: &mut Rng) -> Self {
        let bound = kaiming_bound(fan_in, slope);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        broadcast_zip(&x.matmul(&self.weight)?, &self.bias, |a, b| a + b)
    }
}

/// Stack of dense layers with LeakyReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub slope: f64,
    /// Whether the last layer is followed by the activation too.
    pub activate_last: bool,
}

/// Parameter handles of an [`Mlp`] registered on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    vars: Vec<(Var, Var)>,
    slope: f64,
    activate_last: bool,
}

impl Mlp {
    /// Layer sizes `sizes[0] -> sizes[1] -> ...`, Kaiming-initialized.
    pub fn new(sizes: &[usize], slope: f64, activate_last: bool, rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::kaiming(w[0], w[1], slope, rng))
            .collect();
        Self {
            layers,
            slope,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp input", x.shape(), &[self.input_dim()]));
        }
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.activate_last {
                let s = self.slope;
                h = h.map(|v| leaky_relu(v, s));
            }
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
            slope: self.slope,
            activate_last: self.activate_last,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub(crate) fn write(&self, w: &mut BlobWriter) {
        w.u32(self.layers.len());
        for l in &self.layers {
            w.u32(l.fan_in()).u32(l.fan_out());
        }
        for l in &self.layers {
            w.tensor(&l.weight).tensor(&l.bias);
        }
    }

    pub(crate) fn read(r: &mut BlobReader<'_>, slope: f64, activate_last: bool) -> Result<Self> {
        let n = r.u32()?;
        let dims: Vec<(usize, usize)> = (0..n)
            .map(|_| Ok((r.u32()?, r.u32()?)))
            .collect::<Result<_>>()?;
        let layers = dims
            .into_iter()
            .map(|(i, o)| {
                Ok(Dense {
                    weight: r.tensor(i, o)?,
                    bias: r.tensor(1, o)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            slope,
            activate_last,
        })
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.vars.len().saturating_sub(1);
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i < last || self.activate_last {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }
}
