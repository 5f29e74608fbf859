//! Parameterized layers shared by the partition and recognition models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is positive");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// He-normal weights (`std = √(gain/fan_in)`), zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (gain / in_features as f64).sqrt();
        let weight = if std > 0.0 {
            normal_tensor(rng, &[out_features, in_features], std)
        } else {
            Tensor::zeros(&[out_features, in_features])
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), weight)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

/// 3×3 "same" convolution with stride 1.
/// Square convolution, stride 1, "same" zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("`{name}`: kernel {kernel} must be odd")));
        }
        let std = (gain / (in_channels * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(rng, &[out_channels, in_channels, kernel, kernel], std),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), 1, self.kernel / 2)
    }
}

/// Two-layer perceptron `in → hidden → out` with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut R) -> Result<Self> {
        let (i, h, o) = dims;
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), i, h, 2.0, rng)?,
            output: Linear::new(store, &format!("{name}.fc2"), h, o, 1.0, rng)?,
        })
    }

    /// Returns pre-activation outputs (logits).
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, p, h)
    }
}
