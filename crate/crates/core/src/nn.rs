//! Parameterized layers and their deterministic initialization.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Seeded initializer. All weights are drawn from a single
/// xoshiro256++ stream seeded with `seed_from_u64`, in construction order.
#[derive(Debug, Clone)]
pub struct Init {
    rng: Xoshiro256PlusPlus,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Uniform in `±gain·sqrt(6 / fan_in)`.
    pub fn he_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }
}

/// Stride-1 same-padded convolution layer.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_gain(store, init, name, in_channels, out_channels, kernel, 1.0)
    }

    /// Like [`Conv::new`] with the init bound scaled by `gain`.
    pub fn with_gain<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let w = init.he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, gain);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Fully connected layer over flattened inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
        gain: f64,
    ) -> Result<Self> {
        let w = init.he_uniform(&[out_features, in_features], in_features, gain);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.out_features * self.in_features + self.out_features
    }
}
