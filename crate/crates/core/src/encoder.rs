//! Feedforward context-window label posterior network with manual backprop.
//!
//! Each frame is the concatenation of `2 * context + 1` neighbouring feature
//! vectors (edges replicate the first/last frame), followed by fully connected
//! hidden layers and a `K`-way log-softmax output.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::logspace::log_softmax_rows;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Tanh => {
                let y = pre.tanh();
                T::one() - y * y
            }
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Frames stacked on each side of the centre frame.
    pub context: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn stacked_dim(&self) -> usize {
        self.input_dim * (2 * self.context + 1)
    }

    /// Width of the last layer before the output projection.
    pub fn encoder_out_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.stacked_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("encoder widths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.stacked_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    pub layers: Vec<Dense<T>>,
    version: u64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    /// Input to each layer, after dropout.
    inputs: Vec<Array2<T>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<T>>,
    masks: Vec<Option<Array2<T>>>,
    probs: Array2<T>,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    /// `T x K` log label posteriors.
    pub log_probs: Array2<T>,
    /// Output of the last hidden layer (input to the output projection).
    pub encoder_out: Array2<T>,
    pub cache: EncoderCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> EncoderGrads<T> {
    pub fn zeros_like(enc: &Encoder<T>) -> Self {
        Self {
            layers: enc
                .layers
                .iter()
                .map(|l| Dense { weight: Array2::zeros(l.weight.dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("contiguous")])
            .collect()
    }
}

/// Stacks `2 * context + 1` frames around each frame, replicating edges.
pub fn stack_context<T: Real>(features: ArrayView2<'_, T>, context: usize) -> Array2<T> {
    let (frames, dim) = features.dim();
    let width = 2 * context + 1;
    Array2::from_shape_fn((frames, dim * width), |(t, j)| {
        let offset = j / dim;
        let src = (t + offset).saturating_sub(context).min(frames.saturating_sub(1));
        features[[src, j % dim]]
    })
}

impl<T: Real> Encoder<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.random_range(-limit..limit)));
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { config, layers, version: 0 })
    }

    pub fn from_layers(config: EncoderConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len()
            || dims.iter().zip(&layers).any(|(&d, l)| l.weight.dim() != d || l.bias.len() != d.1)
        {
            return Err(Error::Shape("encoder layers do not match config".into()));
        }
        Ok(Self { config, layers, version: 0 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable parameter slices in a fixed order (weight, bias per layer).
    /// Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [l.weight.as_slice_mut().expect("standard layout"), l.bias.as_slice_mut().expect("contiguous")]
            })
            .collect()
    }

    /// `0.5 * l2 * sum(W^2)` over weight matrices (biases excluded).
    pub fn l2_penalty(&self, l2: T) -> T {
        let sq: T = self.layers.iter().map(|l| l.weight.iter().map(|&w| w * w).sum::<T>()).sum();
        T::lit(0.5) * l2 * sq
    }

    pub fn forward(&self, features: ArrayView2<'_, T>, train_mode: bool, seed: u64) -> Result<EncoderOutput<T>> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, encoder expects {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let dropout = if train_mode { self.config.dropout } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 - dropout);

        let n_hidden = self.config.hidden.len();
        let mut inputs = Vec::with_capacity(n_hidden + 1);
        let mut pre = Vec::with_capacity(n_hidden);
        let mut masks = Vec::with_capacity(n_hidden);
        let mut h = stack_context(features, self.config.context);
        for layer in &self.layers[..n_hidden] {
            let z = h.dot(&layer.weight) + &layer.bias;
            let mut a = z.mapv(|v| self.config.activation.apply(v));
            let mask = (dropout > 0.0).then(|| {
                Array2::from_shape_fn(
                    a.dim(),
                    |_| if rng.random::<f64>() < dropout { T::zero() } else { T::one() / keep },
                )
            });
            if let Some(m) = &mask {
                a *= m;
            }
            inputs.push(h);
            pre.push(z);
            masks.push(mask);
            h = a;
        }
        let out_layer = &self.layers[n_hidden];
        let logits = h.dot(&out_layer.weight) + &out_layer.bias;
        let log_probs = log_softmax_rows(logits.view());
        let probs = log_probs.mapv(|v| v.exp());
        let encoder_out = h.clone();
        inputs.push(h);
        Ok(EncoderOutput {
            log_probs,
            encoder_out,
            cache: EncoderCache { inputs, pre, masks, probs, version: self.version },
        })
    }

    /// Gradients of the loss given `d loss / d log_probs` and, optionally, an
    /// extra gradient arriving at the last hidden layer output. The L2 term
    /// `l2 * W` is added to every weight gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_log_probs: ArrayView2<'_, T>,
        d_encoder_out: Option<ArrayView2<'_, T>>,
        l2: T,
    ) -> Result<EncoderGrads<T>> {
        if cache.version != self.version {
            return Err(Error::Invalid("encoder cache is stale".into()));
        }
        if d_log_probs.dim() != cache.probs.dim() {
            return Err(Error::Shape("output gradient does not match cached forward".into()));
        }
        let n_hidden = self.config.hidden.len();
        // log-softmax: d logits = d lp - softmax * rowsum(d lp)
        let row_sums = d_log_probs.sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut delta = &d_log_probs - &(&cache.probs * &row_sums);
        let mut layers = vec![None; n_hidden + 1];
        let mut i = n_hidden;
        loop {
            let input = &cache.inputs[i];
            let layer = &self.layers[i];
            let mut weight = input.t().dot(&delta);
            weight.scaled_add(l2, &layer.weight);
            let bias = delta.sum_axis(Axis(0));
            layers[i] = Some(Dense { weight, bias });
            if i == 0 {
                break;
            }
            let mut dh = delta.dot(&layer.weight.t());
            if i == n_hidden {
                if let Some(extra) = d_encoder_out {
                    if extra.dim() != dh.dim() {
                        return Err(Error::Shape("encoder-output gradient shape".into()));
                    }
                    dh += &extra;
                }
            }
            i -= 1;
            if let Some(m) = &cache.masks[i] {
                dh *= m;
            }
            let act = self.config.activation;
            dh.zip_mut_with(&cache.pre[i], |d, &z| *d *= act.derivative(z));
            delta = dh;
        }
        Ok(EncoderGrads { layers: layers.into_iter().map(|l| l.expect("every layer visited")).collect() })
    }
}
