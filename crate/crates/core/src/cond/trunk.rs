//! Convolutional trunk followed by a dense head; generates per-sample
//! actnorm or 1×1-convolution parameters from a source activation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Output channels, kernel sizes and paddings of the three conv layers.
pub const TRUNK_CONVS: [(usize, usize, usize); 3] = [(8, 1, 0), (4, 3, 1), (2, 3, 1)];
/// Widths of the hidden dense layers.
pub const TRUNK_DENSE: [usize; 3] = [32, 64, 48];
/// Standard deviation of the random hidden-layer initialization.
pub const HIDDEN_INIT_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TrunkNet {
    convs: [Layer; 3],
    dense: [Layer; 3],
    output: Layer,
    in_channels: usize,
    height: usize,
    width: usize,
    out_dim: usize,
}

pub(crate) fn random_tensor<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = R::lit(normal.sample(rng));
    }
    t
}

impl TrunkNet {
    /// Registers a trunk under `prefix`. Hidden layers get `N(0, 0.05²)`
    /// weights and biases; the output layer starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        in_channels: usize,
        height: usize,
        width: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut prev = in_channels;
        let mut convs = Vec::with_capacity(3);
        for (i, &(out, k, _)) in TRUNK_CONVS.iter().enumerate() {
            convs.push(Layer {
                weight: store.add(format!("{prefix}.conv{i}.weight"), random_tensor(&[out, prev, k, k], HIDDEN_INIT_STD, rng), true)?,
                bias: store.add(format!("{prefix}.conv{i}.bias"), random_tensor(&[out], HIDDEN_INIT_STD, rng), true)?,
            });
            prev = out;
        }
        let mut prev = prev * height * width;
        let mut dense = Vec::with_capacity(3);
        for (i, &width_i) in TRUNK_DENSE.iter().enumerate() {
            dense.push(Layer {
                weight: store.add(format!("{prefix}.dense{i}.weight"), random_tensor(&[width_i, prev], HIDDEN_INIT_STD, rng), true)?,
                bias: store.add(format!("{prefix}.dense{i}.bias"), random_tensor(&[width_i], HIDDEN_INIT_STD, rng), true)?,
            });
            prev = width_i;
        }
        let output = Layer {
            weight: store.add(format!("{prefix}.out.weight"), Tensor::zeros(&[out_dim, prev]), true)?,
            bias: store.add(format!("{prefix}.out.bias"), Tensor::zeros(&[out_dim]), true)?,
        };
        Ok(Self {
            convs: convs.try_into().expect("three conv layers"),
            dense: dense.try_into().expect("three dense layers"),
            output,
            in_channels,
            height,
            width,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn output_weight(&self) -> ParamId {
        self.output.weight
    }

    pub fn output_bias(&self) -> ParamId {
        self.output.bias
    }

    /// `N×Cin×H×W → N×out_dim`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, input: Var) -> Result<Var> {
        let (n, c, h, w) = tape.value(input).dims4()?;
        if (c, h, w) != (self.in_channels, self.height, self.width) {
            return Err(Error::config(format!(
                "conditioning network expects {}×{}×{} input, got {c}×{h}×{w}",
                self.in_channels, self.height, self.width
            )));
        }
        let mut x = input;
        for (layer, &(_, _, pad)) in self.convs.iter().zip(&TRUNK_CONVS) {
            let wv = tape.param(store, layer.weight);
            let bv = tape.param(store, layer.bias);
            let y = tape.conv2d(x, wv, bv, 1, pad)?;
            x = tape.relu(y)?;
        }
        let flat = tape.value(x).per_sample();
        x = tape.reshape(x, vec![n, flat])?;
        for layer in &self.dense {
            let wv = tape.param(store, layer.weight);
            let bv = tape.param(store, layer.bias);
            let y = tape.dense(x, wv, bv)?;
            x = tape.relu(y)?;
        }
        let wv = tape.param(store, self.output.weight);
        let bv = tape.param(store, self.output.bias);
        tape.dense(x, wv, bv)
    }

    /// Zeroes the output weights and installs `bias`, so the network emits
    /// `bias` for every input.
    pub fn set_constant_output<R: Real>(&self, store: &mut ParamStore<R>, bias: &[R]) -> Result<()> {
        if bias.len() != self.out_dim {
            return Err(Error::config(format!("output bias needs {} values, got {}", self.out_dim, bias.len())));
        }
        let zeros = Tensor::zeros(store.get(self.output.weight).shape());
        store.set(self.output.weight, zeros)?;
        store.set(self.output.bias, Tensor::new(vec![self.out_dim], bias.to_vec())?)
    }
}

/// Splits the columns of an `N×K` tape value into consecutive `N×len` pieces.
pub fn split_columns<R: Real>(tape: &mut Tape<R>, x: Var, lens: &[usize]) -> Result<Vec<Var>> {
    let (n, k) = match tape.shape(x) {
        &[n, k] => (n, k),
        s => return Err(Error::config(format!("expected a matrix, got shape {s:?}"))),
    };
    if lens.iter().sum::<usize>() != k {
        return Err(Error::config(format!("cannot split {k} columns into {lens:?}")));
    }
    let as4 = tape.reshape(x, vec![n, k, 1, 1])?;
    let mut start = 0;
    let mut out = Vec::with_capacity(lens.len());
    for &len in lens {
        let piece = tape.slice_channels(as4, start, len)?;
        out.push(tape.reshape(piece, vec![n, len])?);
        start += len;
    }
    Ok(out)
}
