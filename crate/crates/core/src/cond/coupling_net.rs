use rand::Rng;

use super::trunk::{random_tensor, HIDDEN_INIT_STD};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Two 3×3 convolutions producing the raw coupling fields `(o1, o2)`.
///
/// The final convolution starts at zero, so a fresh network emits zeros
/// and the coupling begins at `s = sigmoid(2)`, `t = 0`.
#[derive(Clone, Debug)]
pub struct CouplingNet {
    hidden_weight: ParamId,
    hidden_bias: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    in_channels: usize,
    out_channels: usize,
}

impl CouplingNet {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if out_channels % 2 != 0 {
            return Err(Error::config(format!("coupling network output must have even channels, got {out_channels}")));
        }
        Ok(Self {
            hidden_weight: store.add(format!("{prefix}.conv0.weight"), random_tensor(&[hidden, in_channels, 3, 3], HIDDEN_INIT_STD, rng), true)?,
            hidden_bias: store.add(format!("{prefix}.conv0.bias"), random_tensor(&[hidden], HIDDEN_INIT_STD, rng), true)?,
            out_weight: store.add(format!("{prefix}.conv1.weight"), Tensor::zeros(&[out_channels, hidden, 3, 3]), true)?,
            out_bias: store.add(format!("{prefix}.conv1.bias"), Tensor::zeros(&[out_channels]), true)?,
            in_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_weight
    }

    /// `N×Cin×H×W → (o1, o2)`, each `N×C/2×H×W`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, input: Var) -> Result<(Var, Var)> {
        let c = tape.value(input).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::config(format!(
                "coupling network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let w0 = tape.param(store, self.hidden_weight);
        let b0 = tape.param(store, self.hidden_bias);
        let h = tape.conv2d(input, w0, b0, 1, 1)?;
        let h = tape.relu(h)?;
        let w1 = tape.param(store, self.out_weight);
        let b1 = tape.param(store, self.out_bias);
        let out = tape.conv2d(h, w1, b1, 1, 1)?;
        let half = self.out_channels / 2;
        Ok((tape.slice_channels(out, 0, half)?, tape.slice_channels(out, half, half)?))
    }
}
