//! Conditioning networks that generate target-side actnorm, 1×1 convolution
//! and coupling parameters from source-side activations.

mod coupling_net;
mod trunk;

pub use coupling_net::CouplingNet;
pub use trunk::{split_columns, TrunkNet, HIDDEN_INIT_STD, TRUNK_CONVS, TRUNK_DENSE};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::actnorm::{channel_moments, STD_FLOOR};
use crate::flow::invconv::{random_rotation, triangle_len, InvConvParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Frozen permutation and signs of a 1×1 convolution, kept in the
/// parameter store so they persist with the model.
#[derive(Clone, Copy, Debug)]
pub struct FrozenLu {
    pub perm: ParamId,
    pub sign: ParamId,
}

impl FrozenLu {
    pub fn register<R: Real>(store: &mut ParamStore<R>, prefix: &str, perm: &[usize], sign: &[f64]) -> Result<Self> {
        let c = perm.len();
        let perm_t = Tensor::new(vec![c], perm.iter().map(|&p| R::lit(p as f64)).collect())?;
        let sign_t = Tensor::from_f64(vec![c], sign)?;
        Ok(Self {
            perm: store.add(format!("{prefix}.perm"), perm_t, false)?,
            sign: store.add(format!("{prefix}.sign"), sign_t, false)?,
        })
    }

    pub fn perm<R: Real>(&self, store: &ParamStore<R>) -> Vec<usize> {
        store.get(self.perm).data().iter().map(|v| v.as_f64().round() as usize).collect()
    }

    pub fn sign<R: Real>(&self, store: &ParamStore<R>) -> Vec<f64> {
        store.get(self.sign).data().iter().map(|v| v.as_f64()).collect()
    }
}

/// Conditional actnorm: trunk output of length `2C` read as `[ℓ | t]`.
#[derive(Clone, Debug)]
pub struct ActnormCn {
    pub net: TrunkNet,
    channels: usize,
}

impl ActnormCn {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        in_channels: usize,
        spatial: (usize, usize),
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = TrunkNet::new(store, prefix, in_channels, spatial.0, spatial.1, 2 * channels, rng)?;
        Ok(Self { net, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-sample `(ℓ, t)`, each `N×C`.
    pub fn params<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, input: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, store, input)?;
        let parts = split_columns(tape, out, &[self.channels, self.channels])?;
        Ok((parts[0], parts[1]))
    }

    /// Data-dependent initialization: zero output weights and a bias that
    /// standardizes `target_batch` (the activations entering this actnorm)
    /// per channel.
    pub fn init_from_batch<R: Real>(&self, store: &mut ParamStore<R>, target_batch: &Tensor<R>) -> Result<()> {
        let moments = channel_moments(target_batch)?;
        if moments.len() != self.channels {
            return Err(Error::config(format!(
                "actnorm network expects {} channels, batch has {}",
                self.channels,
                moments.len()
            )));
        }
        let mut bias = vec![R::zero(); 2 * self.channels];
        for (c, (mean, std)) in moments.into_iter().enumerate() {
            let std = std.max(STD_FLOOR);
            bias[c] = R::lit(-std.ln());
            bias[self.channels + c] = R::lit(-mean / std);
        }
        self.net.set_constant_output(store, &bias)
    }
}

/// Conditional 1×1 convolution: trunk output of length `C²` read as
/// `[strictly-lower | strictly-upper | log magnitudes]`.
#[derive(Clone, Debug)]
pub struct InvConvCn {
    pub net: TrunkNet,
    pub frozen: FrozenLu,
    channels: usize,
}

impl InvConvCn {
    /// Builds the network and initializes it to emit the LU factors of a
    /// freshly sampled rotation for every input. The permutation and signs
    /// of that factorization are frozen.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        in_channels: usize,
        spatial: (usize, usize),
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = TrunkNet::new(store, prefix, in_channels, spatial.0, spatial.1, channels * channels, rng)?;
        let rotation = random_rotation(channels, rng);
        let lu = InvConvParams::<R>::from_matrix(channels, &rotation)?;
        net.set_constant_output(store, &lu.pack())?;
        let frozen = FrozenLu::register(store, prefix, &lu.perm, &lu.sign)?;
        Ok(Self { net, frozen, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-sample `(lower, upper, log_s)` of shapes `N×K`, `N×K`, `N×C`.
    pub fn params<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, input: Var) -> Result<(Var, Var, Var)> {
        let out = self.net.forward(tape, store, input)?;
        let k = triangle_len(self.channels);
        let parts = split_columns(tape, out, &[k, k, self.channels])?;
        Ok((parts[0], parts[1], parts[2]))
    }

    /// Factors currently encoded in the output bias (the emitted value
    /// whenever the output weights are zero).
    pub fn bias_factors<R: Real>(&self, store: &ParamStore<R>) -> Result<InvConvParams<R>> {
        InvConvParams::unpack(store.get(self.net.output_bias()).data(), self.frozen.perm(store), self.frozen.sign(store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        trunk::random_tensor(shape, 1.0, &mut rng)
    }

    #[test]
    fn zero_output_weights_emit_the_bias_for_any_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cn = ActnormCn::new(&mut store, "an", 12, (4, 4), 12, &mut rng).unwrap();
        let bias: Vec<f64> = (0..24).map(|i| i as f64 * 0.1 - 1.0).collect();
        cn.net.set_constant_output(&mut store, &bias).unwrap();
        for seed in [2, 3] {
            let mut tape = Tape::new();
            let x = tape.constant(random_input(&[2, 12, 4, 4], seed));
            let (ls, t) = cn.params(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(ls), &[2, 12]);
            assert_eq!(&tape.value(ls).data()[..12], &bias[..12]);
            assert_eq!(&tape.value(t).data()[12..], &bias[12..]);
        }
    }

    #[test]
    fn invconv_network_output_length_is_c_squared() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cn = InvConvCn::new(&mut store, "ic", 3, (2, 2), 2, &mut rng).unwrap();
        assert_eq!(cn.net.out_dim(), 4);
        let f = cn.bias_factors(&store).unwrap();
        assert_eq!((f.lower.numel(), f.upper.numel(), f.log_s.numel()), (1, 1, 2));
    }

    #[test]
    fn fresh_invconv_network_emits_an_orthonormal_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cn = InvConvCn::new(&mut store, "ic", 6, (2, 2), 6, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&[1, 6, 2, 2], 9));
        let (lo, up, ls) = cn.params(&mut tape, &store, x).unwrap();
        let perm = cn.frozen.perm(&store);
        let sign = cn.frozen.sign(&store);
        let w = tape.lu_assemble(lo, up, ls, &perm, &sign).unwrap();
        let w = tape.value(w).data().to_vec();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| w[k * 6 + i] * w[k * 6 + j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
        }
        let logdet: f64 = tape.value(ls).data().iter().sum();
        assert!(logdet.abs() < 1e-10);
    }

    #[test]
    fn hidden_weights_are_seed_reproducible() {
        let build = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ActnormCn::new(&mut store, "an", 4, (2, 2), 4, &mut rng).unwrap();
            store
        };
        let (a, b, c) = (build(5), build(5), build(6));
        let first = a.find("an.conv0.weight").unwrap();
        assert_eq!(a.get(first), b.get(first));
        assert_ne!(a.get(first), c.get(first));
        let std = a.get(first).data().iter().map(|v| v * v).sum::<f64>() / a.get(first).numel() as f64;
        assert!(std.sqrt() < 0.1);
    }

    #[test]
    fn fresh_coupling_network_outputs_zeros() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // x2 (2 channels) + source coupling output (4) + boundary (1)
        let net = CouplingNet::new(&mut store, "cp", 2 + 4 + 1, 16, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&[1, 7, 3, 3], 1));
        let (o1, o2) = net.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(o1), &[1, 2, 3, 3]);
        assert!(tape.value(o1).data().iter().chain(tape.value(o2).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cn = ActnormCn::new(&mut store, "an", 4, (2, 2), 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(matches!(cn.params(&mut tape, &store, x), Err(Error::Config(_))));
    }
}
