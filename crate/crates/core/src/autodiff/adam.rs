use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators for every entry of a [`ParamStore`].
/// Frozen entries keep empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>, config: AdamConfig) -> Self {
        let zeros = |e: &crate::params::ParamEntry<R>| Tensor::zeros(e.value.shape());
        Self {
            config,
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &ParamGrads<R>, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(Error::usage("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2, e) = (R::lit(beta1), R::lit(beta2), R::lit(eps));
        let (c1, c2, rate) = (R::lit(bc1), R::lit(bc2), R::lit(lr));
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != param.shape() {
                return Err(Error::usage(format!(
                    "moment shape {:?} does not match parameter shape {:?}",
                    m.shape(),
                    param.shape()
                )));
            }
            let g = grads.get(id);
            if let Some(g) = g {
                if g.shape() != param.shape() {
                    return Err(Error::usage(format!(
                        "gradient shape {:?} does not match parameter shape {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
            }
            let p = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                let gj = g.map_or(R::zero(), |g| g.data()[j]);
                md[j] = b1 * md[j] + (R::one() - b1) * gj;
                vd[j] = b2 * vd[j] + (R::one() - b2) * gj * gj;
                let m_hat = md[j] / c1;
                let v_hat = vd[j] / c2;
                p[j] -= rate * m_hat / (v_hat.sqrt() + e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(vec![1], &[value]).unwrap(), true).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = one_param(1.25);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(id, Tensor::zeros(&[1]));
        adam.step(&mut store, &grads, 1e-4).unwrap();
        assert_eq!(store.get(id).item(), 1.25);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        for g in [3.0, -0.5] {
            let (mut store, id) = one_param(0.0);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            let mut grads = ParamGrads::new(1);
            grads.accumulate(id, Tensor::from_f64(vec![1], &[g]).unwrap());
            adam.step(&mut store, &grads, 1e-4).unwrap();
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            assert!((store.get(id).item() - expected).abs() < 1e-15);
            assert!((store.get(id).item() + 1e-4 * g.signum()).abs() < 1e-11);
        }
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let (mut store, _) = one_param(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        assert!(adam.step(&mut store, &ParamGrads::new(1), 0.0).is_err());
    }

    #[test]
    fn frozen_entries_are_not_updated() {
        let mut store = ParamStore::<f64>::new();
        let frozen = store.add("perm", Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap(), false).unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new(1);
        grads.accumulate(frozen, Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap());
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get(frozen).data(), &[1.0, 0.0]);
    }
}
