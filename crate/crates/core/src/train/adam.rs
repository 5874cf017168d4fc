use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bias-corrected Adam. Moments are kept in `f64` whatever the parameter
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter in `grads`. A non-finite gradient
    /// rejects the whole step before anything is modified.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: gradient {:?} vs parameter {:?}", store.name(*id), g.shape(), store.get(*id).shape()),
                ));
            }
            if let Some(index) = g.data().iter().position(|x| !x.to_f64_lossy().is_finite()) {
                return Err(Error::NonFiniteGradient { name: store.name(*id).to_string(), index });
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, g) in grads {
            let n = g.len();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i].to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = T::from_f64_lossy(p[i].to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}
