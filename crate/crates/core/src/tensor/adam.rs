use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            step: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of `params` in place.
    pub fn step<T: Scalar>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "adam: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let one = T::ONE;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
