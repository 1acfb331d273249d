//! SGD with classical momentum: v = mu * v + g; p -= lr * v.

use crate::nn::{Grads, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::ArrayD;

pub struct Sgd<F> {
    pub learning_rate: F,
    pub momentum: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate: F::from_f64(learning_rate),
            momentum: F::from_f64(momentum),
            velocity: store
                .params()
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    /// Applies one update, leaving parameters whose role is in `frozen`
    /// untouched (their velocity stays zero as well).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, frozen: &[Role]) {
        let lr = self.learning_rate;
        let mu = self.momentum;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if frozen.contains(&p.role) {
                continue;
            }
            let v = &mut self.velocity[i];
            v.zip_mut_with(&grads.g[i], |vel, &g| *vel = mu * *vel + g);
            p.value.zip_mut_with(v, |val, &vel| *val = *val - lr * vel);
        }
    }
}
