//! Fully connected layer on feature vectors.

use super::{init_uniform, Grads, ParamId, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::Array1;
use rand_chacha::ChaCha12Rng;

pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        role: Role,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            role,
            init_uniform(rng, &[out_dim, in_dim], in_dim),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            role,
            ndarray::ArrayD::zeros(vec![out_dim]),
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array1<F>) -> Array1<F> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = store.value(self.weight);
        let w2 = w
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .unwrap();
        let b = store.value(self.bias);
        let mut y = w2.dot(x);
        for (v, bv) in y.iter_mut().zip(b.iter()) {
            *v += *bv;
        }
        y
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array1<F>,
        dy: &Array1<F>,
        grads: &mut Grads<F>,
    ) -> Array1<F> {
        let mut gw = grads
            .at(self.weight)
            .view_mut()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .unwrap();
        for (o, &d) in dy.iter().enumerate() {
            let mut row = gw.row_mut(o);
            row.scaled_add(d, &x.view());
        }
        let gb = grads.at(self.bias);
        for (o, &d) in dy.iter().enumerate() {
            gb[[o]] += d;
        }
        let w = store.value(self.weight);
        let w2 = w
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .unwrap();
        w2.t().dot(dy)
    }
}
