//! Minimal NN toolkit: a flat named parameter store plus the handful of 3D
//! layers the models need (3x3x3 convolution, max pooling, linear, ReLU,
//! global average pooling, voxel shuffle). Forward passes return whatever
//! cache the matching backward pass needs; gradients accumulate into a
//! parallel structure so shared-weight branches sum naturally.

mod conv;
mod linear;
mod ops;
mod pool;

pub use conv::Conv3d;
pub use linear::Linear;
pub use ops::{gap_backward, gap_forward, relu_backward, relu_forward, voxel_shuffle, voxel_unshuffle};
pub use pool::MaxPool3d;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Which part of the system a parameter belongs to; transfer and freezing
/// select parameters by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    ProxyHead,
    ClsHead,
    SegDecoder,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::ProxyHead => "proxy_head",
            Role::ClsHead => "cls_head",
            Role::SegDecoder => "seg_decoder",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub role: Role,
    pub value: ArrayD<F>,
}

/// Handle into a [`ParamStore`]; layers keep these instead of the arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients, index-aligned with the owning store.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub g: Vec<ArrayD<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Grads {
            g: store
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn at(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.g[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        assert_eq!(self.g.len(), other.g.len());
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for a in self.g.iter_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }
}

/// Fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in). Draws in
/// C order so a given rng state produces identical tensors every time.
pub fn init_uniform<F: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), values).unwrap()
}

pub(crate) fn pool_out_dim(len: usize, factor: usize, context: &str) -> Result<usize> {
    if factor == 0 || len / factor == 0 {
        return Err(Error::shape(
            context,
            format!("axis of at least {factor} voxels"),
            format!("{len} voxels with pool factor {factor}"),
        ));
    }
    Ok(len / factor)
}
