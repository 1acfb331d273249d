//! Models: the shared VGG-style 3D encoder, the multi-branch proxy network
//! (permutation + rotation heads), the classification head, the dense
//! upsampling segmentation head, and the checkpoint format tying them
//! together by parameter name and role.

pub mod checkpoint;
mod classify;
mod duc;
pub mod losses;
mod proxy;

pub use checkpoint::{
    apply_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint,
    TransferReport,
};
pub use classify::ClassifyModel;
pub use duc::SegModel;
pub use proxy::{ProxyCache, ProxyLogits, ProxyModel};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, Conv3d, Grads, MaxPool3d, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::Array4;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Shape of the convolutional encoder. All convolutions are 3x3x3, stride 1,
/// unit padding; each stage ends in max pooling with its own (possibly
/// anisotropic) factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Per stage: (number of convolutions, output channels).
    pub stages: Vec<(usize, usize)>,
    /// Per stage pooling factors (fx, fy, fz).
    pub pools: Vec<(usize, usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stages: vec![(1, 64), (1, 128), (2, 256), (2, 512)],
            pools: vec![(2, 2, 2); 4],
        }
    }
}

impl BackboneConfig {
    /// Variant for thin-z cubes (e.g. 64x64x12): z pools by 2,2,3,1 so the
    /// grid reduces cleanly.
    pub fn anisotropic_z() -> Self {
        BackboneConfig {
            in_channels: 1,
            stages: vec![(1, 64), (1, 128), (2, 256), (2, 512)],
            pools: vec![(2, 2, 2), (2, 2, 2), (2, 2, 3), (2, 2, 1)],
        }
    }

    /// Small backbone for tests and CPU-scale experiments.
    pub fn small(in_channels: usize, channels: &[usize]) -> Self {
        BackboneConfig {
            in_channels,
            stages: channels.iter().map(|&c| (1, c)).collect(),
            pools: vec![(2, 2, 2); channels.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("backbone needs at least one input channel".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stages.len() != self.pools.len() {
            return Err(Error::Config(format!(
                "backbone has {} stages but {} pool specs",
                self.stages.len(),
                self.pools.len()
            )));
        }
        for (i, &(convs, ch)) in self.stages.iter().enumerate() {
            if convs == 0 || ch == 0 {
                return Err(Error::Config(format!(
                    "backbone stage {i} must have positive conv count and channels"
                )));
            }
        }
        for (i, &(fx, fy, fz)) in self.pools.iter().enumerate() {
            if fx == 0 || fy == 0 || fz == 0 {
                return Err(Error::Config(format!(
                    "backbone stage {i} pool factors must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Total downsampling per axis.
    pub fn downsample(&self) -> (usize, usize, usize) {
        self.pools.iter().fold((1, 1, 1), |acc, &(x, y, z)| {
            (acc.0 * x, acc.1 * y, acc.2 * z)
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|&(_, c)| c).unwrap_or(0)
    }

    /// Flattened feature length for an input of exactly `dims`; requires the
    /// pooling stack to divide it.
    pub fn feature_dim(&self, dims: (usize, usize, usize)) -> Result<usize> {
        let (dx, dy, dz) = self.downsample();
        if dims.0 % dx != 0 || dims.1 % dy != 0 || dims.2 % dz != 0 {
            return Err(Error::Config(format!(
                "input dims {:?} must be a multiple of the pooling stack ({dx}, {dy}, {dz})",
                dims
            )));
        }
        Ok(self.out_channels() * (dims.0 / dx) * (dims.1 / dy) * (dims.2 / dz))
    }
}

struct EncoderStage {
    convs: Vec<Conv3d>,
    pool: MaxPool3d,
}

/// The shared encoder. One instance (one parameter set) serves every branch;
/// running it on several cubes and summing gradients is what weight sharing
/// means here.
pub struct Encoder {
    stages: Vec<EncoderStage>,
    pub cfg: BackboneConfig,
}

pub struct StageCache<F> {
    conv_inputs: Vec<Array4<F>>,
    /// Post-ReLU outputs (double as the ReLU mask).
    conv_outputs: Vec<Array4<F>>,
    pool_arg: Array4<u32>,
    pre_pool_shape: Vec<usize>,
}

pub struct EncoderCache<F> {
    stages: Vec<StageCache<F>>,
}

impl Encoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut in_ch = cfg.in_channels;
        for (si, (&(convs, out_ch), &pool)) in cfg.stages.iter().zip(&cfg.pools).enumerate() {
            let mut layer_convs = Vec::with_capacity(convs);
            for ci in 0..convs {
                layer_convs.push(Conv3d::new(
                    store,
                    rng,
                    &format!("enc.stage{si}.conv{ci}"),
                    Role::Encoder,
                    in_ch,
                    out_ch,
                ));
                in_ch = out_ch;
            }
            stages.push(EncoderStage {
                convs: layer_convs,
                pool: MaxPool3d::new(pool),
            });
        }
        Ok(Encoder {
            stages,
            cfg: cfg.clone(),
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, EncoderCache<F>)> {
        if x.shape()[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "encoder input",
                format!("{} channels", self.cfg.in_channels),
                format!("{} channels", x.shape()[0]),
            ));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut conv_inputs = Vec::with_capacity(stage.convs.len());
            let mut conv_outputs = Vec::with_capacity(stage.convs.len());
            for conv in &stage.convs {
                conv_inputs.push(cur.clone());
                let y = relu_forward(&conv.forward(store, &cur));
                conv_outputs.push(y.clone());
                cur = y;
            }
            let pre_pool_shape = cur.shape().to_vec();
            let (pooled, arg) = stage.pool.forward(&cur)?;
            caches.push(StageCache {
                conv_inputs,
                conv_outputs,
                pool_arg: arg,
                pre_pool_shape,
            });
            cur = pooled;
        }
        Ok((cur, EncoderCache { stages: caches }))
    }

    /// Accumulates parameter gradients; returns dL/dinput.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &EncoderCache<F>,
        dy: &Array4<F>,
        grads: &mut Grads<F>,
    ) -> Array4<F> {
        let mut cur = dy.clone();
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            cur = stage.pool.backward(&sc.pool_arg, &cur, &sc.pre_pool_shape);
            for (conv, (cin, cout)) in stage
                .convs
                .iter()
                .zip(sc.conv_inputs.iter().zip(&sc.conv_outputs))
                .rev()
            {
                cur = relu_backward(cout, &cur);
                cur = conv.backward(store, cin, &cur, grads);
            }
        }
        cur
    }
}
