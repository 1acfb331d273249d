//! Volume classification: the transferred encoder, global average pooling,
//! and a fresh linear head. GAP makes the head independent of input size, so
//! the encoder can consume whatever the dataset provides.

use super::{BackboneConfig, Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::nn::{gap_backward, gap_forward, Grads, Linear, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub struct ClassifyModel<F> {
    pub store: ParamStore<F>,
    encoder: Encoder,
    head: Linear,
    pub num_classes: usize,
}

pub struct ClassifyCache<F> {
    enc: EncoderCache<F>,
    enc_out_shape: Vec<usize>,
    pooled: Array1<F>,
}

impl<F: Scalar> ClassifyModel<F> {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, cfg)?;
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head.cls",
            Role::ClsHead,
            cfg.out_channels(),
            num_classes,
        );
        Ok(ClassifyModel {
            store,
            encoder,
            head,
            num_classes,
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.encoder.cfg
    }

    pub fn forward(&self, volume: &Array4<F>) -> Result<(Array1<F>, ClassifyCache<F>)> {
        let (y, enc) = self.encoder.forward(&self.store, volume)?;
        let pooled = gap_forward(&y);
        let logits = self.head.forward(&self.store, &pooled);
        Ok((
            logits,
            ClassifyCache {
                enc,
                enc_out_shape: y.shape().to_vec(),
                pooled,
            },
        ))
    }

    pub fn backward(&self, cache: &ClassifyCache<F>, dlogits: &Array1<F>, grads: &mut Grads<F>) {
        let dpooled = self
            .head
            .backward(&self.store, &cache.pooled, dlogits, grads);
        let dy = gap_backward(&dpooled, &cache.enc_out_shape);
        self.encoder.backward(&self.store, &cache.enc, &dy, grads);
    }
}
