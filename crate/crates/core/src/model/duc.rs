//! Dense segmentation via dense upsampling convolution: a single convolution
//! expands the encoder output to (classes * dx * dy * dz) channels, and a
//! deterministic voxel shuffle rearranges them back to full resolution. No
//! transposed convolutions anywhere.

use super::{BackboneConfig, Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::nn::{voxel_shuffle, voxel_unshuffle, Conv3d, Grads, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub struct SegModel<F> {
    pub store: ParamStore<F>,
    encoder: Encoder,
    duc: Conv3d,
    pub factors: (usize, usize, usize),
    pub num_seg_classes: usize,
}

pub struct SegCache<F> {
    enc: EncoderCache<F>,
    enc_out: Array4<F>,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(cfg: &BackboneConfig, num_seg_classes: usize, seed: u64) -> Result<Self> {
        if num_seg_classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 classes, got {num_seg_classes}"
            )));
        }
        let factors = cfg.downsample();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, cfg)?;
        let duc = Conv3d::new(
            &mut store,
            &mut rng,
            "dec.duc.conv",
            Role::SegDecoder,
            cfg.out_channels(),
            num_seg_classes * factors.0 * factors.1 * factors.2,
        );
        Ok(SegModel {
            store,
            encoder,
            duc,
            factors,
            num_seg_classes,
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.encoder.cfg
    }

    fn check_dims(&self, volume: &Array4<F>) -> Result<()> {
        let s = volume.shape();
        let (fx, fy, fz) = self.factors;
        if s[1] % fx != 0 || s[2] % fy != 0 || s[3] % fz != 0 {
            return Err(Error::Config(format!(
                "segmentation input dims ({}, {}, {}) must be multiples of the \
                 encoder downsampling ({fx}, {fy}, {fz})",
                s[1], s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Per-voxel class logits at full input resolution:
    /// (num_seg_classes, X, Y, Z).
    pub fn forward(&self, volume: &Array4<F>) -> Result<(Array4<F>, SegCache<F>)> {
        self.check_dims(volume)?;
        let (enc_out, enc) = self.encoder.forward(&self.store, volume)?;
        let expanded = self.duc.forward(&self.store, &enc_out);
        let logits = voxel_shuffle(&expanded, self.factors)?;
        debug_assert_eq!(logits.shape()[0], self.num_seg_classes);
        debug_assert_eq!(&logits.shape()[1..], &volume.shape()[1..]);
        Ok((logits, SegCache { enc, enc_out }))
    }

    pub fn backward(&self, cache: &SegCache<F>, dlogits: &Array4<F>, grads: &mut Grads<F>) {
        // The shuffle is an element permutation; its adjoint is the inverse.
        let dexpanded = voxel_unshuffle(dlogits, self.factors).unwrap();
        let denc = self
            .duc
            .backward(&self.store, &cache.enc_out, &dexpanded, grads);
        self.encoder.backward(&self.store, &cache.enc, &denc, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn full_resolution_output_for_divisible_inputs() {
        let cfg = BackboneConfig::small(1, &[2, 3]);
        let model: SegModel<f32> = SegModel::new(&cfg, 2, 0).unwrap();
        assert!(model.store.find("dec.duc.conv.weight").is_some());
        assert_eq!(model.factors, (4, 4, 4));
        let x = Array4::<f32>::zeros((1, 8, 12, 16));
        let (logits, _) = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), [2, 8, 12, 16]);
    }

    #[test]
    fn indivisible_inputs_rejected_with_required_multiple() {
        let cfg = BackboneConfig::small(1, &[2, 3]);
        let model: SegModel<f32> = SegModel::new(&cfg, 2, 0).unwrap();
        let x = Array4::<f32>::zeros((1, 10, 12, 16));
        let msg = match model.forward(&x) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("indivisible input accepted"),
        };
        assert!(msg.contains("(4, 4, 4)"), "{msg}");
    }

    #[test]
    fn gradcheck_through_duc() {
        use crate::model::losses;
        use ndarray::Array1;
        let cfg = BackboneConfig::small(1, &[2]);
        let mut model: SegModel<f64> = SegModel::new(&cfg, 2, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Array4::<f64>::from_shape_fn((1, 4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = ndarray::Array3::<u8>::from_shape_fn((4, 4, 4), |_| rng.gen_range(0..2u8));

        // Per-voxel CE, averaged.
        let loss_of = |m: &SegModel<f64>| {
            let (logits, _) = m.forward(&x).unwrap();
            let mut total = 0.0;
            for ((xi, yi, zi), &cls) in mask.indexed_iter() {
                let v = Array1::from_vec(vec![logits[(0, xi, yi, zi)], logits[(1, xi, yi, zi)]]);
                total += losses::permutation_loss(&v, cls as usize).unwrap();
            }
            total / mask.len() as f64
        };

        let (logits, cache) = model.forward(&x).unwrap();
        let mut dlogits = Array4::<f64>::zeros(logits.raw_dim());
        let n = mask.len() as f64;
        for ((xi, yi, zi), &cls) in mask.indexed_iter() {
            let v = Array1::from_vec(vec![logits[(0, xi, yi, zi)], logits[(1, xi, yi, zi)]]);
            let (_, g) = losses::permutation_loss_grad(&v, cls as usize).unwrap();
            dlogits[(0, xi, yi, zi)] = g[0] / n;
            dlogits[(1, xi, yi, zi)] = g[1] / n;
        }
        let mut grads = Grads::zeros_like(&model.store);
        model.backward(&cache, &dlogits, &mut grads);

        let h = 1e-5;
        for pi in 0..model.store.len() {
            let nlen = model.store.params()[pi].value.len();
            for flat in [0, nlen - 1] {
                let orig = model.store.params()[pi].value.as_slice().unwrap()[flat];
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig + h;
                let up = loss_of(&model);
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig - h;
                let down = loss_of(&model);
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig;
                let fd = (up - down) / (2.0 * h);
                let got = grads.g[pi].as_slice().unwrap()[flat];
                let scale = fd.abs().max(got.abs()).max(1e-6);
                assert!(((fd - got) / scale).abs() < 1e-4, "param {pi} flat {flat}");
            }
        }
    }
}
