//! The M-branch proxy network. Every branch is the same encoder (literally
//! the same parameters); branch features are flattened, concatenated in slot
//! order, and fed to two parallel linear heads: a K-way permutation
//! classifier and 2M rotation detectors (hor and ver per slot).

use super::{BackboneConfig, Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub struct ProxyModel<F> {
    pub store: ParamStore<F>,
    encoder: Encoder,
    perm_head: Linear,
    hor_head: Linear,
    ver_head: Linear,
    pub m: usize,
    pub k: usize,
    pub cube_size: (usize, usize, usize),
    /// Per-branch flattened feature length.
    pub feature_dim: usize,
}

pub struct ProxyLogits<F> {
    pub perm: Array1<F>,
    pub hor: Array1<F>,
    pub ver: Array1<F>,
}

pub struct ProxyCache<F> {
    branch_caches: Vec<EncoderCache<F>>,
    branch_out_shape: Vec<usize>,
    concat: Array1<F>,
}

impl<F: Scalar> ProxyModel<F> {
    pub fn new(
        cfg: &BackboneConfig,
        cube_size: (usize, usize, usize),
        m: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("proxy task needs M >= 2, got {m}")));
        }
        if k < 2 {
            return Err(Error::Config(format!("proxy task needs K >= 2, got {k}")));
        }
        let feature_dim = cfg.feature_dim(cube_size)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, cfg)?;
        let perm_head = Linear::new(
            &mut store,
            &mut rng,
            "head.perm",
            Role::ProxyHead,
            m * feature_dim,
            k,
        );
        let hor_head = Linear::new(
            &mut store,
            &mut rng,
            "head.rot.hor",
            Role::ProxyHead,
            m * feature_dim,
            m,
        );
        let ver_head = Linear::new(
            &mut store,
            &mut rng,
            "head.rot.ver",
            Role::ProxyHead,
            m * feature_dim,
            m,
        );
        Ok(ProxyModel {
            store,
            encoder,
            perm_head,
            hor_head,
            ver_head,
            m,
            k,
            cube_size,
            feature_dim,
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.encoder.cfg
    }

    fn check_cube(&self, cube: &Array4<F>) -> Result<()> {
        let s = cube.shape();
        let want = (
            self.encoder.cfg.in_channels,
            self.cube_size.0,
            self.cube_size.1,
            self.cube_size.2,
        );
        if (s[0], s[1], s[2], s[3]) != want {
            return Err(Error::shape(
                "proxy branch input",
                format!("{want:?}"),
                format!("({}, {}, {}, {})", s[0], s[1], s[2], s[3]),
            ));
        }
        Ok(())
    }

    /// Features of a single cube; identical for every slot because the
    /// branch parameters are shared.
    pub fn branch_features(&self, cube: &Array4<F>) -> Result<Array1<F>> {
        self.check_cube(cube)?;
        let (y, _) = self.encoder.forward(&self.store, cube)?;
        Ok(flatten(&y))
    }

    pub fn forward(&self, cubes: &[Array4<F>]) -> Result<(ProxyLogits<F>, ProxyCache<F>)> {
        if cubes.len() != self.m {
            return Err(Error::shape(
                "proxy forward",
                format!("{} cubes", self.m),
                format!("{} cubes", cubes.len()),
            ));
        }
        let mut branch_caches = Vec::with_capacity(self.m);
        let mut concat = Array1::<F>::zeros(self.m * self.feature_dim);
        let mut branch_out_shape = Vec::new();
        for (i, cube) in cubes.iter().enumerate() {
            self.check_cube(cube)?;
            let (y, cache) = self.encoder.forward(&self.store, cube)?;
            branch_out_shape = y.shape().to_vec();
            let feat = flatten(&y);
            concat
                .slice_mut(ndarray::s![i * self.feature_dim..(i + 1) * self.feature_dim])
                .assign(&feat);
            branch_caches.push(cache);
        }
        let logits = ProxyLogits {
            perm: self.perm_head.forward(&self.store, &concat),
            hor: self.hor_head.forward(&self.store, &concat),
            ver: self.ver_head.forward(&self.store, &concat),
        };
        Ok((
            logits,
            ProxyCache {
                branch_caches,
                branch_out_shape,
                concat,
            },
        ))
    }

    /// Backpropagates head gradients through every branch; encoder gradients
    /// from all branches accumulate into the one shared parameter set.
    pub fn backward(
        &self,
        cache: &ProxyCache<F>,
        dperm: &Array1<F>,
        dhor: &Array1<F>,
        dver: &Array1<F>,
        grads: &mut Grads<F>,
    ) {
        let mut dconcat = self
            .perm_head
            .backward(&self.store, &cache.concat, dperm, grads);
        dconcat += &self
            .hor_head
            .backward(&self.store, &cache.concat, dhor, grads);
        dconcat += &self
            .ver_head
            .backward(&self.store, &cache.concat, dver, grads);

        let shape = (
            cache.branch_out_shape[0],
            cache.branch_out_shape[1],
            cache.branch_out_shape[2],
            cache.branch_out_shape[3],
        );
        for (i, bc) in cache.branch_caches.iter().enumerate() {
            let dfeat = dconcat
                .slice(ndarray::s![i * self.feature_dim..(i + 1) * self.feature_dim])
                .to_owned();
            let dy = dfeat.into_shape_with_order(shape).unwrap();
            self.encoder.backward(&self.store, bc, &dy, grads);
        }
    }
}

fn flatten<F: Scalar>(y: &Array4<F>) -> Array1<F> {
    let n = y.len();
    y.view()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(n)
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::losses;
    use rand::Rng;

    fn tiny_model(seed: u64) -> ProxyModel<f64> {
        let cfg = BackboneConfig::small(1, &[2]);
        ProxyModel::new(&cfg, (4, 4, 4), 2, 3, seed).unwrap()
    }

    fn random_cubes(n: usize, seed: u64) -> Vec<Array4<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array4::from_shape_fn((1, 4, 4, 4), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn parameter_naming_contract() {
        let model = tiny_model(0);
        let names: Vec<&str> = model.store.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"enc.stage0.conv0.weight"));
        assert!(names.contains(&"head.perm.weight"));
        assert!(names.contains(&"head.rot.hor.weight"));
        assert!(names.contains(&"head.rot.ver.bias"));
        for p in model.store.params() {
            let role = if p.name.starts_with("enc.") {
                Role::Encoder
            } else {
                Role::ProxyHead
            };
            assert_eq!(p.role, role, "{}", p.name);
        }
    }

    #[test]
    fn logit_shapes() {
        let model = tiny_model(1);
        let cubes = random_cubes(2, 5);
        let (logits, _) = model.forward(&cubes).unwrap();
        assert_eq!(logits.perm.len(), 3);
        assert_eq!(logits.hor.len(), 2);
        assert_eq!(logits.ver.len(), 2);
        assert!(model.forward(&cubes[..1]).is_err());
    }

    #[test]
    fn branches_share_weights_and_route_by_slot() {
        let model = tiny_model(2);
        let cubes = random_cubes(2, 6);
        // Same cube, either slot: identical features.
        let fa = model.branch_features(&cubes[0]).unwrap();
        let fb = model.branch_features(&cubes[1]).unwrap();
        let (_, cache_ab) = model.forward(&cubes).unwrap();
        let swapped = vec![cubes[1].clone(), cubes[0].clone()];
        let (_, cache_ba) = model.forward(&swapped).unwrap();
        let fd = model.feature_dim;
        assert_eq!(cache_ab.concat.slice(ndarray::s![..fd]), fa.view());
        assert_eq!(cache_ab.concat.slice(ndarray::s![fd..]), fb.view());
        // Swapping inputs swaps the slots, nothing else.
        assert_eq!(cache_ba.concat.slice(ndarray::s![..fd]), fb.view());
        assert_eq!(cache_ba.concat.slice(ndarray::s![fd..]), fa.view());
    }

    #[test]
    fn same_seed_same_init() {
        let a = tiny_model(7);
        let b = tiny_model(7);
        for (pa, pb) in a.store.params().iter().zip(b.store.params()) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
        let c = tiny_model(8);
        assert!(a
            .store
            .params()
            .iter()
            .zip(c.store.params())
            .any(|(x, y)| x.value != y.value));
    }

    /// End-to-end gradient check of the full proxy loss through encoder and
    /// heads.
    #[test]
    fn full_model_gradcheck() {
        let mut model = tiny_model(3);
        let cubes = random_cubes(2, 9);
        let label = 1usize;
        let hf = [true, false];
        let vf = [false, false];
        let weights = losses::LossWeights::default();

        let loss_of = |model: &ProxyModel<f64>| {
            let (logits, _) = model.forward(&cubes).unwrap();
            let lp = losses::permutation_loss(&logits.perm, label).unwrap();
            let lr = losses::rotation_loss(&logits.hor, &logits.ver, &hf, &vf).unwrap();
            losses::total_loss(lp, lr, &weights)
        };

        let (logits, cache) = model.forward(&cubes).unwrap();
        let (_, mut dperm) = losses::permutation_loss_grad(&logits.perm, label).unwrap();
        let (_, mut dhor, mut dver) =
            losses::rotation_loss_grad(&logits.hor, &logits.ver, &hf, &vf).unwrap();
        let a = weights.alpha;
        let b = weights.beta;
        dperm.mapv_inplace(|v| v * a);
        dhor.mapv_inplace(|v| v * b);
        dver.mapv_inplace(|v| v * b);
        let mut grads = Grads::zeros_like(&model.store);
        model.backward(&cache, &dperm, &dhor, &dver, &mut grads);

        let h = 1e-5;
        for pi in 0..model.store.len() {
            let n = model.store.params()[pi].value.len();
            for flat in [0, n / 2, n - 1] {
                let orig = model.store.params()[pi].value.as_slice().unwrap()[flat];
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig + h;
                let up = loss_of(&model);
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig - h;
                let down = loss_of(&model);
                model.store.params_mut()[pi].value.as_slice_mut().unwrap()[flat] = orig;
                let fd = (up - down) / (2.0 * h);
                let got = grads.g[pi].as_slice().unwrap()[flat];
                let scale = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((fd - got) / scale).abs() < 1e-4,
                    "param {} flat {flat}: fd {fd} vs analytic {got}",
                    model.store.params()[pi].name
                );
            }
        }
    }
}
