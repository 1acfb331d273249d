//! Synthetic labeled volumes for tests and benchmarks.
//!
//! Each volume is a fixed low-frequency intensity ramp (increasing along every
//! spatial axis, so absolute position leaves a signature), plus a per-volume
//! randomized sinusoidal wave, plus a repeating per-axis sawtooth whose rising
//! direction makes flips locally detectable (a reflected sawtooth is not a
//! translate of itself, unlike a sinusoid), plus class-dependent ellipsoidal
//! blobs: class k gets a characteristic sawtooth frequency band, blob count
//! and ripple texture. The blob occupancy doubles as a two-class segmentation
//! mask.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volumes::{LabeledVolume, Volume};
use crate::derive_seed;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    /// (C, X, Y, Z); spatial dims must be at least 32.
    pub dims: (usize, usize, usize, usize),
    pub num_classes: usize,
    pub seed: u64,
}

struct Blob {
    center: [f64; 3],
    semi: [f64; 3],
    peak: f64,
    ripple_freq: f64,
    ripple_phase: f64,
}

/// Ramp slope coefficients per axis; all positive so each grid cell has a
/// distinct mean and every axis carries orientation information.
const RAMP: [f64; 3] = [0.275, 0.165, 0.11];

fn axis_frac(i: usize, dim: usize) -> f64 {
    if dim > 1 {
        i as f64 / (dim - 1) as f64
    } else {
        0.0
    }
}

pub fn generate_synthetic_dataset<F: Scalar>(cfg: &SynthConfig) -> Result<Vec<LabeledVolume<F>>> {
    let (c, x, y, z) = cfg.dims;
    if c == 0 || x < 32 || y < 32 || z < 32 {
        return Err(Error::Config(format!(
            "synthetic dims must have C >= 1 and spatial extents >= 32, got {:?}",
            cfg.dims
        )));
    }
    if cfg.num_classes == 0 || cfg.num_classes > cfg.n.max(1) {
        return Err(Error::Config(format!(
            "num_classes must be in [1, n], got {} with n={}",
            cfg.num_classes, cfg.n
        )));
    }
    (0..cfg.n)
        .map(|i| generate_one(cfg, i))
        .collect()
}

fn generate_one<F: Scalar>(cfg: &SynthConfig, index: usize) -> Result<LabeledVolume<F>> {
    let (c, x, y, z) = cfg.dims;
    let class = index % cfg.num_classes;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));

    // Class signature: blob count steps by two, texture frequency by one.
    let blob_count = 2 + 2 * (class % 4);
    let ripple_freq = 1.5 + class as f64;
    let min_dim = x.min(y).min(z) as f64;
    let blobs: Vec<Blob> = (0..blob_count)
        .map(|_| {
            let center = [
                rng.gen_range(0.2..0.8) * (x as f64 - 1.0),
                rng.gen_range(0.2..0.8) * (y as f64 - 1.0),
                rng.gen_range(0.2..0.8) * (z as f64 - 1.0),
            ];
            let semi = [
                (rng.gen_range(0.09..0.16) * min_dim).max(2.0),
                (rng.gen_range(0.09..0.16) * min_dim).max(2.0),
                (rng.gen_range(0.09..0.16) * min_dim).max(2.0),
            ];
            Blob {
                center,
                semi,
                peak: rng.gen_range(0.5..0.9),
                ripple_freq,
                ripple_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    // Per-channel wave parameters, drawn in channel order.
    let waves: Vec<(usize, f64, f64)> = (0..c)
        .map(|_| {
            (
                rng.gen_range(0..3usize),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    // Per-axis sawtooth texture (frequency in periods per axis, phase in
    // [0,1)). The tooth width is the strongest class signature: class k draws
    // from a band around 3.5 + k periods.
    let saw_band = 3.5 + class as f64;
    let saws: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(saw_band..saw_band + 0.8), rng.gen_range(0.0..1.0)))
        .collect();

    let mut data = Array4::<F>::zeros((c, x, y, z));
    let mut mask = Array3::<u8>::zeros((x, y, z));

    for ((xi, yi, zi), m) in mask.indexed_iter_mut() {
        let pos = [xi as f64, yi as f64, zi as f64];
        let mut blob_val = 0.0;
        for b in &blobs {
            let rho2: f64 = (0..3)
                .map(|a| ((pos[a] - b.center[a]) / b.semi[a]).powi(2))
                .sum();
            if rho2 < 1.0 {
                *m = 1;
                let u = ((pos[0] - b.center[0]) / b.semi[0] + 1.0) / 2.0;
                let ripple =
                    1.0 + 0.25 * (std::f64::consts::TAU * b.ripple_freq * u + b.ripple_phase).sin();
                blob_val += b.peak * (1.0 - rho2) * ripple;
            }
        }
        if blob_val != 0.0 {
            for ch in 0..c {
                data[(ch, xi, yi, zi)] = F::from_f64(blob_val);
            }
        }
    }

    for ch in 0..c {
        let (axis, freq, phase) = waves[ch];
        for ((xi, yi, zi), v) in data
            .index_axis_mut(ndarray::Axis(0), ch)
            .indexed_iter_mut()
        {
            let fracs = [axis_frac(xi, x), axis_frac(yi, y), axis_frac(zi, z)];
            let ramp: f64 = (0..3).map(|a| RAMP[a] * fracs[a]).sum();
            let wave = 0.18 * (std::f64::consts::TAU * freq * fracs[axis] + phase).sin();
            let saw: f64 = saws
                .iter()
                .zip(fracs)
                .map(|(&(sf, sp), frac)| 0.12 * (2.0 * (sf * frac + sp).fract() - 1.0))
                .sum();
            let noise = rng.gen_range(-0.03..0.03);
            *v += F::from_f64(ramp + wave + saw + noise);
        }
    }

    debug_assert!(mask.iter().any(|&m| m > 0));
    let modalities = (0..c).map(|i| format!("synth{i}")).collect();
    let volume = Volume::new(data, [1.0, 1.0, 1.0], modalities)?;
    Ok(LabeledVolume {
        volume,
        class_label: Some(class),
        mask: Some(mask),
    })
}
