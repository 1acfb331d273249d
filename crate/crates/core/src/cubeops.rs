//! Cube grid partitioning, 180-degree cube flips, and proxy-sample assembly.
//!
//! A volume is divided into a grid of equally sized cubes separated by gaps
//! (so the network cannot exploit voxel continuity across cube borders). The
//! grid is centered, optionally jittered, and cubes are listed in canonical
//! x-major order: `index = ix * gy * gz + iy * gz + iz`.

use crate::error::{Error, Result};
use crate::permbank::{apply_permutation, invert_permutation, PermutationBank};
use crate::scalar::Scalar;
use crate::derive_seed;
use ndarray::{Array4, Axis, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cubes per axis (gx, gy, gz).
    pub counts: (usize, usize, usize),
    /// Edge lengths of one cube (cx, cy, cz).
    pub cube_size: (usize, usize, usize),
    /// Requested gap between adjacent cubes, in voxels. Shrinks per axis when
    /// the volume is too small, down to zero.
    pub gap: usize,
    /// Maximum random shift of the whole grid, per axis.
    pub jitter: usize,
}

impl GridSpec {
    pub fn m(&self) -> usize {
        self.counts.0 * self.counts.1 * self.counts.2
    }

    pub fn validate(&self) -> Result<()> {
        let (gx, gy, gz) = self.counts;
        let (cx, cy, cz) = self.cube_size;
        if gx == 0 || gy == 0 || gz == 0 || cx == 0 || cy == 0 || cz == 0 {
            return Err(Error::Config(format!(
                "grid counts and cube size must be positive, got counts {:?} cube {:?}",
                self.counts, self.cube_size
            )));
        }
        Ok(())
    }
}

/// Per-axis placement: offsets of each cube along one axis.
fn axis_offsets(
    axis_len: usize,
    count: usize,
    cube: usize,
    gap: usize,
    jitter: usize,
    jitter_draw: i64,
) -> Result<Vec<usize>> {
    let need = count * cube + 2 * jitter;
    if need > axis_len {
        return Err(Error::Config(format!(
            "{count} cubes of edge {cube} with jitter {jitter} need {need} voxels, \
             axis has only {axis_len}"
        )));
    }
    let eff_gap = if count > 1 {
        gap.min((axis_len - count * cube - 2 * jitter) / (count - 1))
    } else {
        0
    };
    let span = count * cube + (count - 1) * eff_gap;
    let start = ((axis_len - span) / 2) as i64 + jitter_draw;
    debug_assert!(start >= 0 && start as usize + span <= axis_len);
    Ok((0..count)
        .map(|k| start as usize + k * (cube + eff_gap))
        .collect())
}

/// Cuts the grid of cubes out of `(C, X, Y, Z)` data, in canonical order.
/// Placement is centered, then shifted by a seed-deterministic jitter in
/// [-jitter, +jitter] per axis.
pub fn partition<F: Scalar>(
    data: &Array4<F>,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<Array4<F>>> {
    grid.validate()?;
    let shape = data.shape();
    let (gx, gy, gz) = grid.counts;
    let (cx, cy, cz) = grid.cube_size;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let j = grid.jitter as i64;
    let draws = [
        rng.gen_range(-j..=j),
        rng.gen_range(-j..=j),
        rng.gen_range(-j..=j),
    ];
    let xs = axis_offsets(shape[1], gx, cx, grid.gap, grid.jitter, draws[0])?;
    let ys = axis_offsets(shape[2], gy, cy, grid.gap, grid.jitter, draws[1])?;
    let zs = axis_offsets(shape[3], gz, cz, grid.gap, grid.jitter, draws[2])?;

    let mut cubes = Vec::with_capacity(grid.m());
    for &x0 in &xs {
        for &y0 in &ys {
            for &z0 in &zs {
                cubes.push(
                    data.slice(s![.., x0..x0 + cx, y0..y0 + cy, z0..z0 + cz])
                        .to_owned(),
                );
            }
        }
    }
    Ok(cubes)
}

/// 180-degree flips of a `(C, X, Y, Z)` cube. `hor` reverses the X and Y
/// axes; `ver` reverses the Y and Z axes. Each flip is an involution and the
/// two commute, so {id, hor, ver, hor+ver} forms a four-group where hor+ver
/// reverses X and Z.
pub fn rotate_cube<F: Scalar>(cube: &Array4<F>, hor: bool, ver: bool) -> Array4<F> {
    let mut view = cube.view();
    if hor {
        view.invert_axis(Axis(1));
        view.invert_axis(Axis(2));
    }
    if ver {
        view.invert_axis(Axis(2));
        view.invert_axis(Axis(3));
    }
    view.as_standard_layout().into_owned()
}

/// One training instance of the proxy task. `cubes[i]` is what branch `i`
/// sees; the rotation flags are indexed the same way (they describe the cube
/// sitting in branch slot `i`, after permutation).
#[derive(Debug, Clone)]
pub struct ProxySample<F> {
    pub cubes: Vec<Array4<F>>,
    /// Index into the bank's permutation list.
    pub perm_index: usize,
    pub hor_flags: Vec<bool>,
    pub ver_flags: Vec<bool>,
}

/// Partitions, permutes by a bank entry drawn at random, then flips each cube
/// independently with probability `rot_prob` per flip kind.
pub fn make_proxy_sample<F: Scalar>(
    data: &Array4<F>,
    grid: &GridSpec,
    bank: &PermutationBank,
    rot_prob: f64,
    seed: u64,
) -> Result<ProxySample<F>> {
    if !(0.0..=1.0).contains(&rot_prob) {
        return Err(Error::Config(format!(
            "rot_prob must be in [0, 1], got {rot_prob}"
        )));
    }
    if bank.m != grid.m() {
        return Err(Error::Config(format!(
            "bank is over M={} cubes but grid has M={}",
            bank.m,
            grid.m()
        )));
    }
    let cubes = partition(data, grid, derive_seed(seed, 0))?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    let perm_index = rng.gen_range(0..bank.k);
    let m = grid.m();
    let hor_flags: Vec<bool> = (0..m).map(|_| rng.gen_bool(rot_prob)).collect();
    let ver_flags: Vec<bool> = (0..m).map(|_| rng.gen_bool(rot_prob)).collect();

    let permuted = apply_permutation(&bank.perms[perm_index], &cubes)?;
    let cubes = permuted
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if hor_flags[i] || ver_flags[i] {
                rotate_cube(&c, hor_flags[i], ver_flags[i])
            } else {
                c
            }
        })
        .collect();
    Ok(ProxySample {
        cubes,
        perm_index,
        hor_flags,
        ver_flags,
    })
}

/// Undoes a proxy sample: flips each cube back, then applies the inverse
/// permutation, returning cubes in canonical order.
pub fn recover<F: Scalar>(sample: &ProxySample<F>, bank: &PermutationBank) -> Result<Vec<Array4<F>>> {
    if sample.perm_index >= bank.k {
        return Err(Error::Config(format!(
            "perm_index {} outside bank of K={}",
            sample.perm_index, bank.k
        )));
    }
    let unrotated: Vec<Array4<F>> = sample
        .cubes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if sample.hor_flags[i] || sample.ver_flags[i] {
                rotate_cube(c, sample.hor_flags[i], sample.ver_flags[i])
            } else {
                c.clone()
            }
        })
        .collect();
    let inverse = invert_permutation(&bank.perms[sample.perm_index]);
    apply_permutation(&inverse, &unrotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn indexed_volume(c: usize, x: usize, y: usize, z: usize) -> Array4<f32> {
        Array::from_shape_fn((c, x, y, z), |(ci, xi, yi, zi)| {
            (((ci * x + xi) * y + yi) * z + zi) as f32
        })
    }

    #[test]
    fn axis_offsets_oracle() {
        // 10 voxels, 2 cubes of 3, gap 2: span 8, centered at 1 -> [1, 6].
        assert_eq!(axis_offsets(10, 2, 3, 2, 0, 0).unwrap(), vec![1, 6]);
        // Gap shrinks: 30 voxels, 2 cubes of 12, gap 10 -> effective gap 6,
        // span 30, offsets [0, 18].
        assert_eq!(axis_offsets(30, 2, 12, 10, 0, 0).unwrap(), vec![0, 18]);
        // Single cube centers.
        assert_eq!(axis_offsets(11, 1, 5, 10, 0, 0).unwrap(), vec![3]);
        // Cubes alone do not fit.
        assert!(axis_offsets(20, 2, 12, 0, 0, 0).is_err());
        // Jitter reserve counts against the fit.
        assert!(axis_offsets(24, 2, 12, 0, 1, 0).is_err());
    }

    #[test]
    fn partition_canonical_order_and_content() {
        let vol = indexed_volume(1, 10, 10, 10);
        let grid = GridSpec {
            counts: (2, 2, 2),
            cube_size: (3, 3, 3),
            gap: 2,
            jitter: 0,
        };
        let cubes = partition(&vol, &grid, 0).unwrap();
        assert_eq!(cubes.len(), 8);
        // Offsets are [1, 6] on every axis; cube index ix*4 + iy*2 + iz.
        for ix in 0..2usize {
            for iy in 0..2usize {
                for iz in 0..2usize {
                    let cube = &cubes[ix * 4 + iy * 2 + iz];
                    let (x0, y0, z0) = (1 + 5 * ix, 1 + 5 * iy, 1 + 5 * iz);
                    let expect = vol.slice(s![.., x0..x0 + 3, y0..y0 + 3, z0..z0 + 3]);
                    assert_eq!(cube, &expect.to_owned(), "cube ({ix},{iy},{iz})");
                }
            }
        }
    }

    #[test]
    fn partition_jitter_stays_in_bounds_and_varies() {
        let vol = indexed_volume(1, 16, 16, 16);
        let grid = GridSpec {
            counts: (2, 2, 2),
            cube_size: (4, 4, 4),
            gap: 2,
            jitter: 3,
        };
        let mut first_voxels = std::collections::HashSet::new();
        for seed in 0..50 {
            let cubes = partition(&vol, &grid, seed).unwrap();
            first_voxels.insert(cubes[0][(0, 0, 0, 0)].to_bits());
        }
        assert!(first_voxels.len() > 1, "jitter should move the grid");
        // Same seed, same placement.
        let a = partition(&vol, &grid, 7).unwrap();
        let b = partition(&vol, &grid, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotations_form_a_four_group() {
        let cube = indexed_volume(2, 2, 3, 4);
        let id = rotate_cube(&cube, false, false);
        assert_eq!(id, cube);
        let h = rotate_cube(&cube, true, false);
        let v = rotate_cube(&cube, false, true);
        let hv = rotate_cube(&cube, true, true);
        // Involutions.
        assert_eq!(rotate_cube(&h, true, false), cube);
        assert_eq!(rotate_cube(&v, false, true), cube);
        assert_eq!(rotate_cube(&hv, true, true), cube);
        // Commuting composition: ver(hor(c)) == hor(ver(c)) == hv.
        assert_eq!(rotate_cube(&h, false, true), hv);
        assert_eq!(rotate_cube(&v, true, false), hv);
        // hor+ver net effect: X and Z reversed, Y restored.
        let mut manual = cube.view();
        manual.invert_axis(Axis(1));
        manual.invert_axis(Axis(3));
        assert_eq!(hv, manual.as_standard_layout().into_owned());
    }

    #[test]
    fn proxy_sample_composition_matches_parts() {
        let vol = indexed_volume(1, 12, 12, 12);
        let grid = GridSpec {
            counts: (2, 2, 2),
            cube_size: (4, 4, 4),
            gap: 1,
            jitter: 0,
        };
        let bank = PermutationBank::generate(8, 10, 5).unwrap();
        let sample = make_proxy_sample(&vol, &grid, &bank, 0.5, 42).unwrap();
        assert_eq!(sample.cubes.len(), 8);
        assert!(sample.perm_index < bank.k);

        let canonical = partition(&vol, &grid, derive_seed(42, 0)).unwrap();
        let permuted = apply_permutation(&bank.perms[sample.perm_index], &canonical).unwrap();
        for i in 0..8 {
            let expect = rotate_cube(&permuted[i], sample.hor_flags[i], sample.ver_flags[i]);
            assert_eq!(sample.cubes[i], expect, "slot {i}");
        }
    }

    #[test]
    fn recover_inverts_make() {
        let vol = indexed_volume(2, 14, 14, 14);
        let grid = GridSpec {
            counts: (2, 2, 2),
            cube_size: (5, 5, 5),
            gap: 2,
            jitter: 0,
        };
        let bank = PermutationBank::generate(8, 12, 9).unwrap();
        for seed in [0u64, 1, 99] {
            let sample = make_proxy_sample(&vol, &grid, &bank, 0.7, seed).unwrap();
            let recovered = recover(&sample, &bank).unwrap();
            let canonical = partition(&vol, &grid, 1234).unwrap(); // jitter 0: seed-independent
            assert_eq!(recovered, canonical);
        }
    }

    #[test]
    fn rot_prob_extremes() {
        let vol = indexed_volume(1, 12, 12, 12);
        let grid = GridSpec {
            counts: (2, 2, 2),
            cube_size: (4, 4, 4),
            gap: 1,
            jitter: 0,
        };
        let bank = PermutationBank::generate(8, 4, 0).unwrap();
        let none = make_proxy_sample(&vol, &grid, &bank, 0.0, 3).unwrap();
        assert!(none.hor_flags.iter().all(|f| !f));
        assert!(none.ver_flags.iter().all(|f| !f));
        let all = make_proxy_sample(&vol, &grid, &bank, 1.0, 3).unwrap();
        assert!(all.hor_flags.iter().all(|f| *f));
        assert!(all.ver_flags.iter().all(|f| *f));
        assert!(make_proxy_sample(&vol, &grid, &bank, 1.5, 3).is_err());
    }

    #[test]
    fn bank_grid_mismatch_rejected() {
        let vol = indexed_volume(1, 12, 12, 12);
        let grid = GridSpec {
            counts: (2, 2, 1),
            cube_size: (4, 4, 4),
            gap: 1,
            jitter: 0,
        };
        let bank = PermutationBank::generate(8, 4, 0).unwrap();
        assert!(make_proxy_sample(&vol, &grid, &bank, 0.5, 0).is_err());
    }
}
