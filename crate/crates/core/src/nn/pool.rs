//! Max pooling with independent per-axis factors and floor semantics:
//! trailing voxels that do not fill a window are dropped, which lets the
//! encoder run on volumes that are not exact multiples of the pooling stack.

use super::pool_out_dim;
use crate::error::Result;
use crate::scalar::Scalar;
use ndarray::Array4;

#[derive(Debug, Clone, Copy)]
pub struct MaxPool3d {
    pub factors: (usize, usize, usize),
}

impl MaxPool3d {
    pub fn new(factors: (usize, usize, usize)) -> Self {
        MaxPool3d { factors }
    }

    /// Returns pooled output and, per output voxel, the flat spatial index of
    /// the winning input voxel (first maximum in scan order, so backward is
    /// deterministic under ties).
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> Result<(Array4<F>, Array4<u32>)> {
        let s = x.shape();
        let (c, xd, yd, zd) = (s[0], s[1], s[2], s[3]);
        let (fx, fy, fz) = self.factors;
        let ox = pool_out_dim(xd, fx, "max pool x")?;
        let oy = pool_out_dim(yd, fy, "max pool y")?;
        let oz = pool_out_dim(zd, fz, "max pool z")?;
        let mut out = Array4::<F>::zeros((c, ox, oy, oz));
        let mut arg = Array4::<u32>::zeros((c, ox, oy, oz));
        for ci in 0..c {
            for px in 0..ox {
                for py in 0..oy {
                    for pz in 0..oz {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ix in px * fx..(px + 1) * fx {
                            for iy in py * fy..(py + 1) * fy {
                                for iz in pz * fz..(pz + 1) * fz {
                                    let v = x[(ci, ix, iy, iz)];
                                    if v > best {
                                        best = v;
                                        best_idx = ((ix * yd + iy) * zd + iz) as u32;
                                    }
                                }
                            }
                        }
                        out[(ci, px, py, pz)] = best;
                        arg[(ci, px, py, pz)] = best_idx;
                    }
                }
            }
        }
        Ok((out, arg))
    }

    /// Routes each output gradient back to its argmax voxel.
    pub fn backward<F: Scalar>(
        &self,
        arg: &Array4<u32>,
        dy: &Array4<F>,
        in_shape: &[usize],
    ) -> Array4<F> {
        let (c, xd, yd, zd) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let mut dx = Array4::<F>::zeros((c, xd, yd, zd));
        for ((ci, px, py, pz), &flat) in arg.indexed_iter() {
            let flat = flat as usize;
            let ix = flat / (yd * zd);
            let iy = (flat / zd) % yd;
            let iz = flat % zd;
            dx[(ci, ix, iy, iz)] += dy[(ci, px, py, pz)];
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn pools_max_with_floor_semantics() {
        // 1x4x4x5 input, factors (2,2,2): output 1x2x2x2, final z voxel dropped.
        let x = Array::from_shape_fn((1, 4, 4, 5), |(_, a, b, c)| (a * 100 + b * 10 + c) as f64);
        let pool = MaxPool3d::new((2, 2, 2));
        let (y, _) = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        // Window max is always the high-coordinate corner of the window here.
        assert_eq!(y[(0, 0, 0, 0)], 111.0);
        assert_eq!(y[(0, 1, 1, 1)], 333.0);
    }

    #[test]
    fn anisotropic_factors() {
        let x = Array::from_shape_fn((2, 4, 4, 3), |(c, a, b, d)| {
            (c * 1000 + a * 100 + b * 10 + d) as f32
        });
        let pool = MaxPool3d::new((2, 2, 1));
        let (y, _) = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 2, 2, 3]);
        assert_eq!(y[(1, 0, 0, 2)], 1112.0);
    }

    #[test]
    fn rejects_factor_larger_than_axis() {
        let x = Array4::<f32>::zeros((1, 2, 2, 1));
        assert!(MaxPool3d::new((2, 2, 2)).forward(&x).is_err());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        x[(0, 1, 0, 1)] = 9.0; // winner
        let pool = MaxPool3d::new((2, 2, 2));
        let (y, arg) = pool.forward(&x).unwrap();
        assert_eq!(y[(0, 0, 0, 0)], 9.0);
        let mut dy = Array4::<f64>::zeros((1, 1, 1, 1));
        dy[(0, 0, 0, 0)] = 2.5;
        let dx = pool.backward(&arg, &dy, x.shape());
        assert_eq!(dx[(0, 1, 0, 1)], 2.5);
        assert_eq!(dx.sum(), 2.5);
    }

    #[test]
    fn tie_goes_to_first_in_scan_order() {
        let x = Array4::<f32>::zeros((1, 2, 2, 2));
        let pool = MaxPool3d::new((2, 2, 2));
        let (_, arg) = pool.forward(&x).unwrap();
        assert_eq!(arg[(0, 0, 0, 0)], 0);
    }
}
