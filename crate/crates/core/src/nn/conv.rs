//! 3x3x3 convolution with unit padding and stride, the only convolution shape
//! the models use. Forward lowers the input to a (27*Cin, X*Y*Z) patch matrix
//! and runs a single GEMM; backward reuses the same lowering.

use super::{init_uniform, Grads, ParamId, ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::{s, Array2, Array4};
use rand_chacha::ChaCha12Rng;

pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3d {
    /// Registers `{prefix}.weight` ([out, in, 3, 3, 3]) and `{prefix}.bias`
    /// ([out], zero-initialized) under `role`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        role: Role,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            role,
            init_uniform(rng, &[out_ch, in_ch, 3, 3, 3], in_ch * 27),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            role,
            ndarray::ArrayD::zeros(vec![out_ch]),
        );
        Conv3d {
            weight,
            bias,
            in_ch,
            out_ch,
        }
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        debug_assert_eq!(x.shape()[0], self.in_ch);
        let (_, xd, yd, zd) = dims(x);
        let cols = im2col(x);
        let w = store.value(self.weight);
        let w2 = w
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * 27))
            .unwrap();
        let mut y2 = w2.dot(&cols);
        let bias = store.value(self.bias);
        for (mut row, b) in y2.outer_iter_mut().zip(bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        y2.into_shape_with_order((self.out_ch, xd, yd, zd)).unwrap()
    }

    /// Accumulates weight/bias gradients and returns dL/dx.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array4<F>,
        dy: &Array4<F>,
        grads: &mut Grads<F>,
    ) -> Array4<F> {
        let (_, xd, yd, zd) = dims(x);
        let voxels = xd * yd * zd;
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_ch, voxels))
            .unwrap();

        let cols = im2col(x);
        let dw = dy2.dot(&cols.t());
        let mut gw = grads
            .at(self.weight)
            .view_mut()
            .into_shape_with_order((self.out_ch, self.in_ch * 27))
            .unwrap();
        gw += &dw;

        let gb = grads.at(self.bias);
        for (o, row) in dy2.outer_iter().enumerate() {
            gb[[o]] += row.sum();
        }

        let w = store.value(self.weight);
        let w2 = w
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * 27))
            .unwrap();
        let dcols = w2.t().dot(&dy2);
        col2im(&dcols, x.shape())
    }
}

fn dims<F>(x: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Offset z-ranges so that `out + d` stays within [0, len).
fn z_ranges(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)) as usize;
    (lo, hi)
}

/// Lowered patch matrix: row `(ci*3 + kx)*9 + ky*3 + kz` holds channel `ci`
/// shifted by the kernel offset, column-indexed by output voxel in C order.
fn im2col<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (c, xd, yd, zd) = dims(x);
    let voxels = xd * yd * zd;
    let mut cols = Array2::<F>::zeros((c * 27, voxels));
    for ci in 0..c {
        for kx in 0..3isize {
            let dx = kx - 1;
            for ky in 0..3isize {
                let dyo = ky - 1;
                for kz in 0..3isize {
                    let dz = kz - 1;
                    let row_idx = ci * 27 + (kx * 9 + ky * 3 + kz) as usize;
                    let mut row = cols.row_mut(row_idx);
                    let (zlo, zhi) = z_ranges(zd, dz);
                    if zlo >= zhi {
                        continue;
                    }
                    for ox in 0..xd {
                        let sx = ox as isize + dx;
                        if sx < 0 || sx >= xd as isize {
                            continue;
                        }
                        for oy in 0..yd {
                            let sy = oy as isize + dyo;
                            if sy < 0 || sy >= yd as isize {
                                continue;
                            }
                            let base = (ox * yd + oy) * zd;
                            let src = x.slice(s![
                                ci,
                                sx as usize,
                                sy as usize,
                                (zlo as isize + dz) as usize..(zhi as isize + dz) as usize
                            ]);
                            row.slice_mut(s![base + zlo..base + zhi]).assign(&src);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back onto the
/// input grid.
fn col2im<F: Scalar>(dcols: &Array2<F>, shape: &[usize]) -> Array4<F> {
    let (c, xd, yd, zd) = (shape[0], shape[1], shape[2], shape[3]);
    let mut dx_arr = Array4::<F>::zeros((c, xd, yd, zd));
    for ci in 0..c {
        for kx in 0..3isize {
            let dx = kx - 1;
            for ky in 0..3isize {
                let dyo = ky - 1;
                for kz in 0..3isize {
                    let dz = kz - 1;
                    let row_idx = ci * 27 + (kx * 9 + ky * 3 + kz) as usize;
                    let row = dcols.row(row_idx);
                    let (zlo, zhi) = z_ranges(zd, dz);
                    if zlo >= zhi {
                        continue;
                    }
                    for ox in 0..xd {
                        let sx = ox as isize + dx;
                        if sx < 0 || sx >= xd as isize {
                            continue;
                        }
                        for oy in 0..yd {
                            let sy = oy as isize + dyo;
                            if sy < 0 || sy >= yd as isize {
                                continue;
                            }
                            let base = (ox * yd + oy) * zd;
                            let mut dst = dx_arr.slice_mut(s![
                                ci,
                                sx as usize,
                                sy as usize,
                                (zlo as isize + dz) as usize..(zhi as isize + dz) as usize
                            ]);
                            dst += &row.slice(s![base + zlo..base + zhi]);
                        }
                    }
                }
            }
        }
    }
    dx_arr
}
