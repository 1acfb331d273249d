//! Parameter-free pieces: ReLU, global average pooling, and the voxel
//! shuffle used by the dense upsampling head.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4};

pub fn relu_forward<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Uses the forward output to mask; exact zeros pass no gradient.
pub fn relu_backward<F: Scalar>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Mean over all voxels, per channel.
pub fn gap_forward<F: Scalar>(x: &Array4<F>) -> Array1<F> {
    let s = x.shape();
    let n = F::from_f64((s[1] * s[2] * s[3]) as f64);
    Array1::from_iter(
        x.outer_iter()
            .map(|ch| ch.iter().copied().sum::<F>() / n),
    )
}

pub fn gap_backward<F: Scalar>(dy: &Array1<F>, in_shape: &[usize]) -> Array4<F> {
    let (c, xd, yd, zd) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let n = F::from_f64((xd * yd * zd) as f64);
    let mut dx = Array4::<F>::zeros((c, xd, yd, zd));
    for (ci, mut ch) in dx.outer_iter_mut().enumerate() {
        let v = dy[ci] / n;
        ch.fill(v);
    }
    dx
}

/// Rearranges `(C*dx*dy*dz, X, Y, Z)` into `(C, X*dx, Y*dy, Z*dz)`: input
/// channel `((c*dx + ox)*dy + oy)*dz + oz` supplies the sub-voxel at offset
/// `(ox, oy, oz)`. Purely a relabeling, so it is exactly invertible.
pub fn voxel_shuffle<F: Scalar>(x: &Array4<F>, factors: (usize, usize, usize)) -> Result<Array4<F>> {
    let (fx, fy, fz) = factors;
    let s = x.shape();
    let group = fx * fy * fz;
    if group == 0 || s[0] % group != 0 {
        return Err(Error::shape(
            "voxel shuffle",
            format!("channels divisible by {fx}*{fy}*{fz}"),
            format!("{} channels", s[0]),
        ));
    }
    let c = s[0] / group;
    let (xd, yd, zd) = (s[1], s[2], s[3]);
    let mut out = Array4::<F>::zeros((c, xd * fx, yd * fy, zd * fz));
    for ((ch, xi, yi, zi), &v) in x.indexed_iter() {
        let c0 = ch / group;
        let rem = ch % group;
        let ox = rem / (fy * fz);
        let oy = (rem / fz) % fy;
        let oz = rem % fz;
        out[(c0, xi * fx + ox, yi * fy + oy, zi * fz + oz)] = v;
    }
    Ok(out)
}

/// Exact inverse of [`voxel_shuffle`]; also its gradient, since the shuffle
/// is a permutation of elements.
pub fn voxel_unshuffle<F: Scalar>(
    y: &Array4<F>,
    factors: (usize, usize, usize),
) -> Result<Array4<F>> {
    let (fx, fy, fz) = factors;
    let s = y.shape();
    if fx == 0 || fy == 0 || fz == 0 || s[1] % fx != 0 || s[2] % fy != 0 || s[3] % fz != 0 {
        return Err(Error::shape(
            "voxel unshuffle",
            format!("spatial dims divisible by ({fx}, {fy}, {fz})"),
            format!("{:?}", &s[1..]),
        ));
    }
    let group = fx * fy * fz;
    let mut out = Array4::<F>::zeros((s[0] * group, s[1] / fx, s[2] / fy, s[3] / fz));
    for ((c0, xo, yo, zo), &v) in y.indexed_iter() {
        let (xi, ox) = (xo / fx, xo % fx);
        let (yi, oy) = (yo / fy, yo % fy);
        let (zi, oz) = (zo / fz, zo % fz);
        let ch = ((c0 * fx + ox) * fy + oy) * fz + oz;
        out[(ch, xi, yi, zi)] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn relu_clamps_and_masks() {
        let x = Array::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 2.0, 0.0]);
        let dy = Array::from_elem((1, 1, 1, 4), 1.0);
        let dx = relu_backward(&y, &dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gap_means_and_spreads() {
        let x = Array::from_shape_vec((2, 1, 2, 2), vec![1.0, 2.0, 3.0, 6.0, 4.0, 4.0, 4.0, 4.0])
            .unwrap();
        let y = gap_forward(&x);
        assert_eq!(y.to_vec(), vec![3.0, 4.0]);
        let dx = gap_backward(&Array1::from_vec(vec![8.0, 0.0]), x.shape());
        assert!(dx
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .all(|v| *v == 2.0));
        assert!(dx
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn shuffle_unshuffle_identity() {
        let x = Array::from_shape_fn((12, 2, 3, 2), |(c, a, b, d)| {
            (c * 1000 + a * 100 + b * 10 + d) as f64
        });
        let y = voxel_shuffle(&x, (2, 3, 2)).unwrap();
        assert_eq!(y.shape(), [1, 4, 9, 4]);
        let back = voxel_unshuffle(&y, (2, 3, 2)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn shuffle_places_channel_blocks() {
        // 8 channels -> (2,2,2) sub-voxels of one output channel.
        let x = Array::from_shape_fn((8, 1, 1, 1), |(c, _, _, _)| c as f32);
        let y = voxel_shuffle(&x, (2, 2, 2)).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        // Channel index decomposes as ox*4 + oy*2 + oz.
        for ox in 0..2 {
            for oy in 0..2 {
                for oz in 0..2 {
                    assert_eq!(y[(0, ox, oy, oz)], (ox * 4 + oy * 2 + oz) as f32);
                }
            }
        }
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let x = Array4::<f32>::zeros((6, 1, 1, 1));
        assert!(voxel_shuffle(&x, (2, 2, 2)).is_err());
        let y = Array4::<f32>::zeros((1, 3, 2, 2));
        assert!(voxel_unshuffle(&y, (2, 2, 2)).is_err());
    }
}
