//! Minimal dense convolution primitives shared by the tiny feature encoder,
//! the patch sampler and the 3D cost regularizer. Channels-innermost layout
//! throughout (`Volume` with depth = channels), zero padding, f64 arithmetic.

use crate::grid::Volume;

/// 3x3 convolution with zero padding and the given stride.
///
/// `weights` is laid out `[c_out][c_in][ky][kx]`, `bias` has length `c_out`.
/// Output spatial dims are `ceil(h / stride) x ceil(w / stride)`.
pub fn conv3x3(input: &Volume, weights: &[f64], bias: &[f64], stride: usize) -> Volume {
    let (h, w, c_in) = input.shape();
    let c_out = bias.len();
    debug_assert_eq!(weights.len(), c_out * c_in * 9);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = Volume::zeros(oh, ow, c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            let cy = oy * stride;
            let cx = ox * stride;
            let dst = out.pixel_mut(oy, ox);
            dst.copy_from_slice(bias);
            for ky in 0..3usize {
                let iy = cy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = cx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = input.pixel(iy as usize, ix as usize);
                    let tap = ky * 3 + kx;
                    for (co, d) in dst.iter_mut().enumerate() {
                        let wbase = (co * c_in) * 9 + tap;
                        let mut acc = 0.0;
                        for (ci, &s) in src.iter().enumerate() {
                            acc += weights[wbase + ci * 9] * s;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    out
}

/// 1x1 convolution (per-pixel linear map). `weights` is `[c_out][c_in]`.
pub fn conv1x1(input: &Volume, weights: &[f64], bias: &[f64]) -> Volume {
    let (h, w, c_in) = input.shape();
    let c_out = bias.len();
    debug_assert_eq!(weights.len(), c_out * c_in);
    let mut out = Volume::zeros(h, w, c_out);
    for y in 0..h {
        for x in 0..w {
            let src = input.pixel(y, x);
            let dst = out.pixel_mut(y, x);
            for co in 0..c_out {
                let row = &weights[co * c_in..(co + 1) * c_in];
                let mut acc = bias[co];
                for (wv, sv) in row.iter().zip(src) {
                    acc += wv * sv;
                }
                dst[co] = acc;
            }
        }
    }
    out
}

pub fn relu_inplace(v: &mut Volume) {
    for x in v.data_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Stack two volumes along the channel axis.
pub fn concat_channels(a: &Volume, b: &Volume) -> Volume {
    assert_eq!(a.height(), b.height());
    assert_eq!(a.width(), b.width());
    let (h, w) = (a.height(), a.width());
    let mut out = Volume::zeros(h, w, a.depth() + b.depth());
    for y in 0..h {
        for x in 0..w {
            let dst = out.pixel_mut(y, x);
            dst[..a.depth()].copy_from_slice(a.pixel(y, x));
            dst[a.depth()..].copy_from_slice(b.pixel(y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Volume;

    #[test]
    fn conv3x3_identity_kernel() {
        let mut input = Volume::zeros(3, 3, 1);
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        // Kernel with 1 at the center tap.
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let out = conv3x3(&input, &w, &[0.0], 1);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv3x3_sums_neighborhood_with_zero_pad() {
        let input = Volume::filled(3, 3, 1, 1.0);
        let w = vec![1.0; 9];
        let out = conv3x3(&input, &w, &[0.0], 1);
        assert_eq!(out.at(1, 1, 0), 9.0); // interior
        assert_eq!(out.at(0, 0, 0), 4.0); // corner sees 2x2
    }

    #[test]
    fn conv3x3_stride2_halves_resolution() {
        let input = Volume::zeros(4, 6, 2);
        let w = vec![0.0; 1 * 2 * 9];
        let out = conv3x3(&input, &w, &[0.5], 2);
        assert_eq!(out.shape(), (2, 3, 1));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv1x1_mixes_channels() {
        let mut input = Volume::zeros(1, 1, 2);
        input.pixel_mut(0, 0).copy_from_slice(&[2.0, 3.0]);
        let out = conv1x1(&input, &[1.0, 10.0], &[0.5]);
        assert_eq!(out.at(0, 0, 0), 2.0 + 30.0 + 0.5);
    }
}
