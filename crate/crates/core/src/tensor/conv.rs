use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvKernel, FeatureMap};

/// 2-D cross-correlation convolution with zero padding.
///
/// Output spatial size is `floor((H + 2p - kh) / s) + 1` per axis. No kernel
/// flip: the orientation follows the deep-learning convention.
pub fn conv2d<T: Scalar>(x: &FeatureMap<T>, k: &ConvKernel<T>) -> Result<FeatureMap<T>> {
    if x.c() != k.in_c() {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            x.c(),
            k.in_c()
        )));
    }
    let (h, w) = (x.h() as isize, x.w() as isize);
    let (kh, kw) = (k.kh() as isize, k.kw() as isize);
    let (s, p) = (k.stride() as isize, k.padding() as isize);
    let oh = (h + 2 * p - kh).div_euclid(s) + 1;
    let ow = (w + 2 * p - kw).div_euclid(s) + 1;
    if oh < 1 || ow < 1 {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} with padding {p} does not fit input {h}x{w}"
        )));
    }
    let (oh, ow) = (oh as usize, ow as usize);

    let mut out = Vec::with_capacity(x.n() * k.out_c() * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];
    for n in 0..x.n() {
        for oc in 0..k.out_c() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ic in 0..k.in_c() {
                let plane = x.plane(n, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k.at(oc, ic, ky as usize, kx as usize).to64();
                        if wgt == 0.0 {
                            continue;
                        }
                        // Valid output range for this tap: 0 <= oy*s + ky - p < h.
                        let (oy_lo, oy_hi) = valid_range(h, ky, s, p, oh as isize);
                        let (ox_lo, ox_hi) = valid_range(w, kx, s, p, ow as isize);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row = &plane[(iy * w) as usize..(iy * w + w) as usize];
                            let arow = &mut acc[(oy as usize) * ow..(oy as usize) * ow + ow];
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s + kx - p) as usize;
                                arow[ox as usize] += wgt * row[ix].to64();
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::of(v)));
        }
    }
    Ok(FeatureMap::from_raw(x.n(), k.out_c(), oh, ow, out))
}

/// Output positions whose input sample `o*s + tap - pad` lands inside
/// `[0, extent)`: lower bound is a ceiling division, upper a floor.
#[inline]
pub(crate) fn valid_range(extent: isize, tap: isize, stride: isize, pad: isize, out: isize) -> (isize, isize) {
    let lo = (pad - tap + stride - 1).div_euclid(stride).max(0).min(out);
    let hi = ((extent - 1 - tap + pad).div_euclid(stride) + 1).max(0).min(out);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1_to_9() -> FeatureMap<f64> {
        FeatureMap::new(1, 1, 3, 3, (1..=9).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = FeatureMap::from_fn(2, 3, 4, 5, |n, c, y, x| (n * 100 + c * 10 + y + x) as f64 * 0.37);
        let k = ConvKernel::identity(3, 3).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_kernel_gives_zeros() {
        let x = grid_1_to_9();
        let k = ConvKernel::new(1, 1, 3, 3, 1, 1, vec![0.0; 9]).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_kernel_sums_neighborhoods() {
        let x = grid_1_to_9();
        let k = ConvKernel::new(1, 1, 3, 3, 1, 1, vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k).unwrap();
        let expected = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = grid_1_to_9();
        let k = ConvKernel::new(1, 2, 3, 3, 1, 1, vec![0.0; 18]).unwrap();
        assert!(matches!(conv2d(&x, &k), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn strided_output_shape() {
        let x = FeatureMap::constant(1, 1, 8, 8, 1.0f64);
        let k = ConvKernel::new(1, 1, 3, 3, 2, 1, vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.shape(), (1, 1, 4, 4));
    }
}
