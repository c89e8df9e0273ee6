use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Source coordinate of an output sample under the half-pixel-center
/// convention, clamped to the valid range.
#[inline]
fn sample_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Per-channel bilinear interpolation at pixel centers.
pub fn bilinear_resize<T: Scalar>(x: &FeatureMap<T>, out_h: usize, out_w: usize) -> Result<FeatureMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("bilinear_resize: zero-size request {out_h}x{out_w}")));
    }
    let (n, c, h, w) = x.shape();
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_coord(y, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for bn in 0..n {
        for ch in 0..c {
            let plane = x.plane(bn, ch);
            for &(y0, y1, fy) in &rows {
                let r0 = &plane[y0 * w..y0 * w + w];
                let r1 = &plane[y1 * w..y1 * w + w];
                for &(x0, x1, fx) in &cols {
                    let top = r0[x0].to64() * (1.0 - fx) + r0[x1].to64() * fx;
                    let bot = r1[x0].to64() * (1.0 - fx) + r1[x1].to64() * fx;
                    out.push(T::of(top * (1.0 - fy) + bot * fy));
                }
            }
        }
    }
    Ok(FeatureMap::from_raw(n, c, out_h, out_w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_exact_identity() {
        let x = FeatureMap::from_fn(1, 2, 3, 4, |_, c, y, xx| (c + y * 4 + xx) as f64 * 1.13);
        let y = bilinear_resize(&x, 3, 4).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_stays_constant() {
        let x = FeatureMap::constant(1, 1, 3, 3, 0.4f64);
        let y = bilinear_resize(&x, 7, 5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_upsample_matches_hand_values() {
        let x = FeatureMap::new(1, 1, 2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        // f(r, c) = 2r + c sampled at clamped half-pixel centers
        // {0, 0.25, 0.75, 1} on both axes.
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Corner values are preserved.
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
        assert_eq!(y.at(0, 0, 0, 3), 1.0);
        assert_eq!(y.at(0, 0, 3, 0), 2.0);
        assert_eq!(y.at(0, 0, 3, 3), 3.0);
    }

    #[test]
    fn zero_size_is_shape_error() {
        let x = FeatureMap::constant(1, 1, 2, 2, 1.0f64);
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn output_bounded_by_input_extrema() {
        let x = FeatureMap::from_fn(1, 1, 5, 5, |_, _, y, xx| ((y * 5 + xx) as f64 * 0.9471).sin());
        let y = bilinear_resize(&x, 13, 3).unwrap();
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}
