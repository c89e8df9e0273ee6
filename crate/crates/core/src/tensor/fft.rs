use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ComplexSpectrum, FeatureMap};

thread_local! {
    // Plan cache; transforms are pure, this only memoizes twiddle tables.
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_plane(plane: &mut [Complex<f64>], h: usize, w: usize, forward: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row_fft = if forward { planner.plan_fft_forward(w) } else { planner.plan_fft_inverse(w) };
        let col_fft = if forward { planner.plan_fft_forward(h) } else { planner.plan_fft_inverse(h) };
        drop(planner);
        for row in plane.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = plane[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                plane[y * w + x] = col[y];
            }
        }
    });
}

/// Per-channel forward 2-D DFT over the spatial dims (unnormalized).
///
/// Amplitude is the modulus, phase the `atan2` argument folded into
/// `(-pi, pi]`; a bin that is exactly zero gets phase 0.
pub fn fft2<T: Scalar>(x: &FeatureMap<T>) -> Result<ComplexSpectrum<T>> {
    let (n, c, h, w) = x.shape();
    let mut amp = Vec::with_capacity(n * c * h * w);
    let mut phase = Vec::with_capacity(n * c * h * w);
    let mut plane = vec![Complex::new(0.0, 0.0); h * w];
    for bn in 0..n {
        for ch in 0..c {
            for (dst, src) in plane.iter_mut().zip(x.plane(bn, ch)) {
                *dst = Complex::new(src.to64(), 0.0);
            }
            transform_plane(&mut plane, h, w, true);
            for z in &plane {
                let a = (z.re * z.re + z.im * z.im).sqrt();
                let p = if a == 0.0 {
                    0.0
                } else {
                    let p = z.im.atan2(z.re);
                    if p <= -PI {
                        PI
                    } else {
                        p
                    }
                };
                amp.push(T::of(a));
                phase.push(T::of(p));
            }
        }
    }
    Ok(ComplexSpectrum::from_raw(n, c, h, w, amp, phase))
}

/// Inverse 2-D DFT with `1/(H*W)` normalization; returns the real part.
///
/// Spectra recombined from two different sources are in general complex after
/// inversion; the imaginary residue is discarded.
pub fn ifft2_real<T: Scalar>(spec: &ComplexSpectrum<T>) -> Result<FeatureMap<T>> {
    let (n, c, h, w) = spec.shape();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut plane = vec![Complex::new(0.0, 0.0); h * w];
    let amp = spec.amplitude();
    let ph = spec.phase();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for i in 0..h * w {
            let a = amp[base + i].to64();
            let p = ph[base + i].to64();
            plane[i] = Complex::new(a * p.cos(), a * p.sin());
        }
        transform_plane(&mut plane, h, w, false);
        out.extend(plane.iter().map(|z| T::of(z.re * norm)));
    }
    Ok(FeatureMap::from_raw(n, c, h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_concentrates_at_dc() {
        let c = 2.5f64;
        let x = FeatureMap::constant(1, 1, 4, 4, c);
        let s = fft2(&x).unwrap();
        assert!((s.amp_at(0, 0, 0, 0) - c * 16.0).abs() < 1e-9);
        for u in 0..4 {
            for v in 0..4 {
                if (u, v) != (0, 0) {
                    assert!(s.amp_at(0, 0, u, v) < 1e-9, "bin ({u},{v}) leaked");
                }
                // Reconstructed complex value must be ~0 off DC; phase itself
                // is fixed to 0 wherever the bin is exactly zero.
                if s.amp_at(0, 0, u, v) == 0.0 {
                    assert_eq!(s.phase_at(0, 0, u, v), 0.0);
                }
            }
        }
        assert_eq!(s.phase_at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn impulse_has_flat_unit_spectrum() {
        let mut x = FeatureMap::zeros(1, 1, 4, 4);
        x.set(0, 0, 0, 0, 1.0f64);
        let s = fft2(&x).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                assert!((s.amp_at(0, 0, u, v) - 1.0).abs() < 1e-12);
                assert!(s.phase_at(0, 0, u, v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_recovers_input() {
        let x = FeatureMap::from_fn(1, 2, 5, 7, |_, c, y, xx| ((c * 31 + y * 7 + xx * 3) % 17) as f64 * 0.71 - 4.0);
        let back = ifft2_real(&fft2(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn zero_spectrum_inverts_to_zero_map() {
        let s = ComplexSpectrum::new(1, 1, 3, 3, vec![0.0f64; 9], vec![0.0; 9]).unwrap();
        let x = ifft2_real(&s).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }
}
