//! Literal reference computations. Quadruple loops, direct DFT summation,
//! set arithmetic — no shortcuts shared with the production code.

use std::collections::HashSet;
use std::f64::consts::PI;

use loec_core::{ConvKernel, FeatureMap, Mask};

/// Direct sliding-window cross-correlation with zero padding.
pub fn conv2d(x: &FeatureMap<f64>, k: &ConvKernel<f64>) -> FeatureMap<f64> {
    let (n, _, h, w) = x.shape();
    let (s, p) = (k.stride() as isize, k.padding() as isize);
    let oh = ((h as isize + 2 * p - k.kh() as isize) / s + 1) as usize;
    let ow = ((w as isize + 2 * p - k.kw() as isize) / s + 1) as usize;
    FeatureMap::from_fn(n, k.out_c(), oh, ow, |bn, oc, oy, ox| {
        let mut acc = 0.0;
        for ic in 0..k.in_c() {
            for ky in 0..k.kh() {
                for kx in 0..k.kw() {
                    let iy = oy as isize * s + ky as isize - p;
                    let ix = ox as isize * s + kx as isize - p;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        acc += x.at(bn, ic, iy as usize, ix as usize) * k.at(oc, ic, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

/// Direct-summation forward 2-D DFT of one spatial plane; returns (re, im)
/// per bin in row-major order.
pub fn dft2_forward(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let ang = -2.0 * PI * (u as f64 * i as f64 / h as f64 + v as f64 * j as f64 / w as f64);
                    let x = plane[i * w + j];
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

/// Direct-summation inverse 2-D DFT (normalized by `1/(h*w)`); complex in,
/// complex out.
pub fn dft2_inverse(bins: &[(f64, f64)], h: usize, w: usize) -> Vec<(f64, f64)> {
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0 * PI * (u as f64 * i as f64 / h as f64 + v as f64 * j as f64 / w as f64);
                    let (br, bi) = bins[u * w + v];
                    let (c, s) = (ang.cos(), ang.sin());
                    re += br * c - bi * s;
                    im += br * s + bi * c;
                }
            }
            out.push((re * norm, im * norm));
        }
    }
    out
}

/// Scalar bilinear sample of one plane at half-pixel output coordinates.
pub fn bilinear_point(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, oy: usize, ox: usize) -> f64 {
    let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
        + plane[y0 * w + x1] * (1.0 - fy) * fx
        + plane[y1 * w + x0] * fy * (1.0 - fx)
        + plane[y1 * w + x1] * fy * fx
}

pub fn bilinear_resize(x: &FeatureMap<f64>, out_h: usize, out_w: usize) -> FeatureMap<f64> {
    let (_, _, h, w) = x.shape();
    FeatureMap::from_fn(x.n(), x.c(), out_h, out_w, |n, c, oy, ox| {
        bilinear_point(x.plane(n, c), h, w, out_h, out_w, oy, ox)
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-class masked mean over feature positions (accumulated pixel by pixel).
pub fn masked_means(deep: &FeatureMap<f64>, mask: &Mask) -> (Vec<f64>, Vec<f64>) {
    let (_, c, h, w) = deep.shape();
    let mut fg = vec![0.0; c];
    let mut bg = vec![0.0; c];
    let mut nfg = 0usize;
    let mut nbg = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x) {
                nfg += 1;
                for ch in 0..c {
                    fg[ch] += deep.at(0, ch, y, x);
                }
            } else {
                nbg += 1;
                for ch in 0..c {
                    bg[ch] += deep.at(0, ch, y, x);
                }
            }
        }
    }
    for v in &mut fg {
        *v /= nfg as f64;
    }
    for v in &mut bg {
        *v /= nbg as f64;
    }
    (fg, bg)
}

/// Cosine-to-prototype score planes at feature resolution, then scalar
/// bilinear upsampling to image resolution. Returns (bg, fg) planes.
pub fn score_map(
    deep: &FeatureMap<f64>,
    fg_proto: &[f64],
    bg_proto: &[f64],
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (_, c, h, w) = deep.shape();
    let mut fg_lo = vec![0.0; h * w];
    let mut bg_lo = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: Vec<f64> = (0..c).map(|ch| deep.at(0, ch, y, x)).collect();
            fg_lo[y * w + x] = cosine(&v, fg_proto);
            bg_lo[y * w + x] = cosine(&v, bg_proto);
        }
    }
    let mut fg = vec![0.0; out_h * out_w];
    let mut bg = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            fg[oy * out_w + ox] = bilinear_point(&fg_lo, h, w, out_h, out_w, oy, ox);
            bg[oy * out_w + ox] = bilinear_point(&bg_lo, h, w, out_h, out_w, oy, ox);
        }
    }
    (bg, fg)
}

/// Patch means of a confidence plane, exhaustively sorted with the tie rule
/// (higher mean first, then smaller row-major patch index).
pub fn topk_patches(conf: &[f64], h: usize, w: usize, patch: usize, k: usize) -> Vec<usize> {
    let (rows, cols) = (h / patch, w / patch);
    let mut means: Vec<(usize, f64)> = (0..rows * cols)
        .map(|p| {
            let (py, px) = (p / cols, p % cols);
            let mut acc = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    acc += conf[(py * patch + y) * w + px * patch + x];
                }
            }
            (p, acc / (patch * patch) as f64)
        })
        .collect();
    means.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    means.into_iter().take(k).map(|(p, _)| p).collect()
}

/// Flattened channel-major patch vector of a `1xCxHxW` map.
pub fn patch_vector(fq: &FeatureMap<f64>, patch: usize, p: usize) -> Vec<f64> {
    let (_, c, _, w) = fq.shape();
    let cols = w / patch;
    let (py, px) = (p / cols, p % cols);
    let mut v = Vec::with_capacity(c * patch * patch);
    for ch in 0..c {
        for y in 0..patch {
            for x in 0..patch {
                v.push(fq.at(0, ch, py * patch + y, px * patch + x));
            }
        }
    }
    v
}

/// Patch-to-patch cosine grids broadcast to pixel resolution.
pub fn similarity_maps(fq: &FeatureMap<f64>, selected: &[usize], patch: usize) -> Vec<Vec<f64>> {
    let (_, _, h, w) = fq.shape();
    let (rows, cols) = (h / patch, w / patch);
    selected
        .iter()
        .map(|&kp| {
            let anchor = patch_vector(fq, patch, kp);
            let mut grid = vec![0.0; h * w];
            for m in 0..rows * cols {
                let sim = cosine(&anchor, &patch_vector(fq, patch, m));
                let (py, px) = (m / cols, m % cols);
                for y in 0..patch {
                    for x in 0..patch {
                        grid[(py * patch + y) * w + px * patch + x] = sim;
                    }
                }
            }
            grid
        })
        .collect()
}

/// Monolithic score-map calibration: confidence, patch means, top-K,
/// similarity grids and the foreground update in one literal pass.
/// Returns the updated foreground plane (background is untouched).
pub fn calibrate_fg(
    bg: &[f64],
    fg: &[f64],
    fq: &FeatureMap<f64>,
    patch: usize,
    k: usize,
    scale: f64,
    bias: f64,
) -> Vec<f64> {
    let (_, _, h, w) = fq.shape();
    let conf: Vec<f64> = fg.iter().zip(bg).map(|(f, b)| f - b).collect();
    let selected = topk_patches(&conf, h, w, patch, k);
    let sims = similarity_maps(fq, &selected, patch);
    let mut out = fg.to_vec();
    for grid in &sims {
        for (o, s) in out.iter_mut().zip(grid) {
            *o += scale * (s - bias);
        }
    }
    out
}

/// Two-class mean IoU via explicit pixel sets; a class absent from both
/// masks contributes IoU 1.
pub fn miou(pred: &Mask, gt: &Mask) -> f64 {
    let mut total = 0.0;
    for class in [false, true] {
        let p: HashSet<usize> = (0..pred.h() * pred.w())
            .filter(|&i| pred.at(i / pred.w(), i % pred.w()) == class)
            .collect();
        let g: HashSet<usize> = (0..gt.h() * gt.w())
            .filter(|&i| gt.at(i / gt.w(), i % gt.w()) == class)
            .collect();
        let union = p.union(&g).count();
        let inter = p.intersection(&g).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / 2.0
}

/// Linear CKA via explicit centered Gram matrices:
/// `tr(Kx Ky) / sqrt(tr(Kx Kx) tr(Ky Ky))` with `Kx = X~ X~^T`.
pub fn linear_cka(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let center = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let c = m[0].len();
        let mut means = vec![0.0; c];
        for row in m {
            for (j, v) in row.iter().enumerate() {
                means[j] += v;
            }
        }
        for v in &mut means {
            *v /= n as f64;
        }
        m.iter().map(|row| row.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect()
    };
    let gram = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum()).collect())
            .collect()
    };
    let kx = gram(&center(x));
    let ky = gram(&center(y));
    let tr = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += a[i][j] * b[j][i];
            }
        }
        acc
    };
    let num = tr(&kx, &ky);
    let den = (tr(&kx, &kx) * tr(&ky, &ky)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
