//! Binary NetPBM readers and writers: P6 (PPM) images, P5 (PGM) masks.
//!
//! Writers emit maxval 255. Readers accept comments and arbitrary token
//! whitespace, require maxval 255, and treat short payloads, oversized
//! headers or non-binary mask values as format errors. Trailing bytes after
//! the payload are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Mask};

/// Caps header-declared dimensions so corrupt files cannot demand huge
/// allocations.
const MAX_DIM: usize = 1 << 14;

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to64().clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header {
    w: usize,
    h: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt(&format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fmt("truncated header")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start || pos - start > 8 {
            return Err(fmt("malformed numeric field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("malformed numeric field"))?;
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt("missing payload separator")),
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fmt(&format!("maxval {maxval}, only 255 supported")));
    }
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(fmt(&format!("implausible dimensions {w}x{h}")));
    }
    Ok(Header { w, h, offset: pos })
}

/// Writes a `1x3xHxW` map in [0, 1] as a binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, img: &FeatureMap<T>) -> Result<()> {
    if img.n() != 1 || img.c() != 3 {
        return Err(Error::Shape(format!("write_ppm: need 1x3xHxW, got {:?}", img.shape())));
    }
    let (h, w) = (img.h(), img.w());
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(img.at(0, c, y, x)));
            }
        }
    }
    crate::util::write_atomic(path, &bytes)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let hd = parse_header(&bytes, b"P6", path)?;
    let need = 3 * hd.w * hd.h;
    let payload = bytes
        .get(hd.offset..hd.offset + need)
        .ok_or_else(|| Error::Format(format!("{}: payload truncated ({} of {need} bytes)", path.display(), bytes.len() - hd.offset)))?;
    let mut data = vec![T::zero(); need];
    for y in 0..hd.h {
        for x in 0..hd.w {
            for c in 0..3 {
                data[(c * hd.h + y) * hd.w + x] = T::of(payload[(y * hd.w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    FeatureMap::new(1, 3, hd.h, hd.w, data)
}

/// Writes a mask as a binary PGM with values 0 / 255.
pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = (mask.h(), mask.w());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v { 255u8 } else { 0u8 }));
    crate::util::write_atomic(path, &bytes)
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let hd = parse_header(&bytes, b"P5", path)?;
    let need = hd.w * hd.h;
    let payload = bytes
        .get(hd.offset..hd.offset + need)
        .ok_or_else(|| Error::Format(format!("{}: payload truncated ({} of {need} bytes)", path.display(), bytes.len() - hd.offset)))?;
    let mut data = Vec::with_capacity(need);
    for &b in payload {
        match b {
            0 => data.push(false),
            255 => data.push(true),
            other => {
                return Err(Error::Format(format!("{}: mask value {other} is not 0/255", path.display())))
            }
        }
    }
    Mask::new(hd.h, hd.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let img = FeatureMap::from_fn(1, 3, 9, 7, |_, c, y, x| ((c * 13 + y * 7 + x) % 11) as f64 / 10.0);
        write_ppm(&p, &img).unwrap();
        let back: FeatureMap<f64> = read_ppm(&p).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pgm_mask_round_trip_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask = Mask::new(3, 4, (0..12).map(|i| i % 3 == 0).collect()).unwrap();
        write_pgm_mask(&p, &mask).unwrap();
        assert_eq!(read_pgm_mask(&p).unwrap(), mask);
    }

    #[test]
    fn wrong_maxval_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P5\n2 2\n127\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pgm_mask(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("short.ppm");
        fs::write(&p, b"P6\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_ppm::<f32>(&p), Err(Error::Format(_))));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5 # comment\n# another\n2 1 255\n\x00\xff").unwrap();
        let m = read_pgm_mask(&p).unwrap();
        assert!(!m.at(0, 0));
        assert!(m.at(0, 1));
    }

    #[test]
    fn nonbinary_mask_value_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gray.pgm");
        fs::write(&p, b"P5\n1 1\n255\n\x80").unwrap();
        assert!(matches!(read_pgm_mask(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_ppm::<f32>(Path::new("/nonexistent/x.ppm")), Err(Error::Io(_))));
    }
}
