//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LOEC"
//! version u32      (currently 1)
//! payload:
//!   count u32
//!   count x tensor:
//!     name_len u32, name bytes (UTF-8)
//!     rank u32, rank x dim u32
//!     prod(dims) x f32
//! checksum u64     FNV-1a over the payload bytes
//! ```
//!
//! Weights are stored as f32; loading and saving an f32 encoder round-trips
//! bit-for-bit. Structure (strides, ReLU flags, tap, freeze mask, init seed)
//! travels in a `meta` tensor whose entries are small exact integers; the
//! 64-bit seed is split into four 16-bit limbs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderState, Stage};
use crate::scalar::Scalar;
use crate::tensor::ConvKernel;

const MAGIC: &[u8; 4] = b"LOEC";
const VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;
const MAX_ELEMS: usize = 1 << 26;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Tensor {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn push_tensor(payload: &mut Vec<u8>, t: &Tensor) {
    payload.extend((t.name.len() as u32).to_le_bytes());
    payload.extend(t.name.as_bytes());
    payload.extend((t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        payload.extend(d.to_le_bytes());
    }
    for v in &t.data {
        payload.extend(v.to_le_bytes());
    }
}

pub fn save_checkpoint<T: Scalar>(enc: &EncoderState<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let seed = enc.init_seed();
    let mut meta = vec![
        enc.num_stages() as f32,
        enc.tap_index() as f32,
        enc.freeze_mask().iter().enumerate().map(|(i, &f)| (f as u32) << i).sum::<u32>() as f32,
        (seed & 0xffff) as f32,
        ((seed >> 16) & 0xffff) as f32,
        ((seed >> 32) & 0xffff) as f32,
        ((seed >> 48) & 0xffff) as f32,
    ];
    for s in enc.stages() {
        meta.push(s.kernel.stride() as f32);
        meta.push(s.kernel.padding() as f32);
        meta.push(s.relu as u32 as f32);
    }
    tensors.push(Tensor { name: "meta".into(), dims: vec![meta.len() as u32], data: meta });
    for (i, s) in enc.stages().iter().enumerate() {
        tensors.push(Tensor {
            name: format!("stage{}.weight", i + 1),
            dims: vec![s.kernel.out_c() as u32, s.kernel.in_c() as u32, s.kernel.kh() as u32, s.kernel.kw() as u32],
            data: s.kernel.weights().iter().map(|v| v.to64() as f32).collect(),
        });
        tensors.push(Tensor {
            name: format!("stage{}.bias", i + 1),
            dims: vec![s.bias.len() as u32],
            data: s.bias.iter().map(|v| v.to64() as f32).collect(),
        });
    }

    let mut payload = Vec::new();
    payload.extend((tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        push_tensor(&mut payload, t);
    }
    let mut bytes = Vec::with_capacity(payload.len() + 16);
    bytes.extend(MAGIC);
    bytes.extend(VERSION.to_le_bytes());
    let checksum = fnv1a64(&payload);
    bytes.extend(payload);
    bytes.extend(checksum.to_le_bytes());
    crate::util::write_atomic(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!("{}: truncated while reading {what}", self.ctx))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let ctx = path.display().to_string();
    let mut r = Reader { bytes: &bytes, pos: 0, ctx: ctx.clone() };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format(format!("{ctx}: bad magic, expected LOEC")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("{ctx}: unsupported format version {version}")));
    }
    let payload_start = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count > 1024 {
        return Err(Error::Format(format!("{ctx}: implausible tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Format(format!("{ctx}: implausible tensor name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format(format!("{ctx}: tensor name is not UTF-8")))?
            .to_string();
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("{ctx}: tensor `{name}` has implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems = 1usize;
        for _ in 0..rank {
            let d = r.u32(&format!("dims of `{name}`"))? as usize;
            elems = elems.saturating_mul(d);
            dims.push(d as u32);
        }
        if elems == 0 || elems > MAX_ELEMS {
            return Err(Error::Format(format!("{ctx}: tensor `{name}` has implausible size {elems}")));
        }
        let raw = r.take(4 * elems, &format!("data of `{name}`"))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { name, dims, data });
    }
    let payload_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
    let computed = fnv1a64(&bytes[payload_start..payload_end]);
    if stored != computed {
        return Err(Error::Format(format!("{ctx}: checksum mismatch ({stored:#x} vs {computed:#x})")));
    }

    let meta = tensors
        .iter()
        .find(|t| t.name == "meta")
        .ok_or_else(|| Error::Format(format!("{ctx}: missing meta tensor")))?;
    if meta.data.len() < 7 {
        return Err(Error::Format(format!("{ctx}: meta tensor too short")));
    }
    let as_usize = |v: f32, what: &str| -> Result<usize> {
        if v.fract() != 0.0 || v < 0.0 || v > 1e6 {
            return Err(Error::Format(format!("{ctx}: meta field {what} = {v} is not a small integer")));
        }
        Ok(v as usize)
    };
    let n_stages = as_usize(meta.data[0], "n_stages")?;
    let tap = as_usize(meta.data[1], "tap")?;
    let freeze_bits = as_usize(meta.data[2], "freeze")?;
    let seed = (as_usize(meta.data[3], "seed0")? as u64)
        | (as_usize(meta.data[4], "seed1")? as u64) << 16
        | (as_usize(meta.data[5], "seed2")? as u64) << 32
        | (as_usize(meta.data[6], "seed3")? as u64) << 48;
    if meta.data.len() != 7 + 3 * n_stages {
        return Err(Error::Format(format!("{ctx}: meta length {} for {n_stages} stages", meta.data.len())));
    }

    let mut stages = Vec::with_capacity(n_stages);
    for i in 0..n_stages {
        let wname = format!("stage{}.weight", i + 1);
        let bname = format!("stage{}.bias", i + 1);
        let wt = tensors
            .iter()
            .find(|t| t.name == wname)
            .ok_or_else(|| Error::Format(format!("{ctx}: missing tensor `{wname}`")))?;
        let bt = tensors
            .iter()
            .find(|t| t.name == bname)
            .ok_or_else(|| Error::Format(format!("{ctx}: missing tensor `{bname}`")))?;
        if wt.dims.len() != 4 {
            return Err(Error::Format(format!("{ctx}: `{wname}` is not rank 4")));
        }
        let (oc, ic, kh, kw) =
            (wt.dims[0] as usize, wt.dims[1] as usize, wt.dims[2] as usize, wt.dims[3] as usize);
        if bt.data.len() != oc {
            return Err(Error::Format(format!("{ctx}: `{bname}` length {} vs {oc} filters", bt.data.len())));
        }
        let stride = as_usize(meta.data[7 + 3 * i], "stride")?;
        let padding = as_usize(meta.data[8 + 3 * i], "padding")?;
        let relu = as_usize(meta.data[9 + 3 * i], "relu")? != 0;
        let kernel = ConvKernel::new(
            oc,
            ic,
            kh,
            kw,
            stride,
            padding,
            wt.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .map_err(|e| Error::Format(format!("{ctx}: `{wname}`: {e}")))?;
        stages.push(Stage { kernel, bias: bt.data.iter().map(|&v| T::of(v as f64)).collect(), relu });
    }
    let freeze = (0..n_stages).map(|i| freeze_bits >> i & 1 == 1).collect();
    EncoderState::from_parts(stages, tap, freeze, seed).map_err(|e| Error::Format(format!("{ctx}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("enc.ckpt");
        let mut enc = EncoderState::<f32>::default_init(0x1234_5678_9abc_def0, 2).unwrap();
        enc.set_frozen_by_name(&["stage1".into(), "stage3".into()]).unwrap();
        save_checkpoint(&enc, &p).unwrap();
        let back: EncoderState<f32> = load_checkpoint(&p).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"NOPE rest of file").unwrap();
        let e = load_checkpoint::<f32>(&p).unwrap_err();
        assert_eq!(e.code(), "E_FORMAT");
    }

    #[test]
    fn truncation_names_offending_tensor() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.ckpt");
        let enc = EncoderState::<f32>::default_init(7, 1).unwrap();
        save_checkpoint(&enc, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        // Cut inside stage2.weight's data region.
        let cut = bytes.len() * 2 / 5;
        fs::write(&p, &bytes[..cut]).unwrap();
        let e = load_checkpoint::<f32>(&p).unwrap_err();
        assert_eq!(e.code(), "E_FORMAT");
        assert!(e.to_string().contains("stage"), "message should name the tensor: {e}");
    }

    #[test]
    fn checksum_flip_is_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("flip.ckpt");
        let enc = EncoderState::<f32>::default_init(7, 1).unwrap();
        save_checkpoint(&enc, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let e = load_checkpoint::<f32>(&p).unwrap_err();
        assert_eq!(e.code(), "E_FORMAT");
    }
}
