//! Binary persistence: tensor blobs, parameter checkpoints, and PFM rasters.
//!
//! # Tensor blob format
//!
//! ```text
//! bytes 0..4   magic "MVTN"
//! u64 LE       element dtype code (0 = f32, 1 = f64)
//! u64 LE       rank
//! rank x u64   extents, outermost first
//! payload      elements, row-major, little-endian
//! ```
//!
//! # Checkpoint format
//!
//! ```text
//! bytes 0..4   magic "MVCK"
//! u64 LE       parameter count
//! per entry    u64 name length, UTF-8 name bytes, u8 trainable flag,
//!              then one tensor blob holding the value
//! ```
//!
//! Entries appear in parameter insertion order, which is the same order the
//! optimizer sweeps, so a checkpoint restores bit-identical training state.
//!
//! # PFM rasters
//!
//! Grayscale images use the `Pf` header, three-channel images `PF`. The scale
//! line is written as `-1.0` (little-endian data) and rows are stored
//! bottom-to-top per the format's convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn perr(context: &str, detail: impl std::fmt::Display) -> Error {
    Error::parse(format!("{context}: {detail}"))
}

const TENSOR_MAGIC: &[u8; 4] = b"MVTN";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";

/// Bound on deserialized extents; guards against corrupt headers allocating
/// absurd buffers rather than against any legitimate use.
const MAX_ELEMENTS: u64 = 1 << 33;

fn write_u64(w: &mut impl std::io::Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl std::io::Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_tensor_into<T: Real>(w: &mut impl std::io::Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    write_u64(w, T::DTYPE.code() as u64)?;
    write_u64(w, t.rank() as u64)?;
    for &e in t.shape() {
        write_u64(w, e as u64)?;
    }
    let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.byte_size());
    for &v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_tensor_from<T: Real>(r: &mut impl std::io::Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(perr("tensor blob", "bad magic"));
    }
    let code = read_u64(r)?;
    let expected = T::DTYPE.code() as u64;
    if code != expected {
        return Err(perr(
            "tensor blob",
            format!("dtype code {code} does not match expected {expected}"),
        ));
    }
    let rank = read_u64(r)? as usize;
    if rank > 8 {
        return Err(perr("tensor blob", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r)?;
        numel = numel.saturating_mul(e.max(1));
        if numel > MAX_ELEMENTS {
            return Err(perr("tensor blob", "element count exceeds sanity bound"));
        }
        shape.push(e as usize);
    }
    let count: usize = shape.iter().product();
    let es = T::DTYPE.byte_size();
    let mut raw = vec![0u8; count * es];
    r.read_exact(&mut raw)?;
    let data: Vec<T> = raw.chunks_exact(es).map(T::from_le_slice).collect();
    Tensor::new(&shape, data)
}

/// Writes one tensor to `path` in the blob format.
pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_into(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads one tensor from `path`, verifying magic and dtype.
pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(perr("tensor blob", "trailing bytes after payload"));
    }
    Ok(t)
}

/// One named entry of a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointEntry<T: Real> {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Writes named tensors to `path` in insertion order.
pub fn save_checkpoint<T: Real>(path: &Path, entries: &[CheckpointEntry<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u64(&mut w, entries.len() as u64)?;
    for e in entries {
        let name = e.name.as_bytes();
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name)?;
        w.write_all(&[u8::from(e.trainable)])?;
        write_tensor_into(&mut w, &e.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Vec<CheckpointEntry<T>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(perr("checkpoint", "bad magic"));
    }
    let count = read_u64(&mut r)? as usize;
    if count > 1 << 20 {
        return Err(perr("checkpoint", format!("implausible entry count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(perr("checkpoint", "implausible name length"));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| perr("checkpoint", "name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let value = read_tensor_from(&mut r)?;
        entries.push(CheckpointEntry { name, trainable: flag[0] != 0, value });
    }
    Ok(entries)
}

/// Writes a `[H, W]` tensor as a grayscale PFM image.
pub fn save_pfm_gray<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape("save_pfm_gray", format!("expected [H,W], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    let d = t.data();
    for row in (0..h).rev() {
        for col in 0..w {
            let v = d[row * w + col].to_f64() as f32;
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes a `[3, H, W]` tensor as a color PFM image.
pub fn save_pfm_color<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::shape("save_pfm_color", format!("expected [3,H,W], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "PF\n{w} {h}\n-1.0\n")?;
    let d = t.data();
    for row in (0..h).rev() {
        for col in 0..w {
            for c in 0..3 {
                let v = d[c * hw + row * w + col].to_f64() as f32;
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_pfm_token(r: &mut impl std::io::Read) -> Result<String> {
    // Tokens are separated by single whitespace bytes; the header ends with
    // exactly one whitespace character before binary data begins.
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 64 {
            return Err(perr("pfm", "oversized header token"));
        }
    }
    String::from_utf8(tok).map_err(|_| perr("pfm", "non-UTF-8 header token"))
}

/// Reads a PFM image. Grayscale files come back `[H, W]`, color `[3, H, W]`.
pub fn load_pfm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let kind = read_pfm_token(&mut r)?;
    let channels = match kind.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(perr("pfm", format!("unknown header '{other}'"))),
    };
    let w: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| perr("pfm", "bad width"))?;
    let h: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| perr("pfm", "bad height"))?;
    let scale: f64 = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| perr("pfm", "bad scale"))?;
    if w == 0 || h == 0 || (w as u64) * (h as u64) > MAX_ELEMENTS {
        return Err(perr("pfm", format!("implausible dimensions {w}x{h}")));
    }
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![T::zero(); w * h * channels];
    let hw = h * w;
    for row in 0..h {
        // PFM stores the bottom row first.
        let dst_row = h - 1 - row;
        for col in 0..w {
            for c in 0..channels {
                let off = ((row * w + col) * channels + c) * 4;
                let bytes = [raw[off], raw[off + 1], raw[off + 2], raw[off + 3]];
                let v = if little_endian {
                    f32::from_le_bytes(bytes)
                } else {
                    f32::from_be_bytes(bytes)
                };
                let idx = if channels == 1 {
                    dst_row * w + col
                } else {
                    c * hw + dst_row * w + col
                };
                data[idx] = T::of(v as f64);
            }
        }
    }
    let shape: Vec<usize> = if channels == 1 { vec![h, w] } else { vec![3, h, w] };
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use tempfile::tempdir;

    #[test]
    fn tensor_blob_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvtn");
        let mut rng = seeded_rng(5);
        let t = Tensor::<f64>::uniform(&[3, 4, 5], -10.0, 10.0, &mut rng);
        save_tensor(&path, &t).unwrap();
        let back = load_tensor::<f64>(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_blob_rejects_wrong_dtype() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvtn");
        let t = Tensor::<f32>::full(&[2, 2], 1.5);
        save_tensor(&path, &t).unwrap();
        assert!(load_tensor::<f64>(&path).is_err());
    }

    #[test]
    fn tensor_blob_header_bytes_are_as_documented() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvtn");
        let t = Tensor::<f32>::from_f64s(&[2], &[1.0, 2.0]).unwrap();
        save_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"MVTN");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 0); // f32
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2); // extent
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn checkpoint_round_trips_names_flags_and_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.mvck");
        let mut rng = seeded_rng(6);
        let entries = vec![
            CheckpointEntry {
                name: "layer0.weight".into(),
                trainable: true,
                value: Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng),
            },
            CheckpointEntry {
                name: "frozen.table".into(),
                trainable: false,
                value: Tensor::<f64>::uniform(&[7], -1.0, 1.0, &mut rng),
            },
        ];
        save_checkpoint(&path, &entries).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in entries.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn pfm_gray_round_trips_and_stores_bottom_row_first() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let t = Tensor::<f64>::from_f64s(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        save_pfm_gray(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // First stored sample must be the bottom-left value (4.0).
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 4.0);
        let back = load_pfm::<f64>(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn pfm_color_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let mut rng = seeded_rng(8);
        let t = Tensor::<f32>::uniform(&[3, 4, 5], 0.0, 1.0, &mut rng);
        save_pfm_color(&path, &t).unwrap();
        let back = load_pfm::<f32>(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.mvtn");
        let t = Tensor::<f64>::full(&[8], 3.0);
        save_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_tensor::<f64>(&path).is_err());
    }
}
