//! Binary files for embedding sequences and modality stacks.
//!
//! Embedding file: `EMB1`, `u32` id length, UTF-8 id, `u32` rows, `u32`
//! width, then `f32` values row-major. Tensor file: `TNS1`, `u32` rank, `u32`
//! extents, then `f32` values. All little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Reader;
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;
use crate::trainer::EmbeddingSequence;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const TNS_MAGIC: &[u8; 4] = b"TNS1";

fn dim_u32(d: usize) -> Result<[u8; 4]> {
    u32::try_from(d).map(u32::to_le_bytes).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(r: &mut Reader, n: usize) -> Result<Vec<f32>> {
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn expect_magic(r: &mut Reader, magic: &[u8; 4], path: &Path) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("{} does not start with {}", path.display(), String::from_utf8_lossy(magic))));
    }
    Ok(())
}

fn expect_end(r: &Reader, path: &Path) -> Result<()> {
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!("{}: {} bytes beyond the header length", path.display(), r.bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn encode_embedding(seq: &EmbeddingSequence) -> Result<Vec<u8>> {
    let shape = seq.features.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!("embedding of {} is not two-dimensional", seq.volume_id)));
    }
    let mut out = Vec::with_capacity(16 + seq.volume_id.len() + seq.features.numel() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&dim_u32(seq.volume_id.len())?);
    out.extend_from_slice(seq.volume_id.as_bytes());
    out.extend_from_slice(&dim_u32(shape[0])?);
    out.extend_from_slice(&dim_u32(shape[1])?);
    push_f32s(&mut out, seq.features.data());
    Ok(out)
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<EmbeddingSequence> {
    let mut r = Reader { bytes, pos: 0 };
    expect_magic(&mut r, EMB_MAGIC, path)?;
    let volume_id = r.string()?;
    let rows = r.u32()? as usize;
    let width = r.u32()? as usize;
    let data = read_f32s(&mut r, rows * width)?;
    expect_end(&r, path)?;
    Ok(EmbeddingSequence { volume_id, features: Tensor::from_vec(&[rows, width], data) })
}

pub fn write_embedding(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    fs::write(path, encode_embedding(seq)?).at(path)
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSequence> {
    decode_embedding(&fs::read(path).at(path)?, path)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(TNS_MAGIC);
    out.extend_from_slice(&dim_u32(t.ndim())?);
    for &d in t.shape() {
        out.extend_from_slice(&dim_u32(d)?);
    }
    push_f32s(&mut out, t.data());
    fs::write(path, out).at(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).at(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    expect_magic(&mut r, TNS_MAGIC, path)?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let data = read_f32s(&mut r, shape.iter().product())?;
    expect_end(&r, path)?;
    Ok(Tensor::from_vec(&shape, data))
}

/// One row of an embedding directory's `index.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub volume_id: String,
    /// Relative to the index file's directory.
    pub path: PathBuf,
    pub windows: usize,
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut text = String::from("volume_id,path,W\n");
    for e in entries {
        text.push_str(&format!("{},{},{}\n", e.volume_id, e.path.display(), e.windows));
    }
    fs::write(path, text).at(path)
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(IndexEntry { volume_id: f[0].to_string(), path: PathBuf::from(f[1]), windows: f[2].parse().map_err(|_| bad())? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn embedding_round_trip(rows in 1usize..6, width in 1usize..9, id in "[a-z_0-9]{1,12}", seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * width).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let seq = EmbeddingSequence { volume_id: id, features: Tensor::from_vec(&[rows, width], data) };
            let bytes = encode_embedding(&seq).unwrap();
            prop_assert_eq!(bytes.len(), 16 + seq.volume_id.len() + 4 * rows * width);
            let back = decode_embedding(&bytes, Path::new("x")).unwrap();
            prop_assert_eq!(back.volume_id, seq.volume_id);
            let same = back.features.data().iter().zip(seq.features.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.features.shape(), seq.features.shape());
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let seq = EmbeddingSequence { volume_id: "v1".into(), features: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]) };
        let mut bytes = encode_embedding(&seq).unwrap();
        bytes.push(0);
        assert!(decode_embedding(&bytes, Path::new("x")).is_err());
        assert!(decode_embedding(&bytes[..bytes.len() - 2], Path::new("x")).is_err());
        assert!(decode_embedding(b"EMB2", Path::new("x")).is_err());
    }

    #[test]
    fn tensor_and_index_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(&[2, 1, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, 9.0]);
        let p = dir.path().join("a.tns");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let entries = vec![IndexEntry { volume_id: "v".into(), path: "v.emb".into(), windows: 3 }];
        let ip = dir.path().join("index.csv");
        write_index(&ip, &entries).unwrap();
        assert_eq!(read_index(&ip).unwrap(), entries);
    }
}
