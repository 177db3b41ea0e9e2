//! `HTF1` binary tensor format.
//!
//! Layout: the magic bytes `HTF1`, one dtype byte (1 = f32, 2 = f64), one rank
//! byte, `rank` little-endian u64 extents, then the little-endian payload.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"HTF1";

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode(t, &mut out);
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the number of
/// bytes consumed. Payloads written with the other float width are converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing HTF1 magic".into()));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => return Err(Error::Format(format!("unknown HTF1 dtype code {other}"))),
    };
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| Error::Format("truncated HTF1 header".into()))?;
        shape.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = bytes
        .get(pos..pos + n * width)
        .ok_or_else(|| Error::Format("truncated HTF1 payload".into()))?;
    let data: Vec<T> = if dtype == T::DTYPE {
        payload.chunks_exact(width).map(T::read_le).collect()
    } else if dtype == 1 {
        payload
            .chunks_exact(4)
            .map(|c| T::c(f32::read_le(c) as f64))
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| T::c(f64::read_le(c)))
            .collect()
    };
    Ok((Tensor::from_vec(&shape, data)?, pos + n * width))
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(t))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} has {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Path of the text index that accompanies an archive.
pub fn index_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

/// Writes named tensors back to back as HTF1 records, plus a text index of
/// `name<TAB>offset<TAB>length` lines. Both files are written via a temporary
/// name and renamed, so a failed save leaves no partial archive.
pub fn save_archive<T: Scalar>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut blob = Vec::new();
    let mut index = String::new();
    for (name, t) in entries {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "bad archive entry name {name:?}"
            )));
        }
        let start = blob.len();
        encode(t, &mut blob);
        index.push_str(&format!("{name}\t{start}\t{}\n", blob.len() - start));
    }
    write_atomic(path, &blob)?;
    write_atomic(&index_path(path), index.as_bytes())
}

/// Writes through `path.tmp` and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`save_archive`], in index order.
pub fn load_archive<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ipath = index_path(path);
    let index = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let mut out = Vec::new();
    for (n, line) in index.lines().enumerate() {
        let bad = || {
            Error::Format(format!(
                "{} line {}: malformed entry",
                ipath.display(),
                n + 1
            ))
        };
        let mut parts = line.split('\t');
        let (Some(name), Some(off), Some(len), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let off: usize = off.parse().map_err(|_| bad())?;
        let len: usize = len.parse().map_err(|_| bad())?;
        let bytes = off
            .checked_add(len)
            .and_then(|end| blob.get(off..end))
            .ok_or_else(|| {
                Error::Format(format!("entry {name} lies outside {}", path.display()))
            })?;
        let (t, used) = decode(bytes)?;
        if used != len {
            return Err(Error::Format(format!(
                "entry {name} has {} stray bytes",
                len - used
            )));
        }
        out.push((name.to_string(), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = to_bytes(&t);
        assert_eq!(&bytes[..4], b"HTF1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f32>::ones(&[3]);
        let mut bytes = to_bytes(&t);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn converts_between_widths() {
        let t = Tensor::<f32>::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let (back, _) = decode::<f64>(&to_bytes(&t)).unwrap();
        assert_eq!(back.data(), &[0.5, 0.25]);
    }

    #[test]
    fn archive_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.htf");
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, f64::MIN_POSITIVE]).unwrap();
        let b = Tensor::<f64>::scalar(-0.5);
        save_archive(&path, &[("a".to_string(), &a), ("b.c".to_string(), &b)]).unwrap();
        let back = load_archive::<f64>(&path).unwrap();
        assert_eq!(
            back,
            vec![("a".to_string(), a.clone()), ("b.c".to_string(), b)]
        );
        assert!(!dir.path().join("ck.htf.tmp").exists());

        std::fs::write(index_path(&path), "a\t0\t99999\n").unwrap();
        assert!(matches!(load_archive::<f64>(&path), Err(Error::Format(_))));
        assert!(matches!(
            load_archive::<f64>(&dir.path().join("none.htf")),
            Err(Error::MissingFile(_))
        ));
        assert!(save_archive(&path, &[("x\ty".to_string(), &a)]).is_err());
    }
}
