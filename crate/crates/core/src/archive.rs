//! Tensor-archive file format for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TNSA"
//! version u32 (currently 1)
//! meta    u32 length + UTF-8 JSON blob (config echo, free-form)
//! count   u32
//! entry*  u32 name length, UTF-8 name,
//!         u32 ndim, ndim x u64 dims,
//!         prod(dims) x f32 raw little-endian values
//! ```
//!
//! Values are stored as `f32` regardless of the runtime float width, so
//! archives written by an `f64` model load into an `f32` one and vice versa.
//! Entry order is preserved; loading is name-addressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let entry = ArchiveEntry {
            name: name.into(),
            shape,
            data,
        };
        assert_eq!(
            entry.shape.iter().product::<usize>(),
            entry.data.len(),
            "archive entry {} shape/data mismatch",
            entry.name
        );
        entry
    }
}

pub fn write_archive(path: &Path, meta: &str, entries: &[ArchiveEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(String, Vec<ArchiveEntry>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a tensor archive (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported archive version {version}",
            path.display()
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta)
        .map_err(|_| Error::data(format!("{}: metadata is not UTF-8", path.display())))?;
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data(format!("{}: entry name is not UTF-8", path.display())))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|_| {
            Error::data(format!("{}: truncated data for entry {name}", path.display()))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(ArchiveEntry { name, shape, data });
    }
    Ok((meta, entries))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tnsa");
        let entries = vec![
            ArchiveEntry::new("enc.blocks.0.weight", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 9.0, -0.125]),
            ArchiveEntry::new("scalar", vec![1], vec![42.0]),
            ArchiveEntry::new("empty-shape-ok", vec![0], vec![]),
        ];
        write_archive(&path, r#"{"width":192}"#, &entries).unwrap();
        let (meta, back) = read_archive(&path).unwrap();
        assert_eq!(meta, r#"{"width":192}"#);
        assert_eq!(back, entries);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(read_archive(&path).is_err());
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tnsa");
        write_archive(
            &path,
            "",
            &[ArchiveEntry::new("x", vec![4], vec![1.0, 2.0, 3.0, 4.0])],
        )
        .unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(read_archive(&path).is_err());
    }
}
