//! Binary checkpoint container: magic, format version, a JSON header
//! describing the model configuration, then f64 parameter arrays. Writing is
//! deterministic (no timestamps), so identical states produce identical
//! files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const VERSION: u32 = 1;

pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    arrays: &[&Array2<f64>],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let (rows, cols) = a.dim();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
) -> Result<(H, Vec<Array2<f64>>)> {
    let mut data = Vec::new();
    File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut data)?;
    let corrupt =
        |what: &str| Error::Checkpoint(format!("{} is corrupt: {what}", path.display()));

    let take_u32 = |at: &mut usize| -> Result<u32> {
        let b = data
            .get(*at..*at + 4)
            .ok_or_else(|| corrupt("truncated"))?;
        *at += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("slice of 4")))
    };

    if data.len() < 4 || &data[..4] != magic {
        return Err(corrupt("wrong magic"));
    }
    let mut at = 4;
    let version = take_u32(&mut at)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let header_len = take_u32(&mut at)? as usize;
    let header_bytes = data
        .get(at..at + header_len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: H = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    at += header_len;

    let n_arrays = take_u32(&mut at)? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let rows = take_u32(&mut at)? as usize;
        let cols = take_u32(&mut at)? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = data
                .get(at..at + 8)
                .ok_or_else(|| corrupt("truncated array data"))?;
            values.push(f64::from_le_bytes(b.try_into().expect("slice of 8")));
            at += 8;
        }
        arrays.push(
            Array2::from_shape_vec((rows, cols), values)
                .expect("shape matches the element count read"),
        );
    }
    if at != data.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        dim: usize,
        seed: u64,
    }

    #[test]
    fn round_trips_header_and_arrays_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = array![[1.0, 2.5], [3.0, -4.25]];
        let b = array![[0.1, 0.2, 0.3]];
        write_checkpoint(&path, b"TEST", &Header { dim: 2, seed: 9 }, &[&a, &b]).unwrap();
        let (header, arrays): (Header, _) = read_checkpoint(&path, b"TEST").unwrap();
        assert_eq!(header, Header { dim: 2, seed: 9 });
        assert_eq!(arrays.len(), 2);
        assert_eq!(arrays[0], a);
        assert_eq!(arrays[1], b);
    }

    #[test]
    fn identical_states_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let a = array![[0.5, -0.5]];
        write_checkpoint(&p1, b"TEST", &Header { dim: 1, seed: 0 }, &[&a]).unwrap();
        write_checkpoint(&p2, b"TEST", &Header { dim: 1, seed: 0 }, &[&a]).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = array![[1.0]];
        write_checkpoint(&path, b"AAAA", &Header { dim: 1, seed: 0 }, &[&a]).unwrap();
        assert!(read_checkpoint::<Header>(&path, b"BBBB").is_err());
    }
}
