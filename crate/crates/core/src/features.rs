//! Flat binary storage for per-region feature vectors.
//!
//! Clustering consumes one embedding per region, produced upstream of this
//! crate (here: the synthetic generator). The file is little-endian binary:
//! magic `RICF`, `u32` row count, `u32` dimension, then `count × dim` f32
//! values row-major. Row order matches manifest traversal order — image by
//! image, region by region — so row *i* labels the *i*-th region overall.

use crate::binio::{expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::error::{Error, Result};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FEATURES_MAGIC: &[u8; 4] = b"RICF";

pub fn write_features<W: Write>(w: &mut W, features: &Array2<f32>) -> Result<()> {
    w.write_all(FEATURES_MAGIC)?;
    write_u32(w, u32::try_from(features.nrows()).map_err(|_| Error::validation("row count exceeds u32"))?)?;
    write_u32(w, u32::try_from(features.ncols()).map_err(|_| Error::validation("dimension exceeds u32"))?)?;
    let data = features
        .as_slice()
        .expect("owned arrays are standard layout");
    write_f32s(w, data)?;
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Array2<f32>> {
    expect_magic(r, FEATURES_MAGIC)?;
    let count = read_u32(r, "feature row count")? as usize;
    let dim = read_u32(r, "feature dimension")? as usize;
    if dim == 0 {
        return Err(Error::format("feature dimension is zero"));
    }
    let data = read_f32s(r, count * dim, "feature rows")?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after feature rows"));
    }
    Array2::from_shape_vec((count, dim), data)
        .map_err(|e| Error::format(format!("feature shape: {e}")))
}

pub fn write_features_file(path: &Path, features: &Array2<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, features)?;
    w.flush()?;
    Ok(())
}

pub fn read_features_file(path: &Path) -> Result<Array2<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_features(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let features =
            Array2::from_shape_fn((7, 5), |(i, j)| (i as f32 + 1.0) / (j as f32 + 2.0));
        let mut buf = Vec::new();
        write_features(&mut buf, &features).unwrap();
        let back = read_features(&mut buf.as_slice()).unwrap();
        assert_eq!(features, back);
    }

    #[test]
    fn empty_table_round_trips() {
        let features = Array2::<f32>::zeros((0, 3));
        let mut buf = Vec::new();
        write_features(&mut buf, &features).unwrap();
        let back = read_features(&mut buf.as_slice()).unwrap();
        assert_eq!(back.nrows(), 0);
        assert_eq!(back.ncols(), 3);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let features = Array2::<f32>::ones((3, 4));
        let mut buf = Vec::new();
        write_features(&mut buf, &features).unwrap();

        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(read_features(&mut wrong_magic.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 5];
        assert!(read_features(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_features(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("feat.ricf");
        let features = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f32);
        write_features_file(&path, &features).unwrap();
        assert_eq!(read_features_file(&path).unwrap(), features);
    }
}
