//! Little-endian binary primitives shared by the feature (RICF), centroid
//! (RICC), and checkpoint (RICP) file formats. Truncated input surfaces as a
//! format error naming the missing piece, not a bare I/O error.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub(crate) fn read_bytes<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("file truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf, "magic")?;
    if &buf != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_bytes(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut bytes = vec![0u8; len];
    read_bytes(r, &mut bytes, what)?;
    String::from_utf8(bytes).map_err(|e| Error::format(format!("{what}: invalid utf-8: {e}")))
}
