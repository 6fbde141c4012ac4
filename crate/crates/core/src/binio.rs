//! Little-endian helpers for the binary parameter and model files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn put_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    put_u32(w, u32::try_from(bytes.len()).map_err(|_| Error::BadFormat("field too long".into()))?)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(eof_to_truncated)?;
    Ok(b)
}

pub(crate) fn eof_to_truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated
    } else {
        Error::Io(e)
    }
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

/// Read `n` doubles; refuses absurd lengths before allocating.
pub(crate) fn get_f64s(r: &mut impl Read, n: u64, remaining_hint: Option<u64>) -> Result<Vec<f64>> {
    if let Some(rem) = remaining_hint {
        if n.saturating_mul(8) > rem {
            return Err(Error::Truncated);
        }
    }
    let n = usize::try_from(n).map_err(|_| Error::BadFormat("block too large".into()))?;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(eof_to_truncated)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn get_bytes(r: &mut impl Read, max: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > max {
        return Err(Error::BadFormat(format!("length {n} exceeds limit {max}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(eof_to_truncated)?;
    Ok(buf)
}
