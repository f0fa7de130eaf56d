//! Little-endian primitives shared by the model, codebook, latent and
//! optimizer-state files. Every file starts with 8 magic bytes and a `u32`
//! format version.

use std::io::{self, Read, Write};

use crate::{Error, Result};

pub(crate) fn write_header(w: &mut impl Write, magic: &[u8; 8], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())
}

/// Reads and checks the magic bytes and version.
pub(crate) fn read_header(r: &mut impl Read, magic: &[u8; 8], version: u32, what: &str) -> Result<()> {
    let mut found = [0u8; 8];
    read_exact(r, &mut found, what)?;
    if &found != magic {
        return Err(Error::Format(format!("{what}: bad magic bytes")));
    }
    let v = read_u32(r, what)?;
    if v != version {
        return Err(Error::Version { expected: version, found: v });
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, what)?))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let n = read_u32(r, what)? as usize;
    let mut bytes = vec![0u8; n];
    read_exact(r, &mut bytes, what)?;
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("{what}: invalid UTF-8")))
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

/// Fails when bytes remain after a complete record.
pub(crate) fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("{what}: trailing bytes"))),
    }
}
