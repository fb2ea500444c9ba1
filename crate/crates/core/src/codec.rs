//! Little-endian helpers shared by the binary file and message formats.

use std::io::{Read, Write};

use crate::error::{FclError, Result};

pub(crate) fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, kind: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| FclError::Format {
        kind,
        message: format!("truncated input: {e}"),
    })?;
    Ok(buf)
}

pub(crate) fn read_u16<R: Read>(r: &mut R, kind: &'static str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r, kind)?))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, kind: &'static str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, kind)?))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, kind: &'static str) -> Result<f32> {
    Ok(f32::from_le_bytes(read_array(r, kind)?))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, kind: &'static str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r, kind)?))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], kind: &'static str) -> Result<()> {
    let got: [u8; 4] = read_array(r, kind)?;
    if &got != magic {
        return Err(FclError::Format {
            kind,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    Ok(())
}

pub(crate) fn expect_version<R: Read>(r: &mut R, version: u32, kind: &'static str) -> Result<()> {
    let got = read_u32(r, kind)?;
    if got != version {
        return Err(FclError::Format {
            kind,
            message: format!("unsupported version {got}, expected {version}"),
        });
    }
    Ok(())
}

pub(crate) fn expect_eof<R: Read>(r: &mut R, kind: &'static str) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(FclError::Format {
            kind,
            message: "trailing bytes after payload".into(),
        }),
    }
}

pub(crate) fn to_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| FclError::Contract(format!("{what} {v} does not fit in u32")))
}
