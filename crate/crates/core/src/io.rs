//! Low-level binary plumbing shared by the on-disk formats.
//!
//! Every format follows the same header discipline: a 4-byte ASCII magic,
//! a u32 LE format version, then fixed-layout little-endian payload.
//! Boolean planes are bit-packed LSB-first: element `i` lives in bit
//! `i % 8` of byte `i / 8`.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {format} version {found} (supported: {supported})")]
    BadVersion { format: &'static str, found: u32, supported: u32 },
    #[error("{format}: {reason}")]
    Malformed { format: &'static str, reason: String },
}

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<(), IoError> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

pub fn read_header<R: Read>(
    r: &mut R,
    format: &'static str,
    magic: &[u8; 4],
    version: u32,
) -> Result<(), IoError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(IoError::BadMagic { expected: *magic, found });
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != version {
        return Err(IoError::BadVersion { format, found: v, supported: version });
    }
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<(), IoError> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, IoError> {
    let mut out = vec![0.0f64; count];
    for v in &mut out {
        *v = r.read_f32::<LittleEndian>()? as f64;
    }
    Ok(out)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn write_bits<W: Write>(w: &mut W, bits: &[bool]) -> Result<(), IoError> {
    w.write_all(&pack_bits(bits))?;
    Ok(())
}

pub fn read_bits<R: Read>(r: &mut R, count: usize) -> Result<Vec<bool>, IoError> {
    let mut bytes = vec![0u8; count.div_ceil(8)];
    r.read_exact(&mut bytes)?;
    Ok(unpack_bits(&bytes, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        let bits: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 3);
        assert_eq!(unpack_bits(&packed, 19), bits);
    }

    #[test]
    fn bits_lsb_first() {
        // element 0 -> bit 0 of byte 0
        assert_eq!(pack_bits(&[true, false, false, false, false, false, false, false, true]), vec![1, 1]);
    }

    #[test]
    fn header_round_trip_and_mismatch() {
        let mut buf = Vec::new();
        write_header(&mut buf, b"LPCD", 1).unwrap();
        read_header(&mut &buf[..], "LPCD", b"LPCD", 1).unwrap();
        assert!(matches!(
            read_header(&mut &buf[..], "VOXG", b"VOXG", 1),
            Err(IoError::BadMagic { .. })
        ));
        assert!(matches!(
            read_header(&mut &buf[..], "LPCD", b"LPCD", 2),
            Err(IoError::BadVersion { .. })
        ));
    }
}
