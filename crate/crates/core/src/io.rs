//! Binary container shared by model and checkpoint files:
//! 8-byte magic, little-endian `u64` header length, JSON header, then raw
//! little-endian `f64` payload.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, VindError};

pub(crate) fn write_container<W: Write, H: Serialize>(w: &mut W, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    write_f64s(w, payload)?;
    Ok(())
}

pub(crate) fn read_container<R: Read, H: DeserializeOwned>(r: &mut R, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(VindError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let len = read_u64(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header = serde_json::from_slice(&json)?;
    let n = read_u64(r)? as usize;
    let payload = read_f64s(r, n)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(VindError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, payload))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => VindError::Format(format!("payload shorter than {n} values")),
        _ => VindError::Io(e),
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let payload = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308, std::f64::consts::PI];
        let mut buf = Vec::new();
        write_container(&mut buf, b"TESTFMT1", &serde_json::json!({"a": 1}), &payload).unwrap();
        let (h, back): (serde_json::Value, Vec<f64>) = read_container(&mut buf.as_slice(), b"TESTFMT1").unwrap();
        assert_eq!(h["a"], 1);
        let bits: Vec<u64> = back.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let mut buf = Vec::new();
        write_container(&mut buf, b"TESTFMT1", &serde_json::json!({}), &[1.0, 2.0]).unwrap();
        let r: Result<(serde_json::Value, Vec<f64>)> = read_container(&mut buf.as_slice(), b"OTHERFMT");
        assert!(matches!(r, Err(VindError::Format(_))));
        let short = &buf[..buf.len() - 3];
        let r: Result<(serde_json::Value, Vec<f64>)> = read_container(&mut &short[..], b"TESTFMT1");
        assert!(matches!(r, Err(VindError::Format(_))));
    }
}
