//! Raw trace payload: `AFCI` magic, u16 version, u32 sample rate, u64 sample
//! count, then little-endian f32 samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"AFCI";
pub const TRACE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

pub fn encode_trace(sample_rate: u32, samples: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * samples.len());
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_trace(bytes: &[u8]) -> Result<(u32, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("trace header needs {HEADER_LEN} bytes, got {}", bytes.len())));
    }
    if &bytes[..4] != TRACE_MAGIC {
        return Err(Error::Format("missing AFCI magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let rate = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if count.checked_mul(4) != Some(body.len() as u64) {
        return Err(Error::Format(format!(
            "trace declares {count} samples but carries {} payload bytes",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rate, samples))
}

pub fn write_trace_samples(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    fs::write(path, encode_trace(sample_rate, samples))?;
    Ok(())
}

pub fn read_trace_samples(path: &Path) -> Result<(u32, Vec<f32>)> {
    decode_trace(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let b = encode_trace(250_000, &[1.0, -2.5]);
        assert_eq!(&b[..4], b"AFCI");
        assert_eq!(b.len(), 18 + 8);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 250_000);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let b = encode_trace(1000, &[1.0, 2.0, 3.0]);
        assert!(decode_trace(&b[..b.len() - 1]).is_err());
        assert!(decode_trace(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_trace(&bad).is_err());
        let mut bad = b;
        bad[4] = 9;
        assert!(decode_trace(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rate in 1u32.., samples in proptest::collection::vec(any::<f32>(), 0..64)) {
            let (r, s) = decode_trace(&encode_trace(rate, &samples)).unwrap();
            prop_assert_eq!(r, rate);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&s), bits(&samples));
        }
    }
}
