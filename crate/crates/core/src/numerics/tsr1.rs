//! TSR1 tensor files: magic `TSR1`, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! rank x u64 LE extents, then the row-major LE payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TSR1";

/// A tensor read from disk in whichever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_dtype<S: Scalar>(self) -> Tensor<S> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("TSR1 rank exceeds 255"))?;
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + S::BYTES * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(S::DTYPE as u8);
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 6 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing TSR1 magic".into()));
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown TSR1 dtype {other}"))),
    };
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated TSR1 header".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let raw = u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().expect("8 bytes"));
            usize::try_from(raw).map_err(|_| Error::Format("TSR1 extent overflows usize".into()))
        })
        .collect::<Result<_>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("TSR1 element count overflows".into()))?;
    let payload = &bytes[header..];
    match dtype {
        DType::F32 => Ok(AnyTensor::F32(read_payload(shape, payload, n)?)),
        DType::F64 => Ok(AnyTensor::F64(read_payload(shape, payload, n)?)),
    }
}

fn read_payload<S: Scalar>(shape: Vec<usize>, payload: &[u8], n: usize) -> Result<Tensor<S>> {
    if payload.len() != n * S::BYTES {
        return Err(Error::Format(format!(
            "TSR1 payload is {} bytes, expected {}",
            payload.len(),
            n * S::BYTES
        )));
    }
    let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write<S: Scalar>(mut w: impl Write, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read(mut r: impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

pub fn load_as<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    Ok(load(path)?.into_dtype())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_bytes_for_small_f32_tensor() {
        let t = Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        let mut want = vec![0x54, 0x53, 0x52, 0x31, 0, 1];
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(bytes, want);
    }

    #[test]
    fn f64_header_and_scalar_rank() {
        let bytes = encode(&Tensor::<f64>::scalar(0.5)).unwrap();
        assert_eq!(&bytes[..6], &[0x54, 0x53, 0x52, 0x31, 1, 0]);
        assert_eq!(bytes.len(), 6 + 8);
        assert_eq!(decode(&bytes).unwrap(), AnyTensor::F64(Tensor::scalar(0.5)));
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(decode(b"TSR2\0\0").is_err());
        let mut bytes = encode(&Tensor::<f32>::zeros([3])).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        bytes[4] = 9;
        assert!(decode(&bytes).is_err());
    }
}
