//! UTNS tensor container.
//!
//! Layout, all little-endian:
//! magic `b"UTNS"`, version `u16`, rank `u16`, `rank` dims as `u32`,
//! dtype byte (0 = f32, 1 = f64), then the raw element payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"UTNS";
const VERSION: u16 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = t.shape().len();
    if rank > u16::MAX as usize {
        return Err(Error::Contract("tensor rank exceeds container limit".into()));
    }
    let mut out = Vec::with_capacity(9 + 4 * rank + t.numel() * T::DTYPE.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rank as u16).to_le_bytes());
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::Contract("tensor dimension exceeds container limit".into()));
        }
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.into_f64().to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// A decoded tensor of either element width.
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let fail = |msg: &str| Error::Contract(format!("bad container: {msg}"));
    if bytes.len() < 9 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("wrong magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end + 1 {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let dtype = Dtype::from_code(bytes[dims_end])?;
    let payload = &bytes[dims_end + 1..];
    let numel: usize = shape.iter().product();
    if payload.len() != numel * dtype.byte_width() {
        return Err(fail(&format!(
            "payload is {} bytes, shape {:?} with dtype width {} wants {}",
            payload.len(),
            shape,
            dtype.byte_width(),
            numel * dtype.byte_width()
        )));
    }
    match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyTensor::F32(Tensor::from_vec(&shape, data)?))
        }
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(AnyTensor::F64(Tensor::from_vec(&shape, data)?))
        }
    }
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

/// Read and cast to the requested element type.
pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_tensor_any(path)?.cast())
}

/// Read, requiring the stored dtype to match `T` exactly (bit-preserving).
pub fn read_tensor_exact<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = read_tensor_any(&path)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::Contract(format!(
            "{}: stored dtype {:?} does not match requested {:?}",
            path.as_ref().display(),
            any.dtype(),
            T::DTYPE
        )));
    }
    Ok(any.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_byte_layout() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0f32, 1.0, -2.0, 0.5, 3.25, -0.125]).unwrap();
        let bytes = encode(&t).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"UTNS");
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&3u32.to_le_bytes());
        expect.push(0u8);
        for v in [0.0f32, 1.0, -2.0, 0.5, 3.25, -0.125] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expect, "container layout must stay frozen");
    }

    #[test]
    fn round_trip_is_bitwise_for_both_dtypes() {
        let vals32: Vec<f32> = (0..64).map(|i| (i as f32) * 0.37 - 5.0).collect();
        let t32 = Tensor::from_vec(&[4, 16], vals32).unwrap();
        match decode(&encode(&t32).unwrap()).unwrap() {
            AnyTensor::F32(back) => {
                assert_eq!(back.shape(), t32.shape());
                for (a, b) in back.data().iter().zip(t32.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("dtype not preserved"),
        }

        let vals64: Vec<f64> = (0..10).map(|i| (i as f64).exp()).collect();
        let t64 = Tensor::from_vec(&[10], vals64).unwrap();
        match decode(&encode(&t64).unwrap()).unwrap() {
            AnyTensor::F64(back) => {
                for (a, b) in back.data().iter().zip(t64.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("dtype not preserved"),
        }
    }

    #[test]
    fn rejects_malformed_input() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode(&t).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());

        let truncated = &good[..good.len() - 2];
        assert!(decode(truncated).is_err());

        let mut bad_dtype = good.clone();
        bad_dtype[12] = 7;
        assert!(decode(&bad_dtype).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.utns");
        let t = Tensor::from_vec(&[2, 2], vec![1.5f64, -2.5, 3.5, -4.5]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f64> = read_tensor_exact(&path).unwrap();
        assert_eq!(back, t);
        assert!(read_tensor_exact::<f32>(&path).is_err(), "exact read must reject other dtype");
        let cast: Tensor<f32> = read_tensor(&path).unwrap();
        assert_eq!(cast.data(), &[1.5f32, -2.5, 3.5, -4.5]);
    }
}
