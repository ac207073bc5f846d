//! The DCT1 binary tensor format.
//!
//! Layout: magic `44 43 54 31` ("DCT1"), a `u8` precision code
//! (0 = single, 1 = double), a `u8` rank `N`, `N` little-endian `u32`
//! extents, then the row-major little-endian payload. Nothing may follow
//! the payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub const DCT1_MAGIC: [u8; 4] = *b"DCT1";

/// A tensor read from disk in whatever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::Single(_) => Precision::Single,
            AnyTensor::Double(_) => Precision::Double,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::Single(t) => t.shape(),
            AnyTensor::Double(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::Single(t) => t.cast(),
            AnyTensor::Double(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + T::PRECISION.byte_width() * t.numel());
    out.extend_from_slice(&DCT1_MAGIC);
    out.push(T::PRECISION.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "DCT1",
            format!("{} trailing bytes after payload", bytes.len() - used),
        ));
    }
    Ok(t)
}

/// Decodes one tensor from the start of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < 6 || bytes[..4] != DCT1_MAGIC {
        return Err(Error::format("DCT1", "missing magic"));
    }
    let precision = Precision::from_code(bytes[4])
        .ok_or_else(|| Error::format("DCT1", format!("unknown precision code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(Error::format("DCT1", "rank 0"));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format("DCT1", "truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("DCT1", "extent product overflows"))?;
    let width = precision.byte_width();
    let end = n
        .checked_mul(width)
        .and_then(|b| b.checked_add(header))
        .ok_or_else(|| Error::format("DCT1", "payload size overflows"))?;
    if bytes.len() < end {
        return Err(Error::format(
            "DCT1",
            format!("payload truncated: need {} bytes, have {}", end - header, bytes.len() - header),
        ));
    }
    let payload = &bytes[header..end];
    let tensor = match precision {
        Precision::Single => AnyTensor::Single(read_payload::<f32>(shape, payload)?),
        Precision::Double => AnyTensor::Double(read_payload::<f64>(shape, payload)?),
    };
    Ok((tensor, end))
}

fn read_payload<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::PRECISION.byte_width())
        .map(T::read_le)
        .collect();
    Tensor::from_vec(shape, data).map_err(|e| Error::format("DCT1", e.to_string()))
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_vec(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..6], &[0x44, 0x43, 0x54, 0x31, 0, 2]);
        assert_eq!(&bytes[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut bytes = encode(&t);
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
        bytes.truncate(bytes.len() - 2);
        assert!(decode(&bytes).is_err());
        let mut bad = encode(&t);
        bad[4] = 7;
        assert!(decode(&bad).is_err());
        assert!(decode(b"DCT0\x01\x01").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..5),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1).rotate_left(17) & 0x7fef_ffff_ffff_ffff))
                .collect();
            let t = Tensor::from_vec(shape.clone(), data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            match back {
                AnyTensor::Double(b) => {
                    prop_assert_eq!(b.shape(), t.shape());
                    let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                    prop_assert!(same);
                }
                AnyTensor::Single(_) => prop_assert!(false, "precision changed"),
            }
            let single: Tensor<f32> = t.cast();
            prop_assert_eq!(decode(&encode(&single)).unwrap(), AnyTensor::Single(single));
        }
    }
}
