//! Binary tensor blocks.
//!
//! Layout: `u64` little-endian header length, a UTF-8 JSON header
//! `{"shape":[..],"dtype":"f32"|"f64","byte_order":"little"}`, then the raw
//! little-endian IEEE-754 payload in row-major order.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

/// Length-prefixed JSON chunk.
pub(crate) fn write_json_chunk<S: Serialize>(value: &S, out: &mut Vec<u8>) {
    let bytes = serde_json::to_vec(value).expect("header serializes");
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
}

pub(crate) fn read_json_chunk<D: for<'de> Deserialize<'de>>(
    bytes: &[u8],
    pos: &mut usize,
) -> Result<D> {
    let len_bytes = take(bytes, pos, 8)?;
    let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let body = take(bytes, pos, len)?;
    serde_json::from_slice(body).map_err(|e| Error::Data(format!("bad header json: {e}")))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Data(format!("truncated block at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.to_string(),
        byte_order: "little".to_string(),
    };
    write_json_chunk(&header, out);
    out.reserve(t.len() * T::WIDTH);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn read_tensor<T: Scalar>(bytes: &[u8], pos: &mut usize) -> Result<Tensor<T>> {
    let header: TensorHeader = read_json_chunk(bytes, pos)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "tensor dtype {} does not match expected {}",
            header.dtype,
            T::DTYPE
        )));
    }
    if header.byte_order != "little" {
        return Err(Error::Data(format!("unsupported byte order {}", header.byte_order)));
    }
    let n: usize = header.shape.iter().product();
    let payload = take(bytes, pos, n * T::WIDTH)?;
    let data = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::new(header.shape, data)
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let t = read_tensor(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x7fef_ffff_ffff_ffff))
                .collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let bytes = tensor_to_bytes(&t);
            let back: Tensor<f64> = tensor_from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(tensor_to_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_is_documented_json() {
        let t = Tensor::<f32>::from_f64(vec![1, 2], &[1.0, -2.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert_eq!(json, r#"{"shape":[1,2],"dtype":"f32","byte_order":"little"}"#);
        assert_eq!(&bytes[8 + len..8 + len + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::<f32>::zeros(&[2]);
        assert!(tensor_from_bytes::<f64>(&tensor_to_bytes(&t)).is_err());
    }
}
