//! Shape-annotated base64 float blocks.
//!
//! Bulk numeric data travels as little-endian IEEE floats, base64-encoded
//! (standard alphabet, padded), next to an explicit shape array:
//!
//! ```json
//! {"dtype": "f32", "shape": [28, 28, 1], "data": "AACAPwAAAAA..."}
//! ```
//!
//! The wire protocol always uses `f32`. Result files use `f64` so that a
//! write/read round trip is lossless (including NaN markers).

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid base64 payload: {0}")]
    Base64(String),
    #[error("payload holds {got} bytes, shape {shape:?} needs {want}")]
    Length {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("expected shape {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn encode(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut bytes = Vec::with_capacity(values.len() * dtype.width());
        match dtype {
            Dtype::F32 => {
                for v in values {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Tensor {
            dtype,
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn f32(shape: Vec<usize>, values: &[f64]) -> Tensor {
        Self::encode(Dtype::F32, shape, values)
    }

    pub fn f64(shape: Vec<usize>, values: &[f64]) -> Tensor {
        Self::encode(Dtype::F64, shape, values)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes to `f64`, checking the byte count against the shape.
    pub fn decode(&self) -> Result<Vec<f64>, TensorError> {
        let bytes = STANDARD
            .decode(self.data.as_bytes())
            .map_err(|e| TensorError::Base64(e.to_string()))?;
        let want = self.len() * self.dtype.width();
        if bytes.len() != want {
            return Err(TensorError::Length {
                shape: self.shape.clone(),
                want,
                got: bytes.len(),
            });
        }
        Ok(match self.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        })
    }

    /// Checks the rank and, where given, the size of each axis.
    pub fn expect_shape(&self, dims: &[Option<usize>]) -> Result<(), TensorError> {
        let ok = self.shape.len() == dims.len()
            && self
                .shape
                .iter()
                .zip(dims)
                .all(|(s, d)| d.is_none_or(|d| d == *s));
        if ok {
            Ok(())
        } else {
            let expected = dims
                .iter()
                .map(|d| d.map_or("_".to_string(), |d| d.to_string()))
                .collect::<Vec<_>>()
                .join(", ");
            Err(TensorError::Shape {
                expected: format!("[{expected}]"),
                got: self.shape.clone(),
            })
        }
    }
}

/// Serde adapter storing a `Vec<f64>` as a rank-1 `f64` block.
pub mod f64_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        Tensor::f64(vec![values.len()], values).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let t = Tensor::deserialize(d)?;
        t.expect_shape(&[None]).map_err(serde::de::Error::custom)?;
        t.decode().map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for an `f64` that may be NaN (stored as JSON `null`).
pub mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            None::<f64>.serialize(s)
        } else {
            Some(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encoding() {
        // 1.0f32 = 0x3f800000, little-endian 00 00 80 3f.
        let t = Tensor::f32(vec![1], &[1.0]);
        assert_eq!(t.data, "AACAPw==");
        assert_eq!(t.decode().unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut t = Tensor::f32(vec![2], &[1.0, 2.0]);
        t.shape = vec![3];
        assert!(matches!(t.decode(), Err(TensorError::Length { .. })));
    }

    #[test]
    fn rejects_bad_base64() {
        let t = Tensor {
            dtype: Dtype::F32,
            shape: vec![1],
            data: "!!!".into(),
        };
        assert!(matches!(t.decode(), Err(TensorError::Base64(_))));
    }

    #[test]
    fn shape_check() {
        let t = Tensor::f64(vec![2, 3], &[0.0; 6]);
        assert!(t.expect_shape(&[None, Some(3)]).is_ok());
        assert!(t.expect_shape(&[None, Some(2)]).is_err());
        assert!(t.expect_shape(&[None]).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(values in prop::collection::vec(any::<f64>(), 0..64)) {
            let t = Tensor::f64(vec![values.len()], &values);
            let back = t.decode().unwrap();
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn f32_round_trip_of_f32_values(values in prop::collection::vec(any::<f32>(), 0..64)) {
            let wide: Vec<f64> = values.iter().map(|v| f64::from(*v)).collect();
            let back = Tensor::f32(vec![wide.len()], &wide).decode().unwrap();
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
