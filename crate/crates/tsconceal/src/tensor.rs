//! Dense row-major f64 tensors.
//!
//! Everything in this crate is 64-bit: attacks iterate the same graph dozens
//! of times and the gradient acceptance checks need the headroom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense tensor: `shape` with values stored flat in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Tensor> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawTensor::deserialize(d)?;
        Tensor::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} values for shape {:?}", expected, shape),
                format!("{} values", values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    /// Row-major matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("Tensor::from_rows"));
        }
        let width = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::shape(
                    "Tensor::from_rows",
                    format!("row length {width}"),
                    format!("row length {}", row.len()),
                ));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(Error::NonScalarOutput(self.shape.clone()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// View of row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.shape[self.shape.len() - 1];
        &self.values[i * width..(i + 1) * width]
    }

    pub fn n_rows(&self) -> usize {
        self.shape[0]
    }

    /// Same shape, values produced by `f` over the flat storage.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Max |a - b| over coordinates; shapes must already match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
