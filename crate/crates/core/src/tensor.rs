use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor with up to four dimensions.
///
/// Activations use NCHW and convolution weights OIHW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of elements in one slice along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Slice `i` along the leading axis (one output channel of an OIHW weight).
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Keep only the listed leading-axis slices, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let n = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Keep only the listed slices along axis 1 (input channels of OIHW, columns of a matrix).
    pub fn select_axis1(&self, cols: &[usize]) -> Tensor {
        let outer = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let width = self.shape[1];
        let mut data = Vec::with_capacity(outer * cols.len() * inner);
        for o in 0..outer {
            for &c in cols {
                let start = (o * width + c) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = cols.len();
        Tensor { shape, data }
    }

    /// Max absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}
