//! Dense row-major f64 tensor, the computation substrate for the whole
//! pipeline. Everything runs in double precision so finite-difference
//! gradient checks can be held to tight tolerances.

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 values, row-major.
///
/// Invariants: `shape.iter().product() == data.len()`, and after any forward
/// or backward op all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Dimensions of a planes/rows/cols tensor, erroring on other ranks.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[p, h, w] => Ok((p, h, w)),
            other => Err(Error::shape(format!("expected rank-3 tensor, got {other:?}"))),
        }
    }

    #[inline]
    pub fn at3(&self, p: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(p * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, p: usize, y: usize, x: usize, v: f64) {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(p * h + y) * w + x] = v;
    }

    /// Contiguous row `y` of plane `p` for a rank-3 tensor.
    #[inline]
    pub fn row3(&self, p: usize, y: usize) -> &[f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        let base = (p * h + y) * w;
        &self.data[base..base + w]
    }

    #[inline]
    pub fn row3_mut(&mut self, p: usize, y: usize) -> &mut [f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        let base = (p * h + y) * w;
        &mut self.data[base..base + w]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Errors if any element is NaN or infinite. `what` names the tensor in
    /// the diagnostic.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what}[{i}] = {v}")));
            }
        }
        Ok(())
    }
}
