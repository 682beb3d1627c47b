//! Dense row-major `f32` tensors.

use crate::error::{Error, Result};

/// Dense tensor with row-major layout.
///
/// Invariants: every extent is at least 1, `data.len()` equals the product
/// of the extents, and `grad` (when allocated) has the same length as
/// `data`. The gradient buffer is only carried by trainable parameters;
/// activations leave it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor: rank 0 is not supported"));
    }
    let mut n: usize = 1;
    for (ax, &e) in shape.iter().enumerate() {
        if e == 0 {
            return Err(Error::shape(format!("tensor: axis {ax} has extent 0")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::shape(format!("tensor: extent product overflows at axis {ax}")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    /// Zero-filled tensor. Panics on a malformed shape; use [`Tensor::new`]
    /// when the shape comes from external input.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = checked_numel(shape).expect("tensor shape");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Same buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "tensor: cannot reshape {:?} ({} values) to {shape:?} ({n} values)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major offset of a full index. Cold-path helper; kernels compute
    /// offsets incrementally.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (ax, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(i < e, "index {i} out of range on axis {ax}");
            let _ = ax;
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Allocates the gradient buffer (zeroed) if not present.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Accumulates `delta` into the gradient buffer, allocating on first use.
    pub fn add_to_grad(&mut self, delta: &[f32]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        self.ensure_grad();
        let g = self.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bit-level equality of the value buffers (shape must match; gradients
    /// are not compared). Distinguishes -0.0 from 0.0 and compares NaN bits.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
