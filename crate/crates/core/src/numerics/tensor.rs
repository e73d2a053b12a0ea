use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of 64-bit reals in row-major order.
///
/// A tensor owned by a [`Tape`](super::Tape) carries a `tape_id` handle and
/// may accumulate a gradient during `backward`; a detached tensor never does.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) tape_id: Option<usize>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} does not describe {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, tape_id: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None, tape_id: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None, tape_id: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, tape_id: None }
    }

    /// Uniform values in `[-scale, scale)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None, tape_id: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn tape_id(&self) -> Option<usize> {
        self.tape_id
    }

    /// Copy without gradient or tape association.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad: None, tape_id: None }
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}
