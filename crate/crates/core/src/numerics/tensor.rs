use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};

/// Dense row-major `f32` array.
///
/// Storage is reference counted so cloning a tensor (for example to bind a
/// weight into a graph) never copies the payload.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches, zero-sized axes and
    /// non-finite entries.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            Argument,
            "shape {shape:?} has a zero extent"
        );
        ensure!(
            numel(shape) == data.len(),
            Argument,
            "shape {shape:?} needs {} values, got {}",
            numel(shape),
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Internal constructor for kernel outputs whose shape is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    /// Unit Gaussian draws from `rng`, consumed in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; copies the payload if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        ensure!(
            self.data.len() == 1,
            Argument,
            "item() on tensor of shape {:?}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        ensure!(
            numel(shape) == self.len() && shape.iter().all(|&d| d > 0),
            Argument,
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the tensor unchanged if every entry is finite.
    pub fn check_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Argument,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Contiguous slab `[start, start+count)` along axis 0.
    pub fn narrow0(&self, start: usize, count: usize) -> Result<Self> {
        ensure!(
            count > 0 && start + count <= self.shape[0],
            Range,
            "rows {start}..{} outside axis of length {}",
            start + count,
            self.shape[0]
        );
        let inner = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + count) * inner].to_vec(),
        ))
    }

    /// Gathers rows along axis 0.
    pub fn index_select0(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), Argument, "empty index list");
        let rows = self.shape[0];
        let inner = self.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            ensure!(i < rows, Range, "row {i} outside axis of length {rows}");
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates along axis 0; trailing shapes must agree.
    pub fn concat0(parts: &[Tensor]) -> Result<Self> {
        ensure!(!parts.is_empty(), Argument, "nothing to concatenate");
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            ensure!(
                &p.shape[1..] == tail,
                Argument,
                "concat trailing shape {:?} vs {:?}",
                &p.shape[1..],
                tail
            );
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert!(Tensor::new(&[2, 1], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn slicing_and_gathering() {
        let t = Tensor::from_fn(&[4, 2], |i| i as f32);
        assert_eq!(t.narrow0(1, 2).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.index_select0(&[3, 0]).unwrap().data(), &[6.0, 7.0, 0.0, 1.0]);
        assert!(t.index_select0(&[4]).is_err());
        let c = Tensor::concat0(&[t.narrow0(0, 1).unwrap(), t.narrow0(3, 1).unwrap()]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[0.0, 1.0, 6.0, 7.0]);
    }
}
