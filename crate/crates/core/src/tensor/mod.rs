//! Dense row-major tensors with shared, accounted storage.

pub mod memory;
mod scalar;

use std::fmt;
use std::sync::Arc;

pub use memory::MemClass;
pub use scalar::{DType, Scalar};

use crate::error::{shape_err, Result};

struct Buffer<T> {
    data: Vec<T>,
    class: MemClass,
}

impl<T> Buffer<T> {
    fn new(data: Vec<T>, class: MemClass) -> Result<Self> {
        memory::acquire(data.len(), class)?;
        Ok(Buffer { data, class })
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        memory::release(self.data.len(), self.class);
    }
}

/// Dense tensor. Storage is reference counted: clones and reshapes share it,
/// and mutation copies on write.
#[derive(Clone)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    buf: Arc<Buffer<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero-length axis in {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(Buffer::new(data, MemClass::Working)?),
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::try_full(shape, value).expect("allocation within limit")
    }

    pub fn try_full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn try_zeros(shape: &[usize]) -> Result<Self> {
        Self::try_full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("allocation within limit")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.buf.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        if Arc::strong_count(&self.buf) > 1 {
            let class = self.buf.class;
            let data = self.buf.data.clone();
            memory::acquire_unlimited(data.len(), class);
            self.buf = Arc::new(Buffer { data, class });
        }
        &mut Arc::get_mut(&mut self.buf).expect("unique after copy").data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buf.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.buf.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.buf.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.buf.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    /// Same storage viewed with a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(&self.shape, self.buf.data.iter().map(|&v| f(v)).collect())
    }

    /// Rebuilds the storage under another accounting class.
    pub fn into_class(self, class: MemClass) -> Self {
        if self.buf.class == class {
            return self;
        }
        let data = self.buf.data.clone();
        Tensor {
            shape: self.shape,
            buf: Arc::new(Buffer::new(data, class).expect("parameter class is unlimited")),
        }
    }

    pub fn mem_class(&self) -> MemClass {
        self.buf.class
    }

    pub fn is_finite(&self) -> bool {
        self.buf.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        let data = self.data();
        write!(f, "Tensor<{}>{:?} ", T::DTYPE, self.shape)?;
        if data.len() <= SHOWN {
            write!(f, "{data:?}")
        } else {
            write!(f, "{:?} ... ({} elements)", &data[..SHOWN], data.len())
        }
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::<f64>::scalar(3.0);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 3.0);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
    }

    #[test]
    fn copy_on_write_leaves_clone_untouched() {
        let a = Tensor::<f64>::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[1.0, 0.0, 0.0]);
    }
}
