use crate::{Element, Result, TensorError};

/// Contiguous row-major N-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::shape(op, format!("zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("new", &shape)?;
        if n != data.len() {
            return Err(TensorError::shape(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("from_fn", &shape)?;
        Ok(Self {
            shape,
            data: (0..n).map(f).collect(),
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor without validation. Callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::shape(
                "item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("reshape", &shape)?;
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Concatenates along axis 1. Every other extent must agree.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.ndim() < 2 || a.ndim() != b.ndim() {
            return Err(TensorError::shape(
                "concat_channels",
                format!("incompatible ranks {:?} and {:?}", a.shape, b.shape),
            ));
        }
        if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(TensorError::shape(
                "concat_channels",
                format!("non-channel extents differ: {:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let batch = a.shape[0];
        let block_a = a.numel() / batch;
        let block_b = b.numel() / batch;
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..batch {
            data.extend_from_slice(&a.data[n * block_a..(n + 1) * block_a]);
            data.extend_from_slice(&b.data[n * block_b..(n + 1) * block_b]);
        }
        let mut shape = a.shape.clone();
        shape[1] += b.shape[1];
        Ok(Self::from_parts(shape, data))
    }

    /// Copies channels `start..start + len` (axis 1).
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if self.ndim() < 2 || len == 0 || start + len > self.shape[1] {
            return Err(TensorError::shape(
                "slice_channels",
                format!("channels {start}..{} out of {:?}", start + len, self.shape),
            ));
        }
        let batch = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let block = self.shape[1] * inner;
        let mut data = Vec::with_capacity(batch * len * inner);
        for n in 0..batch {
            let base = n * block + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self::from_parts(shape, data))
    }
}
