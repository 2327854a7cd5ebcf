use crate::{Scalar, TensorError};

/// Dense row-major array. Rank-4 tensors use `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Shape(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cs, hs, ws) = self.dims4().expect("rank-4");
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, TensorError> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Converts element type, e.g. an `f32` model snapshot into `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Sample `n` of a batch, keeping a leading batch axis of 1.
    pub fn sample(&self, n: usize) -> Result<Self, TensorError> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(TensorError::Shape(format!("sample {n} out of range for {:?}", self.shape)));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[n * per..(n + 1) * per].to_vec() })
    }

    /// Concatenates along the leading (batch) axis.
    pub fn stack(parts: &[Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("stack of nothing".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(TensorError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    /// Channel range `[start, end)` of a rank-4 tensor.
    pub fn channels(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let (n, c, h, w) = self.dims4()?;
        if start > end || end > c {
            return Err(TensorError::Shape(format!("channel range {start}..{end} out of {c}")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self { shape: vec![n, end - start, h, w], data })
    }
}
