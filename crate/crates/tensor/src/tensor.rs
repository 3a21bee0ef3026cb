use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{invalid, shape_err, Result, TensorError};

/// Dense row-major `f64` array.
///
/// The backing array is always kept in standard (C) layout so [`Tensor::data`]
/// can hand out a flat slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    array: ArrayD<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        let array = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| shape_err("Tensor::new", e.to_string()))?;
        Ok(Self { array })
    }

    pub fn from_array(array: ArrayD<f64>) -> Self {
        if array.is_standard_layout() {
            Self { array }
        } else {
            Self {
                array: array.as_standard_layout().into_owned(),
            }
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            array: ArrayD::from_elem(IxDyn(&[]), value),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            array: ArrayD::from_elem(IxDyn(shape), value),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Fills a tensor by flat row-major index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self {
            array: ArrayD::from_shape_vec(IxDyn(shape), data).expect("length matches shape"),
        }
    }

    /// 2-D convenience constructor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data).expect("valid 2-D shape")
    }

    pub fn shape(&self) -> &[usize] {
        self.array.shape()
    }

    pub fn ndim(&self) -> usize {
        self.array.ndim()
    }

    pub fn len(&self) -> usize {
        self.array.len()
    }

    pub fn is_empty(&self) -> bool {
        self.array.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        self.array.as_slice().expect("tensor kept in standard layout")
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.array
            .as_slice_mut()
            .expect("tensor kept in standard layout")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.array
    }

    pub fn into_array(self) -> ArrayD<f64> {
        self.array
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.array[IxDyn(index)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(shape_err("item", format!("shape {:?} is not a scalar", self.shape())));
        }
        Ok(self.data()[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let array = ArrayD::from_shape_vec(IxDyn(shape), self.to_vec()).map_err(|_| {
            shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            )
        })?;
        Ok(Tensor::from_array(array))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_array(self.array.mapv(f))
    }

    pub fn sum(&self) -> f64 {
        self.data().iter().sum()
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        Tensor::from_array(self.array.sum_axis(Axis(axis)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared L2 norm of all entries.
    pub fn norm_sq(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<ArrayD<f64>> for Tensor {
    fn from(array: ArrayD<f64>) -> Self {
        Tensor::from_array(array)
    }
}
