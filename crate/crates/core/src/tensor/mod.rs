//! Dense row-major `f64` arrays, the tape that differentiates them, and the
//! numerical kernels behind every recorded primitive.
//!
//! Video features use the axis order `[N, T, C, H, W]` throughout.

mod gradcheck;
pub mod io;
pub(crate) mod kernels;
mod norm;
pub mod rng;
mod tape;

pub use gradcheck::{grad_check, relative_error, GRAD_CHECK_STEP};
pub use norm::{
    batch_norm_infer, batch_norm_train, channel_stats, BatchNormState, BatchStats, BnMode, BnVars,
};
pub use tape::{Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

/// An immutable-shape dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Documented in-place access; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as a clip and returns `[N, T, C, H, W]`.
    pub fn clip_dims(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, t, c, h, w] => Ok([n, t, c, h, w]),
            _ => Err(Error::Contract(format!(
                "expected a [N, T, C, H, W] clip, got {:?}",
                self.shape
            ))),
        }
    }

    /// Reorders frames: output frame `t` is input frame `perm[t]`.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Tensor> {
        if self.rank() < 2 || perm.len() != self.shape[1] {
            return Err(Error::Contract(format!(
                "frame permutation of length {} does not fit shape {:?}",
                perm.len(),
                self.shape
            )));
        }
        let n = self.shape[0];
        let t = self.shape[1];
        let frame: usize = self.shape[2..].iter().product();
        let mut out = vec![0.0; self.len()];
        for b in 0..n {
            for (dst, &src) in perm.iter().enumerate() {
                let s = (b * t + src) * frame;
                let d = (b * t + dst) * frame;
                out[d..d + frame].copy_from_slice(&self.data[s..s + frame]);
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Concatenates along the leading axis.
    pub fn concat0(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero tensors".into()))?;
        let mut data = Vec::new();
        let mut lead = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim("concat0", &first.shape, &t.shape));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Slice `index` of the leading axis.
    pub fn select0(&self, index: usize) -> Result<Tensor> {
        if index >= self.shape[0] {
            return Err(Error::Index {
                index,
                bound: self.shape[0],
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Tensor::from_parts(
            shape,
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }
}
