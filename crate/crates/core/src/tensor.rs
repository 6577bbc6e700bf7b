//! Dense row-major tensors, shapes, axis permutations and the broadcast algebra.
//!
//! Axis numbers in the public API are 1-based. Internally every tensor is a
//! flat `Vec<f64>` in row-major order; a rank-0 tensor holds exactly one value.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("shapes {left} and {right} are not broadcast-compatible at axis {axis}")]
    Broadcast {
        left: Shape,
        right: Shape,
        axis: usize,
    },
    #[error("cannot broadcast shape {from} to {to}")]
    BroadcastTo { from: Shape, to: Shape },
    #[error("permutation of length {perm} applied to a rank-{rank} tensor")]
    PermutationRank { perm: usize, rank: usize },
    #[error("{0:?} is not a permutation of 1..={len}", len = .0.len())]
    InvalidPermutation(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("matrix product of {left} and {right} is undefined")]
    MatMul { left: Shape, right: Shape },
    #[error("concatenation along axis {axis}: {message}")]
    Concat { axis: usize, message: String },
}

/// An ordered tuple of extents. The empty tuple is the scalar shape.
///
/// Extents are normally positive; a zero extent only appears on the record
/// axis of a client that holds no records (or a virtual global tensor with
/// no records at all).
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of elements; 1 for the scalar shape.
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every extent is at least 1, as required of type-level shapes.
    pub fn is_positive(&self) -> bool {
        self.0.iter().all(|&d| d >= 1)
    }

    /// Extent of 1-based `axis`.
    pub fn dim(&self, axis: usize) -> Result<usize, TensorError> {
        self.check_axis(axis)?;
        Ok(self.0[axis - 1])
    }

    pub fn check_axis(&self, axis: usize) -> Result<(), TensorError> {
        if axis == 0 || axis > self.rank() {
            Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            })
        } else {
            Ok(())
        }
    }

    /// `s \ j`: the shape with 1-based axis `j` deleted.
    pub fn remove_axis(&self, axis: usize) -> Result<Shape, TensorError> {
        self.check_axis(axis)?;
        let mut dims = self.0.clone();
        dims.remove(axis - 1);
        Ok(Shape(dims))
    }

    /// Inserts `extent` so that it becomes 1-based axis `axis` of the result.
    pub fn insert_axis(&self, axis: usize, extent: usize) -> Result<Shape, TensorError> {
        if axis == 0 || axis > self.rank() + 1 {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank() + 1,
            });
        }
        let mut dims = self.0.clone();
        dims.insert(axis - 1, extent);
        Ok(Shape(dims))
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for i in (0..self.rank().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Left-pads with ones up to length `len` (`len >= rank`).
    pub fn pad_left(&self, len: usize) -> Vec<usize> {
        let mut out = vec![1; len.saturating_sub(self.rank())];
        out.extend_from_slice(&self.0);
        out
    }

    /// Flat row-major offset of a 0-based multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    /// Inverse of [`Shape::offset`].
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.rank()];
        for axis in (0..self.rank()).rev() {
            let d = self.0[axis];
            if d > 0 {
                index[axis] = flat % d;
                flat /= d;
            }
        }
        index
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Self {
        Shape(dims)
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape(dims.to_vec())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0.as_slice() {
            [] => write!(f, "()"),
            [d] => write!(f, "({d},)"),
            dims => {
                write!(f, "(")?;
                for (i, d) in dims.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{d}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// `s ∨ t`: left-pad both shapes with ones and take the non-unit extent per axis.
///
/// For positive extents this is the elementwise maximum. A zero extent (an
/// empty record axis) wins over 1, so broadcasting never invents records.
pub fn broadcast_shape(s: &Shape, t: &Shape) -> Result<Shape, TensorError> {
    let len = s.rank().max(t.rank());
    let ps = s.pad_left(len);
    let pt = t.pad_left(len);
    let mut out = Vec::with_capacity(len);
    for (axis, (&a, &b)) in ps.iter().zip(&pt).enumerate() {
        let u = if a == b || b == 1 {
            a
        } else if a == 1 {
            b
        } else {
            return Err(TensorError::Broadcast {
                left: s.clone(),
                right: t.clone(),
                axis: axis + 1,
            });
        };
        out.push(u);
    }
    Ok(Shape(out))
}

/// A permutation `τ ∈ S_k`, stored as its 1-based images `(τ(1), …, τ(k))`.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(images: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let images = images.into();
        let k = images.len();
        let mut seen = vec![false; k];
        for &i in &images {
            if i == 0 || i > k || seen[i - 1] {
                return Err(TensorError::InvalidPermutation(images));
            }
            seen[i - 1] = true;
        }
        if k == 0 {
            return Err(TensorError::InvalidPermutation(images));
        }
        Ok(Permutation(images))
    }

    pub fn identity(k: usize) -> Self {
        Permutation((1..=k).collect())
    }

    /// The transposition exchanging axes `a` and `b` of a rank-`k` tensor.
    pub fn swap(k: usize, a: usize, b: usize) -> Result<Self, TensorError> {
        let mut images: Vec<usize> = (1..=k).collect();
        if a == 0 || b == 0 || a > k || b > k {
            return Err(TensorError::InvalidPermutation(images));
        }
        images.swap(a - 1, b - 1);
        Ok(Permutation(images))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn images(&self) -> &[usize] {
        &self.0
    }

    /// `τ(i)` for 1-based `i`.
    pub fn image(&self, i: usize) -> usize {
        self.0[i - 1]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.len()];
        for (i, &img) in self.0.iter().enumerate() {
            inv[img - 1] = i + 1;
        }
        Permutation(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &img)| img == i + 1)
    }

    /// `τ · (s_1,…,s_k) = (s_{τ⁻¹(1)}, …, s_{τ⁻¹(k)})`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        let inv = self.inverse();
        (1..=self.len())
            .map(|j| items[inv.image(j) - 1].clone())
            .collect()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = TensorError;
    fn try_from(images: Vec<usize>) -> Result<Self, Self::Error> {
        Permutation::new(images)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

/// A dense real tensor with an explicit shape.
#[derive(Clone, PartialEq, Debug)]
pub struct TensorValue {
    shape: Shape,
    data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected = shape.numel();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(TensorValue { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        TensorValue {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        TensorValue {
            shape: Shape(vec![values.len()]),
            data: values,
        }
    }

    /// Builds a matrix from rows; all rows must have the same length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        TensorValue::new(Shape(vec![rows.len(), cols]), data)
    }

    pub fn filled(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; shape.numel()];
        TensorValue { shape, data }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        TensorValue::filled(shape, 0.0)
    }

    pub fn identity(n: usize) -> Self {
        TensorValue::from_fn([n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    /// Builds a tensor by evaluating `f` at every 0-based multi-index, row-major.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        let mut data = Vec::with_capacity(n);
        let mut index = vec![0usize; shape.rank()];
        for _ in 0..n {
            data.push(f(&index));
            advance(&mut index, shape.dims());
        }
        TensorValue { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element at a 0-based multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.shape.offset(index)]
    }

    /// The value of a tensor holding exactly one element.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorValue {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<TensorValue, TensorError> {
        TensorValue::new(shape, self.data.clone())
    }

    /// `Br_s^u(T)`: replicate along padded and unit axes to reach `target`.
    pub fn broadcast_to(&self, target: &Shape) -> Result<TensorValue, TensorError> {
        let compatible = target.rank() >= self.rank()
            && broadcast_shape(&self.shape, target).is_ok_and(|u| &u == target);
        if !compatible {
            return Err(TensorError::BroadcastTo {
                from: self.shape.clone(),
                to: target.clone(),
            });
        }
        if &self.shape == target {
            return Ok(self.clone());
        }
        let offset = target.rank() - self.rank();
        let own = self.shape.strides();
        let mut strides = vec![0usize; target.rank()];
        for q in 0..self.rank() {
            if self.shape.0[q] > 1 {
                strides[offset + q] = own[q];
            }
        }
        Ok(TensorValue {
            shape: target.clone(),
            data: gather(target.dims(), &strides, &self.data),
        })
    }

    /// Ordinary elementwise binary map with broadcasting of both operands.
    pub fn zip_broadcast(
        &self,
        other: &TensorValue,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorValue, TensorError> {
        let u = broadcast_shape(&self.shape, &other.shape)?;
        let a = self.broadcast_to(&u)?;
        let b = other.broadcast_to(&u)?;
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(TensorValue { shape: u, data })
    }

    /// `τ(T)[i_1,…,i_k] = T[i_{τ(1)},…,i_{τ(k)}]`, with output shape `τ · shape(T)`.
    pub fn permute(&self, perm: &Permutation) -> Result<TensorValue, TensorError> {
        if perm.len() != self.rank() {
            return Err(TensorError::PermutationRank {
                perm: perm.len(),
                rank: self.rank(),
            });
        }
        let out_shape = Shape(perm.apply(self.shape.dims()));
        let own = self.shape.strides();
        let mut strides = vec![0usize; self.rank()];
        for m in 0..self.rank() {
            strides[perm.0[m] - 1] = own[m];
        }
        Ok(TensorValue {
            data: gather(out_shape.dims(), &strides, &self.data),
            shape: out_shape,
        })
    }

    /// Reduces 1-based `axis` lane by lane; `reduce` receives the lane values
    /// in index order (possibly an empty slice).
    pub fn reduce_axis(
        &self,
        axis: usize,
        reduce: impl Fn(&[f64]) -> f64,
    ) -> Result<TensorValue, TensorError> {
        let out_shape = self.shape.remove_axis(axis)?;
        let a = axis - 1;
        let extent = self.shape.0[a];
        let stride = self.shape.strides()[a];
        let outer: usize = self.shape.0[..a].iter().product();
        let inner: usize = self.shape.0[a + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(extent);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                let base = o * extent * inner + i;
                lane.extend((0..extent).map(|e| self.data[base + e * stride]));
                data.push(reduce(&lane));
            }
        }
        Ok(TensorValue {
            shape: out_shape,
            data,
        })
    }

    /// Concatenation along 1-based `axis`; all other extents must agree.
    pub fn concat(axis: usize, parts: &[&TensorValue]) -> Result<TensorValue, TensorError> {
        let first = parts.first().ok_or(TensorError::Concat {
            axis,
            message: "no tensors to concatenate".into(),
        })?;
        first.shape.check_axis(axis)?;
        let a = axis - 1;
        let mut total = 0;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_rest = same_rank
                && p.shape
                    .0
                    .iter()
                    .zip(&first.shape.0)
                    .enumerate()
                    .all(|(i, (x, y))| i == a || x == y);
            if !same_rest {
                return Err(TensorError::Concat {
                    axis,
                    message: format!("shape {} does not match {}", p.shape, first.shape),
                });
            }
            total += p.shape.0[a];
        }
        let mut dims = first.shape.0.clone();
        dims[a] = total;
        let outer: usize = dims[..a].iter().product();
        let inner: usize = dims[a + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape.0[a] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(TensorValue {
            shape: Shape(dims),
            data,
        })
    }

    /// The sub-tensor with indices `start..start+len` along 1-based `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<TensorValue, TensorError> {
        let extent = self.shape.dim(axis)?;
        if start + len > extent {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let a = axis - 1;
        let mut dims = self.shape.0.clone();
        dims[a] = len;
        let outer: usize = dims[..a].iter().product();
        let inner: usize = dims[a + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(TensorValue {
            shape: Shape(dims),
            data,
        })
    }

    /// Ordinary matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &TensorValue) -> Result<TensorValue, TensorError> {
        let (m, k, k2, n) = match (self.shape.dims(), other.shape.dims()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => (0, 0, 1, 0),
        };
        if self.rank() != 2 || other.rank() != 2 || k != k2 {
            return Err(TensorError::MatMul {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                let row = &other.data[l * n..(l + 1) * n];
                for (out, &b) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *out += a * b;
                }
            }
        }
        Ok(TensorValue {
            shape: Shape(vec![m, n]),
            data,
        })
    }

    /// Bit-level equality of shape and data (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &TensorValue) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute entry (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl fmt::Display for TensorValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.shape, self.data)
    }
}

fn advance(index: &mut [usize], dims: &[usize]) {
    for axis in (0..index.len()).rev() {
        index[axis] += 1;
        if index[axis] < dims[axis] {
            return;
        }
        index[axis] = 0;
    }
}

/// Walks `out_dims` in row-major order, reading `src` through per-axis strides.
fn gather(out_dims: &[usize], strides: &[usize], src: &[f64]) -> Vec<f64> {
    let n: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; out_dims.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for axis in (0..index.len()).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_dims[axis] {
                break;
            }
            offset -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
    out
}
