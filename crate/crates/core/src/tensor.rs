//! Dense row-major `f64` arrays.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense multi-dimensional array of `f64` in row-major order.
///
/// The product of `shape` always equals `data.len()`. A zero-dimensional
/// array (empty shape) holds exactly one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArray", into = "RawArray")]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawArray> for NdArray {
    type Error = Error;

    fn try_from(raw: RawArray) -> Result<Self> {
        NdArray::new(raw.shape, raw.data)
    }
}

impl From<NdArray> for RawArray {
    fn from(a: NdArray) -> Self {
        RawArray {
            shape: a.shape,
            data: a.data,
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D array from rows. All rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape {
                    shape: vec![rows.len(), cols],
                    reason: format!("ragged row of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of length {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshaped(shape)
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || core::mem::replace(&mut seen[a], true))
        {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("invalid axis permutation {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        if rank == 0 || axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.data.len();
        let mut out = Vec::with_capacity(total);
        if total == 0 {
            return Ok(Self {
                shape: out_shape,
                data: out,
            });
        }
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_step = step[last];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        loop {
            let mut off = base;
            for _ in 0..inner {
                out.push(self.data[off]);
                off += inner_step;
            }
            // advance the outer multi-index
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Ok(Self {
                        shape: out_shape,
                        data: out,
                    });
                }
                ax -= 1;
                idx[ax] += 1;
                base += step[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= step[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }

    /// Concatenates arrays along `axis`; all other axes must agree.
    pub fn concat(arrays: &[&NdArray], axis: usize) -> Result<Self> {
        let first = arrays
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(Error::InvalidShape {
                shape: first.shape.clone(),
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        for a in arrays {
            let compatible = a.ndim() == rank
                && a.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: a.shape.clone(),
                });
            }
            out_shape[axis] += a.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for a in arrays {
                let chunk: usize = a.shape[axis..].iter().product();
                data.extend_from_slice(&a.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Batched matrix product with numpy-style broadcasting of leading axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        for &(ao, bo, co) in &plan.batches {
            gemm_acc(
                &self.data[ao..ao + plan.m * plan.k],
                &other.data[bo..bo + plan.k * plan.n],
                &mut out[co..co + plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        Ok(Self {
            shape: plan.out_shape,
            data: out,
        })
    }
}

/// Offsets for a broadcast batched matrix product.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (offset into a, offset into b, offset into output) per output batch.
    pub batches: Vec<(usize, usize, usize)>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch_shape.push(x.max(y));
        }
        let sa = strides(&pa);
        let sb = strides(&pb);
        let total = numel(&batch_shape);
        let mut batches = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for c in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ia += idx[d] * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx[d] * sb[d];
                }
            }
            batches.push((ia * m * k, ib * k * n, c * m * n));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            batches,
            out_shape,
        })
    }
}

/// Strided view of a matrix: base slice plus row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n` and `c: m×n` at stride `(rsc, csc)`.
pub(crate) fn gemm_strided(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], rsc: usize, csc: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm output out of bounds");
    // SAFETY: every index touched is bounds-checked above; `c` is borrowed
    // mutably and cannot alias the shared operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, Mat::rows(a, k), Mat::rows(b, n), c, n, 1);
}

/// `da += dc · bᵀ` for `dc: m×n`, `b: k×n`, `da: m×k`.
pub(crate) fn gemm_acc_nt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, n, k, Mat::rows(dc, n), Mat::rows(b, n).t(), da, k, 1);
}

/// `db += aᵀ · dc` for `a: m×k`, `dc: m×n`, `db: k×n`.
pub(crate) fn gemm_acc_tn(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(k, m, n, Mat::rows(a, k).t(), Mat::rows(dc, n), db, n, 1);
}
