//! Dense row-major tensors and the scalar trait shared by every numeric routine.
//!
//! Feature tensors use the layout `(batch, channels, *spatial)` where the
//! spatial part is `(H, W)` for 2D data or `(D, H, W)` for volumes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point scalar usable by the network. Implemented for `f32`
/// (training and inference) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Converts an `f64` literal.
    fn of(x: f64) -> Self;

    /// Raw GEMM: `c = a * b + beta * c` with `a: m x k`, `b: k x n`.
    ///
    /// Strides are in elements and must be non-negative.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index reachable through the given dimensions and
                // strides lies inside the slices (checked above), and `c` does not
                // alias `a` or `b` because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Owned dense tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Second (channel) dimension of a feature tensor.
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial dimensions of a feature tensor.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[2..]
    }

    /// Number of elements in one spatial plane/volume.
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    /// Number of elements per leading index.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Slice of the `n`-th item along the leading axis.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Self { shape, data })
    }

    /// Copies item `n` out as a tensor with a leading axis of one.
    pub fn select(&self, n: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.item(n).to_vec(),
        }
    }

    /// Drops the leading axis of a batch of one.
    pub fn squeeze_batch(self) -> Result<Self> {
        if self.shape.first() != Some(&1) {
            return Err(Error::Shape(format!(
                "expected leading axis of 1, got {:?}",
                self.shape
            )));
        }
        let shape = self.shape[1..].to_vec();
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// A spatial grid; 2D grids have `d == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Grid {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn from_spatial(spatial: &[usize]) -> Result<Self> {
        match *spatial {
            [h, w] => Ok(Self { d: 1, h, w }),
            [d, h, w] => Ok(Self { d, h, w }),
            _ => Err(Error::Shape(format!(
                "expected 2 or 3 spatial dims, got {spatial:?}"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm_raw(2, 3, 2, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // transposed lhs via strides: a^T is 3x2
        let mut d = [0.0f64; 9];
        f64::gemm_raw(3, 2, 3, &a, 1, 3, &a, 3, 1, 0.0, &mut d, 3, 1);
        assert_eq!(d[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 2, 2], |i| 10.0 + i as f32);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.select(1).data(), b.data());
    }
}
