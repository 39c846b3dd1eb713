//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable for feature maps and weights.
///
/// Implemented for `f32` (the production precision) and `f64` (used by
/// oracles and for high-precision diagnostics). Matrix products dispatch to
/// the matching `matrixmultiply` kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are given as
    /// `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f32_lossy(v: f32) -> Self;

    fn to_f32_lossy(self) -> f32;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm: matrix {what} ({rows}x{cols}, strides {rs},{cs}) exceeds buffer of {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents were bounds-checked above and `c` is
                // exclusively borrowed, so the kernel only touches valid,
                // non-aliased memory.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            #[inline]
            fn from_f32_lossy(v: f32) -> Self {
                v as $t
            }

            #[inline]
            fn to_f32_lossy(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
