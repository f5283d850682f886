use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training and
/// benchmarks, `f64` for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Name written into checkpoint manifests.
    const DTYPE: &'static str;
    /// Size of one element in the little-endian blob.
    const BYTES: usize;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a·b` (or `c += a·b` when `accumulate`) for an `m×k` by `k×n`
    /// product with arbitrary non-negative strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn put_le(self, out: &mut Vec<u8>);

    fn get_le(bytes: &[u8]) -> Self;
}

fn span(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

macro_rules! gemm_impl {
    ($ty:ty, $name:literal, $bytes:literal, $kernel:path) => {
        impl Scalar for $ty {
            const DTYPE: &'static str = $name;
            const BYTES: usize = $bytes;

            #[inline]
            fn of(x: f64) -> Self {
                x as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(m * n <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel lies inside the
                // spans asserted above; `c` is exclusively borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn get_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; $bytes];
                raw.copy_from_slice(&bytes[..$bytes]);
                <$ty>::from_le_bytes(raw)
            }
        }
    };
}

gemm_impl!(f32, "f32", 4, matrixmultiply::sgemm);
gemm_impl!(f64, "f64", 8, matrixmultiply::dgemm);
