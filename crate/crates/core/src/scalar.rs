//! Floating point scalar abstraction shared by the tensor and model code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// Converts to `f64`, used for serialization and metrics.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    /// `c ← a·b + c` for strided row/column views, `a [m×k]`, `b [k×n]`, `c [m×n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self], rsc: isize);
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self], rsc: isize) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1;
                assert!(a.len() >= span(m, k, rsa, csa) && b.len() >= span(k, n, rsb, csb) && c.len() >= span(m, n, rsc, 1));
                // SAFETY: the assertion above bounds every strided access inside the slices.
                unsafe {
                    $kernel(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
