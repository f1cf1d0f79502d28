use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type of the engine (`f32` for training, `f64`
/// for gradient checking).
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c ← α·a·b + β·c` on strided matrices. The caller guarantees the
    /// strides stay within the slices (checked by [`gemm`]).
    #[allow(clippy::too_many_arguments)]
    fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn raw_gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                // SAFETY: `gemm` verified that every addressed element of
                // a, b and c lies inside the respective slice.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows × cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, data: self.data }
    }

    /// Columns `[start, start + width)` of a dense matrix.
    pub fn cols(data: &'a [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        Self { data: &data[start.min(data.len())..], rows, cols: width, rs: ld, cs: 1 }
    }

    fn max_index(&self) -> Option<usize> {
        if self.rows == 0 || self.cols == 0 {
            None
        } else {
            Some((self.rows - 1) * self.rs + (self.cols - 1) * self.cs)
        }
    }
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols(data: &'a mut [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        let start = start.min(data.len());
        Self { data: &mut data[start..], rows, cols: width, rs: ld, cs: 1 }
    }
}

/// `c ← α·a·b + β·c`. Panics if the views are inconsistent; shapes are
/// validated by the calling op before this point.
pub(crate) fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output dimensions");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let c_max = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_max < c.data.len(), "gemm output view out of bounds");
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.max_index().is_some_and(|m| m < a.data.len()), "gemm lhs view out of bounds");
    assert!(b.max_index().is_some_and(|m| m < b.data.len()), "gemm rhs view out of bounds");
    T::raw_gemm(
        a.rows,
        a.cols,
        b.cols,
        alpha,
        a.data,
        a.rs as isize,
        a.cs as isize,
        b.data,
        b.rs as isize,
        b.cs as isize,
        beta,
        c.data,
        c.rs as isize,
        c.cs as isize,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_and_column_views() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 4];
        // a·aᵀ
        gemm(1.0, MatRef::dense(&a, 2, 3), MatRef::dense(&a, 2, 3).t(), 0.0, MatMut::dense(&mut c, 2, 2));
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        // columns 1..3 of a times its transpose
        let mut c = [1.0f64; 4];
        let v = MatRef::cols(&a, 2, 3, 1, 2);
        gemm(1.0, v, v.t(), 1.0, MatMut::dense(&mut c, 2, 2));
        assert_eq!(c, [14.0, 29.0, 29.0, 62.0]);
    }

    #[test]
    fn empty_inner_dimension_scales_output() {
        let mut c = [2.0f32; 2];
        gemm(1.0, MatRef::dense(&[], 1, 0), MatRef::dense(&[], 0, 2), 0.5, MatMut::dense(&mut c, 1, 2));
        assert_eq!(c, [1.0, 1.0]);
    }
}
