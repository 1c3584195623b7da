//! Thin strided matrix-multiply wrapper over `matrixmultiply::dgemm`.

use crate::par;

/// Column-chunk width for parallel products. Fixed so the split (and hence
/// every floating-point summation order) never depends on the thread count.
const COL_CHUNK: usize = 256;

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

struct SyncPtr(*mut f64);
unsafe impl Send for SyncPtr {}
unsafe impl Sync for SyncPtr {}

/// `C[m×n] = A[m×k]·B[k×n] (+ C if accumulate)` with `C` row-major.
///
/// Columns of `C` are computed in independent fixed-width chunks, possibly on
/// different threads; each output element is produced by exactly one call.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    let chunks = n.div_ceil(COL_CHUNK);
    let cptr = SyncPtr(c.as_mut_ptr());
    let run = |ci: usize| {
        let j0 = ci * COL_CHUNK;
        let width = COL_CHUNK.min(n - j0);
        let cptr = &cptr;
        // SAFETY: chunk `ci` writes only columns j0..j0+width of C, which are
        // disjoint across chunks; A and B are only read. Bounds on the
        // operand slices are asserted by the callers' shape checks.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                width,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr().add(j0 * b.cs),
                b.rs as isize,
                b.cs as isize,
                beta,
                cptr.0.add(j0),
                n as isize,
                1,
            );
        }
    };
    if chunks == 1 {
        run(0);
    } else {
        par::map(chunks, run);
    }
}
