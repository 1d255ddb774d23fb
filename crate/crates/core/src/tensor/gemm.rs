use rayon::prelude::*;

use super::Element;

/// A strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatLayout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    pub fn row_major(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn transposed(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

// Below this many multiply-adds a single call beats the fork/join overhead.
const PARALLEL_WORK: usize = 1 << 22;

/// `c ← alpha·a·b + beta·c` on strided views.
///
/// Panics when the views disagree on dimensions or reach outside their
/// buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Element>(alpha: F, a: &[F], la: MatLayout, b: &[F], lb: MatLayout, beta: F, c: &mut [F], lc: MatLayout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimensions");
    assert_eq!((lc.rows, lc.cols), (la.rows, lb.cols), "gemm output dimensions");
    if la.rows == 0 || lb.cols == 0 || la.cols == 0 {
        return;
    }
    assert!(la.last_index() < a.len(), "gemm lhs out of bounds");
    assert!(lb.last_index() < b.len(), "gemm rhs out of bounds");
    assert!(lc.last_index() < c.len(), "gemm output out of bounds");

    let (m, k, n) = (la.rows, la.cols, lb.cols);
    let threads = rayon::current_num_threads();
    let row_major_out = lc.col_stride == 1 && lc.row_stride >= lc.cols;
    if threads > 1 && row_major_out && m * k * n >= PARALLEL_WORK && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        let out = &mut c[lc.offset..];
        out.par_chunks_mut(rows_per * lc.row_stride)
            .enumerate()
            .take(m.div_ceil(rows_per))
            .for_each(|(chunk, block)| {
                let r0 = chunk * rows_per;
                let rows = rows_per.min(m - r0);
                let sub_a = MatLayout {
                    offset: la.offset + r0 * la.row_stride,
                    rows,
                    ..la
                };
                let sub_c = MatLayout { offset: 0, rows, ..lc };
                gemm_serial(alpha, a, sub_a, b, lb, beta, block, sub_c);
            });
    } else {
        gemm_serial(alpha, a, la, b, lb, beta, c, lc);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_serial<F: Element>(
    alpha: F,
    a: &[F],
    la: MatLayout,
    b: &[F],
    lb: MatLayout,
    beta: F,
    c: &mut [F],
    lc: MatLayout,
) {
    debug_assert!(lc.last_index() < c.len());
    // SAFETY: the caller checked every view's last reachable index against its
    // buffer; `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
