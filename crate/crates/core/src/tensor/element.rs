use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient verification).
pub trait Element: Float + Default + Debug + Display + Sum + std::ops::AddAssign + Send + Sync + 'static {
    /// Rounds an `f64` to this width.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `v ← exp(v − shift)` in place; returns the sum in 64-bit.
    ///
    /// Callers pass `shift ≥ max(values)` so every argument is `≤ 0`.
    fn exp_shifted(values: &mut [Self], shift: Self) -> f64 {
        for v in values.iter_mut() {
            *v = (*v - shift).exp();
        }
        values.iter().map(|v| v.as_f64()).sum()
    }

    /// `c ← alpha·a·b + beta·c` over raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must be in
    /// bounds of the pointed-to allocations, and `c` must not alias `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn exp_shifted(values: &mut [f32], shift: f32) -> f64 {
        let mut lanes = [0.0f64; 8];
        let mut chunks = values.chunks_exact_mut(8);
        for c in &mut chunks {
            for (acc, v) in lanes.iter_mut().zip(c.iter_mut()) {
                *v = exp_nonpositive(*v - shift);
                *acc += *v as f64;
            }
        }
        let mut tail = 0.0;
        for v in chunks.into_remainder() {
            *v = exp_nonpositive(*v - shift);
            tail += *v as f64;
        }
        lanes.iter().sum::<f64>() + tail
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `exp(x)` for `x ≤ 0`, written so the loop above vectorizes.
///
/// Range reduction `x = n·ln2 + r` with a degree-6 polynomial for `exp(r)`;
/// relative error stays within a few ulp. Arguments below −87 clamp to
/// `exp(−87)`.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.max(-87.0);
    // adding 1.5·2^23 rounds to the nearest integer, which lands in the low mantissa bits
    const SHIFTER: f32 = 12_582_912.0;
    let j = x * LOG2E + SHIFTER;
    let n = (j.to_bits() as i32).wrapping_sub(SHIFTER.to_bits() as i32);
    let nf = j - SHIFTER;
    let r = x - nf * LN2_HI - nf * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits((n.wrapping_add(127) as u32) << 23)
}
