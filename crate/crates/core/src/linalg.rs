//! Dense row-major kernels shared by the encoder, head and losses.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar type of the model. Training and serving use `f32`; `f64` exists for
/// gradient checks.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Default + Sum + Debug + Send + Sync + 'static
{
    /// `C = alpha * op(A) * op(B) + beta * C` over raw strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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
    );

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm_raw(
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
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers in this module check that every index reachable through the
                // strides lies inside the slices; `c` is exclusively borrowed.
                unsafe {
                    $f(
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
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Whether a gemm operand is read as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `C (m×n) = op(A) (m×k) · op(B) (k×n) + beta·C`, all row-major.
///
/// With `Op::T` the operand is stored as its transpose (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], op_a: Op, b: &[T], op_b: Op, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    if k == 0 {
        // Empty inner dimension: result is beta·C.
        for x in c[..m * n].iter_mut() {
            *x = if beta == T::zero() { T::zero() } else { *x * beta };
        }
        return;
    }
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, &mut c[..m * n]);
}

/// `C = A·B`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, Op::N, b, Op::N, T::zero(), c);
}

/// `C += A·B`.
pub fn matmul_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, Op::N, b, Op::N, T::one(), c);
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm of one row. Writes the normalized row into `xhat` and the
/// affine output into `y`; returns `1/sqrt(var + eps)`.
#[inline]
pub fn layer_norm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], xhat: &mut [T], y: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        let h = (x[i] - mean) * rstd;
        xhat[i] = h;
        y[i] = gamma[i] * h + beta[i];
    }
    rstd
}

/// Backward of [`layer_norm_row`]: accumulates into `dgamma`, `dbeta` and `dx`.
#[inline]
pub fn layer_norm_row_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: T,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let n = T::of(dy.len() as f64);
    let mut mean_g = T::zero();
    let mut mean_gx = T::zero();
    for i in 0..dy.len() {
        let g = dy[i] * gamma[i];
        mean_g += g;
        mean_gx += g * xhat[i];
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
    }
    mean_g /= n;
    mean_gx /= n;
    for i in 0..dy.len() {
        let g = dy[i] * gamma[i];
        dx[i] += rstd * (g - mean_g - xhat[i] * mean_gx);
    }
}

/// Allocation-free `C (m×n) += A (m×k) · B (k×n)` for the inference kernels.
///
/// Plain i-k-j loops that the compiler vectorizes along `n`; unlike [`gemm`]
/// it never allocates packing buffers, so it can run on an arena.
pub fn mm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "mm operand too short");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked at runtime.
            unsafe { mm_acc_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    mm_acc_impl(m, k, n, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mm_acc_avx2<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    mm_acc_impl(m, k, n, a, b, c)
}

#[inline(always)]
fn mm_acc_impl<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Allocation-free `C (m×n) = A (m×k) · Bᵀ` with `B` stored `n×k`.
pub fn mm_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n, "mm operand too short");
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked at runtime.
            unsafe { mm_bt_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    mm_bt_impl(m, k, n, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mm_bt_avx2<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    mm_bt_impl(m, k, n, a, b, c)
}

#[inline(always)]
fn mm_bt_impl<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            // Eight partial sums so the reduction vectorizes.
            let mut acc = [T::zero(); 8];
            let chunks = k / 8;
            for ch in 0..chunks {
                for l in 0..8 {
                    acc[l] += arow[ch * 8 + l] * brow[ch * 8 + l];
                }
            }
            let mut s = T::zero();
            for p in chunks * 8..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = acc.iter().copied().sum::<T>() + s;
        }
    }
}
