//! Scalar abstraction shared by every numeric kernel.
//!
//! All tensor code is generic over [`Real`], so the same forward and backward
//! passes run in `f32` (training), `f64` (gradient checks) and [`Dual`]
//! (forward-over-reverse Hessian-vector products for exact meta-gradients).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Primal value as `f64`.
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }

    /// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        naive_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc, accumulate)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    c: &mut [T],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = if accumulate { c[i * rsc + j * csc] } else { T::zero() };
            for p in 0..k {
                acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            c[i * rsc + j * csc] = acc;
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! blas_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents were checked above against the slice lengths.
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

blas_real!(f32, matrixmultiply::sgemm);
blas_real!(f64, matrixmultiply::dgemm);

/// First-order dual number `v + d·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<F> {
    pub v: F,
    pub d: F,
}

impl<F: Real> Dual<F> {
    pub fn new(v: F, d: F) -> Self {
        Self { v, d }
    }

    pub fn constant(v: F) -> Self {
        Self { v, d: F::zero() }
    }
}

impl<F: Real> PartialOrd for Dual<F> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl<F: Real> Add for Dual<F> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl<F: Real> Sub for Dual<F> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl<F: Real> Mul for Dual<F> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl<F: Real> Div for Dual<F> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Self::new(q, (self.d - q * o.d) / o.v)
    }
}

impl<F: Real> Neg for Dual<F> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl<F: Real> AddAssign for Dual<F> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<F: Real> SubAssign for Dual<F> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<F: Real> MulAssign for Dual<F> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<F: Real> Sum for Dual<F> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

impl<F: Real> Real for Dual<F> {
    fn from_f64(v: f64) -> Self {
        Self::constant(F::from_f64(v))
    }
    fn to_f64(self) -> f64 {
        self.v.to_f64()
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Self::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Self::new(self.v.ln(), self.d / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Self::new(s, self.d / (F::from_f64(2.0) * s))
    }
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.d.is_finite()
    }

    /// Splits primal and tangent planes and runs three base-field products.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let (av, ad): (Vec<F>, Vec<F>) = a.iter().map(|x| (x.v, x.d)).unzip();
        let (bv, bd): (Vec<F>, Vec<F>) = b.iter().map(|x| (x.v, x.d)).unzip();
        let (mut cv, mut cd): (Vec<F>, Vec<F>) = c.iter().map(|x| (x.v, x.d)).unzip();
        F::gemm(m, k, n, &av, rsa, csa, &bv, rsb, csb, &mut cv, rsc, csc, accumulate);
        F::gemm(m, k, n, &ad, rsa, csa, &bv, rsb, csb, &mut cd, rsc, csc, accumulate);
        F::gemm(m, k, n, &av, rsa, csa, &bd, rsb, csb, &mut cd, rsc, csc, true);
        for (dst, (v, d)) in c.iter_mut().zip(cv.into_iter().zip(cd)) {
            *dst = Dual::new(v, d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_derivatives() {
        let x = Dual::new(2.0f64, 1.0);
        let y = x * x * x;
        assert_eq!(y.v, 8.0);
        assert_eq!(y.d, 12.0);
        let e = x.exp();
        assert!((e.d - 2f64.exp()).abs() < 1e-12);
        let l = x.ln();
        assert!((l.d - 0.5).abs() < 1e-15);
        let s = x.sqrt();
        assert!((s.d - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let q = Dual::new(1.0f64, 0.0) / x;
        assert!((q.d + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gemm_paths_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut c1 = vec![1.0; 8];
        let mut c2 = vec![1.0; 8];
        f64::gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, &mut c1, 4, 1, true);
        naive_gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, &mut c2, 4, 1, true);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // transposed operand via strides
        let mut c3 = vec![0.0; 8];
        let mut c4 = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, 1, 2, &b, 4, 1, &mut c3, 4, 1, false);
        naive_gemm(2, 3, 4, &a, 1, 2, &b, 4, 1, &mut c4, 4, 1, false);
        for (x, y) in c3.iter().zip(&c4) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_gemm_matches_naive() {
        let a: Vec<Dual<f64>> = (0..6).map(|i| Dual::new(i as f64, 1.0 - i as f64)).collect();
        let b: Vec<Dual<f64>> = (0..6).map(|i| Dual::new((i as f64).cos(), 0.3 * i as f64)).collect();
        let mut c1 = vec![Dual::new(0.5, 0.25); 4];
        let mut c2 = c1.clone();
        Dual::gemm(2, 3, 2, &a, 3, 1, &b, 2, 1, &mut c1, 2, 1, true);
        naive_gemm(2, 3, 2, &a, 3, 1, &b, 2, 1, &mut c2, 2, 1, true);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x.v - y.v).abs() < 1e-12 && (x.d - y.d).abs() < 1e-12);
        }
    }
}
