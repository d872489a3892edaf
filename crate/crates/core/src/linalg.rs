//! Dense helpers for the small state dimensions this crate works in.
//!
//! Matrices are row-major `Vec<f64>` of length `d * d`; no external linear
//! algebra is pulled in for d of a few.

/// Euclidean inner product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Squared Euclidean norm.
#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `out = m * v` for a row-major `d x d` matrix.
#[inline]
pub fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    debug_assert_eq!(m.len(), d * d);
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        out[i] = dot(row, v);
    }
}

/// `out = m^T * v` for a row-major `d x d` matrix.
#[inline]
pub fn mat_t_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    debug_assert_eq!(m.len(), d * d);
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += m[i * d + j] * v[i];
        }
        out[j] = s;
    }
}

/// `a * a^T` for a row-major `d x d` matrix.
pub fn mat_mul_t(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * a[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
    out
}

/// Frobenius inner product `<a, b>_HS = sum_ij a_ij b_ij`.
#[inline]
pub fn frobenius_dot(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

/// Trace of a row-major `d x d` matrix.
pub fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

/// Determinant by LU with partial pivoting; used for the invertibility check
/// at model construction, not in hot loops.
pub fn det(m: &[f64], d: usize) -> f64 {
    let mut a = m.to_vec();
    let mut sign = 1.0;
    let mut det = 1.0;
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if a[r * d + col].abs() > a[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * d + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..d {
                a.swap(pivot * d + c, col * d + c);
            }
            sign = -sign;
        }
        let p = a[col * d + col];
        det *= p;
        for r in col + 1..d {
            let f = a[r * d + col] / p;
            for c in col..d {
                a[r * d + c] -= f * a[col * d + c];
            }
        }
    }
    sign * det
}
