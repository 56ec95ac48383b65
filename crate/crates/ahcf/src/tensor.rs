//! Small pointwise matrix kernels on row-major `d × d` slices.

use nalgebra::DMatrix;

pub(crate) fn to_mat(a: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, a)
}

pub(crate) fn from_mat(m: &DMatrix<f64>, out: &mut [f64]) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
}

pub(crate) fn mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

pub(crate) fn mul3(a: &[f64], b: &[f64], c: &[f64], d: usize) -> Vec<f64> {
    mul(&mul(a, b, d), c, d)
}

pub(crate) fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[j * d + i] = a[i * d + j];
        }
    }
    out
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        out[i * d + i] = 1.0;
    }
    out
}

pub(crate) fn inverse(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let inv = to_mat(a, d).try_inverse()?;
    let mut out = vec![0.0; d * d];
    from_mat(&inv, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Some(out)
    } else {
        None
    }
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest singular value.
pub(crate) fn op_norm(a: &[f64], d: usize) -> f64 {
    if a.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let m = to_mat(a, d);
    m.singular_values().max()
}

/// Smallest eigenvalue of the symmetric part.
pub(crate) fn min_sym_eig(a: &[f64], d: usize) -> f64 {
    let m = to_mat(a, d);
    let s = (&m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Anti-commuting part `½(K + J K J)` with respect to `j`.
pub(crate) fn anti_part(k: &[f64], j: &[f64], d: usize) -> Vec<f64> {
    let jkj = mul3(j, k, j, d);
    k.iter().zip(&jkj).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Commuting part `½(K − J K J)` with respect to `j`.
pub(crate) fn comm_part(k: &[f64], j: &[f64], d: usize) -> Vec<f64> {
    let jkj = mul3(j, k, j, d);
    k.iter().zip(&jkj).map(|(a, b)| 0.5 * (a - b)).collect()
}

/// `h(JX, JY)` as a matrix: `Jᵀ h J`.
pub(crate) fn pullback(h: &[f64], j: &[f64], d: usize) -> Vec<f64> {
    mul3(&transpose(j, d), h, j, d)
}

/// Real orthonormal frame `F` (columns) with `Fᵀ g F = I`, via Cholesky.
pub(crate) fn orthonormal_frame(g: &[f64], d: usize) -> Option<Vec<f64>> {
    let chol = to_mat(g, d).cholesky()?;
    let l = chol.l();
    let f = l.transpose().try_inverse()?;
    let mut out = vec![0.0; d * d];
    from_mat(&f, &mut out);
    Some(out)
}
