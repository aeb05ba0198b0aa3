//! Small fixed-size helpers over `nalgebra` for the 5×5 normal equations.

use nalgebra::{SMatrix, SVector};

use crate::pricing::N_PARAMS;

pub type Mat5 = SMatrix<f64, N_PARAMS, N_PARAMS>;
pub type Vec5 = SVector<f64, N_PARAMS>;

/// Number of entries in the upper triangle of a 5×5 matrix.
pub const UPPER_LEN: usize = N_PARAMS * (N_PARAMS + 1) / 2;

/// Row-major upper triangle.
pub fn pack_upper(m: &Mat5) -> [f64; UPPER_LEN] {
    let mut out = [0.0; UPPER_LEN];
    let mut n = 0;
    for i in 0..N_PARAMS {
        for j in i..N_PARAMS {
            out[n] = m[(i, j)];
            n += 1;
        }
    }
    out
}

pub fn unpack_upper(v: &[f64; UPPER_LEN]) -> Mat5 {
    let mut m = Mat5::zeros();
    let mut n = 0;
    for i in 0..N_PARAMS {
        for j in i..N_PARAMS {
            m[(i, j)] = v[n];
            m[(j, i)] = v[n];
            n += 1;
        }
    }
    m
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Mat5) -> [f64; N_PARAMS] {
    let mut ev: [f64; N_PARAMS] = m.symmetric_eigenvalues().into();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Mat5) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
pub fn sym_spectral_norm(m: &Mat5) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0_f64, |a, e| a.max(e.abs()))
}

/// Spectral norm of a general matrix (largest singular value).
pub fn spectral_norm(m: &Mat5) -> f64 {
    m.singular_values().max()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &Mat5, b: &Mat5) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_vec(a: &Vec5, b: &Vec5) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_round_trip() {
        let a = Mat5::from_fn(|i, j| (i * 7 + j * 3) as f64);
        let s = a + a.transpose();
        assert_eq!(unpack_upper(&pack_upper(&s)), s);
    }

    #[test]
    fn eigen_helpers() {
        let d = Mat5::from_diagonal(&Vec5::new(3.0, -4.0, 1.0, 0.5, 2.0));
        assert_eq!(min_eigenvalue(&d), -4.0);
        assert!((sym_spectral_norm(&d) - 4.0).abs() < 1e-14);
        assert!((spectral_norm(&d) - 4.0).abs() < 1e-12);
    }
}
