//! Seeded random matrices used for initialization and property checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let qr = normal_matrix(rng, d, d, 1.0).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random SPD matrix whose eigenvalues are log-uniform on `[s, s·max_cond]`
/// for a random overall scale `s ∈ [0.5, 2]`; the condition number never
/// exceeds `max_cond`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, max_cond: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, d);
    let s = rng.random_range(0.5..2.0);
    let log_cond = max_cond.max(1.0).ln();
    let eig = DVector::from_fn(d, |_, _| s * (rng.random::<f64>() * log_cond).exp());
    let m = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// A factor of a random SPD matrix: `Q·diag(σ)` with singular values
/// log-uniform on `[σ_min, σ_min·√max_cond]`.
pub fn random_factor<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize, max_cond: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, d);
    let rot = random_orthogonal(rng, k.max(1));
    let s = rng.random_range(0.7..1.4);
    let log_cond = max_cond.max(1.0).sqrt().ln();
    let mut f = DMatrix::zeros(d, k);
    for j in 0..k.min(d) {
        let sigma = s * (rng.random::<f64>() * log_cond).exp();
        f.column_mut(j).copy_from(&(q.column(j) * sigma));
    }
    if k == 0 {
        return f;
    }
    f * rot.view((0, 0), (k, k))
}
