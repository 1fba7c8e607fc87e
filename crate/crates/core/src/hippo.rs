//! HiPPO-LegS state matrix, its normal-plus-low-rank split, and the real
//! diagonal initialization used for the selective layer's state matrix.
//!
//! With `P = Q = sqrt(n + 1/2)` the matrix `S = A + P·Pᵀ` equals
//! `-I/2 + K` with `K` skew-symmetric, so `S` is normal and `A` is normal
//! plus rank one. [`nplr_residual`] measures how far a matrix is from that
//! structure.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::scalar::Scalar;

/// Dense `N×N` HiPPO-LegS matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HippoMatrix<T> {
    n_state: usize,
    entries: Vec<T>,
}

impl<T: Scalar> HippoMatrix<T> {
    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.entries[row * self.n_state + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.entries[row * self.n_state + col] = value;
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }
}

/// Builds the LegS matrix, 0-indexed:
/// `A[n][k] = -sqrt((2n+1)(2k+1))` below the diagonal, `-(n+1)` on it,
/// zero above.
pub fn hippo_legs<T: Scalar>(n_state: usize) -> Result<HippoMatrix<T>> {
    if n_state == 0 {
        return Err(Error::invalid("HiPPO matrix needs n_state >= 1"));
    }
    let mut entries = vec![T::zero(); n_state * n_state];
    for n in 0..n_state {
        for k in 0..=n {
            entries[n * n_state + k] = if n == k {
                -T::of((n + 1) as f64)
            } else {
                -T::of((((2 * n + 1) * (2 * k + 1)) as f64).sqrt())
            };
        }
    }
    Ok(HippoMatrix { n_state, entries })
}

/// Low-rank vectors and normal part of `A = S - P·Qᵀ`.
#[derive(Clone, Debug)]
pub struct NplrParts<T> {
    pub p: Vec<T>,
    pub q: Vec<T>,
    /// `S = A + P·Qᵀ`, row-major.
    pub normal: Vec<T>,
    /// Spectrum of `S`, sorted by imaginary part.
    pub lambda: Vec<Complex<f64>>,
}

/// `P_n = Q_n = sqrt(n + 1/2)`.
pub fn legs_low_rank<T: Scalar>(n_state: usize) -> Vec<T> {
    (0..n_state).map(|n| T::of((n as f64 + 0.5).sqrt())).collect()
}

fn normal_part<T: Scalar>(a: &HippoMatrix<T>) -> Vec<T> {
    let n = a.n_state;
    let p = legs_low_rank::<T>(n);
    let mut s = a.entries.clone();
    for r in 0..n {
        for c in 0..n {
            s[r * n + c] += p[r] * p[c];
        }
    }
    s
}

/// `max |S + Sᵀ + I|` with `S = A + P·Pᵀ`; zero exactly when `S` is
/// `-I/2` plus a skew-symmetric matrix.
pub fn nplr_residual<T: Scalar>(a: &HippoMatrix<T>) -> T {
    let n = a.n_state;
    let s = normal_part(a);
    let mut worst = T::zero();
    for r in 0..n {
        for c in 0..n {
            let eye = if r == c { T::one() } else { T::zero() };
            worst = worst.max((s[r * n + c] + s[c * n + r] + eye).abs());
        }
    }
    worst
}

/// Splits `a` into low-rank vectors, normal part and its spectrum.
///
/// The spectrum is `mean(diag S) ± iω`, where `ω²` are the eigenvalues of
/// `K·Kᵀ` for the skew part `K = (S - Sᵀ)/2`, found by cyclic Jacobi.
pub fn nplr_parts<T: Scalar>(a: &HippoMatrix<T>) -> NplrParts<T> {
    let n = a.n_state;
    let p = legs_low_rank::<T>(n);
    let normal = normal_part(a);
    let skew: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            0.5 * (normal[r * n + c].as_f64() - normal[c * n + r].as_f64())
        })
        .collect();
    let re = (0..n).map(|i| normal[i * n + i].as_f64()).sum::<f64>() / n as f64;
    let mut kkt = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            kkt[r * n + c] = (0..n).map(|j| skew[r * n + j] * skew[c * n + j]).sum();
        }
    }
    let mut omega_sq = jacobi_eigenvalues(&mut kkt, n);
    omega_sq.sort_by(|x, y| x.total_cmp(y));
    // Nonzero ω² come in equal pairs (±iω); an odd N leaves one zero.
    let mut lambda = Vec::with_capacity(n);
    let mut i = 0;
    if n % 2 == 1 {
        lambda.push(Complex::new(re, 0.0));
        i = 1;
    }
    while i + 1 < n {
        let w = (0.5 * (omega_sq[i] + omega_sq[i + 1])).max(0.0).sqrt();
        lambda.push(Complex::new(re, -w));
        lambda.push(Complex::new(re, w));
        i += 2;
    }
    lambda.sort_by(|x, y| x.im.total_cmp(&y.im));
    NplrParts {
        q: p.clone(),
        p,
        normal,
        lambda,
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(m: &mut [f64], n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[r * n + c] * m[r * n + c])
            .sum();
        let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Per-channel real diagonal state matrix `A[d][n] = -(n+1)`, stored as
/// `log(-A)` so that `-exp(stored)` stays negative under any update.
pub fn diag_init<T: Scalar>(d_model: usize, n_state: usize) -> Result<Tensor<T>> {
    if d_model == 0 || n_state == 0 {
        return Err(Error::invalid("diag_init needs d_model, n_state >= 1"));
    }
    let row: Vec<T> = (0..n_state).map(|n| T::of((n + 1) as f64).ln()).collect();
    let data = (0..d_model).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![d_model, n_state], data)
}

/// Recovers the state matrix `A = -exp(a_log)`.
pub fn state_matrix<T: Scalar>(a_log: &Tensor<T>) -> Tensor<T> {
    a_log.map(|v| -v.exp())
}
