//! Dense symmetric eigendecomposition (cyclic Jacobi) and orthogonal bases
//! from QR.

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// `M = V·diag(S)·Vᵀ` with eigenvalues descending and eigenvectors in the
/// columns of `V`, each signed so that its largest-magnitude entry is
/// positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair<T> {
    pub v: Tensor<T>,
    pub s: Vec<T>,
}

impl<T: Scalar> SpectralPair<T> {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn vector(&self, j: usize) -> Vec<T> {
        self.v.column(j)
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        let n = self.dim();
        Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            (0..n).map(|m| self.v.at(i, m) * self.s[m] * self.v.at(j, m)).sum()
        })
    }
}

fn off_diagonal_norm<T: Scalar>(a: &Tensor<T>) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.at(i, j).as_f64().powi(2);
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `max(1e-12, 100·ε·‖M‖_F)`, where the second term only matters for
/// matrices of large norm or for 32-bit scalars.
pub fn sym_eig<T: Scalar>(m: &Tensor<T>) -> Result<SpectralPair<T>> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::shape("sym_eig", &[m.rows(), m.rows()], m.shape()));
    }
    let n = m.rows();
    let scale = m.data().iter().fold(1.0f64, |a, v| a.max(v.as_f64().abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((m.at(i, j) - m.at(j, i)).as_f64().abs());
        }
    }
    if asym > JACOBI_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let fro = m.norm().as_f64();
    let tol = JACOBI_TOL.max(100.0 * T::epsilon().as_f64() * fro);
    let mut a = m.clone();
    let mut v = Tensor::<T>::eye(n);
    let mut sweeps = 0;
    while off_diagonal_norm(&a) >= tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off: off_diagonal_norm(&a),
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == T::zero() {
                    continue;
                }
                let (app, aqq) = (a.at(p, p), a.at(q, q));
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.at(k, p), a.at(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.at(p, k), a.at(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).expect("finite eigenvalues"));
    let s: Vec<T> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vs = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for k in 0..n {
            if v.at(k, src).abs() > v.at(best, src).abs() {
                best = k;
            }
        }
        let flip = if v.at(best, src) < T::zero() { -T::one() } else { T::one() };
        for k in 0..n {
            vs.set(k, col, flip * v.at(k, src));
        }
    }
    Ok(SpectralPair { v: vs, s })
}

/// Orthonormal `Q` from the QR factorization of `a` (square), signed so that
/// `R` has a positive diagonal. Modified Gram–Schmidt, applied twice.
pub fn qr_q<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("qr", &[n, n], a.shape()));
    }
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    for j in 0..n {
        let orig = cols[j].clone();
        for _ in 0..2 {
            for k in 0..j {
                let r = crate::tensor::dot(&cols[k], &cols[j]);
                let qk = cols[k].clone();
                for (x, q) in cols[j].iter_mut().zip(&qk) {
                    *x -= r * *q;
                }
            }
        }
        let norm = crate::tensor::dot(&cols[j], &cols[j]).sqrt();
        if norm.as_f64() < 1e-12 {
            return Err(Error::Config("qr of a rank-deficient matrix".into()));
        }
        // positive diagonal of R: ⟨q_j, a_j⟩ > 0
        let sign = if crate::tensor::dot(&cols[j], &orig) < T::zero() { -T::one() } else { T::one() };
        for x in cols[j].iter_mut() {
            *x = *x * sign / norm;
        }
    }
    Ok(Tensor::from_fn(&[n, n], |k| cols[k % n][k / n]))
}

/// Orthogonal matrix from QR of a seeded standard Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Prng) -> Tensor<f64> {
    loop {
        let g = Tensor::from_fn(&[n, n], |_| rng::normal(rng));
        if let Ok(q) = qr_q(&g) {
            return q;
        }
    }
}

/// `max |QᵀQ − I|`.
pub fn orthogonality_error<T: Scalar>(q: &Tensor<T>) -> f64 {
    let qtq = q.t().matmul(q).expect("square");
    let n = q.cols();
    let mut e = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            e = e.max((qtq.at(i, j).as_f64() - target).abs());
        }
    }
    e
}
