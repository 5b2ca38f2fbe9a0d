//! Linear toy model of test-time training: PCA as the self-supervised task,
//! a linear regressor on the first principal component as the main task, and
//! an orthogonal corruption `x̃ = R·x`.
//!
//! Clean inputs are `x ~ N(0, Σ)` with `Σ = U·diag(σ₁, σ, …, σ)·Uᵀ` and
//! `σ₁ > σ > 0`; labels are `y = w·u₁ᵀx`. Test-time training on one corrupted
//! input moves the covariance toward it,
//! `M(α) = (1 − α)·Σ + α·x̃x̃ᵀ`, and predicts `ŷ = w·v₁(α)ᵀx̃` with `v₁(α)` the
//! top eigenvector of `M(α)`, signed so that `⟨v₁, u₁⟩ ≥ 0`. Without the sign
//! rule the predictor is only defined up to `±`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, SpectralPair};
use crate::rng::{self, Prng};
use crate::tensor::{dot, Tensor};

/// Spectral gaps below this are treated as degenerate.
pub const GAP_THRESHOLD: f64 = 1e-8;
/// Monte Carlo shards. Fixed so that estimates do not depend on thread count.
pub const SHARDS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Basis {
    Identity,
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    /// Rotation by `arccos(r11)` in the plane of `u₁` and a random direction
    /// orthogonal to it, so `u₁ᵀRu₁ = r11`.
    Angle { r11: f64, seed: u64 },
    /// Haar-ish random orthogonal matrix from QR of a Gaussian matrix.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearWorld {
    /// Orthonormal eigenbasis of `Σ`, `u₁` in column 0.
    pub u: Tensor<f64>,
    pub sigma1: f64,
    pub sigma: f64,
    pub w: f64,
    pub r: Tensor<f64>,
}

impl LinearWorld {
    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn u1(&self) -> Vec<f64> {
        self.u.column(0)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut s = vec![self.sigma; self.dim()];
        s[0] = self.sigma1;
        s
    }

    pub fn covariance(&self) -> Tensor<f64> {
        let u1 = self.u1();
        let d = self.dim();
        Tensor::from_fn(&[d, d], |k| {
            let (i, j) = (k / d, k % d);
            let id = if i == j { self.sigma } else { 0.0 };
            id + (self.sigma1 - self.sigma) * u1[i] * u1[j]
        })
    }

    /// Exact spectral pair of `Σ` in the world basis.
    pub fn spectral_pair(&self) -> SpectralPair<f64> {
        SpectralPair {
            v: self.u.clone(),
            s: self.eigenvalues(),
        }
    }

    /// `r₁ = R·u₁`, the image of the principal direction; with `U = I` this
    /// is the first column of `R`.
    pub fn r1(&self) -> Vec<f64> {
        matvec(&self.r, &self.u1())
    }

    /// `u₁ᵀ·R·u₁`.
    pub fn r11(&self) -> f64 {
        dot(&self.u1(), &self.r1())
    }

    /// Draws a clean input `x ~ N(0, Σ)` and returns `(x, y, x̃)`.
    pub fn sample(&self, rng: &mut Prng) -> (Vec<f64>, f64, Vec<f64>) {
        let d = self.dim();
        let (s1, s) = (self.sigma1.sqrt(), self.sigma.sqrt());
        let z: Vec<f64> = (0..d)
            .map(|i| rng::normal(rng) * if i == 0 { s1 } else { s })
            .collect();
        let x = matvec(&self.u, &z);
        let y = self.w * z[0];
        let xt = matvec(&self.r, &x);
        (x, y, xt)
    }
}

pub fn matvec(m: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

fn unit_orthogonal_to(u: &[f64], rng: &mut Prng) -> Vec<f64> {
    loop {
        let mut q: Vec<f64> = (0..u.len()).map(|_| rng::normal(rng)).collect();
        let p = dot(&q, u);
        for (a, b) in q.iter_mut().zip(u) {
            *a -= p * b;
        }
        let n = dot(&q, &q).sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|a| *a /= n);
            return q;
        }
    }
}

pub fn make_world(
    d: usize,
    sigma1: f64,
    sigma: f64,
    w: f64,
    basis: Basis,
    corruption: Corruption,
) -> Result<LinearWorld> {
    if d < 2 {
        return Err(Error::Config(format!("dimension must be at least 2, got {d}")));
    }
    if !(sigma > 0.0 && sigma1 > sigma) || !sigma1.is_finite() {
        return Err(Error::Config(format!(
            "need sigma1 > sigma > 0, got sigma1={sigma1}, sigma={sigma}"
        )));
    }
    if sigma1 - sigma < GAP_THRESHOLD {
        return Err(Error::DegenerateSpectrum {
            gap: sigma1 - sigma,
            threshold: GAP_THRESHOLD,
        });
    }
    let u = match basis {
        Basis::Identity => Tensor::eye(d),
        Basis::Random { seed } => linalg::random_orthogonal(d, &mut rng::seeded(seed)),
    };
    let u1 = u.column(0);
    let r = match corruption {
        Corruption::Angle { r11, seed } => {
            if !(-1.0..=1.0).contains(&r11) {
                return Err(Error::Config(format!("r11 must lie in [-1, 1], got {r11}")));
            }
            let q = unit_orthogonal_to(&u1, &mut rng::seeded(seed));
            let (c, s) = (r11, (1.0 - r11 * r11).max(0.0).sqrt());
            Tensor::from_fn(&[d, d], |k| {
                let (i, j) = (k / d, k % d);
                let id = if i == j { 1.0 } else { 0.0 };
                id + (c - 1.0) * (u1[i] * u1[j] + q[i] * q[j]) + s * (q[i] * u1[j] - u1[i] * q[j])
            })
        }
        Corruption::Random { seed } => linalg::random_orthogonal(d, &mut rng::seeded(seed)),
    };
    Ok(LinearWorld {
        u,
        sigma1,
        sigma,
        w,
        r,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn covariance_toward(world: &LinearWorld, xt: &[f64], alpha: f64) -> Tensor<f64> {
    let sigma = world.covariance();
    let d = world.dim();
    Tensor::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        (1.0 - alpha) * sigma.data()[k] + alpha * xt[i] * xt[j]
    })
}

/// `M(α) = (1 − α)·Σ + α·x̃x̃ᵀ` for `α ∈ [0, 1]`.
pub fn interpolated_covariance(world: &LinearWorld, xt: &[f64], alpha: f64) -> Result<Tensor<f64>> {
    check_alpha(alpha)?;
    Ok(covariance_toward(world, xt, alpha))
}

fn align_to(mut v: Vec<f64>, reference: &[f64]) -> Vec<f64> {
    if dot(&v, reference) < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    v
}

/// Top eigenvector of `M(α)` via the general eigensolver, signed toward `u₁`.
/// At `α = 0` this is `u₁` exactly.
pub fn top_eigenvector(world: &LinearWorld, xt: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(world.u1());
    }
    let m = covariance_toward(world, xt, alpha);
    let e = linalg::sym_eig(&m)?;
    Ok(align_to(e.vector(0), &world.u1()))
}

/// Same vector as [`top_eigenvector`] without a full decomposition.
///
/// `M(α) = (1−α)σ·I + (1−α)(σ₁−σ)·u₁u₁ᵀ + α·x̃x̃ᵀ` acts as a multiple of the
/// identity on the complement of `span{u₁, x̃}`, and everything it adds there
/// is positive semidefinite, so the top eigenvector is the top eigenvector of
/// the 2×2 restriction to that span.
pub fn top_eigenvector_fast(world: &LinearWorld, xt: &[f64], alpha: f64) -> Vec<f64> {
    let u1 = world.u1();
    if alpha == 0.0 {
        return u1;
    }
    let a = (1.0 - alpha) * (world.sigma1 - world.sigma);
    let p = dot(&u1, xt);
    let mut e2: Vec<f64> = xt.iter().zip(&u1).map(|(x, u)| x - p * u).collect();
    let n2 = dot(&e2, &e2).sqrt();
    if n2 <= 1e-300 {
        return u1;
    }
    e2.iter_mut().for_each(|v| *v /= n2);
    // restriction in the orthonormal basis (u₁, e₂); x̃ = p·u₁ + n2·e₂
    let m11 = a + alpha * p * p;
    let m12 = alpha * p * n2;
    let m22 = alpha * n2 * n2;
    let half = 0.5 * (m11 - m22);
    let lambda = 0.5 * (m11 + m22) + (half * half + m12 * m12).sqrt();
    // eigenvector (m12, λ − m11) or (λ − m22, m12), whichever is better conditioned
    let (c1, c2) = if (lambda - m22).abs() >= (lambda - m11).abs() {
        (lambda - m22, m12)
    } else {
        (m12, lambda - m11)
    };
    let n = (c1 * c1 + c2 * c2).sqrt();
    let v: Vec<f64> = u1
        .iter()
        .zip(&e2)
        .map(|(u, e)| (c1 * u + c2 * e) / n)
        .collect();
    align_to(v, &u1)
}

/// `ŷ = w·v₁(α)ᵀ·x̃`.
pub fn ttt_pca_predict(world: &LinearWorld, xt: &[f64], alpha: f64) -> Result<f64> {
    let v1 = top_eigenvector(world, xt, alpha)?;
    Ok(world.w * dot(&v1, xt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

fn shard_sizes(n: usize) -> Vec<usize> {
    (0..SHARDS).map(|s| n / SHARDS + usize::from(s < n % SHARDS)).collect()
}

/// Runs `f(rng, count, sums)` on each shard, where `sums` accumulates
/// `(Σ loss, Σ loss²)` per output slot, and combines the shards in a fixed
/// order.
fn sharded<F>(n: usize, slots: usize, seed: u64, threads: usize, f: F) -> Vec<Estimate>
where
    F: Fn(&mut Prng, usize, &mut [(f64, f64)]) + Sync,
{
    let sizes = shard_sizes(n);
    let mut results = vec![vec![(0.0, 0.0); slots]; SHARDS];
    let threads = threads.clamp(1, SHARDS);
    std::thread::scope(|scope| {
        let chunk = SHARDS.div_ceil(threads);
        for (t, block) in results.chunks_mut(chunk).enumerate() {
            let (f, sizes) = (&f, &sizes);
            scope.spawn(move || {
                for (k, out) in block.iter_mut().enumerate() {
                    let shard = t * chunk + k;
                    let mut r = rng::seeded(rng::derive_seed(seed, shard as u64));
                    f(&mut r, sizes[shard], out);
                }
            });
        }
    });
    (0..slots)
        .map(|j| {
            let (s, s2) = results.iter().fold((0.0, 0.0), |a, r| (a.0 + r[j].0, a.1 + r[j].1));
            let mean = s / n as f64;
            let var = if n > 1 {
                ((s2 - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0)
            } else {
                0.0
            };
            Estimate {
                mean,
                se: (var / n as f64).sqrt(),
                n,
            }
        })
        .collect()
}

/// Monte Carlo risk `E|ŷ(α) − y|` at every `α`, with one shared set of samples
/// across the grid.
pub fn risk_curve(world: &LinearWorld, alphas: &[f64], n: usize, seed: u64, threads: usize) -> Result<Vec<Estimate>> {
    for &a in alphas {
        check_alpha(a)?;
    }
    if n == 0 {
        return Err(Error::Config("risk needs at least one sample".into()));
    }
    Ok(sharded(n, alphas.len(), seed, threads, |r, count, sums| {
        for _ in 0..count {
            let (_, y, xt) = world.sample(r);
            for (j, &a) in alphas.iter().enumerate() {
                let v1 = top_eigenvector_fast(world, &xt, a);
                let loss = (world.w * dot(&v1, &xt) - y).abs();
                sums[j].0 += loss;
                sums[j].1 += loss * loss;
            }
        }
    }))
}

pub fn risk(world: &LinearWorld, alpha: f64, n: usize, seed: u64, threads: usize) -> Result<Estimate> {
    Ok(risk_curve(world, &[alpha], n, seed, threads)?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenDerivative {
    /// `d v₁ / dα`.
    pub v1_dot: Vec<f64>,
    /// `d σᵢ / dα`, all eigenvalues. Entries for a repeated eigenvalue
    /// depend on the basis the solver picked inside its eigenspace.
    pub s_dot: Vec<f64>,
    pub pair: SpectralPair<f64>,
}

impl EigenDerivative {
    /// Indices of eigenvalues separated from both neighbours by at least the
    /// gap threshold, the ones whose `s_dot` entry is a true derivative.
    pub fn simple_eigenvalues(&self) -> Vec<usize> {
        let s = &self.pair.s;
        (0..s.len())
            .filter(|&i| {
                (i == 0 || s[i - 1] - s[i] >= GAP_THRESHOLD) && (i + 1 == s.len() || s[i] - s[i + 1] >= GAP_THRESHOLD)
            })
            .collect()
    }
}

/// Derivatives of the top eigenvector and of the eigenvalues of `M` along
/// `Ṁ`, given the spectral pair at the point of evaluation:
/// `Ṡ = diag(VᵀṀV)` and `(VᵀV̇)ᵢ₁ = (VᵀṀV)ᵢ₁ / (σ₁ − σᵢ)`. Only gaps to `σ₁`
/// enter, so repeated trailing eigenvalues are fine.
pub fn eigen_derivative_at(pair: &SpectralPair<f64>, m_dot: &Tensor<f64>) -> Result<EigenDerivative> {
    let d = pair.dim();
    let v = &pair.v;
    let a = v.t().matmul(m_dot)?.matmul(v)?;
    let s_dot = (0..d).map(|i| a.at(i, i)).collect();
    let mut c = vec![0.0; d];
    for i in 1..d {
        let gap = pair.s[0] - pair.s[i];
        if gap < GAP_THRESHOLD {
            return Err(Error::DegenerateSpectrum {
                gap,
                threshold: GAP_THRESHOLD,
            });
        }
        c[i] = a.at(i, 0) / gap;
    }
    Ok(EigenDerivative {
        v1_dot: matvec(v, &c),
        s_dot,
        pair: pair.clone(),
    })
}

/// `Ṁ = x̃x̃ᵀ − Σ`.
pub fn covariance_direction(world: &LinearWorld, xt: &[f64]) -> Tensor<f64> {
    let sigma = world.covariance();
    let d = world.dim();
    Tensor::from_fn(&[d, d], |k| xt[k / d] * xt[k % d] - sigma.data()[k])
}

/// Eigen-derivatives of `M(α)` in `α`, relative to the eigenvector basis the
/// solver returns with `v₁` signed toward `u₁`.
pub fn eigvec_derivative(world: &LinearWorld, xt: &[f64], alpha: f64) -> Result<EigenDerivative> {
    check_alpha(alpha)?;
    let mut pair = linalg::sym_eig(&covariance_toward(world, xt, alpha))?;
    if dot(&pair.vector(0), &world.u1()) < 0.0 {
        for k in 0..pair.dim() {
            let v = pair.v.at(k, 0);
            pair.v.set(k, 0, -v);
        }
    }
    eigen_derivative_at(&pair, &covariance_direction(world, xt))
}

/// Central finite difference of the signed top eigenvector and of every
/// eigenvalue (descending). Used as an independent check of
/// [`eigvec_derivative`]; it may step slightly outside `[0, 1]`.
pub fn eigvec_derivative_fd(world: &LinearWorld, xt: &[f64], alpha: f64, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let at = |a: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let e = linalg::sym_eig(&covariance_toward(world, xt, a))?;
        Ok((align_to(e.vector(0), &world.u1()), e.s.clone()))
    };
    let central = |p: &[f64], m: &[f64]| p.iter().zip(m).map(|(p, m)| (p - m) / (2.0 * h)).collect();
    let (vp, sp) = at(alpha + h)?;
    let (vm, sm) = at(alpha - h)?;
    Ok((central(&vp, &vm), central(&sp, &sm)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub r11: f64,
    pub estimate: Estimate,
    /// `r₁₁·(1 − r₁₁²)`.
    pub closed_form: f64,
}

impl AlignmentReport {
    pub fn within(&self, ses: f64) -> bool {
        (self.estimate.mean - self.closed_form).abs() <= ses * self.estimate.se
    }
}

/// Monte Carlo estimate of `E⟨v̇₁(0), r₁⟩` over `x ~ N(0, Σ)`, where `r₁` is
/// the image of the principal direction under `R`, against the closed form
/// `r₁₁(1 − r₁₁²)`. At `α = 0` the spectral pair is that of `Σ`, so it is
/// taken from the world instead of being recomputed per sample.
pub fn alignment_derivative(world: &LinearWorld, n: usize, seed: u64, threads: usize) -> Result<AlignmentReport> {
    if n == 0 {
        return Err(Error::Config("alignment estimate needs at least one sample".into()));
    }
    let pair = world.spectral_pair();
    let r1 = world.r1();
    let u1 = world.u1();
    let d = world.dim();
    let gap = world.sigma1 - world.sigma;
    let estimate = sharded(n, 1, seed, threads, |r, count, sums| {
        for _ in 0..count {
            let (_, _, xt) = world.sample(r);
            // closed-form eigen_derivative_at(pair, Ṁ) for Σ's own basis:
            // the −Σ part of Ṁ is diagonal there and drops out
            let p1 = dot(&u1, &xt);
            let mut val = 0.0;
            for i in 1..d {
                let ui = pair.v.column(i);
                val += dot(&ui, &xt) * p1 / gap * dot(&ui, &r1);
            }
            sums[0].0 += val;
            sums[0].1 += val * val;
        }
    })[0];
    let r11 = world.r11();
    Ok(AlignmentReport {
        r11,
        estimate,
        closed_form: r11 * (1.0 - r11 * r11),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub r11: f64,
    pub alphas: Vec<f64>,
    pub risks: Vec<Estimate>,
    pub baseline: Estimate,
    pub best_alpha: f64,
    pub best: Estimate,
    /// `sqrt(se₀² + se_best²)`.
    pub combined_se: f64,
    pub pass: bool,
    pub note: Option<String>,
}

/// The default grid `{0.01, 0.02, …, 0.5}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=50).map(|k| k as f64 / 100.0).collect()
}

/// Checks that some small positive `α` beats `α = 0` by more than two
/// combined standard errors. Requires `0 < r₁₁ < 1`; otherwise the report
/// fails with a note instead of an error.
pub fn theorem_check(
    world: &LinearWorld,
    alphas: &[f64],
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<TheoremReport> {
    if alphas.is_empty() {
        return Err(Error::Config("empty alpha grid".into()));
    }
    let r11 = world.r11();
    let mut grid = vec![0.0];
    grid.extend_from_slice(alphas);
    let est = risk_curve(world, &grid, n, seed, threads)?;
    let baseline = est[0];
    let risks = est[1..].to_vec();
    let (k, best) = risks
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .map(|(k, e)| (k, *e))
        .expect("non-empty grid");
    let combined_se = (baseline.se.powi(2) + best.se.powi(2)).sqrt();
    let assumption = r11 > 0.0 && r11 < 1.0 - 1e-12;
    let note = (!assumption).then(|| format!("assumption violated: need 0 < r11 < 1, got r11 = {r11:.6}"));
    Ok(TheoremReport {
        r11,
        alphas: alphas.to_vec(),
        risks,
        baseline,
        best_alpha: alphas[k],
        best,
        combined_se,
        pass: assumption && best.mean < baseline.mean - 2.0 * combined_se,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(d: usize, r11: f64, basis: Basis) -> LinearWorld {
        make_world(d, 4.0, 1.0, 1.5, basis, Corruption::Angle { r11, seed: 9 }).unwrap()
    }

    #[test]
    fn angle_corruption_hits_r11_and_is_orthogonal() {
        for &r11 in &[0.0, 0.3, 0.9, 1.0] {
            let w = world(6, r11, Basis::Random { seed: 2 });
            assert!((w.r11() - r11).abs() < 1e-12);
            assert!(linalg::orthogonality_error(&w.r) < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_jacobi() {
        let w = make_world(5, 3.0, 0.5, 1.0, Basis::Random { seed: 4 }, Corruption::Random { seed: 5 }).unwrap();
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            let (_, _, xt) = w.sample(&mut r);
            for &a in &[0.0, 0.05, 0.3, 0.9, 1.0] {
                let fast = top_eigenvector_fast(&w, &xt, a);
                let slow = top_eigenvector(&w, &xt, a).unwrap();
                for (f, s) in fast.iter().zip(&slow) {
                    assert!((f - s).abs() < 1e-9, "alpha {a}: {fast:?} vs {slow:?}");
                }
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let w = world(4, 0.6, Basis::Random { seed: 3 });
        let mut r = rng::seeded(8);
        let (_, _, xt) = w.sample(&mut r);
        for &a in &[0.0, 0.1, 0.3] {
            let d = eigvec_derivative(&w, &xt, a).unwrap();
            let (fd, sd) = eigvec_derivative_fd(&w, &xt, a, 1e-5).unwrap();
            for (x, y) in d.v1_dot.iter().zip(&fd) {
                assert!((x - y).abs() < 1e-6);
            }
            for i in d.simple_eigenvalues() {
                assert!((d.s_dot[i] - sd[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn alpha_out_of_range() {
        let w = world(3, 0.5, Basis::Identity);
        assert!(interpolated_covariance(&w, &[1.0, 0.0, 0.0], 1.5).is_err());
        assert!(risk(&w, -0.1, 10, 0, 1).is_err());
    }

    #[test]
    fn shard_results_ignore_thread_count() {
        let w = world(3, 0.5, Basis::Identity);
        let a = risk(&w, 0.2, 1000, 7, 1).unwrap();
        let b = risk(&w, 0.2, 1000, 7, 5).unwrap();
        assert_eq!(a, b);
    }
}
