//! Dense exact-GP references and brute-force verifiers.
//!
//! Everything here is test-time machinery kept deliberately independent of
//! the solver routines in `linalg`: matrices are plain row-major buffers and
//! the factorizations below are written from scratch, so that agreement
//! between a fast path and its oracle actually checks something.

use crate::error::{Error, Result};
use crate::geometry::SparsityPattern;

/// Dense exact latent-GP model with Gaussian noise.
#[derive(Debug, Clone)]
pub struct DenseGp {
    pub mean: Vec<f64>,
    /// Row-major n x n prior covariance.
    pub cov: Vec<f64>,
    /// Per-observation noise standard deviations.
    pub noise: Vec<f64>,
    pub y: Vec<f64>,
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix; independent of
/// `linalg::cholesky` on purpose.
pub fn chol(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: s });
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(n: usize, l: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Dense SPD inverse via Cholesky.
pub fn spd_inverse(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let l = chol(n, a)?;
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = chol_solve(n, &l, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Ok(inv)
}

fn mat_vec(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

fn mat_mul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
    }
    c
}

fn log_det_from_chol(n: usize, l: &[f64]) -> f64 {
    (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum()
}

impl DenseGp {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Noisy-covariance `K + R` with `R = diag(noise^2)`.
    fn noisy_cov(&self) -> Vec<f64> {
        let n = self.dim();
        let mut c = self.cov.clone();
        for i in 0..n {
            c[i * n + i] += self.noise[i] * self.noise[i];
        }
        c
    }

    /// Exact posterior mean and covariance of `f | y`.
    pub fn dense_posterior(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let c = self.noisy_cov();
        let l = chol(n, &c)?;
        let resid: Vec<f64> = (0..n).map(|i| self.y[i] - self.mean[i]).collect();
        let alpha = chol_solve(n, &l, &resid);
        let kalpha = mat_vec(n, &self.cov, &alpha);
        let mean: Vec<f64> = (0..n).map(|i| self.mean[i] + kalpha[i]).collect();
        // cov = K - K (K+R)^{-1} K
        let cinv = spd_inverse(n, &c)?;
        let t = mat_mul(n, &cinv, &self.cov);
        let kt = mat_mul(n, &self.cov, &t);
        let cov: Vec<f64> = (0..n * n).map(|i| self.cov[i] - kt[i]).collect();
        Ok((mean, cov))
    }

    /// Log marginal likelihood `log p(y)` under the Gaussian model.
    pub fn dense_log_marginal(&self) -> Result<f64> {
        let n = self.dim();
        let c = self.noisy_cov();
        let l = chol(n, &c)?;
        let resid: Vec<f64> = (0..n).map(|i| self.y[i] - self.mean[i]).collect();
        let alpha = chol_solve(n, &l, &resid);
        let quad: f64 = resid.iter().zip(&alpha).map(|(r, a)| r * a).sum();
        Ok(-0.5 * quad - 0.5 * log_det_from_chol(n, &l) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// KL divergence between two dense Gaussians, `KL(N(m1,c1) || N(m2,c2))`.
pub fn kl_gaussians(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64> {
    let n = m1.len();
    let l2 = chol(n, c2)?;
    let l1 = chol(n, c1)?;
    let c2inv = spd_inverse(n, c2)?;
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += c2inv[i * n + j] * c1[j * n + i];
        }
    }
    let diff: Vec<f64> = (0..n).map(|i| m2[i] - m1[i]).collect();
    let w = mat_vec(n, &c2inv, &diff);
    let quad: f64 = diff.iter().zip(&w).map(|(d, v)| d * v).sum();
    Ok(0.5 * (tr + quad - n as f64 + log_det_from_chol(n, &l2) - log_det_from_chol(n, &l1)))
}

/// Central-difference gradient of `objective` at `params` with step `h`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(objective: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut p = params.to_vec();
    for k in 0..params.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = objective(&p);
        p[k] = orig - h;
        let down = objective(&p);
        p[k] = orig;
        grad[k] = (up - down) / (2.0 * h);
    }
    grad
}

/// Independent transitive-closure ancestor computation used to validate the
/// breadth-first version: closes the `sq` edge relation by boolean powering,
/// then unions reachability over each prior column.
pub fn brute_ancestors(sp: &SparsityPattern, sq: &SparsityPattern) -> Vec<Vec<usize>> {
    let n = sq.dim();
    let mut reach = vec![false; n * n];
    for l in 0..n {
        for &j in sq.col_off_diagonal(l) {
            reach[j * n + l] = true;
        }
    }
    loop {
        let mut changed = false;
        for j in 0..n {
            for k in 0..n {
                if reach[j * n + k] {
                    for l in 0..n {
                        if reach[k * n + l] && !reach[j * n + l] {
                            reach[j * n + l] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..sp.num_cols())
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    sp.col(i).binary_search(&j).is_ok()
                        || sp.col(i).iter().any(|&l| reach[j * n + l])
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cov(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 0.5 } else { 0.0 };
                for k in 0..n {
                    s += a[i * n + k] * a[j * n + k] / n as f64;
                }
                m[i * n + j] = s;
            }
        }
        m
    }

    #[test]
    fn posterior_no_information_limit() {
        let gp = DenseGp {
            mean: vec![0.5, -0.2],
            cov: vec![1.0, 0.3, 0.3, 1.0],
            noise: vec![1e6, 1e6],
            y: vec![10.0, -4.0],
        };
        let (mean, cov) = gp.dense_posterior().unwrap();
        for i in 0..2 {
            assert!((mean[i] - gp.mean[i]).abs() < 1e-4);
            for j in 0..2 {
                assert!((cov[i * 2 + j] - gp.cov[i * 2 + j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn posterior_scalar_conjugate() {
        let (k, tau, mu, y) = (1.7, 0.4, 0.3, 1.1);
        let gp = DenseGp {
            mean: vec![mu],
            cov: vec![k],
            noise: vec![tau],
            y: vec![y],
        };
        let (mean, cov) = gp.dense_posterior().unwrap();
        assert!((mean[0] - (mu + k * (y - mu) / (k + tau * tau))).abs() < 1e-12);
        assert!((cov[0] - k * tau * tau / (k + tau * tau)).abs() < 1e-12);
    }

    #[test]
    fn posterior_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 50;
        let cov = random_cov(n, &mut rng);
        let gp = DenseGp {
            mean: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            cov: cov.clone(),
            noise: vec![0.3; n],
            y: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let (mean, _) = gp.dense_posterior().unwrap();
        // (K + R) (mean - mu) = K (y - mu)
        let n2 = gp.noisy_cov();
        let dm: Vec<f64> = (0..n).map(|i| mean[i] - gp.mean[i]).collect();
        let lhs = mat_vec(n, &n2, &dm);
        let dy: Vec<f64> = (0..n).map(|i| gp.y[i] - gp.mean[i]).collect();
        let rhs = mat_vec(n, &gp.cov, &dy);
        let scale = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        for i in 0..n {
            assert!((lhs[i] - rhs[i]).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn log_marginal_scalar_closed_form() {
        let (k, tau, mu, y): (f64, f64, f64, f64) = (0.8, 0.5, -0.1, 0.9);
        let gp = DenseGp {
            mean: vec![mu],
            cov: vec![k],
            noise: vec![tau],
            y: vec![y],
        };
        let v = k + tau * tau;
        let want = -0.5 * ((y - mu) * (y - mu) / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
        assert!((gp.dense_log_marginal().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn log_marginal_large_noise_monotone() {
        let gp = |tau: f64| DenseGp {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.4, 0.4, 1.0],
            noise: vec![tau, tau],
            y: vec![0.2, -0.1],
        };
        // With small residuals, widening the noise keeps lowering the density.
        let a = gp(5.0).dense_log_marginal().unwrap();
        let b = gp(50.0).dense_log_marginal().unwrap();
        let c = gp(500.0).dense_log_marginal().unwrap();
        assert!(a > b && b > c);
    }

    #[test]
    fn log_marginal_matches_importance_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 3;
        let cov = random_cov(n, &mut rng);
        let gp = DenseGp {
            mean: vec![0.1, -0.2, 0.05],
            cov: cov.clone(),
            noise: vec![0.6; n],
            y: vec![0.4, -0.3, 0.8],
        };
        // Sample f from the prior and average the likelihood.
        let l = chol(n, &cov).unwrap();
        let trials = 100_000;
        let mut vals = Vec::with_capacity(trials);
        for _ in 0..trials {
            let z: Vec<f64> = (0..n)
                .map(|_| {
                    let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let mut f = gp.mean.clone();
            for i in 0..n {
                for k in 0..=i {
                    f[i] += l[i * n + k] * z[k];
                }
            }
            let mut lp = 0.0;
            for i in 0..n {
                let r = (gp.y[i] - f[i]) / gp.noise[i];
                lp += -0.5 * r * r
                    - gp.noise[i].ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            vals.push(lp.exp());
        }
        let mean: f64 = vals.iter().sum::<f64>() / trials as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let exact = gp.dense_log_marginal().unwrap().exp();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "estimate {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn kl_identical_is_zero() {
        let c = vec![1.0, 0.2, 0.2, 0.8];
        let m = vec![0.4, -0.6];
        let kl = kl_gaussians(&m, &c, &m, &c).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_one_dimensional_closed_form() {
        let (m1, v1, m2, v2): (f64, f64, f64, f64) = (0.3, 0.7, -0.5, 1.9);
        let kl = kl_gaussians(&[m1], &[v1], &[m2], &[v2]).unwrap();
        let want = 0.5 * ((v2 / v1).ln() + v1 / v2 + (m1 - m2) * (m1 - m2) / v2 - 1.0);
        assert!((kl - want).abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        let c1 = vec![1.0, 0.0, 0.0, 1.0];
        let c2 = vec![2.0, 0.5, 0.5, 0.7];
        let m = vec![0.0, 0.0];
        let a = kl_gaussians(&m, &c1, &m, &c2).unwrap();
        let b = kl_gaussians(&m, &c2, &m, &c1).unwrap();
        assert!((a - b).abs() > 1e-3);
        assert!(a >= 0.0 && b >= 0.0);
    }

    #[test]
    fn fd_gradient_quadratic_exact() {
        let obj = |p: &[f64]| 2.0 * p[0] * p[0] + 3.0 * p[0] * p[1] - p[1] * p[1];
        let g = fd_gradient(obj, &[0.7, -0.3], 1e-5);
        assert!((g[0] - (4.0 * 0.7 + 3.0 * -0.3)).abs() < 1e-8);
        assert!((g[1] - (3.0 * 0.7 - 2.0 * -0.3)).abs() < 1e-8);
    }

    #[test]
    fn fd_step_halving_error_ratio() {
        let obj = |p: &[f64]| p[0].sin() * p[0].exp();
        let x = vec![0.8];
        let exact = 0.8f64.cos() * 0.8f64.exp() + 0.8f64.sin() * 0.8f64.exp();
        let e1 = (fd_gradient(obj, &x, 1e-3)[0] - exact).abs();
        let e2 = (fd_gradient(obj, &x, 5e-4)[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }
}
