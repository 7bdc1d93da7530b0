//! Latent GP model: dataset, likelihoods, and the closed-form prior factor.
//!
//! The prior factor holds the sparse inverse Cholesky columns of the kernel
//! matrix on the prior pattern. Each column solves a small kernel system on
//! its own support, so columns are computed on demand and in parallel; a
//! cache can be filled for fixed-hyperparameter runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrderedDesign, SparsityPattern};
use crate::kernels::{covariance_submatrix, KernelSpec, MeanSpec};
use crate::linalg::{cholesky, DenseSpd, SparseLowerColumns};
use crate::par;

/// ln Gamma(1.5) = ln(sqrt(pi)/2).
const LN_GAMMA_1_5: f64 = -0.120_782_237_635_245_22;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observation model. Scales are positive; the Student-t has 2 degrees of
/// freedom, so its scale parameter is not a standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LikelihoodSpec {
    Gaussian {
        noise: f64,
        /// Optional per-observation noise scales; overrides `noise`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_obs: Option<Vec<f64>>,
    },
    StudentT2 { scale: f64 },
    BernoulliLogit,
}

impl LikelihoodSpec {
    pub fn gaussian(noise: f64) -> Self {
        LikelihoodSpec::Gaussian {
            noise,
            per_obs: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            LikelihoodSpec::Gaussian { noise, per_obs } => {
                if !(*noise > 0.0) {
                    return Err(Error::Config("gaussian noise scale must be positive".into()));
                }
                if let Some(taus) = per_obs {
                    if taus.len() != n {
                        return Err(Error::ShapeMismatch(format!(
                            "per-observation scales: {} entries for {} observations",
                            taus.len(),
                            n
                        )));
                    }
                    if taus.iter().any(|t| !(*t > 0.0)) {
                        return Err(Error::Config("per-observation scales must be positive".into()));
                    }
                }
            }
            LikelihoodSpec::StudentT2 { scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::Config("student-t scale must be positive".into()));
                }
            }
            LikelihoodSpec::BernoulliLogit => {}
        }
        Ok(())
    }

    /// Noise scale for observation `i` (gaussian only; falls back to the
    /// shared scale elsewhere so callers can treat it uniformly).
    pub fn tau(&self, i: usize) -> f64 {
        match self {
            LikelihoodSpec::Gaussian { noise, per_obs } => per_obs
                .as_ref()
                .map_or(*noise, |t| t[i]),
            LikelihoodSpec::StudentT2 { scale } => *scale,
            LikelihoodSpec::BernoulliLogit => 1.0,
        }
    }

    /// Replace the shared scale, keeping per-observation overrides untouched.
    pub fn with_scale(&self, s: f64) -> Self {
        match self {
            LikelihoodSpec::Gaussian { per_obs, .. } => LikelihoodSpec::Gaussian {
                noise: s,
                per_obs: per_obs.clone(),
            },
            LikelihoodSpec::StudentT2 { .. } => LikelihoodSpec::StudentT2 { scale: s },
            LikelihoodSpec::BernoulliLogit => LikelihoodSpec::BernoulliLogit,
        }
    }

    pub fn has_scale(&self) -> bool {
        !matches!(self, LikelihoodSpec::BernoulliLogit)
    }
}

/// Observations in original row order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub likelihood: LikelihoodSpec,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, y: Vec<f64>, likelihood: LikelihoodSpec) -> Result<Self> {
        let ds = Dataset {
            inputs,
            y,
            likelihood,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 || self.inputs.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for {} responses",
                self.inputs.len(),
                n
            )));
        }
        if self
            .inputs
            .iter()
            .flat_map(|r| r.iter())
            .chain(self.y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        if matches!(self.likelihood, LikelihoodSpec::BernoulliLogit)
            && self.y.iter().any(|&v| v != 0.0 && v != 1.0)
        {
            return Err(Error::Config("bernoulli responses must be 0 or 1".into()));
        }
        self.likelihood.validate(n)
    }
}

/// Log density of a single observation given the latent value.
pub fn log_likelihood(spec: &LikelihoodSpec, y: f64, f: f64) -> f64 {
    log_likelihood_obs(spec, 0, y, f)
}

/// Same with a per-observation index for heteroscedastic gaussian noise.
pub fn log_likelihood_obs(spec: &LikelihoodSpec, i: usize, y: f64, f: f64) -> f64 {
    match spec {
        LikelihoodSpec::Gaussian { .. } => {
            let tau = spec.tau(i);
            let r = (y - f) / tau;
            -0.5 * (r * r + LN_2PI) - tau.ln()
        }
        LikelihoodSpec::StudentT2 { scale } => {
            let r = (y - f) / scale;
            LN_GAMMA_1_5 - 0.5 * LN_2PI - scale.ln() - 1.5 * (1.0 + 0.5 * r * r).ln()
        }
        LikelihoodSpec::BernoulliLogit => {
            // y*f - log(1 + e^f), stable for both signs of f
            if f > 0.0 {
                (y - 1.0) * f - (-f).exp().ln_1p()
            } else {
                y * f - f.exp().ln_1p()
            }
        }
    }
}

/// Closed-form expectation of the gaussian log likelihood under
/// `f_i ~ N(nu_i, w_norm^2)`.
pub fn gaussian_expected_loglik(nu: f64, w_norm: f64, y: f64, tau: f64) -> f64 {
    let r = y - nu;
    -0.5 * ((r * r + w_norm * w_norm) / (tau * tau) + (tau * tau).ln() + LN_2PI)
}

/// Monte-Carlo expectation of the log likelihood; `z` holds `L` blocks of
/// standard normals, one block per sample, each of length `w.len()`.
pub fn mc_expected_loglik(
    spec: &LikelihoodSpec,
    i: usize,
    nu: f64,
    w: &[f64],
    y: f64,
    z: &[f64],
) -> f64 {
    let k = w.len();
    assert!(k > 0 && z.len() % k == 0 && !z.is_empty());
    let l = z.len() / k;
    let mut total = 0.0;
    for block in z.chunks_exact(k) {
        let f = nu + w.iter().zip(block).map(|(a, b)| a * b).sum::<f64>();
        total += log_likelihood_obs(spec, i, y, f);
    }
    total / l as f64
}

/// Sparse inverse Cholesky column of the kernel matrix on support `idx`:
/// the first entry of `K(idx,idx)^{-1} e_1`, renormalized so that the column
/// represents the conditional of point `idx[0]` on the rest.
pub fn prior_column(spec: &KernelSpec, points: &[Vec<f64>], idx: &[usize]) -> Result<Vec<f64>> {
    let k = covariance_submatrix(spec, points, idx)?;
    let m = idx.len();
    let mut e1 = vec![0.0; m];
    e1[0] = 1.0;
    let b = match cholesky(&k) {
        Ok(f) => {
            let mut b = e1;
            f.solve_in_place(&mut b);
            b
        }
        Err(Error::NotPositiveDefinite { .. }) => {
            // Near-duplicate inputs: retry once with a small diagonal jitter.
            eprintln!(
                "warning: kernel submatrix not positive definite on {} points, retrying with jitter",
                m
            );
            let jitter = 1e-8 * spec.variance;
            let mut entries = k.entries().to_vec();
            for a in 0..m {
                entries[a * m + a] += jitter;
            }
            let kj = DenseSpd::new(m, entries)?;
            let mut b = e1;
            cholesky(&kj)?.solve_in_place(&mut b);
            b
        }
        Err(e) => return Err(e),
    };
    if !(b[0] > 0.0) {
        return Err(Error::NotPositiveDefinite {
            index: idx[0],
            pivot: b[0],
        });
    }
    let scale = b[0].sqrt().recip();
    Ok(b.into_iter().map(|v| v * scale).collect())
}

/// Prior sparse inverse Cholesky factor, materialized column by column.
#[derive(Debug, Clone)]
pub struct PriorFactor<'a> {
    pub design: &'a OrderedDesign,
    pub pattern: &'a SparsityPattern,
    pub kernel: KernelSpec,
    pub mean: MeanSpec,
    cache: Option<Vec<Vec<f64>>>,
}

impl<'a> PriorFactor<'a> {
    pub fn new(
        design: &'a OrderedDesign,
        pattern: &'a SparsityPattern,
        kernel: KernelSpec,
        mean: MeanSpec,
    ) -> Result<Self> {
        kernel.validate()?;
        if pattern.dim() != design.len() {
            return Err(Error::ShapeMismatch(format!(
                "pattern over {} indices for {} points",
                pattern.dim(),
                design.len()
            )));
        }
        Ok(PriorFactor {
            design,
            pattern,
            kernel,
            mean,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.design.len()
    }

    pub fn is_empty(&self) -> bool {
        self.design.is_empty()
    }

    /// Values of the factor column on its support `pattern.col(i)`.
    pub fn column(&self, i: usize) -> Result<Vec<f64>> {
        if let Some(cache) = &self.cache {
            return Ok(cache[i].clone());
        }
        prior_column(&self.kernel, &self.design.points, self.pattern.col(i))
            .map_err(|e| e.in_column(i))
    }

    /// Precompute every column; useful when hyperparameters are fixed.
    pub fn fill_cache(&mut self) -> Result<()> {
        let cols = par::map_indexed(self.len(), |i| self.column(i));
        self.cache = Some(cols.into_iter().collect::<Result<Vec<_>>>()?);
        Ok(())
    }

    /// Swap in new hyperparameters, dropping any cached columns.
    pub fn set_kernel(&mut self, kernel: KernelSpec) {
        self.kernel = kernel;
        self.cache = None;
    }

    /// Assemble the whole factor as a sparse triangular matrix.
    pub fn to_sparse(&self) -> Result<SparseLowerColumns> {
        let n = self.len();
        let vals = par::map_indexed(n, |i| self.column(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let rows = (0..n).map(|i| self.pattern.col(i).to_vec()).collect();
        SparseLowerColumns::new(n, rows, vals)
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        vec![self.mean.constant; self.len()]
    }
}

/// Forward KL divergence from the exact prior `N(0,K)` to the approximation
/// with precision `L L^T`: `0.5 (tr(L L^T K) - log det(L L^T K) - n)`.
pub fn prior_kl(lhat: &SparseLowerColumns, k: &DenseSpd) -> Result<f64> {
    let n = lhat.dim();
    if k.dim() != n {
        return Err(Error::ShapeMismatch(format!(
            "factor dim {} vs covariance dim {}",
            n,
            k.dim()
        )));
    }
    // tr(L L^T K) = sum over columns of L_{:,i}^T K L_{:,i}
    let mut trace = 0.0;
    for i in 0..n {
        let rows = lhat.col_rows(i);
        let vals = lhat.col_vals(i);
        for (a, &ra) in rows.iter().enumerate() {
            for (b, &rb) in rows.iter().enumerate() {
                trace += vals[a] * vals[b] * k.get(ra, rb);
            }
        }
    }
    let log_det_k = cholesky(k)?.log_det_spd();
    let log_det_prec: f64 = (0..n).map(|i| 2.0 * lhat.diag(i).ln()).sum();
    Ok(0.5 * (trace - log_det_prec - log_det_k - n as f64))
}
