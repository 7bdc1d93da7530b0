//! Covariance kernels with ARD length-scales and submatrix assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseSpd;

/// Kernel family of the isotropic base kernel applied to the scaled distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Matern15,
    SquaredExponential,
    RationalQuadratic,
}

/// Kernel specification: family, variance, per-dimension length-scales, and
/// the rational-quadratic shape (held fixed at its default of 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub length_scales: Vec<f64>,
    #[serde(default = "default_rq_shape")]
    pub rq_shape: f64,
}

fn default_rq_shape() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, length_scales: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            family,
            variance,
            length_scales,
            rq_shape: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) {
            return Err(Error::Config(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if self.length_scales.is_empty() || self.length_scales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("length-scales must be positive".into()));
        }
        if !(self.rq_shape > 0.0) {
            return Err(Error::Config("rational-quadratic shape must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }
}

/// Constant prior mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanSpec {
    pub constant: f64,
}

impl Default for MeanSpec {
    fn default() -> Self {
        MeanSpec { constant: 0.0 }
    }
}

/// Euclidean distance between inputs scaled elementwise by `lambda`.
pub fn scaled_distance(x: &[f64], y: &[f64], lambda: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let d = (x[k] - y[k]) / lambda[k];
        s += d * d;
    }
    s.sqrt()
}

/// Kernel value as a function of the scaled distance `q ≥ 0`.
pub fn kernel_value(spec: &KernelSpec, q: f64) -> f64 {
    let s2 = spec.variance;
    match spec.family {
        KernelFamily::Matern15 => {
            let a = 3.0f64.sqrt() * q;
            s2 * (1.0 + a) * (-a).exp()
        }
        KernelFamily::SquaredExponential => s2 * (-0.5 * q * q).exp(),
        KernelFamily::RationalQuadratic => {
            let a = spec.rq_shape;
            s2 * (1.0 + q * q / (2.0 * a)).powf(-a)
        }
    }
}

/// Derivative of `kernel_value` with respect to `q`. Used by hyperparameter
/// gradients; zero at `q = 0` for all three families.
pub fn kernel_value_dq(spec: &KernelSpec, q: f64) -> f64 {
    let s2 = spec.variance;
    match spec.family {
        KernelFamily::Matern15 => {
            let r = 3.0f64.sqrt();
            -s2 * 3.0 * q * (-r * q).exp()
        }
        KernelFamily::SquaredExponential => -s2 * q * (-0.5 * q * q).exp(),
        KernelFamily::RationalQuadratic => {
            let a = spec.rq_shape;
            -s2 * q * (1.0 + q * q / (2.0 * a)).powf(-a - 1.0)
        }
    }
}

/// Assemble the covariance submatrix over `idx` for points given as rows.
pub fn covariance_submatrix(spec: &KernelSpec, points: &[Vec<f64>], idx: &[usize]) -> Result<DenseSpd> {
    let m = idx.len();
    let mut entries = vec![0.0; m * m];
    for a in 0..m {
        entries[a * m + a] = spec.variance;
        for b in (a + 1)..m {
            let q = scaled_distance(&points[idx[a]], &points[idx[b]], &spec.length_scales);
            let v = kernel_value(spec, q);
            entries[a * m + b] = v;
            entries[b * m + a] = v;
        }
    }
    DenseSpd::new(m, entries)
}
