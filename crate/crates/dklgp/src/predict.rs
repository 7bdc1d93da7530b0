//! Posterior extension to test points and marginal summaries.
//!
//! Test points get their own conditional ordering and sparsity pattern over
//! the joint index space (test first, then training). The joint factor keeps
//! the trained posterior factor untouched in its training block and fills the
//! test columns with closed-form kernel solves, after which any linear
//! functional's marginal follows from one triangular solve.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::{prediction_ordering, prediction_patterns, SparsityPattern};
use crate::kernels::KernelSpec;
use crate::linalg::{restricted_backward_solve, restricted_forward_solve, SparseLowerColumns};
use crate::model::{log_likelihood, prior_column, LikelihoodSpec};
use crate::par;
use crate::vi::{Problem, VariationalState};

/// How marginal variances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMode {
    Exact,
    Reduced,
}

/// Joint posterior over test and training points.
#[derive(Debug, Clone)]
pub struct PredictionModel {
    pub n_test: usize,
    pub n_train: usize,
    /// Ordered test points followed by the ordered training points.
    pub joint_points: Vec<Vec<f64>>,
    /// Joint mean: predicted test means, then the training posterior means.
    pub nu_tilde: Vec<f64>,
    /// Joint factor: prediction columns, then the training factor shifted.
    pub v_tilde: SparseLowerColumns,
    pub s_star: SparsityPattern,
    pub reduced: SparsityPattern,
    /// Original row of each ordered test point.
    pub test_perm: Vec<usize>,
}

/// Closed-form prediction columns: for each test column, the leading entry of
/// the inverse of the kernel matrix on its support, renormalized.
pub fn prediction_factor(
    kernel: &KernelSpec,
    joint_points: &[Vec<f64>],
    s_star: &SparsityPattern,
) -> Result<Vec<Vec<f64>>> {
    par::map_indexed(s_star.num_cols(), |i| {
        prior_column(kernel, joint_points, s_star.col(i)).map_err(|e| e.in_column(i))
    })
    .into_iter()
    .collect()
}

/// Predicted test means: `mu* - (V**)^{-T} (V^{o*})^T (nu - mu)` where `V**`
/// is the test block and `V^{o*}` the training rows of the test columns.
pub fn prediction_mean(
    v_tilde: &SparseLowerColumns,
    n_test: usize,
    nu: &[f64],
    mu: f64,
    mu_star: f64,
) -> Result<Vec<f64>> {
    let mut t = vec![0.0; n_test];
    for i in 0..n_test {
        let rows = v_tilde.col_rows(i);
        let vals = v_tilde.col_vals(i);
        for (&r, &v) in rows.iter().zip(vals) {
            if r >= n_test {
                t[i] += v * (nu[r - n_test] - mu);
            }
        }
    }
    let active: Vec<usize> = (0..n_test).collect();
    let x = restricted_backward_solve(v_tilde, &active, &t)?;
    Ok(x.into_iter().map(|v| mu_star - v).collect())
}

/// Extend a trained state to test points. The training block of the joint
/// factor is the realized posterior factor, bit for bit.
pub fn build_prediction_model(
    pr: &Problem,
    state: &VariationalState,
    test_points: &[Vec<f64>],
    rho: f64,
) -> Result<PredictionModel> {
    let kernel = state.kernel(pr.family);
    let ordering = prediction_ordering(&pr.design, test_points, &pr.design.metric)?;
    let (s_star, reduced) = prediction_patterns(&ordering, &pr.design, rho);
    let m = ordering.points.len();
    let n = pr.len();
    let mut joint_points = ordering.points.clone();
    joint_points.extend(pr.design.points.iter().cloned());

    let test_cols = prediction_factor(&kernel, &joint_points, &s_star)?;
    let v = state.realized_v();
    let mut rows: Vec<Vec<usize>> = (0..m).map(|i| s_star.col(i).to_vec()).collect();
    let mut vals = test_cols;
    for j in 0..n {
        rows.push(v.col_rows(j).iter().map(|&r| r + m).collect());
        vals.push(v.col_vals(j).to_vec());
    }
    let v_tilde = SparseLowerColumns::new(m + n, rows, vals)?;

    let mu = pr.mean.constant;
    let nu_star = prediction_mean(&v_tilde, m, &state.nu, mu, mu)?;
    let mut nu_tilde = nu_star;
    nu_tilde.extend_from_slice(&state.nu);

    Ok(PredictionModel {
        n_test: m,
        n_train: n,
        joint_points,
        nu_tilde,
        v_tilde,
        s_star,
        reduced,
        test_perm: ordering.perm,
    })
}

/// Marginal of the linear functional `a^T f` over the joint vector:
/// `N(a^T nu_tilde, ||V_tilde^{-1} a||^2)`. Reduced mode requires `a` to be a
/// unit vector on a test index.
pub fn marginal_summary(
    model: &PredictionModel,
    a: &[f64],
    mode: SummaryMode,
) -> Result<(f64, f64)> {
    let dim = model.n_test + model.n_train;
    if a.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "summary vector length {} for joint dimension {}",
            a.len(),
            dim
        )));
    }
    let mean: f64 = a.iter().zip(&model.nu_tilde).map(|(x, y)| x * y).sum();
    let rhs: Vec<(usize, f64)> = a
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(k, &v)| (k, v))
        .collect();
    let active: Vec<usize> = match mode {
        SummaryMode::Exact => (0..dim).collect(),
        SummaryMode::Reduced => {
            if rhs.len() != 1 || rhs[0].1 != 1.0 || rhs[0].0 >= model.n_test {
                return Err(Error::Config(
                    "reduced summaries are only defined for test unit vectors".into(),
                ));
            }
            reduced_active(model, rhs[0].0)
        }
    };
    let x = restricted_forward_solve(&model.v_tilde, &active, &rhs)?;
    Ok((mean, x.iter().map(|v| v * v).sum()))
}

/// Reduced active set for a test column. The sparsity column is merged in
/// because the ancestor radii alone can miss a support point whose own scale
/// is finer than the test point's, and dropping a support entry from the
/// restricted solve is disproportionately costly.
fn reduced_active(model: &PredictionModel, i: usize) -> Vec<usize> {
    let mut active = model.reduced.col(i).to_vec();
    for &s in model.s_star.col(i) {
        if let Err(p) = active.binary_search(&s) {
            active.insert(p, s);
        }
    }
    active
}

/// Latent mean and variance for every test point, in test ordering.
pub fn latent_marginals(model: &PredictionModel, mode: SummaryMode) -> Result<Vec<(f64, f64)>> {
    let dim = model.n_test + model.n_train;
    par::map_indexed(model.n_test, |i| {
        let active: Vec<usize> = match mode {
            SummaryMode::Exact => (i..dim).collect(),
            SummaryMode::Reduced => reduced_active(model, i),
        };
        let x = restricted_forward_solve(&model.v_tilde, &active, &[(i, 1.0)])?;
        Ok((model.nu_tilde[i], x.iter().map(|v| v * v).sum()))
    })
    .into_iter()
    .collect()
}

const GH_NODES: usize = 61;

/// Gauss-Hermite rule with weight exp(-x^2): Newton refinement on the
/// orthonormal recurrence, largest roots seeded first.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = (n + 1) / 2;
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => {
                let a = (2 * n + 1) as f64;
                a.sqrt() - 1.85575 * a.powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal Hermite values p_0..p_n at z.
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for k in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (k as f64 + 1.0)).sqrt() * p2
                    - (k as f64 / (k as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn gh_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(GH_NODES))
}

/// Log density of a response under the latent marginal `N(m, s2)`: exact
/// convolution for gaussian noise, Gauss-Hermite quadrature otherwise.
pub fn response_log_density(lik: &LikelihoodSpec, m: f64, s2: f64, y: f64) -> f64 {
    match lik {
        LikelihoodSpec::Gaussian { .. } => {
            let tau = lik.tau(0);
            let v = s2 + tau * tau;
            let r = y - m;
            -0.5 * (r * r / v + v.ln() + (2.0 * std::f64::consts::PI).ln())
        }
        _ => {
            let (nodes, weights) = gh_rule();
            let s = s2.max(0.0).sqrt();
            let mut acc = 0.0;
            for (&x, &w) in nodes.iter().zip(weights) {
                let f = m + std::f64::consts::SQRT_2 * s * x;
                acc += w * log_likelihood(lik, y, f).exp();
            }
            (acc / std::f64::consts::PI.sqrt()).max(f64::MIN_POSITIVE).ln()
        }
    }
}

/// Predictive response mean under the latent marginal `N(m, s2)`.
pub fn response_mean(lik: &LikelihoodSpec, m: f64, s2: f64) -> f64 {
    match lik {
        LikelihoodSpec::BernoulliLogit => {
            let (nodes, weights) = gh_rule();
            let s = s2.max(0.0).sqrt();
            let mut acc = 0.0;
            for (&x, &w) in nodes.iter().zip(weights) {
                let f = m + std::f64::consts::SQRT_2 * s * x;
                let p = if f > 0.0 {
                    1.0 / (1.0 + (-f).exp())
                } else {
                    let e = f.exp();
                    e / (1.0 + e)
                };
                acc += w * p;
            }
            acc / std::f64::consts::PI.sqrt()
        }
        // Symmetric noise around the latent value.
        _ => m,
    }
}
