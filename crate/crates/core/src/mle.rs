//! Full conditional maximum likelihood by dense Newton, for small models.
//!
//! Free parameters are flattened row-major: coordinate `j` of choice `k` is
//! entry `k * p + j`, for `k < d - 1`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::glm::{self, Evaluation, GlmSettings};
use crate::init::{initialize, InitKind};
use crate::model::{eta_into, log_sum_exp, softmax_into, Dataset, ParamMatrix};

pub const DEFAULT_PARAM_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct MleSettings {
    pub glm: GlmSettings,
    /// Largest `(d - 1) p` accepted.
    pub param_cap: usize,
}

impl Default for MleSettings {
    fn default() -> Self {
        Self {
            glm: GlmSettings {
                max_newton_iters: 100,
                ..GlmSettings::default()
            },
            param_cap: DEFAULT_PARAM_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub theta: ParamMatrix,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

/// Value, gradient and Hessian of the negative conditional log-likelihood
/// over the free parameters.
pub fn neg_loglik_derivatives(
    data: &Dataset,
    theta: &ParamMatrix,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    data.check_params(theta)?;
    let eval = evaluate(data, theta.as_slice());
    if !eval.value.is_finite() {
        return Err(IdmrError::NonFinite {
            context: "conditional log-likelihood".into(),
        });
    }
    let q = eval.grad.len();
    Ok((
        eval.value,
        Array1::from(eval.grad),
        Array2::from_shape_vec((q, q), eval.hess).expect("q x q"),
    ))
}

/// `theta` starts with the `(d - 1) p` free coefficients; the base row is implicit.
fn evaluate(data: &Dataset, theta: &[f64]) -> Evaluation {
    let (d, p) = (data.d(), data.p());
    let q = (d - 1) * p;
    let mut full = theta[..q].to_vec();
    full.resize(d * p, 0.0);
    let mut value = 0.0;
    let mut grad = vec![0.0; q];
    let mut hess = vec![0.0; q * q];
    let mut eta = vec![0.0; d];
    let mut pi = vec![0.0; d];
    let counts = data.counts().counts();
    for i in 0..data.n() {
        let v = data.covariates().row_slice(i);
        eta_into(v, &full, p, &mut eta);
        let m = data.total(i) as f64;
        let row = counts.row(i);
        let dot: f64 = row.iter().zip(&eta).map(|(&c, &e)| c as f64 * e).sum();
        value -= dot - m * log_sum_exp(&eta);
        softmax_into(&eta, &mut pi);
        for k in 0..d - 1 {
            let r = m * pi[k] - row[k] as f64;
            for (j, &vj) in v.iter().enumerate() {
                grad[k * p + j] += r * vj;
            }
            for l in k..d - 1 {
                let w = m * pi[k] * (if k == l { 1.0 } else { 0.0 } - pi[l]);
                for a in 0..p {
                    let wa = w * v[a];
                    let hrow = &mut hess[(k * p + a) * q + l * p..(k * p + a) * q + l * p + p];
                    for (b, h) in hrow.iter_mut().enumerate() {
                        *h += wa * v[b];
                    }
                }
            }
        }
    }
    // Fill the lower block triangle from the upper one.
    for a in 0..q {
        for b in 0..q {
            if (b / p) < (a / p) {
                hess[a * q + b] = hess[b * q + a];
            }
        }
    }
    Evaluation { value, grad, hess }
}

/// The conditional MLE, started from `init`.
pub fn mnl_mle(data: &Dataset, init: &InitKind, settings: &MleSettings) -> Result<MleResult> {
    let (d, p) = (data.d(), data.p());
    let q = (d - 1) * p;
    if q > settings.param_cap {
        return Err(IdmrError::TooManyParameters {
            params: q,
            cap: settings.param_cap,
        });
    }
    if let Some(i) = (0..data.n()).find(|&i| data.total(i) == 0) {
        log::debug!("observation {i} has zero total; it does not enter the likelihood");
    }
    let start = initialize(data, init, &settings.glm, &Executor::sequential())?;
    let free = start.free_rows();
    let sol = glm::newton_with(
        q,
        free.as_slice().expect("standard layout"),
        &settings.glm,
        |beta| evaluate(data, beta),
    )?;
    let theta = ParamMatrix::from_free_rows(
        &sol.theta_k
            .into_shape_with_order((d - 1, p))
            .expect("shape"),
    )?;
    Ok(MleResult {
        theta,
        converged: sol.converged,
        iterations: sol.iterations,
        final_grad_norm: sol.final_grad_norm,
    })
}

/// `(1/n)` times the Hessian of the negative conditional log-likelihood.
pub fn fisher_information(data: &Dataset, theta: &ParamMatrix) -> Result<Array2<f64>> {
    let (_, _, hess) = neg_loglik_derivatives(data, theta)?;
    Ok(hess / data.n() as f64)
}

/// Spectral norm of `A^{-1} B`, where `A` is the block-diagonal matrix with
/// blocks `sum_i M_i pi_ik V_i V_i'` and `B` has blocks
/// `-sum_i M_i pi_ik pi_il V_i V_i'`, both over free choices. Values below
/// one mean the iteration map is locally contracting.
pub fn information_dominance_check(data: &Dataset, theta: &ParamMatrix) -> Result<f64> {
    let x = dominance_matrix(data, theta)?;
    Ok(spectral_norm(&x))
}

/// `A^{-1} B` as a dense `(d - 1) p` square matrix.
pub fn dominance_matrix(data: &Dataset, theta: &ParamMatrix) -> Result<DMatrix<f64>> {
    data.check_params(theta)?;
    let (d, p) = (data.d(), data.p());
    let q = (d - 1) * p;
    let mut own = vec![DMatrix::<f64>::zeros(p, p); d - 1];
    let mut cross = DMatrix::<f64>::zeros(q, q);
    let mut eta = vec![0.0; d];
    let mut pi = vec![0.0; d];
    for i in 0..data.n() {
        let v = data.covariates().row_slice(i);
        eta_into(v, theta.as_slice(), p, &mut eta);
        softmax_into(&eta, &mut pi);
        let m = data.total(i) as f64;
        for k in 0..d - 1 {
            for a in 0..p {
                for b in 0..p {
                    let vv = v[a] * v[b];
                    own[k][(a, b)] += m * pi[k] * vv;
                    for l in 0..d - 1 {
                        cross[(k * p + a, l * p + b)] -= m * pi[k] * pi[l] * vv;
                    }
                }
            }
        }
    }
    let mut x = DMatrix::<f64>::zeros(q, q);
    for (k, block) in own.into_iter().enumerate() {
        let chol = block
            .cholesky()
            .ok_or(IdmrError::SingularHessian { choice: Some(k) })?;
        let rhs = cross.rows(k * p, p).into_owned();
        let solved = chol.solve(&rhs);
        if solved.iter().any(|v| !v.is_finite()) {
            return Err(IdmrError::SingularHessian { choice: Some(k) });
        }
        x.rows_mut(k * p, p).copy_from(&solved);
    }
    Ok(x)
}

/// Largest singular value by power iteration on `X' X`.
pub fn spectral_norm(x: &DMatrix<f64>) -> f64 {
    let q = x.ncols();
    if q == 0 {
        return 0.0;
    }
    let xtx = x.transpose() * x;
    let mut v = DVector::from_fn(q, |j, _| 1.0 + j as f64 / q as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = &xtx * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}
