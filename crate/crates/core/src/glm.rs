//! Per-choice subproblems: Poisson regression with an offset, and the
//! binomial logit of one choice against the base choice.
//!
//! Both are smooth convex objectives of a `q`-dimensional coefficient vector
//! whose terms depend on an observation only through the linear predictor
//! `x_i' beta + offset_i`. A single damped Newton routine serves both.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{IdmrError, Result};
use crate::model::{CovariateMatrix, FixedEffects};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmSettings {
    pub max_newton_iters: usize,
    /// Threshold on the infinity norm of the gradient.
    pub grad_tol: f64,
    /// Maximum number of step halvings per Newton iteration.
    pub step_halvings: usize,
}

impl Default for GlmSettings {
    fn default() -> Self {
        Self {
            max_newton_iters: 50,
            grad_tol: 1e-8,
            step_halvings: 30,
        }
    }
}

impl GlmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_newton_iters == 0 || !(self.grad_tol > 0.0) {
            return Err(IdmrError::InvalidInput(format!(
                "invalid GLM settings: max_newton_iters = {}, grad_tol = {}",
                self.max_newton_iters, self.grad_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// No step along the Newton direction decreased the objective.
    Stalled,
    /// Fitted probabilities hit 0 or 1; the binomial MLE does not exist.
    Separated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmSolution {
    pub theta_k: Array1<f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub status: SolveStatus,
    /// Objective value after each accepted step, starting at the initial point.
    pub objective_path: Vec<f64>,
}

/// Row-major `n x q` design borrowed from contiguous storage.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Design<'a> {
    pub data: &'a [f64],
    pub n: usize,
    pub q: usize,
}

impl<'a> Design<'a> {
    pub fn from_covariates(v: &'a CovariateMatrix) -> Self {
        Self {
            data: v.values().as_slice().expect("standard layout"),
            n: v.n(),
            q: v.p(),
        }
    }

    pub fn from_array(a: &'a Array2<f64>) -> Self {
        let (n, q) = a.dim();
        Self {
            data: a.as_slice().expect("standard layout"),
            n,
            q,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }
}

/// Per-observation contribution as a function of the linear predictor:
/// value, first derivative, second derivative.
pub(crate) trait Family: Sync {
    fn term(&self, i: usize, lin: f64) -> (f64, f64, f64);
    fn offset(&self, i: usize) -> f64;
}

pub(crate) struct PoissonFamily<'a> {
    pub counts: &'a [f64],
    pub offset: &'a [f64],
}

impl Family for PoissonFamily<'_> {
    #[inline]
    fn term(&self, i: usize, lin: f64) -> (f64, f64, f64) {
        let rate = lin.exp();
        let c = self.counts[i];
        (rate - c * lin, rate - c, rate)
    }

    #[inline]
    fn offset(&self, i: usize) -> f64 {
        self.offset[i]
    }
}

pub(crate) struct BinomialFamily<'a> {
    pub counts_k: &'a [f64],
    pub counts_d: &'a [f64],
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Family for BinomialFamily<'_> {
    #[inline]
    fn term(&self, i: usize, lin: f64) -> (f64, f64, f64) {
        let ck = self.counts_k[i];
        let trials = ck + self.counts_d[i];
        let prob = logistic(lin);
        (
            trials * softplus(lin) - ck * lin,
            trials * prob - ck,
            trials * prob * (1.0 - prob),
        )
    }

    #[inline]
    fn offset(&self, _i: usize) -> f64 {
        0.0
    }
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Row-major `q x q`.
    pub hess: Vec<f64>,
}

pub(crate) fn evaluate<F: Family>(design: Design<'_>, family: &F, beta: &[f64]) -> Evaluation {
    let q = design.q;
    let mut value = 0.0;
    let mut grad = vec![0.0; q];
    let mut hess = vec![0.0; q * q];
    for i in 0..design.n {
        let row = design.row(i);
        let lin: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + family.offset(i);
        let (v, g, h) = family.term(i, lin);
        value += v;
        for a in 0..q {
            let ra = row[a];
            grad[a] += g * ra;
            let hra = h * ra;
            let hrow = &mut hess[a * q..a * q + q];
            for b in a..q {
                hrow[b] += hra * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            hess[a * q + b] = hess[b * q + a];
        }
    }
    Evaluation { value, grad, hess }
}

fn inf_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `hess * step = grad` for a symmetric positive semi-definite `hess`,
/// retrying once with `1e-10 * trace` added to the diagonal.
pub(crate) fn spd_solve(hess: &[f64], grad: &[f64], q: usize) -> Result<Vec<f64>> {
    let trace: f64 = (0..q).map(|a| hess[a * q + a]).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(IdmrError::SingularHessian { choice: None });
    }
    let h = DMatrix::from_row_slice(q, q, hess);
    let g = DVector::from_column_slice(grad);
    let min_pivot = 1e-12 * trace;
    let solve = |m: DMatrix<f64>| -> Option<Vec<f64>> {
        let chol = m.cholesky()?;
        let l = chol.l_dirty();
        if (0..q).any(|a| l[(a, a)] * l[(a, a)] < min_pivot) {
            return None;
        }
        let x = chol.solve(&g);
        x.iter()
            .all(|v| v.is_finite())
            .then(|| x.iter().copied().collect())
    };
    if let Some(x) = solve(h.clone()) {
        return Ok(x);
    }
    let jitter = 1e-10 * trace;
    let mut h = h;
    for a in 0..q {
        h[(a, a)] += jitter;
    }
    let chol = h
        .cholesky()
        .ok_or(IdmrError::SingularHessian { choice: None })?;
    let x = chol.solve(&g);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x.iter().copied().collect())
    } else {
        Err(IdmrError::SingularHessian { choice: None })
    }
}

/// Relative slack under which an objective increase is treated as roundoff.
const ROUNDOFF_SLACK: f64 = 1e-13;

/// Damped Newton minimization from `init`.
pub(crate) fn newton<F: Family>(
    design: Design<'_>,
    family: &F,
    init: &[f64],
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    newton_with(design.q, init, settings, |beta| {
        evaluate(design, family, beta)
    })
}

/// Damped Newton on any smooth convex objective given by `eval`.
pub(crate) fn newton_with<E>(
    q: usize,
    init: &[f64],
    settings: &GlmSettings,
    eval_at: E,
) -> Result<GlmSolution>
where
    E: Fn(&[f64]) -> Evaluation,
{
    settings.validate()?;
    if init.len() != q {
        return Err(IdmrError::DimensionMismatch(format!(
            "initial value has length {} for {q} coefficients",
            init.len()
        )));
    }
    let mut beta = init.to_vec();
    let mut eval = eval_at(&beta);
    if !eval.value.is_finite() {
        return Err(IdmrError::NonFinite {
            context: "objective at the initial value".into(),
        });
    }
    let mut gnorm = inf_norm(&eval.grad);
    let mut path = vec![eval.value];
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIterations;

    while iterations < settings.max_newton_iters {
        if gnorm <= settings.grad_tol {
            status = SolveStatus::Converged;
            break;
        }
        let step = spd_solve(&eval.hess, &eval.grad, q)?;
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.step_halvings {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - scale * s).collect();
            let cand = eval_at(&trial);
            if cand.value.is_finite() {
                let slack = ROUNDOFF_SLACK * eval.value.abs().max(1.0);
                let decreased = cand.value <= eval.value;
                let roundoff = cand.value - eval.value <= slack && inf_norm(&cand.grad) < gnorm;
                if decreased || roundoff {
                    accepted = Some((trial, cand));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, cand)) => {
                beta = trial;
                eval = cand;
                gnorm = inf_norm(&eval.grad);
                path.push(eval.value);
            }
            None => {
                status = SolveStatus::Stalled;
                break;
            }
        }
    }
    if status == SolveStatus::MaxIterations && gnorm <= settings.grad_tol {
        status = SolveStatus::Converged;
    }
    if status == SolveStatus::Stalled && gnorm <= settings.grad_tol {
        status = SolveStatus::Converged;
    }
    Ok(GlmSolution {
        theta_k: Array1::from(beta),
        iterations,
        final_grad_norm: gnorm,
        converged: status == SolveStatus::Converged,
        status,
        objective_path: path,
    })
}

fn check_lengths(n: usize, counts: &[f64], other: &[f64], what: &str) -> Result<()> {
    if counts.len() != n || other.len() != n {
        return Err(IdmrError::DimensionMismatch(format!(
            "{what}: expected {n} observations, got {} and {}",
            counts.len(),
            other.len()
        )));
    }
    Ok(())
}

fn contiguous<'a>(v: &'a ArrayView1<'_, f64>, buf: &'a mut Option<Vec<f64>>) -> &'a [f64] {
    match v.as_slice() {
        Some(s) => s,
        None => buf.insert(v.to_vec()),
    }
}

/// `sum_i [exp(V_i' theta_k + mu_i) - C_ik (V_i' theta_k + mu_i)]`.
pub fn q_kn(
    theta_k: ArrayView1<'_, f64>,
    counts_k: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
    mu: &FixedEffects,
) -> Result<f64> {
    let (value, _, _) = q_kn_derivatives(theta_k, counts_k, v, mu)?;
    Ok(value)
}

/// Value, gradient `sum_i (exp(eta + mu) - C_ik) V_i`, and Hessian
/// `sum_i exp(eta + mu) V_i V_i'` of [`q_kn`].
pub fn q_kn_derivatives(
    theta_k: ArrayView1<'_, f64>,
    counts_k: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
    mu: &FixedEffects,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let (mut b1, mut b2) = (None, None);
    let counts = contiguous(&counts_k, &mut b1);
    let beta = contiguous(&theta_k, &mut b2);
    check_lengths(v.n(), counts, mu.as_slice(), "q_kn")?;
    if beta.len() != v.p() {
        return Err(IdmrError::DimensionMismatch(format!(
            "theta_k has length {} for p = {}",
            beta.len(),
            v.p()
        )));
    }
    let family = PoissonFamily {
        counts,
        offset: mu.as_slice(),
    };
    let eval = evaluate(Design::from_covariates(v), &family, beta);
    if !eval.value.is_finite() {
        return Err(IdmrError::NonFinite {
            context: "Poisson objective (exp overflow)".into(),
        });
    }
    let q = v.p();
    Ok((
        eval.value,
        Array1::from(eval.grad),
        Array2::from_shape_vec((q, q), eval.hess).expect("q x q"),
    ))
}

/// Negative binomial-logit log-likelihood of choice `k` against the base,
/// `-sum_i [C_ik V_i' theta - (C_ik + C_id) log(1 + exp(V_i' theta))]`,
/// with its gradient and Hessian.
pub fn binomial_derivatives(
    theta_k: ArrayView1<'_, f64>,
    counts_k: ArrayView1<'_, f64>,
    counts_d: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let (mut b1, mut b2, mut b3) = (None, None, None);
    let ck = contiguous(&counts_k, &mut b1);
    let cd = contiguous(&counts_d, &mut b2);
    let beta = contiguous(&theta_k, &mut b3);
    check_lengths(v.n(), ck, cd, "binomial objective")?;
    let family = BinomialFamily {
        counts_k: ck,
        counts_d: cd,
    };
    let eval = evaluate(Design::from_covariates(v), &family, beta);
    let q = v.p();
    Ok((
        eval.value,
        Array1::from(eval.grad),
        Array2::from_shape_vec((q, q), eval.hess).expect("q x q"),
    ))
}

/// Minimizes [`q_kn`] over `theta_k` by damped Newton.
///
/// A choice with no positive counts has no minimizer (the intercept runs to
/// minus infinity) and is reported as [`IdmrError::EmptyChoice`].
pub fn solve_poisson(
    counts_k: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
    mu: &FixedEffects,
    init: ArrayView1<'_, f64>,
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    let (mut b1, mut b2) = (None, None);
    let counts = contiguous(&counts_k, &mut b1);
    let init = contiguous(&init, &mut b2);
    check_lengths(v.n(), counts, mu.as_slice(), "solve_poisson")?;
    solve_poisson_raw(
        Design::from_covariates(v),
        counts,
        mu.as_slice(),
        init,
        settings,
    )
}

pub(crate) fn solve_poisson_raw(
    design: Design<'_>,
    counts: &[f64],
    offset: &[f64],
    init: &[f64],
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    if counts.iter().all(|&c| c <= 0.0) {
        return Err(IdmrError::EmptyChoice { choice: None });
    }
    newton(design, &PoissonFamily { counts, offset }, init, settings)
}

/// Linear predictors beyond this magnitude mean fitted probabilities within
/// about 2e-9 of 0 or 1, which only happens when the data are separated.
const SEPARATION_ETA: f64 = 20.0;

/// Fits the binomial logit of choice `k` against the base choice.
pub fn solve_binomial(
    counts_k: ArrayView1<'_, f64>,
    counts_d: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
    init: ArrayView1<'_, f64>,
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    let (mut b1, mut b2, mut b3) = (None, None, None);
    let ck = contiguous(&counts_k, &mut b1);
    let cd = contiguous(&counts_d, &mut b2);
    let init = contiguous(&init, &mut b3);
    check_lengths(v.n(), ck, cd, "solve_binomial")?;
    let design = Design::from_covariates(v);
    let family = BinomialFamily {
        counts_k: ck,
        counts_d: cd,
    };
    let mut sol = newton(design, &family, init, settings)?;

    let one_sided = ck.iter().all(|&c| c <= 0.0) || cd.iter().all(|&c| c <= 0.0);
    let extreme = (0..design.n).any(|i| {
        if ck[i] + cd[i] <= 0.0 {
            return false;
        }
        let lin: f64 = design
            .row(i)
            .iter()
            .zip(sol.theta_k.iter())
            .map(|(a, b)| a * b)
            .sum();
        lin.abs() > SEPARATION_ETA
    });
    if one_sided || extreme {
        sol.status = SolveStatus::Separated;
        sol.converged = false;
    }
    Ok(sol)
}
