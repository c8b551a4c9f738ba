//! The iterative distributed estimator.
//!
//! Each iteration profiles out the fixed effects in closed form,
//! `mu_i = log M_i - logsumexp(eta_i)`, and then solves independent Poisson
//! regressions with `mu` as offset. Its fixed point is the conditional MLE.
//!
//! By default the base row is refit alongside the others and then
//! subtracted from every row. Holding it at zero instead ([`BaseUpdate::Pinned`])
//! reaches the same fixed point, but a common shift of all free rows then
//! decays only by a factor of about one minus the base choice's share per
//! iteration, which is slow when the base is rarely chosen.

use std::borrow::Cow;
use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::glm::{self, Design, GlmSettings, GlmSolution, SolveStatus};
use crate::init::{initialize, InitKind};
use crate::model::{eta_into, log_sum_exp, quasi_loglik, Dataset, FixedEffects, ParamMatrix};

/// Intercept given to choices dropped for having no counts.
pub const DROPPED_INTERCEPT: f64 = -30.0;

/// How an iteration treats the base row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BaseUpdate {
    /// Fit all `d` rows, then subtract the base row from each.
    #[default]
    Refit,
    /// Fit the `d - 1` free rows with the base row held at zero.
    Pinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdcSettings {
    pub iterations: usize,
    /// Stop once the sup-norm change between iterates falls below this.
    pub early_stop_tol: Option<f64>,
    pub glm: GlmSettings,
    pub base: BaseUpdate,
}

impl IdcSettings {
    /// `ceil(log n)` iterations with early stopping at 1e-8.
    pub fn default_for(n: usize) -> Self {
        Self {
            iterations: default_iterations(n),
            early_stop_tol: Some(1e-8),
            glm: GlmSettings::default(),
            base: BaseUpdate::default(),
        }
    }

    /// Exactly `iterations` steps, no early stopping.
    pub fn fixed(iterations: usize) -> Self {
        Self {
            iterations,
            early_stop_tol: None,
            glm: GlmSettings::default(),
            base: BaseUpdate::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(tol) = self.early_stop_tol {
            if !(tol > 0.0) {
                return Err(IdmrError::InvalidInput(format!(
                    "early_stop_tol must be positive, got {tol}"
                )));
            }
        }
        self.glm.validate()
    }
}

pub fn default_iterations(n: usize) -> usize {
    (n.max(1) as f64).ln().ceil() as usize
}

/// An inner solve that stopped short of its gradient tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerFailure {
    pub iteration: usize,
    pub choice: usize,
    pub status: SolveStatus,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: ParamMatrix,
    pub iterations_run: usize,
    pub step_norms: Vec<f64>,
    /// `Q_n(theta, mu_bar(theta))` after each iteration.
    pub objective_trace: Vec<f64>,
    pub wall_times: Vec<f64>,
    pub init_kind: InitKind,
    pub inner_failures: Vec<InnerFailure>,
    /// Observations left out because their total is zero.
    pub dropped_rows: Vec<usize>,
    /// Non-base choices left out because they were never chosen.
    pub dropped_choices: Vec<usize>,
}

/// Closed-form fixed effects `log M_i - logsumexp(eta_i)`.
pub fn mu_bar(data: &Dataset, theta: &ParamMatrix) -> Result<FixedEffects> {
    data.check_params(theta)?;
    let d = data.d();
    let p = data.p();
    let mut eta = vec![0.0; d];
    let mut mu = Array1::zeros(data.n());
    for i in 0..data.n() {
        let m = data.total(i);
        if m == 0 {
            return Err(IdmrError::ZeroTotal { row: i });
        }
        eta_into(
            data.covariates().row_slice(i),
            theta.as_slice(),
            p,
            &mut eta,
        );
        mu[i] = (m as f64).ln() - log_sum_exp(&eta);
    }
    FixedEffects::new(mu)
}

/// One distributed update: `mu = mu_bar(theta_prev)`, then each row is
/// refit by Poisson regression, warm-started at its previous value.
pub fn theta_step(
    data: &Dataset,
    theta_prev: &ParamMatrix,
    base: BaseUpdate,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<ParamMatrix> {
    Ok(theta_step_detailed(data, theta_prev, base, settings, exec)?.0)
}

pub(crate) fn theta_step_detailed(
    data: &Dataset,
    theta_prev: &ParamMatrix,
    base: BaseUpdate,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<(ParamMatrix, Vec<GlmSolution>)> {
    let mu = mu_bar(data, theta_prev)?;
    let fitted = match base {
        BaseUpdate::Refit => data.d(),
        BaseUpdate::Pinned => data.d() - 1,
    };
    let choices: Vec<usize> = (0..fitted).collect();
    let sols = poisson_rows(data, &mu, theta_prev, &choices, settings, exec)?;
    let mut values = theta_prev.values().clone();
    for (&k, sol) in choices.iter().zip(&sols) {
        values.row_mut(k).assign(&sol.theta_k);
    }
    Ok((ParamMatrix::normalized(values)?, sols))
}

/// Poisson fits for the listed choices with offset `mu`, in parallel.
pub(crate) fn poisson_rows(
    data: &Dataset,
    mu: &FixedEffects,
    theta_prev: &ParamMatrix,
    choices: &[usize],
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<Vec<GlmSolution>> {
    let design = Design::from_covariates(data.covariates());
    exec.parallel_map(choices, |&k| {
        let init = theta_prev.row(k);
        glm::solve_poisson_raw(
            design,
            data.count_column_slice(k),
            mu.as_slice(),
            init.as_slice().expect("standard layout"),
            settings,
        )
        .map_err(|e| e.at_choice(k))
    })
}

/// Rows with positive totals and choices with positive counts.
pub(crate) struct Prepared<'a> {
    pub data: Cow<'a, Dataset>,
    pub kept_choices: Vec<usize>,
    pub dropped_rows: Vec<usize>,
    pub dropped_choices: Vec<usize>,
}

pub(crate) fn prepare(data: &Dataset) -> Result<Prepared<'_>> {
    let totals = data.counts().totals();
    let (kept_rows, dropped_rows): (Vec<usize>, Vec<usize>) =
        (0..data.n()).partition(|&i| totals[i] > 0);
    if kept_rows.is_empty() {
        return Err(IdmrError::InvalidInput(
            "every observation has zero total".into(),
        ));
    }
    let d = data.d();
    let sums = data.counts().column_sums();
    if sums[d - 1] == 0 {
        return Err(IdmrError::EmptyChoice {
            choice: Some(d - 1),
        });
    }
    let (kept_choices, dropped_choices): (Vec<usize>, Vec<usize>) =
        (0..d).partition(|&k| sums[k] > 0);
    if kept_choices.len() < 2 {
        return Err(IdmrError::InvalidInput(
            "fewer than two choices have positive counts".into(),
        ));
    }
    for &i in &dropped_rows {
        log::warn!("observation {i} has zero total and is left out");
    }
    for &k in &dropped_choices {
        log::warn!("choice {k} is never chosen; its intercept is set to {DROPPED_INTERCEPT}");
    }

    let mut reduced = Cow::Borrowed(data);
    if !dropped_rows.is_empty() {
        reduced = Cow::Owned(reduced.select_rows(&kept_rows)?);
    }
    if !dropped_choices.is_empty() {
        reduced = Cow::Owned(reduced.select_choices(&kept_choices)?);
    }
    Ok(Prepared {
        data: reduced,
        kept_choices,
        dropped_rows,
        dropped_choices,
    })
}

impl Prepared<'_> {
    pub fn reduce_init(&self, init: &InitKind) -> Result<InitKind> {
        match init {
            InitKind::User(theta) if !self.dropped_choices.is_empty() => {
                if theta.d() <= *self.kept_choices.last().expect("nonempty") {
                    return Err(IdmrError::DimensionMismatch(format!(
                        "initial parameters have {} choices",
                        theta.d()
                    )));
                }
                let rows = theta.values().select(ndarray::Axis(0), &self.kept_choices);
                Ok(InitKind::User(ParamMatrix::new(rows)?))
            }
            other => Ok(other.clone()),
        }
    }

    pub fn expand(&self, theta: ParamMatrix, d: usize) -> Result<ParamMatrix> {
        if self.dropped_choices.is_empty() {
            return Ok(theta);
        }
        let p = theta.p();
        let mut full = Array2::zeros((d, p));
        for (r, &k) in self.kept_choices.iter().enumerate() {
            full.row_mut(k).assign(&theta.row(r));
        }
        for &k in &self.dropped_choices {
            full[[k, 0]] = DROPPED_INTERCEPT;
        }
        ParamMatrix::new(full)
    }
}

/// Step 0 followed by up to `settings.iterations` distributed updates.
pub fn idc_fit(
    data: &Dataset,
    init: &InitKind,
    settings: &IdcSettings,
    exec: &Executor,
) -> Result<FitResult> {
    run_iterations_with(data, init, settings, exec, Ok, |data, theta, glm, exec| {
        theta_step_detailed(data, theta, settings.base, glm, exec)
            .map(|(theta, sols)| (theta, collect_failures(&sols, |j| j)))
    })
}

/// Non-converged solutions as `(choice, status, grad_norm)`.
pub(crate) fn collect_failures(
    sols: &[GlmSolution],
    choice_of: impl Fn(usize) -> usize,
) -> Vec<(usize, SolveStatus, f64)> {
    sols.iter()
        .enumerate()
        .filter(|(_, s)| !s.converged)
        .map(|(j, s)| (choice_of(j), s.status, s.final_grad_norm))
        .collect()
}

type StepOutcome = (ParamMatrix, Vec<(usize, SolveStatus, f64)>);

/// Shared driver: preparation, Step 0 (passed through `project`), the update
/// loop and its traces.
pub(crate) fn run_iterations_with<P, F>(
    data: &Dataset,
    init: &InitKind,
    settings: &IdcSettings,
    exec: &Executor,
    project: P,
    step: F,
) -> Result<FitResult>
where
    P: Fn(ParamMatrix) -> Result<ParamMatrix>,
    F: Fn(&Dataset, &ParamMatrix, &GlmSettings, &Executor) -> Result<StepOutcome>,
{
    settings.validate()?;
    if let InitKind::User(theta) = init {
        data.check_params(theta)?;
    }
    let prep = prepare(data)?;
    let work = prep.data.as_ref();
    let mut theta = project(initialize(
        work,
        &prep.reduce_init(init)?,
        &settings.glm,
        exec,
    )?)?;

    let mut step_norms = Vec::new();
    let mut objective_trace = Vec::new();
    let mut wall_times = Vec::new();
    let mut inner_failures = Vec::new();
    for s in 1..=settings.iterations {
        let start = Instant::now();
        let (next, failures) = step(work, &theta, &settings.glm, exec)?;
        let elapsed = start.elapsed().as_secs_f64();
        for (choice, status, grad_norm) in failures {
            log::debug!("iteration {s}: inner solve for choice {choice} ended {status:?}");
            inner_failures.push(InnerFailure {
                iteration: s,
                choice: prep.kept_choices[choice],
                status,
                grad_norm,
            });
        }
        let norm = next.max_abs_diff(&theta);
        theta = next;
        let mu = mu_bar(work, &theta)?;
        objective_trace.push(-quasi_loglik(work, &theta, &mu)?);
        step_norms.push(norm);
        wall_times.push(elapsed);
        if settings.early_stop_tol.is_some_and(|tol| norm < tol) {
            break;
        }
    }

    Ok(FitResult {
        theta: prep.expand(theta, data.d())?,
        iterations_run: step_norms.len(),
        step_norms,
        objective_trace,
        wall_times,
        init_kind: init.clone(),
        inner_failures,
        dropped_rows: prep.dropped_rows,
        dropped_choices: prep.dropped_choices,
    })
}
