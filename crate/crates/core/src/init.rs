//! Step-0 estimators for the iterative procedure.
//!
//! * `binomial` fits each choice against the base choice by binomial logit,
//!   using only the observations' counts on that pair. Consistent.
//! * `taddy` solves the separable Poisson problem with offsets `log M_i`.
//! * `poisson` solves it with zero offsets; this is the MLE when the totals
//!   are themselves Poisson.
//!
//! The last two solve all `d` rows freely and then subtract the base row.

use ndarray::{Array1, Array2};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::glm::{self, solve_binomial, Design, GlmSettings};
use crate::model::{Dataset, ParamMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum InitKind {
    Binomial,
    Taddy,
    Poisson,
    Zeros,
    User(ParamMatrix),
}

impl InitKind {
    pub fn name(&self) -> &'static str {
        match self {
            InitKind::Binomial => "binomial",
            InitKind::Taddy => "taddy",
            InitKind::Poisson => "poisson",
            InitKind::Zeros => "zeros",
            InitKind::User(_) => "user",
        }
    }

    /// Parses a named kind; `user` needs a matrix and is not accepted here.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "binomial" => Ok(InitKind::Binomial),
            "taddy" => Ok(InitKind::Taddy),
            "poisson" => Ok(InitKind::Poisson),
            "zeros" => Ok(InitKind::Zeros),
            other => Err(IdmrError::InvalidInput(format!(
                "unknown initializer {other:?} (expected binomial, taddy, poisson, or zeros)"
            ))),
        }
    }
}

/// Computes the Step-0 estimate named by `kind`.
pub fn initialize(
    data: &Dataset,
    kind: &InitKind,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<ParamMatrix> {
    match kind {
        InitKind::Binomial => init_binomial(data, settings, exec),
        InitKind::Taddy => init_taddy(data, settings, exec),
        InitKind::Poisson => init_poisson(data, settings, exec),
        InitKind::Zeros => Ok(ParamMatrix::zeros(data.d(), data.p())),
        InitKind::User(theta) => {
            data.check_params(theta)?;
            Ok(theta.clone())
        }
    }
}

/// Pairwise binomial-logit estimate; row `k` uses only `(C_k, C_d)`.
///
/// A pair whose fit does not converge (typically separation on sparse
/// choices) keeps the finite Newton iterate and is logged; the iterative
/// procedure corrects it.
pub fn init_binomial(
    data: &Dataset,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<ParamMatrix> {
    let d = data.d();
    let p = data.p();
    let base = data.count_column(d - 1);
    if base.iter().all(|&c| c <= 0.0) {
        return Err(IdmrError::EmptyChoice {
            choice: Some(d - 1),
        });
    }
    let zeros = Array1::<f64>::zeros(p);
    let rows = exec.map_indices(d - 1, |k| {
        let sol = solve_binomial(
            data.count_column(k),
            base,
            data.covariates(),
            zeros.view(),
            settings,
        )
        .map_err(|e| e.at_choice(k))?;
        if !sol.converged {
            log::debug!(
                "binomial initializer for choice {k} stopped with {:?} (gradient {:.3e})",
                sol.status,
                sol.final_grad_norm
            );
        }
        Ok::<_, IdmrError>(sol.theta_k)
    })?;
    let mut free = Array2::zeros((d - 1, p));
    for (k, row) in rows.into_iter().enumerate() {
        free.row_mut(k).assign(&row);
    }
    ParamMatrix::from_free_rows(&free)
}

/// Poisson fits with offsets `log M_i`, normalized against the base row.
pub fn init_taddy(data: &Dataset, settings: &GlmSettings, exec: &Executor) -> Result<ParamMatrix> {
    let offsets: Vec<f64> = data
        .counts()
        .totals()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m == 0 {
                Err(IdmrError::ZeroTotal { row: i })
            } else {
                Ok((m as f64).ln())
            }
        })
        .collect::<Result<_>>()?;
    separable_poisson(data, &offsets, settings, exec)
}

/// Poisson fits with zero offsets, normalized against the base row.
pub fn init_poisson(
    data: &Dataset,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<ParamMatrix> {
    let offsets = vec![0.0; data.n()];
    separable_poisson(data, &offsets, settings, exec)
}

fn separable_poisson(
    data: &Dataset,
    offsets: &[f64],
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<ParamMatrix> {
    let d = data.d();
    let p = data.p();
    let design = Design::from_covariates(data.covariates());
    let zeros = vec![0.0; p];
    let rows = exec.map_indices(d, |k| {
        glm::solve_poisson_raw(
            design,
            data.count_column(k).as_slice().expect("contiguous"),
            offsets,
            &zeros,
            settings,
        )
        .map(|sol| sol.theta_k)
        .map_err(|e| e.at_choice(k))
    })?;
    let mut full = Array2::zeros((d, p));
    for (k, row) in rows.into_iter().enumerate() {
        full.row_mut(k).assign(&row);
    }
    ParamMatrix::normalized(full)
}
