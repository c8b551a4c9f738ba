//! Parametric bootstrap standard errors and the Wald test built on them.
//!
//! Replicate `b` draws counts from the fitted model with totals and
//! covariates held fixed, using the random stream [`stream_rng`]`(seed, b)`,
//! and refits with the iterative estimator.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::idc::{idc_fit, IdcSettings};
use crate::init::InitKind;
use crate::model::{mnl_sample, CountMatrix, Dataset, ParamMatrix};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub idc: IdcSettings,
    pub seed: u64,
    /// Start each refit from this initializer instead of from the estimate.
    pub reinitialize: Option<InitKind>,
    /// Keep every replicate estimate in the result.
    pub store_replicates: bool,
}

impl BootstrapSettings {
    pub fn new(replicates: usize, idc: IdcSettings, seed: u64) -> Self {
        Self {
            replicates,
            idc,
            seed,
            reinitialize: None,
            store_replicates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// `(d - 1) x p`; the standard deviation of the replicates times `sqrt(n)`.
    pub se: Array2<f64>,
    /// Mean of the replicate estimates over free rows.
    pub mean: Array2<f64>,
    pub replicate_store: Option<Vec<Array2<f64>>>,
    pub seed: u64,
    pub replicates_used: usize,
    pub failures: usize,
    /// Number of observations the scaling uses.
    pub n: usize,
}

/// The random stream of replicate `b`: ChaCha8 seeded with `seed`, stream `b`.
pub fn stream_rng(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

/// Counts drawn from the model at `theta`, one row per observation, with the
/// observed totals.
pub fn resample_counts(
    data: &Dataset,
    theta: &ParamMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<CountMatrix> {
    data.check_params(theta)?;
    let (n, d) = (data.n(), data.d());
    let totals = data.counts().totals();
    let mut counts = Array2::<u64>::zeros((n, d));
    for i in 0..n {
        let row = mnl_sample(data.covariates().row_slice(i), theta, totals[i], rng);
        for (k, c) in row.into_iter().enumerate() {
            counts[[i, k]] = c;
        }
    }
    CountMatrix::with_totals(counts, totals.clone())
}

pub fn bootstrap(
    data: &Dataset,
    theta_hat: &ParamMatrix,
    settings: &BootstrapSettings,
    exec: &Executor,
) -> Result<BootstrapResult> {
    data.check_params(theta_hat)?;
    if settings.replicates < 2 {
        return Err(IdmrError::InvalidInput(format!(
            "at least 2 bootstrap replicates are needed, got {}",
            settings.replicates
        )));
    }
    settings.idc.validate()?;
    let init = settings
        .reinitialize
        .clone()
        .unwrap_or_else(|| InitKind::User(theta_hat.clone()));

    let outcomes = exec.map_indices(settings.replicates, |b| {
        let mut rng = stream_rng(settings.seed, b as u64);
        let result = resample_counts(data, theta_hat, &mut rng)
            .and_then(|counts| data.with_counts(counts))
            .and_then(|sample| idc_fit(&sample, &init, &settings.idc, exec));
        Ok::<_, IdmrError>(result.map(|fit| fit.theta.free_rows()))
    })?;

    let total = outcomes.len();
    let mut draws = Vec::with_capacity(total);
    let mut first_error = None;
    for (b, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(free) => draws.push(free),
            Err(e) => {
                log::warn!("bootstrap replicate {b} failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let failed = total - draws.len();
    if failed as f64 > MAX_FAILURE_RATE * total as f64 || draws.len() < 2 {
        return Err(IdmrError::BootstrapFailures {
            failed,
            total,
            first: first_error.map(|e| e.to_string()).unwrap_or_default(),
        });
    }

    let shape = draws[0].raw_dim();
    let count = draws.len() as f64;
    let mut mean = Array2::<f64>::zeros(shape.clone());
    for draw in &draws {
        mean += draw;
    }
    mean /= count;
    let mut var = Array2::<f64>::zeros(shape);
    for draw in &draws {
        var += &(draw - &mean).mapv(|x| x * x);
    }
    var /= count - 1.0;
    let n = data.n();
    let se = var.mapv(|v| v.sqrt() * (n as f64).sqrt());

    Ok(BootstrapResult {
        se,
        mean,
        replicate_store: settings.store_replicates.then_some(draws),
        seed: settings.seed,
        replicates_used: count as usize,
        failures: failed,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldOutcome {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
}

/// `|theta_hat[k][j] - null| / (se[k][j] / sqrt(n))` against the two-sided
/// standard normal critical value at `level`.
pub fn wald_test(
    theta_hat: &ParamMatrix,
    boot: &BootstrapResult,
    n: usize,
    target: (usize, usize),
    null_value: f64,
    level: f64,
) -> Result<WaldOutcome> {
    let (k, j) = target;
    if k + 1 >= theta_hat.d() || j >= theta_hat.p() {
        return Err(IdmrError::InvalidInput(format!(
            "target ({k}, {j}) is not a free coefficient of a {} x {} model",
            theta_hat.d(),
            theta_hat.p()
        )));
    }
    if boot.se.dim() != (theta_hat.d() - 1, theta_hat.p()) {
        return Err(IdmrError::DimensionMismatch(format!(
            "standard errors are {:?} for a {} x {} model",
            boot.se.dim(),
            theta_hat.d(),
            theta_hat.p()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(IdmrError::InvalidInput(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    let se = boot.se[[k, j]];
    if se == 0.0 {
        return Err(IdmrError::ZeroStandardError);
    }
    let statistic = (theta_hat.get(k, j) - null_value).abs() / (se / (n as f64).sqrt());
    let critical_value = Normal::standard().inverse_cdf(1.0 - level / 2.0);
    Ok(WaldOutcome {
        statistic,
        critical_value,
        reject: statistic > critical_value,
    })
}

/// Equal-tailed percentile interval of coordinate `(k, j)` from stored replicates.
pub fn percentile_interval(
    boot: &BootstrapResult,
    target: (usize, usize),
    level: f64,
) -> Result<(f64, f64)> {
    let draws = boot
        .replicate_store
        .as_ref()
        .ok_or_else(|| IdmrError::InvalidInput("replicates were not stored".into()))?;
    let mut xs: Vec<f64> = draws.iter().map(|d| d[[target.0, target.1]]).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    let pick = |q: f64| {
        let pos = q * (xs.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
    };
    Ok((pick(level / 2.0), pick(1.0 - level / 2.0)))
}
