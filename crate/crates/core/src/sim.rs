//! Simulation designs and Monte-Carlo experiments.
//!
//! * DGP-A: covariates standard normal after a constant column, totals
//!   uniform on `{20, ..., 30}`, counts multinomial logit.
//! * DGP-B: same covariates, independent Poisson counts with mean
//!   `exp(eta_ik)`, totals their sum.
//! * DGP-C: covariates from an even mixture of `N(0, 1)` and `N(4, 1)`,
//!   totals from an even mixture of `N(10, 1)` and `N(60, 25)` rounded and
//!   floored at 1, counts multinomial logit.
//!
//! In every design the free rows of the true parameter are iid standard
//! normal and are redrawn for each replication.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::idc::{idc_fit, IdcSettings};
use crate::inference::{bootstrap, wald_test, BootstrapResult, BootstrapSettings};
use crate::init::{initialize, InitKind};
use crate::mle::{mnl_mle, MleSettings};
use crate::model::{mnl_sample, CountMatrix, CovariateMatrix, Dataset, ParamMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    A,
    B,
    C,
}

impl DgpKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(DgpKind::A),
            "b" => Ok(DgpKind::B),
            "c" => Ok(DgpKind::C),
            other => Err(IdmrError::InvalidInput(format!(
                "unknown design {other:?}; expected a, b or c"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::A => "A",
            DgpKind::B => "B",
            DgpKind::C => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.d < 2 || self.p < 1 {
            return Err(IdmrError::InvalidInput(format!(
                "need n >= 1, d >= 2, p >= 1; got n = {}, d = {}, p = {}",
                self.n, self.d, self.p
            )));
        }
        Ok(())
    }

    /// The generator `draw_dgp` uses for this spec's seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDraw {
    pub data: Dataset,
    pub theta_star: ParamMatrix,
}

/// Free rows iid standard normal.
pub fn draw_theta_star<R: Rng + ?Sized>(d: usize, p: usize, rng: &mut R) -> ParamMatrix {
    let mut values = Array2::<f64>::zeros((d, p));
    for k in 0..d - 1 {
        for j in 0..p {
            values[[k, j]] = rng.sample(StandardNormal);
        }
    }
    ParamMatrix::new(values).expect("finite with zero base row")
}

/// Draws a parameter and then data from it.
pub fn draw_dgp<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<SimDraw> {
    spec.validate()?;
    let theta_star = draw_theta_star(spec.d, spec.p, rng);
    draw_data(spec.kind, spec.n, &theta_star, rng)
}

/// Draws covariates, totals and counts from a given parameter.
pub fn draw_data<R: Rng + ?Sized>(
    kind: DgpKind,
    n: usize,
    theta_star: &ParamMatrix,
    rng: &mut R,
) -> Result<SimDraw> {
    let (d, p) = (theta_star.d(), theta_star.p());
    let mut v = Array2::<f64>::ones((n, p));
    let shifted = Normal::new(4.0, 1.0).expect("valid");
    for i in 0..n {
        for j in 1..p {
            v[[i, j]] = match kind {
                DgpKind::A | DgpKind::B => rng.sample(StandardNormal),
                DgpKind::C => {
                    if rng.random_bool(0.5) {
                        rng.sample(StandardNormal)
                    } else {
                        shifted.sample(rng)
                    }
                }
            };
        }
    }
    let small = Normal::new(10.0, 1.0).expect("valid");
    let large = Normal::new(60.0, 5.0).expect("valid");
    let mut counts = Array2::<u64>::zeros((n, d));
    let mut eta = vec![0.0; d];
    for i in 0..n {
        let vi = v.row(i);
        let row: Vec<u64> = match kind {
            DgpKind::A => {
                let m = rng.random_range(20..=30);
                mnl_sample(vi.as_slice().expect("row"), theta_star, m, rng)
            }
            DgpKind::C => {
                let draw: f64 = if rng.random_bool(0.5) {
                    small.sample(rng)
                } else {
                    large.sample(rng)
                };
                let m = draw.round().max(1.0) as u64;
                mnl_sample(vi.as_slice().expect("row"), theta_star, m, rng)
            }
            DgpKind::B => {
                for (k, e) in eta.iter_mut().enumerate() {
                    *e = theta_star.row(k).dot(&vi);
                }
                eta.iter()
                    .map(|&e| {
                        let lambda = e.exp();
                        if !lambda.is_finite() {
                            return Err(IdmrError::NonFinite {
                                context: format!("Poisson mean at observation {i}"),
                            });
                        }
                        Ok(Poisson::new(lambda)
                            .map(|dist| dist.sample(rng) as u64)
                            .unwrap_or(0))
                    })
                    .collect::<Result<_>>()?
            }
        };
        for (k, c) in row.into_iter().enumerate() {
            counts[[i, k]] = c;
        }
    }
    let data = Dataset::new(CountMatrix::new(counts)?, CovariateMatrix::new(v)?)?;
    Ok(SimDraw {
        data,
        theta_star: theta_star.clone(),
    })
}

/// Mean squared error over the `(d - 1) p` free coefficients.
pub fn mse(theta_hat: &ParamMatrix, theta_star: &ParamMatrix) -> Result<f64> {
    if theta_hat.d() != theta_star.d() || theta_hat.p() != theta_star.p() {
        return Err(IdmrError::DimensionMismatch(format!(
            "estimate is {} x {}, truth is {} x {}",
            theta_hat.d(),
            theta_hat.p(),
            theta_star.d(),
            theta_star.p()
        )));
    }
    let diff = theta_hat.free_rows() - theta_star.free_rows();
    Ok(diff.mapv(|x| x * x).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// The iterative estimator with a fixed number of iterations.
    Idc {
        init: InitKind,
        iterations: usize,
    },
    Mle,
    /// The Step-0 estimate alone.
    Initial(InitKind),
    /// Returns the true parameter.
    Truth,
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Idc { init, iterations } => format!("idc-{}-S{iterations}", init.name()),
            Estimator::Mle => "mle".into(),
            Estimator::Initial(init) => format!("init-{}", init.name()),
            Estimator::Truth => "truth".into(),
        }
    }

    pub fn fit(&self, draw: &SimDraw, exec: &Executor) -> Result<ParamMatrix> {
        match self {
            Estimator::Idc { init, iterations } => {
                Ok(idc_fit(&draw.data, init, &IdcSettings::fixed(*iterations), exec)?.theta)
            }
            Estimator::Mle => {
                Ok(mnl_mle(&draw.data, &InitKind::Binomial, &MleSettings::default())?.theta)
            }
            Estimator::Initial(init) => initialize(&draw.data, init, &Default::default(), exec),
            Estimator::Truth => Ok(draw.theta_star.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub dgp: DgpKind,
    pub p: usize,
    pub estimators: Vec<Estimator>,
    pub d_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub estimator: String,
    pub d: usize,
    pub n: usize,
    pub mse_mean: f64,
    /// Monte-Carlo standard error of `mse_mean`.
    pub mse_se: f64,
    pub time_mean: f64,
    pub reps: usize,
    pub failures: usize,
}

/// Seeds of the replications in cell `(d, n)`, independent of scheduling.
pub fn cell_seeds(seed: u64, d: usize, n: usize, reps: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((d as u64) << 32) | n as u64);
    (0..reps).map(|_| rng.next_u64()).collect()
}

/// Runs every estimator on `reps` draws per `(d, n)` cell. All estimators
/// in a cell see the same draws.
pub fn run_table(spec: &TableSpec, exec: &Executor) -> Result<Vec<TableCell>> {
    if spec.reps == 0 || spec.estimators.is_empty() {
        return Err(IdmrError::InvalidInput(
            "a table needs reps >= 1 and at least one estimator".into(),
        ));
    }
    let mut cells = Vec::new();
    for &d in &spec.d_values {
        for &n in &spec.n_values {
            let dgp = DgpSpec {
                kind: spec.dgp,
                n,
                d,
                p: spec.p,
                seed: 0,
            };
            dgp.validate()?;
            let seeds = cell_seeds(spec.seed, d, n, spec.reps);
            let per_rep = exec.parallel_map(&seeds, |&seed| {
                let draw = draw_dgp(
                    &DgpSpec { seed, ..dgp },
                    &mut ChaCha8Rng::seed_from_u64(seed),
                )?;
                let results: Vec<Option<(f64, f64)>> = spec
                    .estimators
                    .iter()
                    .map(|est| {
                        let start = Instant::now();
                        match est.fit(&draw, exec) {
                            Ok(theta) => {
                                let elapsed = start.elapsed().as_secs_f64();
                                mse(&theta, &draw.theta_star).ok().map(|m| (m, elapsed))
                            }
                            Err(e) => {
                                log::warn!(
                                    "{} failed on d = {d}, n = {n}, seed {seed}: {e}",
                                    est.label()
                                );
                                None
                            }
                        }
                    })
                    .collect();
                Ok::<_, IdmrError>(results)
            })?;
            for (e, est) in spec.estimators.iter().enumerate() {
                let ok: Vec<(f64, f64)> = per_rep.iter().filter_map(|r| r[e]).collect();
                let count = ok.len();
                let (mse_mean, mse_se, time_mean) = if count == 0 {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    let c = count as f64;
                    let mean = ok.iter().map(|r| r.0).sum::<f64>() / c;
                    let var = if count > 1 {
                        ok.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (c - 1.0)
                    } else {
                        0.0
                    };
                    (
                        mean,
                        (var / c).sqrt(),
                        ok.iter().map(|r| r.1).sum::<f64>() / c,
                    )
                };
                cells.push(TableCell {
                    estimator: est.label(),
                    d,
                    n,
                    mse_mean,
                    mse_se,
                    time_mean,
                    reps: count,
                    failures: spec.reps - count,
                });
            }
        }
    }
    Ok(cells)
}

/// CSV with header `estimator,d,n,reps,failures,mse,mse_se,seconds`.
/// Times are written as 0 unless `timing` is set, so output is reproducible.
pub fn table_csv(cells: &[TableCell], timing: bool) -> String {
    let mut out = String::from("estimator,d,n,reps,failures,mse,mse_se,seconds\n");
    for c in cells {
        let secs = if timing { c.time_mean } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.estimator, c.d, c.n, c.reps, c.failures, c.mse_mean, c.mse_se, secs
        );
    }
    out
}

pub fn table_pretty(cells: &[TableCell], timing: bool) -> String {
    let width = cells
        .iter()
        .map(|c| c.estimator.len())
        .max()
        .unwrap_or(9)
        .max(9);
    let mut out = format!(
        "{:<width$}  {:>5}  {:>6}  {:>5}  {:>10}  {:>10}",
        "estimator", "d", "n", "reps", "MSE", "MC s.e."
    );
    if timing {
        out.push_str(&format!("  {:>9}", "seconds"));
    }
    out.push('\n');
    for c in cells {
        let _ = write!(
            out,
            "{:<width$}  {:>5}  {:>6}  {:>5}  {:>10.5}  {:>10.5}",
            c.estimator, c.d, c.n, c.reps, c.mse_mean, c.mse_se
        );
        if timing {
            let _ = write!(out, "  {:>9.3}", c.time_mean);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizePowerSpec {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    pub iterations: usize,
    pub replicates: usize,
    pub mc_reps: usize,
    pub deviations: Vec<f64>,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub deviation: f64,
    pub rejections: usize,
    pub reps: usize,
    pub failures: usize,
    pub rate: f64,
}

/// Rejection frequencies of the bootstrap Wald test of `theta[0][0] = 0`
/// when the true value is each deviation, on DGP-A data.
pub fn run_size_power(spec: &SizePowerSpec, exec: &Executor) -> Result<Vec<RejectionRow>> {
    run_size_power_with(spec, exec, |draw, seed, exec| {
        let settings = IdcSettings::fixed(spec.iterations);
        let fit = idc_fit(&draw.data, &InitKind::Binomial, &settings, exec)?;
        let boot = bootstrap(
            &draw.data,
            &fit.theta,
            &BootstrapSettings::new(spec.replicates, settings, seed),
            exec,
        )?;
        Ok((fit.theta, boot))
    })
}

/// [`run_size_power`] with a caller-supplied estimator returning the
/// estimate and its bootstrap result for a draw and a seed.
pub fn run_size_power_with<F>(
    spec: &SizePowerSpec,
    exec: &Executor,
    estimate: F,
) -> Result<Vec<RejectionRow>>
where
    F: Fn(&SimDraw, u64, &Executor) -> Result<(ParamMatrix, BootstrapResult)> + Sync + Send,
{
    if spec.mc_reps == 0 || spec.d < 2 || spec.p < 1 || spec.n < 1 {
        return Err(IdmrError::InvalidInput(
            "size/power run needs mc_reps >= 1 and a valid design".into(),
        ));
    }
    let mut rows = Vec::new();
    for (idx, &dev) in spec.deviations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let seeds: Vec<u64> = (0..spec.mc_reps).map(|_| rng.next_u64()).collect();
        let outcomes = exec.parallel_map(&seeds, |&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut theta = draw_theta_star(spec.d, spec.p, &mut rng).into_inner();
            theta[[0, 0]] = dev;
            let theta = ParamMatrix::new(theta)?;
            let draw = draw_data(DgpKind::A, spec.n, &theta, &mut rng)?;
            let outcome = estimate(&draw, seed, exec).and_then(|(theta_hat, boot)| {
                wald_test(&theta_hat, &boot, draw.data.n(), (0, 0), 0.0, spec.level)
            });
            Ok::<_, IdmrError>(match outcome {
                Ok(w) => Some(w.reject),
                Err(e) => {
                    log::warn!("size/power replication with seed {seed} failed: {e}");
                    None
                }
            })
        })?;
        let done: Vec<bool> = outcomes.iter().flatten().copied().collect();
        let rejections = done.iter().filter(|&&r| r).count();
        rows.push(RejectionRow {
            deviation: dev,
            rejections,
            reps: done.len(),
            failures: spec.mc_reps - done.len(),
            rate: if done.is_empty() {
                f64::NAN
            } else {
                rejections as f64 / done.len() as f64
            },
        });
    }
    Ok(rows)
}

pub fn rejection_csv(rows: &[RejectionRow]) -> String {
    let mut out = String::from("deviation,reps,failures,rejections,rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.deviation, r.reps, r.failures, r.rejections, r.rate
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub dgp: DgpKind,
    pub n: usize,
    pub p: usize,
    pub d_values: Vec<usize>,
    pub iterations: usize,
    /// Timed fits per `d`; the median is reported.
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchPoint {
    pub d: usize,
    pub seconds: f64,
}

/// Times a binomial-initialized fit on one draw per `d`.
pub fn run_bench(spec: &BenchSpec, exec: &Executor) -> Result<Vec<BenchPoint>> {
    if spec.repeats == 0 || spec.d_values.is_empty() {
        return Err(IdmrError::InvalidInput(
            "benchmark needs at least one d and one repeat".into(),
        ));
    }
    let settings = IdcSettings::fixed(spec.iterations);
    spec.d_values
        .iter()
        .map(|&d| {
            let dgp = DgpSpec {
                kind: spec.dgp,
                n: spec.n,
                d,
                p: spec.p,
                seed: spec.seed,
            };
            let draw = draw_dgp(&dgp, &mut dgp.rng())?;
            let mut times = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let start = Instant::now();
                idc_fit(&draw.data, &InitKind::Binomial, &settings, exec)?;
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            Ok(BenchPoint {
                d,
                seconds: times[times.len() / 2],
            })
        })
        .collect()
}

/// Least-squares slope of seconds against `d`.
pub fn bench_slope(points: &[BenchPoint]) -> f64 {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.d as f64).sum::<f64>() / k;
    let my = points.iter().map(|p| p.seconds).sum::<f64>() / k;
    let sxy: f64 = points
        .iter()
        .map(|p| (p.d as f64 - mx) * (p.seconds - my))
        .sum();
    let sxx: f64 = points.iter().map(|p| (p.d as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn spec(kind: DgpKind, n: usize, d: usize, p: usize) -> DgpSpec {
        DgpSpec {
            kind,
            n,
            d,
            p,
            seed: 11,
        }
    }

    #[test]
    fn totals_equal_row_sums() {
        for kind in [DgpKind::A, DgpKind::B, DgpKind::C] {
            let s = spec(kind, 300, 6, 3);
            let draw = draw_dgp(&s, &mut s.rng()).unwrap();
            let counts = draw.data.counts();
            for i in 0..300 {
                assert_eq!(counts.counts().row(i).sum(), counts.totals()[i]);
            }
            assert!(draw.theta_star.row(5).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn design_a_covariates_and_totals() {
        let s = spec(DgpKind::A, 100_000, 2, 2);
        let draw = draw_dgp(&s, &mut s.rng()).unwrap();
        let col = draw.data.covariates().values().column(1).to_owned();
        let mean = col.mean().unwrap();
        assert!(mean.abs() < 5.0 / (100_000f64).sqrt());
        let totals = draw.data.counts().totals();
        assert!(totals.iter().all(|&m| (20..=30).contains(&m)));
        assert!(draw
            .data
            .covariates()
            .values()
            .column(0)
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn design_b_mean_count_at_zero_parameter() {
        let theta = ParamMatrix::zeros(4, 2);
        let n = 20_000;
        let draw = draw_data(DgpKind::B, n, &theta, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let counts = draw.data.counts().counts();
        let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / (4 * n) as f64;
        assert!((mean - 1.0).abs() < 5.0 / ((4 * n) as f64).sqrt());
    }

    #[test]
    fn design_c_totals_are_positive_integers_from_both_components() {
        let s = spec(DgpKind::C, 2000, 5, 3);
        let draw = draw_dgp(&s, &mut s.rng()).unwrap();
        let totals = draw.data.counts().totals();
        assert!(totals.iter().all(|&m| m >= 1));
        assert!(totals.iter().any(|&m| m < 20) && totals.iter().any(|&m| m > 40));
    }

    #[test]
    fn same_seed_same_draw() {
        let s = spec(DgpKind::C, 200, 5, 3);
        assert_eq!(
            draw_dgp(&s, &mut s.rng()).unwrap(),
            draw_dgp(&s, &mut s.rng()).unwrap()
        );
    }

    #[test]
    fn mse_examples() {
        let a = ParamMatrix::new(array![[0.5], [0.0]]).unwrap();
        let b = ParamMatrix::new(array![[0.6], [0.0]]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(mse(&a, &b).unwrap(), 0.01, epsilon = 1e-15);
        let c = ParamMatrix::new(array![[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let d = ParamMatrix::new(array![[0.1, 0.3], [0.0, 0.0]]).unwrap();
        assert_relative_eq!(mse(&c, &d).unwrap(), 0.05, epsilon = 1e-15);
        assert!(mse(&a, &c).is_err());
    }

    #[test]
    fn truth_stub_has_zero_mse() {
        let spec = TableSpec {
            dgp: DgpKind::A,
            p: 3,
            estimators: vec![Estimator::Truth],
            d_values: vec![4],
            n_values: vec![50],
            reps: 1,
            seed: 1,
        };
        let cells = run_table(&spec, &Executor::sequential()).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].mse_mean, 0.0);
        assert!(table_csv(&cells, false).ends_with("truth,4,50,1,0,0,0,0\n"));
    }

    #[test]
    fn infinite_se_never_rejects() {
        let spec = SizePowerSpec {
            d: 3,
            n: 40,
            p: 2,
            iterations: 2,
            replicates: 2,
            mc_reps: 5,
            deviations: vec![0.0, 1.0],
            level: 0.05,
            seed: 2,
        };
        let rows = run_size_power_with(&spec, &Executor::sequential(), |draw, _, _| {
            let (d, p) = (draw.theta_star.d(), draw.theta_star.p());
            Ok((
                draw.theta_star.clone(),
                BootstrapResult {
                    se: Array2::from_elem((d - 1, p), f64::INFINITY),
                    mean: Array2::zeros((d - 1, p)),
                    replicate_store: None,
                    seed: 0,
                    replicates_used: 2,
                    failures: 0,
                    n: draw.data.n(),
                },
            ))
        })
        .unwrap();
        assert!(rows.iter().all(|r| r.rate == 0.0 && r.reps == 5));
    }

    #[test]
    fn table_is_independent_of_worker_count() {
        let spec = TableSpec {
            dgp: DgpKind::A,
            p: 3,
            estimators: vec![
                Estimator::Idc {
                    init: InitKind::Binomial,
                    iterations: 3,
                },
                Estimator::Mle,
            ],
            d_values: vec![4],
            n_values: vec![100],
            reps: 6,
            seed: 5,
        };
        let a = run_table(&spec, &Executor::sequential()).unwrap();
        let pool = Executor::new(crate::exec::ExecutorConfig::with_workers(3)).unwrap();
        let b = run_table(&spec, &pool).unwrap();
        assert_eq!(table_csv(&a, false), table_csv(&b, false));
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<BenchPoint> = [10, 20, 40]
            .iter()
            .map(|&d| BenchPoint {
                d,
                seconds: 0.5 + 0.25 * d as f64,
            })
            .collect();
        assert_relative_eq!(bench_slope(&pts), 0.25, epsilon = 1e-12);
        assert!(bench_slope(&pts[..1]).is_nan());
    }
}
