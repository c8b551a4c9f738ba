//! Data model of the multinomial logit with large choice sets and the
//! likelihood objectives built on it.
//!
//! Observation `i` carries a count vector `C_i` over `d` choices with total
//! `M_i = sum_k C_ik` and a covariate row `V_i` whose first entry is the
//! constant 1. Choice `k` has coefficient row `theta_k`; the last row is the
//! base category and is pinned to zero. The linear index is
//! `eta_ik = V_i' theta_k`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{IdmrError, Result};

/// `log(sum_k exp(x_k))` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax probabilities written into `out`.
pub(crate) fn softmax_into(eta: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(eta);
    for (o, e) in out.iter_mut().zip(eta) {
        *o = (e - lse).exp();
    }
}

/// Nonnegative integer choice counts with cached row totals.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    counts: Array2<u64>,
    totals: Array1<u64>,
}

impl CountMatrix {
    pub fn new(counts: Array2<u64>) -> Result<Self> {
        let totals = counts.sum_axis(Axis(1));
        Self::with_totals(counts, totals)
    }

    /// Builds the matrix and checks that `totals` are the row sums.
    pub fn with_totals(counts: Array2<u64>, totals: Array1<u64>) -> Result<Self> {
        let (n, d) = counts.dim();
        if n == 0 {
            return Err(IdmrError::InvalidInput("count matrix has no rows".into()));
        }
        if d < 2 {
            return Err(IdmrError::InvalidInput(format!(
                "need at least two choices, got {d}"
            )));
        }
        if totals.len() != n {
            return Err(IdmrError::DimensionMismatch(format!(
                "{} totals for {n} rows",
                totals.len()
            )));
        }
        for (i, row) in counts.outer_iter().enumerate() {
            let sum: u64 = row.sum();
            if sum != totals[i] {
                return Err(IdmrError::TotalMismatch {
                    row: i,
                    sum,
                    total: totals[i],
                });
            }
        }
        Ok(Self { counts, totals })
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn d(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn totals(&self) -> &Array1<u64> {
        &self.totals
    }

    pub fn column_sums(&self) -> Array1<u64> {
        self.counts.sum_axis(Axis(0))
    }
}

/// Design matrix whose column 0 is the constant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    values: Array2<f64>,
}

impl CovariateMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(IdmrError::InvalidInput(
                "covariate matrix has no columns".into(),
            ));
        }
        for ((i, j), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(IdmrError::NonFinite {
                    context: format!("covariate ({i}, {j})"),
                });
            }
        }
        if let Some(i) = values.column(0).iter().position(|&v| v != 1.0) {
            return Err(IdmrError::InvalidInput(format!(
                "covariate column 0 must be the constant 1 (row {i} differs)"
            )));
        }
        // Row access in the hot loops relies on a contiguous row-major layout.
        let values = values.as_standard_layout().into_owned();
        Ok(Self { values })
    }

    /// Prepends a column of ones to `values`.
    pub fn with_intercept(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        let mut full = Array2::ones((n, values.ncols() + 1));
        full.slice_mut(ndarray::s![.., 1..]).assign(&values);
        Self::new(full)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub(crate) fn row_slice(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.values.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }
}

/// `d x p` coefficients with the base (last) row identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    values: Array2<f64>,
}

impl ParamMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (d, p) = values.dim();
        if d < 2 || p == 0 {
            return Err(IdmrError::InvalidInput(format!(
                "parameter matrix must be at least 2 x 1, got {d} x {p}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IdmrError::NonFinite {
                context: "parameter matrix".into(),
            });
        }
        if values.row(d - 1).iter().any(|&v| v != 0.0) {
            return Err(IdmrError::BaseRowNonZero);
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        assert!(d >= 2 && p >= 1, "parameter matrix must be at least 2 x 1");
        Self {
            values: Array2::zeros((d, p)),
        }
    }

    /// Builds a matrix from the `d - 1` free rows, appending the zero base row.
    pub fn from_free_rows(free: &Array2<f64>) -> Result<Self> {
        let (k, p) = free.dim();
        let mut values = Array2::zeros((k + 1, p));
        values.slice_mut(ndarray::s![..k, ..]).assign(free);
        Self::new(values)
    }

    /// Subtracts the last row from every row, mapping an unconstrained
    /// `d x p` solution into the identified parameterization without
    /// changing any choice probability.
    pub fn normalized(mut values: Array2<f64>) -> Result<Self> {
        let d = values.nrows();
        let base = values.row(d - 1).to_owned();
        for mut row in values.outer_iter_mut() {
            row -= &base;
        }
        Self::new(values)
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.values.row(k)
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[[k, j]]
    }

    /// Free rows `0..d-1` as a `(d - 1) x p` matrix.
    pub fn free_rows(&self) -> Array2<f64> {
        self.values
            .slice(ndarray::s![..self.d() - 1, ..])
            .to_owned()
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    /// Infinity-norm distance between two matrices of equal shape.
    pub fn max_abs_diff(&self, other: &ParamMatrix) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-observation log offsets `mu_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffects {
    values: Array1<f64>,
}

impl FixedEffects {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IdmrError::NonFinite {
                context: "fixed effects".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: Array1::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("contiguous")
    }
}

/// Counts paired with covariates. Also caches each choice's count column as
/// contiguous floats for the per-choice solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    counts: CountMatrix,
    covariates: CovariateMatrix,
    columns: Array2<f64>,
}

impl Dataset {
    pub fn new(counts: CountMatrix, covariates: CovariateMatrix) -> Result<Self> {
        if counts.n() != covariates.n() {
            return Err(IdmrError::DimensionMismatch(format!(
                "{} count rows but {} covariate rows",
                counts.n(),
                covariates.n()
            )));
        }
        let columns = counts
            .counts()
            .t()
            .mapv(|c| c as f64)
            .as_standard_layout()
            .into_owned();
        Ok(Self {
            counts,
            covariates,
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.counts.n()
    }

    pub fn d(&self) -> usize {
        self.counts.d()
    }

    pub fn p(&self) -> usize {
        self.covariates.p()
    }

    pub fn counts(&self) -> &CountMatrix {
        &self.counts
    }

    pub fn covariates(&self) -> &CovariateMatrix {
        &self.covariates
    }

    /// Counts of choice `k` across observations, as floats.
    pub fn count_column(&self, k: usize) -> ArrayView1<'_, f64> {
        self.columns.row(k)
    }

    pub(crate) fn count_column_slice(&self, k: usize) -> &[f64] {
        let n = self.n();
        &self.columns.as_slice().expect("standard layout")[k * n..(k + 1) * n]
    }

    pub(crate) fn total(&self, i: usize) -> u64 {
        self.counts.totals()[i]
    }

    pub fn check_params(&self, theta: &ParamMatrix) -> Result<()> {
        if theta.p() != self.p() || theta.d() != self.d() {
            return Err(IdmrError::DimensionMismatch(format!(
                "parameters are {} x {} but data has d = {}, p = {}",
                theta.d(),
                theta.p(),
                self.d(),
                self.p()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_mu(&self, mu: &FixedEffects) -> Result<()> {
        if mu.len() != self.n() {
            return Err(IdmrError::DimensionMismatch(format!(
                "{} fixed effects for {} observations",
                mu.len(),
                self.n()
            )));
        }
        Ok(())
    }

    /// Keeps the listed observations, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let counts = self.counts.counts().select(Axis(0), rows);
        let covariates = self.covariates.values().select(Axis(0), rows);
        Dataset::new(CountMatrix::new(counts)?, CovariateMatrix::new(covariates)?)
    }

    /// Keeps the listed choices, in order; the last listed becomes the base.
    pub fn select_choices(&self, choices: &[usize]) -> Result<Self> {
        let counts = self.counts.counts().select(Axis(1), choices);
        Dataset::new(CountMatrix::new(counts)?, self.covariates.clone())
    }

    /// Replaces the counts, keeping covariates.
    pub fn with_counts(&self, counts: CountMatrix) -> Result<Self> {
        Dataset::new(counts, self.covariates.clone())
    }
}

/// Writes `eta_k = v' theta_k` for every choice into `out`.
pub(crate) fn eta_into(v: &[f64], theta: &[f64], p: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let row = &theta[k * p..(k + 1) * p];
        *o = v.iter().zip(row).map(|(a, b)| a * b).sum();
    }
}

/// `(V_i' theta_1, ..., V_i' theta_d)`.
pub fn linear_index(data: &Dataset, theta: &ParamMatrix, i: usize) -> Result<Array1<f64>> {
    data.check_params(theta)?;
    if i >= data.n() {
        return Err(IdmrError::DimensionMismatch(format!(
            "observation {i} out of range for n = {}",
            data.n()
        )));
    }
    let mut eta = vec![0.0; theta.d()];
    eta_into(
        data.covariates().row_slice(i),
        theta.as_slice(),
        theta.p(),
        &mut eta,
    );
    Ok(Array1::from(eta))
}

/// `log(m!) - sum_k log(c_k!)`.
pub fn log_multinomial_coefficient(c: &[u64], m: u64) -> f64 {
    ln_gamma(m as f64 + 1.0) - c.iter().map(|&x| ln_gamma(x as f64 + 1.0)).sum::<f64>()
}

/// Log probability of count vector `c` under the multinomial logit with
/// covariates `v`, parameters `theta`, and total `m`, including the
/// multinomial coefficient.
pub fn mnl_log_pmf(c: &[u64], v: &[f64], theta: &ParamMatrix, m: u64) -> Result<f64> {
    if c.len() != theta.d() || v.len() != theta.p() {
        return Err(IdmrError::DimensionMismatch(format!(
            "count vector of length {} and covariates of length {} for a {} x {} parameter matrix",
            c.len(),
            v.len(),
            theta.d(),
            theta.p()
        )));
    }
    let sum: u64 = c.iter().sum();
    if sum != m {
        return Err(IdmrError::TotalMismatch {
            row: 0,
            sum,
            total: m,
        });
    }
    let mut eta = vec![0.0; theta.d()];
    eta_into(v, theta.as_slice(), theta.p(), &mut eta);
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(IdmrError::NonFinite {
            context: "linear index".into(),
        });
    }
    let lse = log_sum_exp(&eta);
    let kernel: f64 = c
        .iter()
        .zip(&eta)
        .filter(|(&ck, _)| ck > 0)
        .map(|(&ck, &e)| ck as f64 * (e - lse))
        .sum();
    Ok(log_multinomial_coefficient(c, m) + kernel)
}

/// Draws a multinomial count vector of size `m` with probabilities
/// `exp(eta_k) / sum_l exp(eta_l)`, via sequential conditional binomials.
pub fn mnl_sample<R: Rng + ?Sized>(
    v: &[f64],
    theta: &ParamMatrix,
    m: u64,
    rng: &mut R,
) -> Vec<u64> {
    let d = theta.d();
    let mut eta = vec![0.0; d];
    eta_into(v, theta.as_slice(), theta.p(), &mut eta);
    let mut probs = vec![0.0; d];
    softmax_into(&eta, &mut probs);
    multinomial_draw(&probs, m, rng)
}

pub(crate) fn multinomial_draw<R: Rng + ?Sized>(probs: &[f64], m: u64, rng: &mut R) -> Vec<u64> {
    let d = probs.len();
    let mut out = vec![0u64; d];
    let mut remaining = m;
    let mut mass_left = 1.0;
    for k in 0..d - 1 {
        if remaining == 0 {
            break;
        }
        let q = if mass_left > 0.0 {
            (probs[k] / mass_left).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let draw = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q)
                .expect("probability clamped to [0, 1]")
                .sample(rng)
        };
        out[k] = draw;
        remaining -= draw;
        mass_left -= probs[k];
    }
    out[d - 1] += remaining;
    out
}

/// Conditional log-likelihood `sum_i [C_i' eta_i - M_i log sum_k exp(eta_ik)]`,
/// dropping parameter-free terms.
pub fn loglik_conditional(data: &Dataset, theta: &ParamMatrix) -> Result<f64> {
    data.check_params(theta)?;
    let d = data.d();
    let p = data.p();
    let mut eta = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..data.n() {
        eta_into(
            data.covariates().row_slice(i),
            theta.as_slice(),
            p,
            &mut eta,
        );
        let row = data.counts().counts().row(i);
        let dot: f64 = row.iter().zip(&eta).map(|(&c, &e)| c as f64 * e).sum();
        total += dot - data.total(i) as f64 * log_sum_exp(&eta);
    }
    if !total.is_finite() {
        return Err(IdmrError::NonFinite {
            context: "conditional log-likelihood".into(),
        });
    }
    Ok(total)
}

/// The conditional log-likelihood with fixed effects added to every linear
/// index. It does not depend on `mu`.
pub fn loglik_with_mu(data: &Dataset, theta: &ParamMatrix, mu: &FixedEffects) -> Result<f64> {
    data.check_params(theta)?;
    data.check_mu(mu)?;
    let d = data.d();
    let p = data.p();
    let mu = mu.as_slice();
    let mut eta = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..data.n() {
        eta_into(
            data.covariates().row_slice(i),
            theta.as_slice(),
            p,
            &mut eta,
        );
        for e in eta.iter_mut() {
            *e += mu[i];
        }
        let row = data.counts().counts().row(i);
        let dot: f64 = row.iter().zip(&eta).map(|(&c, &e)| c as f64 * e).sum();
        total += dot - data.total(i) as f64 * log_sum_exp(&eta);
    }
    if !total.is_finite() {
        return Err(IdmrError::NonFinite {
            context: "log-likelihood with fixed effects".into(),
        });
    }
    Ok(total)
}

/// Poisson quasi-log-likelihood `sum_i sum_k [C_ik (eta_ik + mu_i) - exp(eta_ik + mu_i)]`.
/// Its negation is the separable objective minimized by the distributed solver.
pub fn quasi_loglik(data: &Dataset, theta: &ParamMatrix, mu: &FixedEffects) -> Result<f64> {
    data.check_params(theta)?;
    data.check_mu(mu)?;
    let d = data.d();
    let p = data.p();
    let mu = mu.as_slice();
    let mut eta = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..data.n() {
        eta_into(
            data.covariates().row_slice(i),
            theta.as_slice(),
            p,
            &mut eta,
        );
        let row = data.counts().counts().row(i);
        for (k, (&c, &e)) in row.iter().zip(&eta).enumerate() {
            let lin = e + mu[i];
            let rate = lin.exp();
            if !rate.is_finite() {
                return Err(IdmrError::Overflow { row: i, choice: k });
            }
            total += c as f64 * lin - rate;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_obs(c: Array2<u64>, v: Array2<f64>) -> Dataset {
        Dataset::new(
            CountMatrix::new(c).unwrap(),
            CovariateMatrix::new(v).unwrap(),
        )
        .unwrap()
    }

    fn random_instance(seed: u64, n: usize, d: usize, p: usize) -> (Dataset, ParamMatrix) {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array2::<f64>::ones((n, p));
        for i in 0..n {
            for j in 1..p {
                v[[i, j]] = rng.sample(StandardNormal);
            }
        }
        let mut theta = Array2::<f64>::zeros((d, p));
        for k in 0..d - 1 {
            for j in 0..p {
                theta[[k, j]] = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let theta = ParamMatrix::new(theta).unwrap();
        let mut counts = Array2::<u64>::zeros((n, d));
        for i in 0..n {
            let m = rng.random_range(1..8);
            let row = mnl_sample(v.row(i).as_slice().unwrap(), &theta, m, &mut rng);
            for k in 0..d {
                counts[[i, k]] = row[k];
            }
        }
        let data = Dataset::new(
            CountMatrix::new(counts).unwrap(),
            CovariateMatrix::new(v).unwrap(),
        )
        .unwrap();
        (data, theta)
    }

    #[test]
    fn count_matrix_validates_totals() {
        let c = array![[1u64, 0], [0, 2]];
        let m = CountMatrix::new(c.clone()).unwrap();
        assert_eq!(m.totals(), &array![1u64, 2]);
        let err = CountMatrix::with_totals(c, array![1, 3]).unwrap_err();
        assert!(matches!(err, IdmrError::TotalMismatch { row: 1, .. }));
        assert!(CountMatrix::new(array![[1u64], [2]]).is_err());
    }

    #[test]
    fn covariates_require_constant_column() {
        assert!(CovariateMatrix::new(array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(CovariateMatrix::new(array![[1.0, f64::NAN]]).is_err());
        let v = CovariateMatrix::with_intercept(array![[3.0], [4.0]]).unwrap();
        assert_eq!(v.values(), &array![[1.0, 3.0], [1.0, 4.0]]);
    }

    #[test]
    fn param_matrix_rejects_nonzero_base() {
        assert_eq!(
            ParamMatrix::new(array![[1.0], [0.5]]).unwrap_err(),
            IdmrError::BaseRowNonZero
        );
        let t = ParamMatrix::normalized(array![[1.0, 2.0], [0.5, 1.0]]).unwrap();
        assert_eq!(t.values(), &array![[0.5, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn linear_index_examples() {
        let data = one_obs(array![[1, 0]], array![[1.0]]);
        let eta = linear_index(&data, &ParamMatrix::zeros(2, 1), 0).unwrap();
        assert_eq!(eta, array![0.0, 0.0]);
        let theta = ParamMatrix::new(array![[0.5], [0.0]]).unwrap();
        assert_eq!(linear_index(&data, &theta, 0).unwrap(), array![0.5, 0.0]);

        let data = one_obs(array![[1, 0]], array![[1.0, 2.0]]);
        let theta = ParamMatrix::new(array![[1.0, -1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(linear_index(&data, &theta, 0).unwrap()[0], -1.0);

        let bad = ParamMatrix::zeros(3, 2);
        assert!(matches!(
            linear_index(&data, &bad, 0),
            Err(IdmrError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn log_pmf_examples() {
        let z2 = ParamMatrix::zeros(2, 1);
        assert_relative_eq!(
            mnl_log_pmf(&[1, 1], &[1.0], &z2, 2).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-14
        );
        let z3 = ParamMatrix::zeros(3, 1);
        assert_relative_eq!(
            mnl_log_pmf(&[2, 0, 0], &[1.0], &z3, 2).unwrap(),
            (1.0f64 / 9.0).ln(),
            epsilon = 1e-14
        );
        let t = ParamMatrix::new(array![[3.0f64.ln()], [0.0]]).unwrap();
        assert_relative_eq!(
            mnl_log_pmf(&[1, 0], &[1.0], &t, 1).unwrap(),
            0.75f64.ln(),
            epsilon = 1e-14
        );
        assert!(mnl_log_pmf(&[1, 1], &[1.0], &z2, 3).is_err());
    }

    #[test]
    fn pmf_sums_to_one_over_compositions() {
        let theta = ParamMatrix::new(array![[0.3, -1.2], [1.1, 0.4], [0.0, 0.0]]).unwrap();
        let v = [1.0, 0.7];
        for m in 0..=4u64 {
            let mut total = 0.0;
            for a in 0..=m {
                for b in 0..=(m - a) {
                    total += mnl_log_pmf(&[a, b, m - a - b], &v, &theta, m)
                        .unwrap()
                        .exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "m = {m}: {total}");
        }
    }

    #[test]
    fn sampler_edge_cases_and_determinism() {
        let theta = ParamMatrix::zeros(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mnl_sample(&[1.0], &theta, 0, &mut rng), vec![0, 0]);

        let m = 100_000u64;
        let draw = mnl_sample(&[1.0], &theta, m, &mut rng);
        assert_eq!(draw.iter().sum::<u64>(), m);
        let sigma = (m as f64 * 0.25).sqrt();
        assert!((draw[0] as f64 - 50_000.0).abs() < 5.0 * sigma);

        let a = mnl_sample(&[1.0], &theta, 37, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mnl_sample(&[1.0], &theta, 37, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_chi_square_goodness_of_fit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let theta = ParamMatrix::new(array![[0.4, 0.3], [-0.2, 0.8], [0.0, 0.0]]).unwrap();
        let v = [1.0, -0.5];
        let m = 2u64;
        let cells: Vec<[u64; 3]> = (0..=m)
            .flat_map(|a| (0..=m - a).map(move |b| [a, b, m - a - b]))
            .collect();
        let probs: Vec<f64> = cells
            .iter()
            .map(|c| mnl_log_pmf(c, &v, &theta, m).unwrap().exp())
            .collect();
        let mut observed = vec![0u64; cells.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        for _ in 0..draws {
            let x = mnl_sample(&v, &theta, m, &mut rng);
            let idx = cells.iter().position(|c| c[..] == x[..]).unwrap();
            observed[idx] += 1;
        }
        let stat: f64 = observed
            .iter()
            .zip(&probs)
            .map(|(&o, &pr)| {
                let e = pr * draws as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        let dof = (cells.len() - 1) as f64;
        let pval = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(pval > 0.001, "chi-square {stat} p = {pval}");
    }

    #[test]
    fn conditional_loglik_examples() {
        let data = one_obs(array![[1, 0]], array![[1.0]]);
        assert_relative_eq!(
            loglik_conditional(&data, &ParamMatrix::zeros(2, 1)).unwrap(),
            -(2.0f64.ln()),
            epsilon = 1e-14
        );
        let data = one_obs(array![[0, 0, 2]], array![[1.0]]);
        assert_relative_eq!(
            loglik_conditional(&data, &ParamMatrix::zeros(3, 1)).unwrap(),
            -2.0 * 3.0f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn conditional_loglik_matches_pmf_minus_coefficients() {
        let (data, theta) = random_instance(5, 40, 4, 3);
        let mut brute = 0.0;
        for i in 0..data.n() {
            let c: Vec<u64> = data.counts().counts().row(i).to_vec();
            let v = data.covariates().values().row(i).to_vec();
            let m = data.counts().totals()[i];
            brute += mnl_log_pmf(&c, &v, &theta, m).unwrap() - log_multinomial_coefficient(&c, m);
        }
        let ll = loglik_conditional(&data, &theta).unwrap();
        assert_relative_eq!(ll, brute, max_relative = 1e-12);
    }

    #[test]
    fn loglik_with_mu_examples() {
        let (data, theta) = random_instance(6, 30, 3, 2);
        let base = loglik_conditional(&data, &theta).unwrap();
        let zero = loglik_with_mu(&data, &theta, &FixedEffects::zeros(data.n())).unwrap();
        assert_eq!(base, zero);

        let single = one_obs(array![[1, 0]], array![[1.0]]);
        let mu = FixedEffects::new(array![5.0]).unwrap();
        assert_relative_eq!(
            loglik_with_mu(&single, &ParamMatrix::zeros(2, 1), &mu).unwrap(),
            -(2.0f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn adding_a_constant_to_mu_never_changes_loglik() {
        let (data, theta) = random_instance(7, 25, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mu: Array1<f64> = (0..data.n()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = loglik_with_mu(&data, &theta, &FixedEffects::new(mu.clone()).unwrap()).unwrap();
        let b = loglik_with_mu(&data, &theta, &FixedEffects::new(mu + 4.25).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));

        // Shifting the intercept of a non-base row does change the likelihood.
        let mut shifted = theta.values().clone();
        shifted[[0, 0]] += 1.0;
        let shifted = ParamMatrix::new(shifted).unwrap();
        let c = loglik_conditional(&data, &shifted).unwrap();
        assert!((c - loglik_conditional(&data, &theta).unwrap()).abs() > 1e-6);
    }

    /// f(theta, mu), written out independently.
    fn f_term(data: &Dataset, theta: &ParamMatrix, mu: &FixedEffects) -> f64 {
        let mut total = 0.0;
        for i in 0..data.n() {
            let eta = linear_index(data, theta, i).unwrap();
            let m = data.counts().totals()[i] as f64;
            let lambda: f64 = eta.iter().map(|e| e.exp()).sum();
            let mi = mu.values()[i];
            total += m * lambda.ln() + m * mi - mi.exp() * lambda;
        }
        total
    }

    #[test]
    fn quasi_loglik_examples() {
        let data = one_obs(array![[1, 1]], array![[1.0]]);
        let q = quasi_loglik(&data, &ParamMatrix::zeros(2, 1), &FixedEffects::zeros(1)).unwrap();
        assert_relative_eq!(q, -2.0, epsilon = 1e-14);

        let (data, theta) = random_instance(8, 30, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let mu = FixedEffects::new((0..data.n()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let lhs = quasi_loglik(&data, &theta, &mu).unwrap();
        let rhs = loglik_with_mu(&data, &theta, &mu).unwrap() + f_term(&data, &theta, &mu);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-11);

        // At theta = 0 and mu_i = log(M_i / d) the f term collapses to
        // sum_i (M_i log M_i - M_i).
        let d = data.d() as f64;
        let zero = ParamMatrix::zeros(data.d(), data.p());
        let mu0 = FixedEffects::new(data.counts().totals().mapv(|m| (m as f64 / d).ln())).unwrap();
        let expected: f64 = data
            .counts()
            .totals()
            .iter()
            .map(|&m| {
                let m = m as f64;
                m * m.ln() - m
            })
            .sum();
        assert_relative_eq!(f_term(&data, &zero, &mu0), expected, max_relative = 1e-12);
    }

    #[test]
    fn quasi_loglik_reports_overflow_position() {
        let data = one_obs(array![[1, 1]], array![[1.0]]);
        let theta = ParamMatrix::new(array![[800.0], [0.0]]).unwrap();
        assert_eq!(
            quasi_loglik(&data, &theta, &FixedEffects::zeros(1)).unwrap_err(),
            IdmrError::Overflow { row: 0, choice: 0 }
        );
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_arguments() {
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2.0f64.ln());
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1000.0]), -1000.0 + 2.0f64.ln());
    }

    proptest::proptest! {
        #[test]
        fn mu_free_loglik_ignores_mu_shift(seed in 0u64..10_000, shift in -20.0f64..20.0) {
            let (data, theta) = random_instance(seed, 12, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mu: Array1<f64> = (0..data.n()).map(|_| shift + rng.random_range(-5.0..5.0)).collect();
            let a = loglik_conditional(&data, &theta).unwrap();
            let b = loglik_with_mu(&data, &theta, &FixedEffects::new(mu).unwrap()).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
