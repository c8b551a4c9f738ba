//! Equality constraints for the iterative estimator.
//!
//! Two shapes are supported:
//!
//! * within-choice ties `theta[k][j1] = theta[k][j2]`, handled by summing the
//!   tied covariate columns and solving a smaller Poisson regression;
//! * across-choice ties `theta[k1][j] = ... = theta[kq][j]`, optionally pinned
//!   to a value. Each iteration first refits the affected choices with the
//!   shared coordinate held at its previous value, then solves a scalar
//!   Poisson problem for the shared value summed over the tied choices.
//!
//! The fixed effects used in both phases are those of the previous iterate.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{IdmrError, Result};
use crate::exec::Executor;
use crate::glm::{self, Design, GlmSettings, GlmSolution, SolveStatus};
use crate::idc::{self, mu_bar, FitResult, IdcSettings};
use crate::init::InitKind;
use crate::model::{CovariateMatrix, Dataset, FixedEffects, ParamMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct WithinTie {
    pub choice: usize,
    pub coords: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcrossTie {
    pub coord: usize,
    pub choices: Vec<usize>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSpec {
    pub within: Vec<WithinTie>,
    pub across: Vec<AcrossTie>,
}

impl ConstraintSpec {
    pub fn is_empty(&self) -> bool {
        self.within.is_empty() && self.across.is_empty()
    }

    /// Checks indices against `(d, p)` and merges overlapping ties.
    pub fn resolve(&self, d: usize, p: usize) -> Result<ResolvedConstraints> {
        let check_choice = |k: usize| -> Result<()> {
            if k + 1 >= d {
                let why = if k + 1 == d {
                    "is the base choice"
                } else {
                    "is out of range"
                };
                return Err(IdmrError::InvalidInput(format!(
                    "constraint references choice {k}, which {why} (d = {d})"
                )));
            }
            Ok(())
        };
        let check_coord = |j: usize| -> Result<()> {
            if j >= p {
                return Err(IdmrError::InvalidInput(format!(
                    "constraint references coordinate {j}, out of range for p = {p}"
                )));
            }
            Ok(())
        };

        let mut within_sets: Vec<DisjointSets> = (0..d - 1).map(|_| DisjointSets::new(p)).collect();
        for tie in &self.within {
            check_choice(tie.choice)?;
            check_coord(tie.coords.0)?;
            check_coord(tie.coords.1)?;
            within_sets[tie.choice].union(tie.coords.0, tie.coords.1);
        }

        // Per coordinate, union the choice sets that share a member.
        let mut by_coord: BTreeMap<usize, (DisjointSets, Vec<Option<f64>>, Vec<bool>)> =
            BTreeMap::new();
        for tie in &self.across {
            check_coord(tie.coord)?;
            if tie.choices.is_empty() {
                return Err(IdmrError::InvalidInput(format!(
                    "across constraint on coordinate {} lists no choices",
                    tie.coord
                )));
            }
            for &k in &tie.choices {
                check_choice(k)?;
            }
            if let Some(v) = tie.value {
                if !v.is_finite() {
                    return Err(IdmrError::InvalidInput(format!(
                        "pinned value {v} is not finite"
                    )));
                }
            }
            let entry = by_coord.entry(tie.coord).or_insert_with(|| {
                (
                    DisjointSets::new(d - 1),
                    vec![None; d - 1],
                    vec![false; d - 1],
                )
            });
            let first = tie.choices[0];
            for &k in &tie.choices {
                entry.0.union(first, k);
                entry.2[k] = true;
            }
            if let Some(v) = tie.value {
                for &k in &tie.choices {
                    match entry.1[k] {
                        Some(w) if w != v => {
                            return Err(IdmrError::Contradictory(format!(
                                "choice {k}, coordinate {} pinned to both {w} and {v}",
                                tie.coord
                            )))
                        }
                        _ => entry.1[k] = Some(v),
                    }
                }
            }
        }

        let mut across = Vec::new();
        let mut held = vec![vec![false; p]; d - 1];
        for (coord, (mut sets, pins, used)) in by_coord {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for k in (0..d - 1).filter(|&k| used[k]) {
                groups.entry(sets.find(k)).or_default().push(k);
            }
            for (_, choices) in groups {
                let mut value = None;
                for &k in &choices {
                    if let Some(v) = pins[k] {
                        match value {
                            Some(w) if w != v => {
                                return Err(IdmrError::Contradictory(format!(
                                    "coordinate {coord} of choices {choices:?} pinned to both {w} and {v}"
                                )))
                            }
                            _ => value = Some(v),
                        }
                    }
                }
                for &k in &choices {
                    held[k][coord] = true;
                }
                across.push(AcrossGroup {
                    coord,
                    choices,
                    value,
                });
            }
        }

        let mut within = Vec::with_capacity(d - 1);
        for (k, sets) in within_sets.iter_mut().enumerate() {
            let groups = sets.groups();
            for g in &groups {
                if g.len() > 1 && g.iter().any(|&j| held[k][j]) {
                    return Err(IdmrError::InvalidInput(format!(
                        "choice {k}: coordinates {g:?} are tied within the choice and across choices; \
                         express the restriction with one constraint type"
                    )));
                }
            }
            within.push(groups);
        }

        Ok(ResolvedConstraints {
            d,
            p,
            within,
            across,
            held,
        })
    }
}

/// A tied coordinate shared by `choices`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcrossGroup {
    pub coord: usize,
    pub choices: Vec<usize>,
    pub value: Option<f64>,
}

/// Constraints checked against a model size, with overlapping ties merged.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConstraints {
    d: usize,
    p: usize,
    /// Per free choice, the partition of coordinates into tied groups.
    within: Vec<Vec<Vec<usize>>>,
    across: Vec<AcrossGroup>,
    /// `held[k][j]`: coordinate `j` of choice `k` belongs to an across group.
    held: Vec<Vec<bool>>,
}

impl ResolvedConstraints {
    pub fn across_groups(&self) -> &[AcrossGroup] {
        &self.across
    }

    fn is_plain(&self, k: usize) -> bool {
        self.within[k].len() == self.p && !self.held[k].iter().any(|&h| h)
    }

    /// Makes `theta` satisfy every constraint: tied groups take their mean,
    /// pinned coordinates their value.
    pub fn project(&self, theta: &ParamMatrix) -> Result<ParamMatrix> {
        let mut values = theta.values().clone();
        for (k, groups) in self.within.iter().enumerate() {
            for g in groups.iter().filter(|g| g.len() > 1) {
                let mean = g.iter().map(|&j| values[[k, j]]).sum::<f64>() / g.len() as f64;
                for &j in g {
                    values[[k, j]] = mean;
                }
            }
        }
        for group in &self.across {
            let value = group.value.unwrap_or_else(|| {
                group
                    .choices
                    .iter()
                    .map(|&k| values[[k, group.coord]])
                    .sum::<f64>()
                    / group.choices.len() as f64
            });
            for &k in &group.choices {
                values[[k, group.coord]] = value;
            }
        }
        ParamMatrix::new(values)
    }

    /// Largest violation of any equality, zero when `theta` is feasible.
    pub fn max_violation(&self, theta: &ParamMatrix) -> f64 {
        let mut worst = 0.0f64;
        for (k, groups) in self.within.iter().enumerate() {
            for g in groups {
                for &j in &g[1..] {
                    worst = worst.max((theta.get(k, j) - theta.get(k, g[0])).abs());
                }
            }
        }
        for group in &self.across {
            let anchor = group
                .value
                .unwrap_or_else(|| theta.get(group.choices[0], group.coord));
            for &k in &group.choices {
                worst = worst.max((theta.get(k, group.coord) - anchor).abs());
            }
        }
        worst
    }

    /// Gradient of the profiled objective projected onto the constraint set:
    /// tied entries are summed, pinned entries removed.
    pub fn projected_gradient(&self, grad: &Array2<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.d - 1 {
            for g in &self.within[k] {
                if !self.held[k][g[0]] {
                    out.push(g.iter().map(|&j| grad[[k, j]]).sum());
                }
            }
        }
        for group in self.across.iter().filter(|g| g.value.is_none()) {
            out.push(group.choices.iter().map(|&k| grad[[k, group.coord]]).sum());
        }
        out
    }

    /// Same constraints on the choices kept after dropping empty ones.
    fn remap(&self, kept: &[usize]) -> Result<ResolvedConstraints> {
        if kept.len() == self.d {
            return Ok(self.clone());
        }
        let mut new_index = vec![None; self.d];
        for (r, &k) in kept.iter().enumerate() {
            new_index[k] = Some(r);
        }
        let mut within = Vec::new();
        let mut held = Vec::new();
        for k in 0..self.d - 1 {
            match new_index[k] {
                Some(_) => {
                    within.push(self.within[k].clone());
                    held.push(self.held[k].clone());
                }
                None if !self.is_plain(k) => {
                    return Err(IdmrError::InvalidInput(format!(
                        "constraint references choice {k}, which has no positive counts"
                    )))
                }
                None => {}
            }
        }
        let across = self
            .across
            .iter()
            .map(|g| AcrossGroup {
                coord: g.coord,
                choices: g
                    .choices
                    .iter()
                    .map(|&k| new_index[k].expect("checked"))
                    .collect(),
                value: g.value,
            })
            .collect();
        Ok(ResolvedConstraints {
            d: kept.len(),
            p: self.p,
            within,
            across,
            held,
        })
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    /// Sets ordered by smallest member, each sorted.
    fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for x in 0..self.parent.len() {
            let r = self.find(x);
            map.entry(r).or_default().push(x);
        }
        map.into_values().collect()
    }
}

/// Poisson fit of `free` coordinate groups, each sharing one coefficient,
/// with the `held` coordinates fixed at `init` and folded into the offset.
/// Returns the full-length coefficient vector.
fn solve_grouped(
    v: &CovariateMatrix,
    counts: &[f64],
    mu: &[f64],
    groups: &[Vec<usize>],
    held: &[bool],
    init: ArrayView1<'_, f64>,
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    let n = v.n();
    let free: Vec<&Vec<usize>> = groups.iter().filter(|g| !held[g[0]]).collect();
    let q = free.len();
    let mut design = Array2::<f64>::zeros((n, q));
    let mut offset = mu.to_vec();
    for i in 0..n {
        let row = v.row_slice(i);
        for (c, g) in free.iter().enumerate() {
            design[[i, c]] = g.iter().map(|&j| row[j]).sum();
        }
        for (j, _) in held.iter().enumerate().filter(|(_, &h)| h) {
            offset[i] += row[j] * init[j];
        }
    }
    let start: Vec<f64> = free.iter().map(|g| init[g[0]]).collect();
    let mut sol = if q == 0 {
        GlmSolution {
            theta_k: Array1::zeros(0),
            iterations: 0,
            final_grad_norm: 0.0,
            converged: true,
            status: SolveStatus::Converged,
            objective_path: Vec::new(),
        }
    } else {
        glm::solve_poisson_raw(
            Design::from_array(&design),
            counts,
            &offset,
            &start,
            settings,
        )?
    };
    let mut full = init.to_owned();
    for (c, g) in free.iter().enumerate() {
        for &j in g.iter() {
            full[j] = sol.theta_k[c];
        }
    }
    sol.theta_k = full;
    Ok(sol)
}

/// Poisson regression of one choice with coordinate pairs forced equal.
///
/// Equivalent to summing the tied covariate columns, fitting the reduced
/// model and copying each shared coefficient back to its coordinates.
pub fn solve_poisson_within(
    counts_k: ArrayView1<'_, f64>,
    v: &CovariateMatrix,
    mu: &FixedEffects,
    pairs: &[(usize, usize)],
    init: ArrayView1<'_, f64>,
    settings: &GlmSettings,
) -> Result<GlmSolution> {
    let p = v.p();
    if init.len() != p {
        return Err(IdmrError::DimensionMismatch(format!(
            "initial coefficients have length {} for p = {p}",
            init.len()
        )));
    }
    if pairs.is_empty() {
        return glm::solve_poisson(counts_k, v, mu, init, settings);
    }
    let mut sets = DisjointSets::new(p);
    for &(a, b) in pairs {
        if a >= p || b >= p {
            return Err(IdmrError::InvalidInput(format!(
                "tied pair ({a}, {b}) out of range for p = {p}"
            )));
        }
        sets.union(a, b);
    }
    if counts_k.len() != v.n() || mu.len() != v.n() {
        return Err(IdmrError::DimensionMismatch(format!(
            "{} counts and {} fixed effects for {} observations",
            counts_k.len(),
            mu.len(),
            v.n()
        )));
    }
    let counts = counts_k.to_vec();
    let groups = sets.groups();
    // Start every group at its mean so the reduced start is feasible.
    let mut start = init.to_owned();
    for g in &groups {
        let mean = g.iter().map(|&j| init[j]).sum::<f64>() / g.len() as f64;
        for &j in g {
            start[j] = mean;
        }
    }
    solve_grouped(
        v,
        &counts,
        mu.as_slice(),
        &groups,
        &vec![false; p],
        start.view(),
        settings,
    )
}

/// The iterative estimator under equality constraints. The base row is
/// always held at zero, since pins and ties are stated relative to it;
/// an empty specification is exactly [`idc::idc_fit`].
pub fn idc_fit_constrained(
    data: &Dataset,
    constraints: &ConstraintSpec,
    init: &InitKind,
    settings: &IdcSettings,
    exec: &Executor,
) -> Result<FitResult> {
    if constraints.is_empty() {
        return idc::idc_fit(data, init, settings, exec);
    }
    let resolved = constraints.resolve(data.d(), data.p())?;
    let sums = data.counts().column_sums();
    let kept: Vec<usize> = (0..data.d()).filter(|&k| sums[k] > 0).collect();
    let reduced = resolved.remap(&kept)?;
    let projected_init = match init {
        InitKind::User(theta) => {
            data.check_params(theta)?;
            InitKind::User(resolved.project(theta)?)
        }
        other => other.clone(),
    };
    let mut fit = idc::run_iterations_with(
        data,
        &projected_init,
        settings,
        exec,
        |theta| reduced.project(&theta),
        |data, theta, glm, exec| constrained_step(data, theta, &reduced, glm, exec),
    )?;
    fit.init_kind = init.clone();
    Ok(fit)
}

type StepOutcome = (ParamMatrix, Vec<(usize, SolveStatus, f64)>);

fn constrained_step(
    data: &Dataset,
    theta_prev: &ParamMatrix,
    cons: &ResolvedConstraints,
    settings: &GlmSettings,
    exec: &Executor,
) -> Result<StepOutcome> {
    let mu = mu_bar(data, theta_prev)?;
    let d = data.d();
    let design = Design::from_covariates(data.covariates());
    let choices: Vec<usize> = (0..d - 1).collect();

    // Per-choice fits; across-tied coordinates stay at their previous value.
    let sols = exec.parallel_map(&choices, |&k| {
        let prev = theta_prev.row(k);
        let sol = if cons.is_plain(k) {
            glm::solve_poisson_raw(
                design,
                data.count_column_slice(k),
                mu.as_slice(),
                prev.as_slice().expect("standard layout"),
                settings,
            )
        } else {
            solve_grouped(
                data.covariates(),
                data.count_column_slice(k),
                mu.as_slice(),
                &cons.within[k],
                &cons.held[k],
                prev,
                settings,
            )
        };
        sol.map_err(|e| e.at_choice(k))
    })?;
    let mut failures = idc::collect_failures(&sols, |j| j);
    let mut values = theta_prev.values().clone();
    for (k, sol) in sols.into_iter().enumerate() {
        values.row_mut(k).assign(&sol.theta_k);
    }

    // Shared coordinates, one scalar problem per group, in group order.
    for group in &cons.across {
        let value = match group.value {
            Some(v) => v,
            None => {
                let (t, sol) = solve_shared(data, &mu, &values, group, settings)?;
                if !sol.converged {
                    failures.push((group.choices[0], sol.status, sol.final_grad_norm));
                }
                t
            }
        };
        for &k in &group.choices {
            values[[k, group.coord]] = value;
        }
    }
    Ok((ParamMatrix::new(values)?, failures))
}

/// Minimizes `sum_{k in group} q_kn` over the shared coordinate, the other
/// coordinates of each choice held at `values`.
fn solve_shared(
    data: &Dataset,
    mu: &FixedEffects,
    values: &Array2<f64>,
    group: &AcrossGroup,
    settings: &GlmSettings,
) -> Result<(f64, GlmSolution)> {
    let n = data.n();
    let j = group.coord;
    let rows = n * group.choices.len();
    let mut design = Array2::<f64>::zeros((rows, 1));
    let mut offset = Vec::with_capacity(rows);
    let mut counts = Vec::with_capacity(rows);
    for (b, &k) in group.choices.iter().enumerate() {
        let theta_k = values.row(k);
        let ck = data.count_column_slice(k);
        for i in 0..n {
            let v = data.covariates().row_slice(i);
            let rest: f64 = v
                .iter()
                .zip(theta_k.iter())
                .enumerate()
                .filter(|&(c, _)| c != j)
                .map(|(_, (a, t))| a * t)
                .sum();
            design[[b * n + i, 0]] = v[j];
            offset.push(mu.as_slice()[i] + rest);
            counts.push(ck[i]);
        }
    }
    let start = [values[[group.choices[0], j]]];
    let sol = glm::solve_poisson_raw(
        Design::from_array(&design),
        &counts,
        &offset,
        &start,
        settings,
    )
    .map_err(|e| match e {
        IdmrError::EmptyChoice { .. } => IdmrError::EmptyChoice {
            choice: Some(group.choices[0]),
        },
        other => other.at_choice(group.choices[0]),
    })?;
    Ok((sol.theta_k[0], sol))
}
