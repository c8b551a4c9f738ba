//! CSV input, JSON fit documents and constraint files.
//!
//! Counts and covariates are plain comma-separated numbers, one
//! observation per line, with no header unless asked.
//! Fits are written as JSON; floats use the shortest decimal that reads
//! back to the same bits.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::constrained::{AcrossTie, ConstraintSpec, WithinTie};
use crate::error::{IdmrError, Result};
use crate::glm::SolveStatus;
use crate::idc::{FitResult, InnerFailure};
use crate::init::InitKind;
use crate::model::{CountMatrix, CovariateMatrix, Dataset, ParamMatrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// Skip the first line of each file.
    pub header: bool,
    /// Prepend a column of ones to the covariates.
    pub add_intercept: bool,
    /// Input column to use as the base choice; the last column by default.
    pub base: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub data: Dataset,
    /// Original indices of the observations kept.
    pub kept_rows: Vec<usize>,
    /// Input columns of the choices kept, in model order; the last one is
    /// the base.
    pub kept_choices: Vec<usize>,
    /// Observations and choices in the input files.
    pub original_n: usize,
    pub original_d: usize,
}

impl LoadedData {
    pub fn dropped_rows(&self) -> Vec<usize> {
        complement(&self.kept_rows, self.original_n)
    }

    pub fn dropped_choices(&self) -> Vec<usize> {
        let mut kept = self.kept_choices.clone();
        kept.sort_unstable();
        complement(&kept, self.original_d)
    }
}

fn complement(kept: &[usize], total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut it = kept.iter().peekable();
    for i in 0..total {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| IdmrError::Io(format!("{}: {e}", path.display())))?;
    Ok(s)
}

/// Parses rows of a comma-separated document, reporting 1-based physical
/// line numbers. Blank lines are skipped.
fn parse_rows<T>(
    text: &str,
    header: bool,
    what: &str,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<Vec<Vec<T>>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut width = None;
    let mut header_pending = header;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(IdmrError::Parse {
                    line,
                    message: format!("{what}: expected {w} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        let row = fields
            .iter()
            .enumerate()
            .map(|(c, field)| {
                parse(field).map_err(|why| IdmrError::Parse {
                    line,
                    message: format!("{what}, field {}: {why}", c + 1),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IdmrError::Parse {
            line: 1,
            message: format!("{what}: no data rows"),
        });
    }
    Ok(rows)
}

fn to_matrix<T: Clone>(rows: Vec<Vec<T>>) -> Array2<T> {
    let (n, w) = (rows.len(), rows[0].len());
    Array2::from_shape_vec((n, w), rows.into_iter().flatten().collect()).expect("rectangular")
}

pub fn parse_counts(text: &str, header: bool) -> Result<Array2<u64>> {
    let rows = parse_rows(text, header, "counts", |f| {
        f.parse::<u64>()
            .map_err(|_| format!("{f:?} is not a non-negative integer"))
    })?;
    Ok(to_matrix(rows))
}

pub fn parse_covariates(text: &str, header: bool) -> Result<Array2<f64>> {
    let rows = parse_rows(text, header, "covariates", |f| match f.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(_) => Err(format!("{f:?} is not finite")),
        Err(_) => Err(format!("{f:?} is not a number")),
    })?;
    Ok(to_matrix(rows))
}

/// Builds a dataset from parsed matrices, dropping observations with zero
/// total and choices that are never chosen.
pub fn assemble(
    counts: Array2<u64>,
    covariates: Array2<f64>,
    options: CsvOptions,
) -> Result<LoadedData> {
    let d = counts.ncols();
    if d == 0 {
        return Err(IdmrError::InvalidInput("counts have no columns".into()));
    }
    let mut order: Vec<usize> = (0..d).collect();
    if let Some(base) = options.base {
        if base >= d {
            return Err(IdmrError::InvalidInput(format!(
                "base column {base} out of range for {d} choices"
            )));
        }
        order.retain(|&k| k != base);
        order.push(base);
    }
    let counts = counts.select(ndarray::Axis(1), &order);
    if counts.nrows() != covariates.nrows() {
        return Err(IdmrError::DimensionMismatch(format!(
            "counts have {} rows but covariates have {}",
            counts.nrows(),
            covariates.nrows()
        )));
    }
    let covariates = if options.add_intercept {
        CovariateMatrix::with_intercept(covariates)?
    } else {
        CovariateMatrix::new(covariates).map_err(|e| match e {
            IdmrError::InvalidInput(msg) => {
                IdmrError::InvalidInput(format!("{msg}; pass --add-intercept to prepend one"))
            }
            other => other,
        })?
    };
    let totals = counts.sum_axis(ndarray::Axis(1));
    let kept_rows: Vec<usize> = (0..counts.nrows()).filter(|&i| totals[i] > 0).collect();
    let sums = counts.sum_axis(ndarray::Axis(0));
    let kept: Vec<usize> = (0..counts.ncols()).filter(|&k| sums[k] > 0).collect();
    for i in complement(&kept_rows, counts.nrows()) {
        log::warn!("observation {i} has zero total and is dropped");
    }
    for k in complement(&kept, counts.ncols()) {
        log::warn!("choice {} is never chosen and is dropped", order[k]);
    }
    if kept_rows.is_empty() {
        return Err(IdmrError::InvalidInput(
            "every observation has zero total".into(),
        ));
    }
    if let Some(&last) = kept.last().filter(|&&k| k != d - 1) {
        log::warn!(
            "the base choice is never chosen; choice {} becomes the base",
            order[last]
        );
    }
    let counts = counts
        .select(ndarray::Axis(0), &kept_rows)
        .select(ndarray::Axis(1), &kept);
    let original_n = counts.nrows();
    let covariates =
        CovariateMatrix::new(covariates.values().select(ndarray::Axis(0), &kept_rows))?;
    let data = Dataset::new(CountMatrix::new(counts)?, covariates)?;
    Ok(LoadedData {
        data,
        kept_rows,
        kept_choices: kept.iter().map(|&k| order[k]).collect(),
        original_n,
        original_d: d,
    })
}

pub fn load_dataset(
    counts_path: &Path,
    covariates_path: &Path,
    options: CsvOptions,
) -> Result<LoadedData> {
    let counts = parse_counts(&read_text(counts_path)?, options.header)
        .map_err(|e| with_file(e, counts_path))?;
    let covariates = parse_covariates(&read_text(covariates_path)?, options.header)
        .map_err(|e| with_file(e, covariates_path))?;
    assemble(counts, covariates, options)
}

fn with_file(e: IdmrError, path: &Path) -> IdmrError {
    match e {
        IdmrError::Parse { line, message } => IdmrError::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Writes a matrix as CSV with shortest round-trip floats.
pub fn matrix_csv<T: std::fmt::Display>(m: &Array2<T>) -> String {
    let mut out = String::new();
    for row in m.outer_iter() {
        let fields: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| IdmrError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub iteration: usize,
    pub choice: usize,
    pub status: String,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRecord {
    pub choice: usize,
    pub coord: usize,
    pub null_value: f64,
    pub level: f64,
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRecord {
    pub replicates: usize,
    pub replicates_used: usize,
    pub failures: usize,
    pub seed: u64,
    /// `(d - 1) x p`, row-major; standard deviation times `sqrt(n)`.
    pub se: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<WaldRecord>,
}

/// The on-disk form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub library: String,
    pub version: String,
    pub d: usize,
    pub p: usize,
    /// Row-major `d x p`.
    pub theta: Vec<f64>,
    pub init_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_theta: Option<Vec<f64>>,
    pub iterations_run: usize,
    pub step_norms: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub wall_times: Vec<f64>,
    pub seed: Option<u64>,
    pub inner_failures: Vec<FailureRecord>,
    pub dropped_rows: Vec<usize>,
    pub dropped_choices: Vec<usize>,
    /// Column of the input each row of `theta` belongs to, when the loader
    /// dropped empty choices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_map: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapRecord>,
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIterations => "max_iterations",
        SolveStatus::Stalled => "stalled",
        SolveStatus::Separated => "separated",
    }
}

fn parse_status(s: &str) -> Result<SolveStatus> {
    Ok(match s {
        "converged" => SolveStatus::Converged,
        "max_iterations" => SolveStatus::MaxIterations,
        "stalled" => SolveStatus::Stalled,
        "separated" => SolveStatus::Separated,
        other => {
            return Err(IdmrError::InvalidInput(format!(
                "unknown solver status {other:?}"
            )))
        }
    })
}

impl FitDocument {
    pub fn from_fit(fit: &FitResult, seed: Option<u64>) -> Self {
        let theta = fit.theta.values();
        Self {
            library: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            d: fit.theta.d(),
            p: fit.theta.p(),
            theta: theta.iter().copied().collect(),
            init_kind: fit.init_kind.name().into(),
            init_theta: match &fit.init_kind {
                InitKind::User(t) => Some(t.values().iter().copied().collect()),
                _ => None,
            },
            iterations_run: fit.iterations_run,
            step_norms: fit.step_norms.clone(),
            objective_trace: fit.objective_trace.clone(),
            wall_times: fit.wall_times.clone(),
            seed,
            inner_failures: fit
                .inner_failures
                .iter()
                .map(|f| FailureRecord {
                    iteration: f.iteration,
                    choice: f.choice,
                    status: status_name(f.status).into(),
                    grad_norm: f.grad_norm,
                })
                .collect(),
            dropped_rows: fit.dropped_rows.clone(),
            dropped_choices: fit.dropped_choices.clone(),
            choice_map: None,
            bootstrap: None,
        }
    }

    fn matrix(&self, values: &[f64]) -> Result<ParamMatrix> {
        if values.len() != self.d * self.p {
            return Err(IdmrError::DimensionMismatch(format!(
                "{} values for a {} x {} matrix",
                values.len(),
                self.d,
                self.p
            )));
        }
        ParamMatrix::new(
            Array2::from_shape_vec((self.d, self.p), values.to_vec()).expect("checked"),
        )
    }

    pub fn theta(&self) -> Result<ParamMatrix> {
        self.matrix(&self.theta)
    }

    pub fn to_fit(&self) -> Result<FitResult> {
        let init_kind = match (self.init_kind.as_str(), &self.init_theta) {
            ("user", Some(values)) => InitKind::User(self.matrix(values)?),
            ("user", None) => {
                return Err(IdmrError::InvalidInput(
                    "user initializer without init_theta".into(),
                ))
            }
            (name, _) => InitKind::from_name(name)?,
        };
        Ok(FitResult {
            theta: self.theta()?,
            iterations_run: self.iterations_run,
            step_norms: self.step_norms.clone(),
            objective_trace: self.objective_trace.clone(),
            wall_times: self.wall_times.clone(),
            init_kind,
            inner_failures: self
                .inner_failures
                .iter()
                .map(|f| {
                    Ok(InnerFailure {
                        iteration: f.iteration,
                        choice: f.choice,
                        status: parse_status(&f.status)?,
                        grad_norm: f.grad_norm,
                    })
                })
                .collect::<Result<_>>()?,
            dropped_rows: self.dropped_rows.clone(),
            dropped_choices: self.dropped_choices.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| IdmrError::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| IdmrError::Parse {
            line: e.line(),
            message: format!("fit document: {e}"),
        })
    }
}

pub fn write_fit(fit: &FitResult, seed: Option<u64>, path: &Path) -> Result<()> {
    write_document(&FitDocument::from_fit(fit, seed), path)
}

pub fn write_document(doc: &FitDocument, path: &Path) -> Result<()> {
    write_text(path, &doc.to_json()?)
}

pub fn read_document(path: &Path) -> Result<FitDocument> {
    FitDocument::from_json(&read_text(path)?)
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    read_document(path)?.to_fit()
}

/// Parses `within k j1 j2` and `across j k1 ... kq [= value]` lines.
/// Blank lines and `#` comments are ignored.
pub fn parse_constraints(text: &str) -> Result<ConstraintSpec> {
    let mut spec = ConstraintSpec::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| IdmrError::Parse { line, message };
        let index = |tok: &str| {
            tok.parse::<usize>()
                .map_err(|_| err(format!("{tok:?} is not an index")))
        };
        let (body, value) = match content.split_once('=') {
            Some((lhs, rhs)) => {
                let v = rhs.trim();
                let parsed = v
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("{v:?} is not a finite value")))?;
                (lhs, Some(parsed))
            }
            None => (content, None),
        };
        let tokens: Vec<&str> = body.split_whitespace().collect();
        match tokens.first().copied() {
            Some("within") => {
                if value.is_some() {
                    return Err(err("within constraints cannot pin a value".into()));
                }
                if tokens.len() != 4 {
                    return Err(err("expected `within k j1 j2`".into()));
                }
                spec.within.push(WithinTie {
                    choice: index(tokens[1])?,
                    coords: (index(tokens[2])?, index(tokens[3])?),
                });
            }
            Some("across") => {
                if tokens.len() < 3 {
                    return Err(err("expected `across j k1 ... kq [= value]`".into()));
                }
                spec.across.push(AcrossTie {
                    coord: index(tokens[1])?,
                    choices: tokens[2..]
                        .iter()
                        .map(|t| index(t))
                        .collect::<Result<_>>()?,
                    value,
                });
            }
            Some(other) => return Err(err(format!("unknown constraint kind {other:?}"))),
            None => unreachable!("content is non-empty"),
        }
    }
    Ok(spec)
}

pub fn load_constraints(path: &Path) -> Result<ConstraintSpec> {
    parse_constraints(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Executor;
    use crate::idc::{idc_fit, IdcSettings};
    use ndarray::array;

    #[test]
    fn counts_examples() {
        let c = parse_counts("1,0\n0,2\n", false).unwrap();
        assert_eq!(c, array![[1, 0], [0, 2]]);
        let loaded = assemble(c, array![[1.0], [1.0]], CsvOptions::default()).unwrap();
        assert_eq!(loaded.data.counts().totals(), &array![1, 2]);
    }

    #[test]
    fn negative_count_names_its_line() {
        let err = parse_counts("1,-1\n", false).unwrap_err();
        assert!(matches!(err, IdmrError::Parse { line: 1, .. }), "{err}");
        let err = parse_counts("a,b\n1,2\n3,-1\n", true).unwrap_err();
        assert!(matches!(err, IdmrError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn malformed_inputs() {
        let cases: [(&str, usize); 4] = [
            ("1,2\n3\n", 2),
            ("1,2\n3,4.5\n", 2),
            ("1,2\n\n3,x\n", 3),
            ("1,2,3\n4,5,6\n7,8\n", 3),
        ];
        for (text, line) in cases {
            match parse_counts(text, false) {
                Err(IdmrError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        for (text, line) in [("1,0.5\n1,NaN\n", 2), ("1,inf\n", 1), ("1,\n", 1)] {
            match parse_covariates(text, false) {
                Err(IdmrError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(parse_counts("", false).is_err());
    }

    #[test]
    fn intercept_handling() {
        let counts = array![[1, 1], [2, 0]];
        let with = CsvOptions {
            add_intercept: true,
            ..Default::default()
        };
        let loaded = assemble(counts.clone(), array![[0.5], [-1.0]], with).unwrap();
        assert_eq!(
            loaded.data.covariates().values(),
            &array![[1.0, 0.5], [1.0, -1.0]]
        );
        let err = assemble(counts, array![[0.5], [-1.0]], CsvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("--add-intercept"));
    }

    #[test]
    fn empty_rows_and_choices_are_dropped() {
        let loaded = assemble(
            array![[1, 0, 2], [0, 0, 0], [3, 0, 1]],
            Array2::ones((3, 1)),
            CsvOptions::default(),
        )
        .unwrap();
        assert_eq!(loaded.kept_rows, vec![0, 2]);
        assert_eq!(loaded.kept_choices, vec![0, 2]);
        assert_eq!(loaded.data.d(), 2);
        assert_eq!(loaded.dropped_rows(), vec![1]);
        assert_eq!(loaded.dropped_choices(), vec![1]);
    }

    #[test]
    fn base_column_moves_last() {
        let options = CsvOptions {
            base: Some(0),
            ..Default::default()
        };
        let loaded = assemble(array![[1, 2, 3], [4, 0, 6]], Array2::ones((2, 1)), options).unwrap();
        assert_eq!(loaded.kept_choices, vec![1, 2, 0]);
        assert_eq!(loaded.data.counts().counts(), &array![[2, 3, 1], [0, 6, 4]]);
        let options = CsvOptions {
            base: Some(3),
            ..Default::default()
        };
        assert!(assemble(array![[1, 2, 3]], Array2::ones((1, 1)), options).is_err());
    }

    #[test]
    fn fit_round_trip() {
        let spec = crate::sim::DgpSpec {
            kind: crate::sim::DgpKind::A,
            n: 200,
            d: 4,
            p: 3,
            seed: 1,
        };
        let data = crate::sim::draw_dgp(&spec, &mut spec.rng()).unwrap().data;
        let fit = idc_fit(
            &data,
            &InitKind::Binomial,
            &IdcSettings::fixed(5),
            &Executor::sequential(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        write_fit(&fit, Some(7), &path).unwrap();
        let back = read_fit(&path).unwrap();
        assert_eq!(back, fit);
        let doc = read_document(&path).unwrap();
        assert_eq!((doc.d, doc.p), (4, 3));
        assert_eq!(doc.seed, Some(7));

        let user = FitResult {
            init_kind: InitKind::User(fit.theta.clone()),
            ..fit
        };
        write_fit(&user, None, &path).unwrap();
        assert_eq!(read_fit(&path).unwrap(), user);
    }

    #[test]
    fn missing_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let fit = FitResult {
            theta: ParamMatrix::zeros(2, 1),
            iterations_run: 0,
            step_norms: vec![],
            objective_trace: vec![],
            wall_times: vec![],
            init_kind: InitKind::Zeros,
            inner_failures: vec![],
            dropped_rows: vec![],
            dropped_choices: vec![],
        };
        let err = write_fit(&fit, None, &dir.path().join("nope").join("fit.json")).unwrap_err();
        assert!(matches!(err, IdmrError::Io(_)));
    }

    #[test]
    fn constraint_file() {
        let spec =
            parse_constraints("# ties\nwithin 0 1 2\n\nacross 0 1 2 3 = -0.5\nacross 1 0 4\n")
                .unwrap();
        assert_eq!(
            spec.within,
            vec![WithinTie {
                choice: 0,
                coords: (1, 2)
            }]
        );
        assert_eq!(
            spec.across,
            vec![
                AcrossTie {
                    coord: 0,
                    choices: vec![1, 2, 3],
                    value: Some(-0.5)
                },
                AcrossTie {
                    coord: 1,
                    choices: vec![0, 4],
                    value: None
                },
            ]
        );
        for (text, line) in [
            ("within 0 1\n", 1),
            ("\nacross 0 1 = x\n", 2),
            ("tie 0 1 2\n", 1),
            ("within 0 1 2 = 3\n", 1),
        ] {
            match parse_constraints(text) {
                Err(IdmrError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
