use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use idmr::io::{read_document, FitDocument};

fn idmr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idmr"))
        .args(args)
        .current_dir(dir)
        .env("IDMR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn simulate(dir: &Path, n: &str, d: &str, seed: &str) {
    let out = idmr(
        dir,
        &[
            "simulate", "--dgp", "a", "--n", n, "--d", d, "--p", "3", "--seed", seed,
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fit(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "fit",
        "--counts",
        "counts.csv",
        "--covariates",
        "covariates.csv",
    ];
    args.extend_from_slice(extra);
    idmr(dir, &args)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn fit_writes_a_document() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "300", "4", "1");
    let out = fit(
        dir.path(),
        &[
            "--init",
            "binomial",
            "--iterations",
            "10",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = read_document(&dir.path().join("r.json")).unwrap();
    assert_eq!((doc.d, doc.p), (4, 3));
    assert_eq!(doc.theta.len(), 12);
    assert_eq!(doc.init_kind, "binomial");
    assert!(doc.iterations_run <= 10);
    assert_eq!(doc.step_norms.len(), doc.iterations_run);
    assert!(doc.wall_times.iter().all(|&t| t == 0.0));
    assert!(doc.theta[9..].iter().all(|&x| x == 0.0));
}

#[test]
fn simulate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = idmr(
            dir.path(),
            &[
                "simulate", "--dgp", "a", "--n", "500", "--d", "10", "--p", "5", "--seed", "7",
            ],
        );
        assert!(out.status.success());
    }
    for name in ["counts.csv", "covariates.csv", "theta.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        assert!(!x.is_empty());
    }
    let counts = fs::read_to_string(a.path().join("counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 500);
    assert!(
        counts
            .lines()
            .all(|l| (20..=30)
                .contains(&l.split(',').map(|x| x.parse::<u64>().unwrap()).sum::<u64>()))
    );
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = idmr(dir.path(), &["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(idmr(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(idmr(dir.path(), &["table", "6"]).status.code(), Some(1));
    assert_eq!(idmr(dir.path(), &["--help"]).status.code(), Some(0));

    let out = fit(dir.path(), &["--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("counts.csv"));
}

#[test]
fn malformed_counts_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("counts.csv"), "1,-1\n").unwrap();
    fs::write(dir.path().join("covariates.csv"), "1\n").unwrap();
    let out = fit(dir.path(), &["--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));

    fs::write(dir.path().join("counts.csv"), "1,2\n3,4\n5\n").unwrap();
    fs::write(dir.path().join("covariates.csv"), "1\n1\n1\n").unwrap();
    let out = fit(dir.path(), &["--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn intercept_flag_and_header() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("counts.csv"), "a,b\n3,1\n2,2\n1,3\n").unwrap();
    fs::write(dir.path().join("covariates.csv"), "x\n-1\n0\n1\n").unwrap();
    let out = fit(dir.path(), &["--header", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--add-intercept"));
    let out = fit(
        dir.path(),
        &[
            "--header",
            "--add-intercept",
            "--iterations",
            "50",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = read_document(&dir.path().join("r.json")).unwrap();
    assert_eq!((doc.d, doc.p), (2, 2));
    // Symmetric data: the intercept is zero and the slope negative.
    assert!(doc.theta[0].abs() < 1e-8);
    assert!(doc.theta[1] < 0.0);
}

#[test]
fn base_column_and_dropped_choices() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("counts.csv"),
        "1,0,2,1\n0,0,0,0\n2,0,1,1\n1,0,1,3\n",
    )
    .unwrap();
    fs::write(dir.path().join("covariates.csv"), "1\n1\n1\n1\n").unwrap();
    let out = fit(
        dir.path(),
        &["--base", "0", "--iterations", "100", "--out", "r.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = read_document(&dir.path().join("r.json")).unwrap();
    assert_eq!(doc.choice_map, Some(vec![2, 3, 0]));
    assert_eq!(doc.dropped_rows, vec![1]);
    assert_eq!(doc.dropped_choices, vec![1]);
    // Intercept-only model: log share ratios against choice 0.
    assert!((doc.theta[0] - (4.0f64 / 4.0).ln()).abs() < 1e-6);
    assert!((doc.theta[1] - (5.0f64 / 4.0).ln()).abs() < 1e-6);
}

#[test]
fn constraints_and_user_init() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "400", "4", "3");
    fs::write(
        dir.path().join("ties.txt"),
        "# shared slope\nacross 1 0 1\nacross 2 0 2 = 0.25\n",
    )
    .unwrap();
    let out = fit(
        dir.path(),
        &[
            "--constraints",
            "ties.txt",
            "--iterations",
            "30",
            "--out",
            "c.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = read_document(&dir.path().join("c.json")).unwrap();
    let t = |k: usize, j: usize| doc.theta[k * 3 + j];
    assert_eq!(t(0, 1), t(1, 1));
    assert_eq!((t(0, 2), t(2, 2)), (0.25, 0.25));

    fs::write(dir.path().join("bad.txt"), "across 1 0 3\n").unwrap();
    let out = fit(dir.path(), &["--constraints", "bad.txt", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));

    let out = fit(
        dir.path(),
        &[
            "--init",
            "file",
            "--init-file",
            "c.json",
            "--iterations",
            "0",
            "--out",
            "u.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let user: FitDocument = read_document(&dir.path().join("u.json")).unwrap();
    assert_eq!(user.theta, doc.theta);
    assert_eq!(user.init_kind, "user");
    assert_eq!(
        fit(dir.path(), &["--init", "file", "--out", "v.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn bootstrap_appends_results() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "400", "3", "5");
    assert!(fit(dir.path(), &["--iterations", "10", "--out", "r.json"])
        .status
        .success());
    let out = idmr(
        dir.path(),
        &[
            "bootstrap",
            "--fit",
            "r.json",
            "--counts",
            "counts.csv",
            "--covariates",
            "covariates.csv",
            "--replicates",
            "30",
            "--seed",
            "9",
            "--target",
            "1:2",
            "--null",
            "0.1",
            "--level",
            "0.1",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let before = read_document(&dir.path().join("r.json")).unwrap();
    let after = read_document(&dir.path().join("b.json")).unwrap();
    assert_eq!(before.theta, after.theta);
    let boot = after.bootstrap.expect("bootstrap section");
    assert_eq!(boot.se.len(), 2 * 3);
    assert!(boot.se.iter().all(|&s| s > 0.0 && s.is_finite()));
    let test = boot.test.expect("test section");
    assert_eq!((test.choice, test.coord, test.null_value), (1, 2, 0.1));
    let expected = (after.theta[5] - 0.1).abs() / (boot.se[5] / 400f64.sqrt());
    assert!((test.statistic - expected).abs() <= 1e-12 * expected.max(1.0));
    assert!((test.critical_value - 1.6448536269514722).abs() < 1e-9);
    assert_eq!(test.reject, test.statistic > test.critical_value);

    let bad = idmr(
        dir.path(),
        &[
            "bootstrap",
            "--fit",
            "r.json",
            "--counts",
            "counts.csv",
            "--covariates",
            "covariates.csv",
            "--replicates",
            "5",
            "--target",
            "2:0",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn table_and_bench_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = idmr(
        dir.path(),
        &[
            "table", "2", "--reps", "3", "--d-list", "3", "--n-list", "200", "--out", "t.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("estimator,d,n,reps,failures,mse,mse_se,seconds")
    );
    assert!(lines.next().unwrap().starts_with("mle,3,200,3,0,"));

    let out = idmr(
        dir.path(),
        &[
            "bench",
            "--d-list",
            "3,6",
            "--n",
            "100",
            "--iterations",
            "2",
            "--repeats",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("d,seconds\n3,"));
    assert!(text.contains("slope"));
}

#[test]
fn numerical_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("counts.csv"), "1,2\n2,1\n3,3\n").unwrap();
    fs::write(
        dir.path().join("covariates.csv"),
        "1,1e300\n1,-1e300\n1,0\n",
    )
    .unwrap();
    let out = fit(dir.path(), &["--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!dir.path().join("r.json").exists());
}
