use std::path::Path;
use std::process::Command;

use reservoir_core::bounds::{theorem_budget, RegularityConstant};
use reservoir_core::operators::OperatorSpec;
use reservoir_lab::config::parse_config;
use reservoir_lab::experiments::run_experiment;
use reservoir_lab::plot::{emit_plot_data, plot_table, PlotKind};
use reservoir_lab::record::{Cell, ResultRecord};
use reservoir_lab::LabError;

fn config(text: &str, sets: &[&str]) -> reservoir_lab::config::ExperimentConfig {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, text).unwrap();
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    parse_config(Some(&path), &sets).unwrap()
}

const SMALL_ESN: &str = r#"
experiment = "esn_approx"
operator = "exp_filter:lambda=0.5"
n_grid = [20, 40, 80]
m = 2
seeds = 2
train_steps = 200
test_sequences = 2
test_len = 40
"#;

fn rows_for_n(record: &ResultRecord, n: usize) -> Vec<Vec<Cell>> {
    record.rows.iter().filter(|r| r[0] == Cell::from(n)).cloned().collect()
}

#[test]
fn identical_configs_give_identical_csv() {
    let cfg = config(SMALL_ESN, &[]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.csv_bytes().unwrap(), b.csv_bytes().unwrap());
    assert_eq!(a.rows.len(), 6);
    assert_eq!(a.failed_cells, 0);
    assert_eq!(
        &a.columns[..7],
        &["n", "m", "d", "seed", "lambda_ridge", "sup_error", "mean_abs_error"]
    );
}

#[test]
fn removing_a_cell_leaves_others_unchanged() {
    let full = run_experiment(&config(SMALL_ESN, &[])).unwrap();
    let fewer = run_experiment(&config(SMALL_ESN, &["n_grid=[20, 80]", "seeds=1"])).unwrap();
    let keep_first = |rows: Vec<Vec<Cell>>| rows.into_iter().filter(|r| r[3] == Cell::Int(0)).collect::<Vec<_>>();
    assert_eq!(keep_first(rows_for_n(&full, 20)), rows_for_n(&fewer, 20));
    assert_eq!(keep_first(rows_for_n(&full, 80)), rows_for_n(&fewer, 80));
    assert_ne!(full.config_hash, fewer.config_hash);
}

#[test]
fn flags_override_file_values() {
    let cfg = config(SMALL_ESN, &["m=3", "operator=exp_filter:lambda=0.25,nonlinearity=tanh"]);
    assert_eq!(cfg.int("m").unwrap(), 3);
    assert!(cfg.canonical().contains("m = 3\n"));
    assert!(cfg
        .canonical()
        .contains("operator = \"exp_filter:lambda=0.25,nonlinearity=tanh\"\n"));
}

#[test]
fn config_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "experiment = \"esn_approx\"\noperator = \"identity\"\nlamda = 0.1\n",
    )
    .unwrap();
    let err = parse_config(Some(&path), &[]).unwrap_err();
    assert!(err.to_string().contains("lamda"), "{err}");
    assert!(err.is_config());
    let err = parse_config(
        None,
        &[
            "experiment=esn_approx".into(),
            "operator=identity".into(),
            "n_grid=[400, 200]".into(),
        ],
    )
    .unwrap_err();
    assert!(err.to_string().contains("n-grid not increasing"));
    let cfg = parse_config(None, &["experiment=esn_approx".into(), "operator=nonsense".into()]).unwrap();
    assert!(matches!(run_experiment(&cfg), Err(LabError::Config(_))));
}

#[test]
fn failing_cells_become_error_rows() {
    // md = 12 makes the covering grid too large to enumerate.
    let cfg = config(
        "experiment = \"reconstruction\"\nn_grid = [50]\nm = 4\nd = 3\nseeds = 2\n",
        &[],
    );
    let record = run_experiment(&cfg).unwrap();
    assert_eq!(record.failed_cells, 2);
    let status = record.column("status").unwrap();
    assert!(record
        .rows
        .iter()
        .all(|r| matches!(&r[status], Cell::Text(s) if s.starts_with("error:"))));
    assert!(record.rows.iter().all(|r| r[2] == Cell::Missing));
}

#[test]
fn budget_table_is_pure() {
    let cfg = config(
        "experiment = \"budget_table\"\nm_grid = [1, 2]\ndelta_grid = [0.05, 0.1]\nn_grid = [1000, 100000]\n",
        &[],
    );
    let a = run_experiment(&cfg).unwrap();
    assert_eq!(
        a.csv_bytes().unwrap(),
        run_experiment(&cfg).unwrap().csv_bytes().unwrap()
    );
    assert_eq!(a.rows.len(), 8);
    let op = OperatorSpec::parse("exp_filter:lambda=0.5").unwrap();
    let want = theorem_budget(&op, RegularityConstant::assumed(1.0), 2, 1, 100_000, 0.1).unwrap();
    let row = a
        .rows
        .iter()
        .find(|r| r[0] == Cell::Int(2) && r[2] == Cell::Float(0.1) && r[3] == Cell::Int(100_000))
        .unwrap();
    let total = a.column("total_bound").unwrap();
    assert_eq!(row[total], Cell::Float(want.total_bound));
}

#[test]
fn deviation_and_plot_tables() {
    let cfg = config("experiment = \"deviation\"\nn_grid = [200]\ntrials = 12\n", &[]);
    let record = run_experiment(&cfg).unwrap();
    assert_eq!(record.rows.len(), 12);
    assert!(matches!(record.summary["violation_fraction_n200"], Cell::Float(f) if f <= 0.5));
    let table = plot_table(&record, PlotKind::BoundVsEmpirical).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "# trial empirical_sup bound");
    assert_eq!(lines.len(), 13);
    assert!(lines[1..].iter().all(|l| l.split_whitespace().count() == 3));
    assert!(matches!(plot_table(&record, PlotKind::GapVsT), Err(LabError::MissingColumn(c)) if c == "t"));

    let esn = run_experiment(&config(SMALL_ESN, &["seeds=1"])).unwrap();
    let table = plot_table(&esn, PlotKind::ErrorVsN).unwrap();
    let first: Vec<f64> = table
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((first[0] - 20f64.ln()).abs() < 1e-15);
}

#[test]
fn remaining_experiments_run() {
    let fp = run_experiment(&config(
        "experiment = \"fixed_point\"\nn = 300\nruns = 3\nlen = 20\n",
        &[],
    ))
    .unwrap();
    assert_eq!(fp.summary["converged_runs"], Cell::Int(3));

    let esp = run_experiment(&config(
        "experiment = \"weak_esp\"\noperator = \"identity\"\nn = 200\nm = 1\ntrain_steps = 300\nruns = 2\nlen = 15\n",
        &[],
    ))
    .unwrap();
    assert_eq!(esp.rows.len(), 30);
    assert!(plot_table(&esp, PlotKind::GapVsT).unwrap().lines().count() == 31);

    let fv = run_experiment(&config(
        "experiment = \"fourier_verify\"\nprofile = \"bump:scale=1\"\ngrid_points = 3\nsamples = 100000\n",
        &[],
    ))
    .unwrap();
    assert_eq!(fv.rows.len(), 3);
    assert_eq!(fv.failed_cells, 0);
}

fn lab(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_reservoir-lab"))
        .args(args)
        .env("RESERVOIR_LAB_OUT", out)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes_and_outputs() {
    let out = tempfile::tempdir().unwrap();
    let ok = lab(
        &[
            "run",
            "--set",
            "experiment=budget_table",
            "--set",
            "n_grid=[1000, 2000]",
        ],
        out.path(),
    );
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let record_path = String::from_utf8(ok.stdout)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(record_path.starts_with(out.path().to_str().unwrap()));
    let csv = std::fs::read_to_string(Path::new(&record_path).with_file_name("results.csv")).unwrap();
    assert!(csv.starts_with("m,d,delta,n,e1,"));

    let plot = lab(&["plot", "--record", &record_path, "--kind", "gap_vs_t"], out.path());
    assert_eq!(plot.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&plot.stderr).contains("'t'"));

    let bad = lab(
        &["run", "--set", "experiment=budget_table", "--set", "bogus=1"],
        out.path(),
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));

    let cells = lab(
        &[
            "run",
            "--set",
            "experiment=reconstruction",
            "--set",
            "n_grid=[50]",
            "--set",
            "m=4",
            "--set",
            "d=3",
            "--set",
            "seeds=1",
        ],
        out.path(),
    );
    assert_eq!(cells.status.code(), Some(2));

    let budget = lab(
        &[
            "budget",
            "--m",
            "1",
            "--d",
            "1",
            "--delta",
            "0.05",
            "--bm",
            "1",
            "--n-grid",
            "1000,10000",
        ],
        out.path(),
    );
    assert_eq!(budget.status.code(), Some(0));
    let text = String::from_utf8(budget.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("1,1,5.0000000000000003e-2,1000,"));
}

#[test]
fn plot_file_lands_next_to_record() {
    let out = tempfile::tempdir().unwrap();
    let record = run_experiment(&config("experiment = \"deviation\"\nn_grid = [100]\ntrials = 4\n", &[])).unwrap();
    let path = record.write(out.path()).unwrap();
    let dat = emit_plot_data(&path, PlotKind::BoundVsEmpirical).unwrap();
    assert_eq!(dat, path.with_file_name("bound_vs_empirical.dat"));
    assert_eq!(ResultRecord::load(&path).unwrap(), record);
}
