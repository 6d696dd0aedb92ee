//! Experiment drivers. Each experiment enumerates grid cells, runs them on
//! the rayon pool with per-cell seeds and gathers rows in cell order.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use reservoir_core::bounds::{
    e2_bound, grid_sup_reconstruction_error, theorem_budget, DensityFn, DeviationExperiment, ErrorBudget,
    RegularityConstant,
};
use reservoir_core::ensemble::{sample_ensemble, SymmetricDistribution};
use reservoir_core::fourier::{f_exact, representation_from_profile, unit_grid, verify_representation, FourierProfile};
use reservoir_core::operators::OperatorSpec;
use reservoir_core::readout::{train_test_pipeline, PipelineConfig, Ridge};
use reservoir_core::reservoir::{InputSequence, ShiftReservoir, StateVector};
use reservoir_core::rng::{derive_seed, RNG_ALGORITHM};
use reservoir_core::solver::{certificate, solve_with, SolverOptions, DEFAULT_BOX_SLACK};

use crate::config::{Experiment, ExperimentConfig};
use crate::record::{Cell, ResultRecord, STATUS};
use crate::{LabError, Result};

type CellRows = std::result::Result<Vec<Vec<Cell>>, String>;

/// Rows of one experiment before they are stamped into a record.
struct Table {
    coord_columns: Vec<String>,
    data_columns: Vec<String>,
    cells: Vec<(Vec<Cell>, CellRows)>,
    summary: BTreeMap<String, Cell>,
}

impl Table {
    fn new(coords: &[&str], data: &[&str]) -> Self {
        Self {
            coord_columns: coords.iter().map(|s| s.to_string()).collect(),
            data_columns: data.iter().map(|s| s.to_string()).collect(),
            cells: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    /// Successful rows of every cell, in cell order.
    fn ok_rows(&self) -> impl Iterator<Item = (&[Cell], &Vec<Cell>)> {
        self.cells
            .iter()
            .filter_map(|(c, r)| r.as_ref().ok().map(|rows| (c.as_slice(), rows)))
            .flat_map(|(c, rows)| rows.iter().map(move |r| (c, r)))
    }
}

fn cell_result<T>(r: reservoir_core::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn config_error(key: &str, e: reservoir_core::Error) -> LabError {
    LabError::Config(format!("{key}: {e}"))
}

fn distribution(cfg: &ExperimentConfig) -> Result<SymmetricDistribution> {
    SymmetricDistribution::parse(cfg.text("distribution")?).map_err(|e| config_error("distribution", e))
}

fn operator(cfg: &ExperimentConfig) -> Result<OperatorSpec> {
    OperatorSpec::parse(cfg.text("operator")?).map_err(|e| config_error("operator", e))
}

fn ridge(cfg: &ExperimentConfig) -> Result<Ridge> {
    let value = cfg.float("ridge")?;
    match cfg.text("ridge_mode")? {
        "trace" => Ok(Ridge::TraceScaled(value)),
        "absolute" => Ok(Ridge::Absolute(value)),
        other => Err(LabError::Config(format!(
            "ridge_mode must be 'trace' or 'absolute', got '{other}'"
        ))),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Runs the configured experiment. Cell failures become error rows; only
/// configuration problems abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let table = match cfg.experiment {
        Experiment::Reconstruction => reconstruction(cfg)?,
        Experiment::Deviation => deviation(cfg)?,
        Experiment::EsnApprox => esn_approx(cfg)?,
        Experiment::FixedPoint => fixed_point(cfg)?,
        Experiment::WeakEsp => weak_esp(cfg)?,
        Experiment::FourierVerify => fourier_verify(cfg)?,
        Experiment::BudgetTable => budget_table(cfg)?,
    };
    let mut columns = table.coord_columns.clone();
    columns.extend(table.data_columns.iter().cloned());
    columns.push(STATUS.into());
    let mut rows = Vec::new();
    let mut failed = 0;
    for (coords, result) in table.cells {
        match result {
            Ok(data) => {
                for r in data {
                    let mut row = coords.clone();
                    row.extend(r);
                    row.push("ok".into());
                    rows.push(row);
                }
            }
            Err(reason) => {
                failed += 1;
                let mut row = coords.clone();
                row.extend(std::iter::repeat_n(Cell::Missing, table.data_columns.len()));
                row.push(Cell::Text(format!("error: {reason}")));
                rows.push(row);
            }
        }
    }
    Ok(ResultRecord {
        config_hash: cfg.config_hash(),
        experiment: cfg.experiment.name().into(),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        config: cfg.canonical(),
        columns,
        rows,
        summary: table.summary,
        failed_cells: failed,
    })
}

fn reconstruction(cfg: &ExperimentConfig) -> Result<Table> {
    let dist = distribution(cfg)?;
    let (m, d, seeds) = (cfg.int("m")?, cfg.int("d")?, cfg.int("seeds")?);
    let (radius, delta) = (cfg.float("radius")?, cfg.float("delta")?);
    let n_grid = cfg.int_list("n_grid")?;
    let coords: Vec<(usize, usize)> = n_grid.iter().flat_map(|&n| (0..seeds).map(move |s| (n, s))).collect();
    let mut table = Table::new(
        &["n", "seed"],
        &["sup_error", "slack", "certified", "e2_bound", "below_bound"],
    );
    table.cells = coords
        .par_iter()
        .map(|&(n, s)| {
            let seed = cfg.cell_seed(&[n as u64, s as u64]);
            let rows = cell_result(
                sample_ensemble(&dist, n, m, d, seed).and_then(|ens| grid_sup_reconstruction_error(&ens, radius, None)),
            )
            .map(|g| {
                let bound = e2_bound(m, d, n, delta).value;
                vec![vec![
                    g.raw.into(),
                    g.slack.into(),
                    g.certified().into(),
                    bound.into(),
                    (g.certified() <= bound).into(),
                ]]
            });
            (vec![n.into(), s.into()], rows)
        })
        .collect();
    for &n in &n_grid {
        let rows: Vec<&Vec<Cell>> = table
            .ok_rows()
            .filter(|(c, _)| c[0] == Cell::from(n))
            .map(|(_, r)| r)
            .collect();
        let errs: Vec<f64> = rows.iter().filter_map(|r| r[0].as_f64()).collect();
        let below = rows.iter().filter(|r| r[4] == Cell::Bool(true)).count();
        let total = rows.len();
        table
            .summary
            .insert(format!("median_sup_error_n{n}"), median(errs).into());
        table.summary.insert(
            format!("below_bound_fraction_n{n}"),
            (below as f64 / total.max(1) as f64).into(),
        );
    }
    Ok(table)
}

fn density(name: &str) -> Result<DensityFn> {
    match name {
        "cos" => Ok(Arc::new(|w: &[f64]| {
            w.iter().map(|x| (2.0 * std::f64::consts::PI * x).cos()).product()
        })),
        "constant" => Ok(Arc::new(|_: &[f64]| 1.0)),
        "zero" => Ok(Arc::new(|_: &[f64]| 0.0)),
        other => Err(LabError::Config(format!(
            "density must be 'cos', 'constant' or 'zero', got '{other}'"
        ))),
    }
}

fn deviation(cfg: &ExperimentConfig) -> Result<Table> {
    let g = density(cfg.text("density")?)?;
    let (d, trials, grid_points) = (cfg.int("d")?, cfg.int("trials")?, cfg.int("grid_points")?);
    let (r, delta, g_bound) = (cfg.float("r")?, cfg.float("delta")?, cfg.float("g_bound")?);
    let mut table = Table::new(
        &["n", "trial"],
        &[
            "empirical_sup",
            "grid_sup",
            "slack",
            "bound",
            "violated",
            "reference_error",
        ],
    );
    for n in cfg.int_list("n_grid")? {
        let exp = DeviationExperiment::new(
            g.clone(),
            g_bound,
            d,
            n,
            r,
            delta,
            grid_points,
            cfg.cell_seed(&[n as u64]),
        );
        let cells: Vec<(Vec<Cell>, CellRows)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let coords = vec![n.into(), t.into()];
                let rows = match &exp {
                    Ok(exp) => {
                        let tr = exp.trial(cfg.cell_seed(&[n as u64, t as u64]));
                        Ok(vec![vec![
                            tr.empirical_sup.into(),
                            tr.grid_sup.into(),
                            tr.slack.into(),
                            tr.bound.into(),
                            tr.violated.into(),
                            tr.reference_error.into(),
                        ]])
                    }
                    Err(e) => Err(e.to_string()),
                };
                (coords, rows)
            })
            .collect();
        let violated = cells
            .iter()
            .filter(|(_, r)| matches!(r, Ok(rows) if rows[0][4] == Cell::Bool(true)))
            .count();
        table.summary.insert(
            format!("violation_fraction_n{n}"),
            (violated as f64 / trials.max(1) as f64).into(),
        );
        if let Ok(exp) = &exp {
            table.summary.insert(format!("bound_n{n}"), exp.bound().into());
        }
        table.cells.extend(cells);
    }
    Ok(table)
}

fn pipeline_config(cfg: &ExperimentConfig, op: &OperatorSpec, n: usize, seed: u64) -> Result<PipelineConfig> {
    let m = cfg.int("m")?;
    let mut p = PipelineConfig::new(op.clone(), n, m);
    p.distribution = distribution(cfg)?;
    p.ensemble_seed = derive_seed(seed, 0);
    p.data_seed = derive_seed(seed, 1);
    p.ridge = ridge(cfg)?;
    p.train_steps = cfg.int("train_steps")?;
    p.warmup = cfg.opt_int("warmup")?.unwrap_or(3 * m);
    p.target_memory = cfg.opt_int("target_memory")?;
    Ok(p)
}

fn esn_approx(cfg: &ExperimentConfig) -> Result<Table> {
    let op = operator(cfg)?;
    let (m, seeds) = (cfg.int("m")?, cfg.int("seeds")?);
    let (delta, b_m) = (cfg.float("delta")?, cfg.float("b_m")?);
    let (test_sequences, test_len) = (cfg.int("test_sequences")?, cfg.int("test_len")?);
    let n_grid = cfg.int_list("n_grid")?;
    let coords: Vec<(usize, usize)> = n_grid.iter().flat_map(|&n| (0..seeds).map(move |s| (n, s))).collect();
    let mut table = Table::new(
        &["n", "m", "d", "seed"],
        &[
            "lambda_ridge",
            "sup_error",
            "mean_abs_error",
            "truncation_budget",
            "total_bound",
            "feasible",
            "fit_rms",
            "condition_estimate",
        ],
    );
    let configs = coords
        .iter()
        .map(|&(n, s)| {
            let mut p = pipeline_config(cfg, &op, n, cfg.cell_seed(&[n as u64, s as u64]))?;
            p.test_sequences = test_sequences;
            p.test_len = test_len;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    table.cells = coords
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&(n, s), p)| {
            let rows = cell_result(train_test_pipeline(p).and_then(|run| {
                let budget = theorem_budget(&op, RegularityConstant::assumed(b_m), m, op.d(), n, delta)?;
                Ok(vec![vec![
                    run.readout.ridge_lambda.into(),
                    run.report.sup_error.into(),
                    run.report.mean_abs_error.into(),
                    run.report.truncation_budget.into(),
                    budget.total_bound.into(),
                    budget.feasible.into(),
                    run.readout.fit_rms.into(),
                    run.readout.condition_estimate.into(),
                ]])
            }));
            (vec![n.into(), m.into(), op.d().into(), s.into()], rows)
        })
        .collect();
    for &n in &n_grid {
        let errs: Vec<f64> = table
            .ok_rows()
            .filter(|(c, _)| c[0] == Cell::from(n))
            .filter_map(|(_, r)| r[1].as_f64())
            .collect();
        table
            .summary
            .insert(format!("median_sup_error_n{n}"), median(errs).into());
    }
    Ok(table)
}

fn fixed_point(cfg: &ExperimentConfig) -> Result<Table> {
    let dist = distribution(cfg)?;
    let (n, m, d) = (cfg.int("n")?, cfg.int("m")?, cfg.int("d")?);
    let (runs, len, max_iters) = (cfg.int("runs")?, cfg.int("len")?, cfg.int("max_iters")?);
    let opts = SolverOptions {
        tol: cfg.float("tol")?,
        max_iters,
        box_slack: DEFAULT_BOX_SLACK,
    };
    let res = sample_ensemble(&dist, n, m, d, cfg.cell_seed(&[])).map(ShiftReservoir::new);
    let mut table = Table::new(
        &["run"],
        &[
            "residual",
            "iters",
            "converged",
            "max_window_proximity",
            "box_violations",
        ],
    );
    table.cells = (0..runs)
        .into_par_iter()
        .map(|k| {
            let rows = match &res {
                Ok(res) => {
                    let u = InputSequence::uniform(d, len, cfg.cell_seed(&[k as u64]));
                    cell_result(solve_with(res, &u, &opts).and_then(|sol| certificate(&sol, &u, opts.tol, 3 * m))).map(
                        |c| {
                            vec![vec![
                                c.residual.into(),
                                c.iters.into(),
                                c.converged.into(),
                                c.max_window_proximity.into(),
                                c.box_violations.into(),
                            ]]
                        },
                    )
                }
                Err(e) => Err(e.to_string()),
            };
            (vec![k.into()], rows)
        })
        .collect();
    let converged = table.ok_rows().filter(|(_, r)| r[2] == Cell::Bool(true)).count();
    table.summary.insert("converged_runs".into(), converged.into());
    Ok(table)
}

fn weak_esp(cfg: &ExperimentConfig) -> Result<Table> {
    let op = operator(cfg)?;
    let (n, m, runs, len) = (cfg.int("n")?, cfg.int("m")?, cfg.int("runs")?, cfg.int("len")?);
    let warmup = cfg.opt_int("warmup")?.unwrap_or(3 * m);
    let run = train_test_pipeline(&pipeline_config(cfg, &op, n, cfg.cell_seed(&[]))?);
    let mut table = Table::new(&["run"], &["t", "gap", "state_gap"]);
    table.cells = (0..runs)
        .into_par_iter()
        .map(|k| {
            let rows = match &run {
                Ok(run) => {
                    let seed = cfg.cell_seed(&[k as u64]);
                    let u = InputSequence::uniform(op.d(), len, derive_seed(seed, 0));
                    let s0 = StateVector::random_unit(n, derive_seed(seed, 1));
                    let s1 = StateVector::random_unit(n, derive_seed(seed, 2));
                    cell_result(outputs(&run.reservoir, &run.readout.a, &u, &s0).and_then(|y0| {
                        let y1 = outputs(&run.reservoir, &run.readout.a, &u, &s1)?;
                        let state_gap = run.reservoir.dual_trajectory_gap(&u, &s0, &s1)?;
                        Ok((0..len)
                            .map(|t| vec![t.into(), (y0[t] - y1[t]).abs().into(), state_gap[t].into()])
                            .collect())
                    }))
                }
                Err(e) => Err(e.to_string()),
            };
            (vec![k.into()], rows)
        })
        .collect();
    if let Ok(run) = &run {
        let limit = 2.0 * run.report.sup_error;
        let gaps: Vec<f64> = table
            .ok_rows()
            .filter(|(_, r)| r[0].as_f64().is_some_and(|t| t >= warmup as f64))
            .filter_map(|(_, r)| r[1].as_f64())
            .collect();
        let within = gaps.iter().filter(|&&g| g <= limit).count();
        table.summary.insert("sup_error".into(), run.report.sup_error.into());
        table.summary.insert(
            "within_fraction".into(),
            (within as f64 / gaps.len().max(1) as f64).into(),
        );
    }
    Ok(table)
}

fn outputs(res: &ShiftReservoir, a: &[f64], u: &InputSequence, s0: &StateVector) -> reservoir_core::Result<Vec<f64>> {
    let mut y = Vec::with_capacity(u.len());
    res.stream_trajectory(u, s0, |_, s| y.push(a.iter().zip(s).map(|(x, z)| x * z).sum()))?;
    Ok(y)
}

fn fourier_verify(cfg: &ExperimentConfig) -> Result<Table> {
    let profile = FourierProfile::parse(cfg.text("profile")?).map_err(|e| config_error("profile", e))?;
    let (points, samples) = (cfg.int("grid_points")?, cfg.int("samples")?);
    let d = profile.d();
    let axis: Vec<f64> = unit_grid(points).into_iter().map(|x| x[0]).collect();
    let grid: Vec<Vec<f64>> = match d {
        1 => axis.iter().map(|&x| vec![x]).collect(),
        2 => axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
            .collect(),
        _ => return Err(LabError::Config(format!("fourier_verify supports d <= 2, got {d}"))),
    };
    let rep = representation_from_profile(profile, cfg.cell_seed(&[]))?;
    let mut data: Vec<String> = (0..d).map(|k| format!("x_{k}")).collect();
    data.extend(["estimate", "exact", "error", "std_error", "passed"].map(String::from));
    let mut table = Table {
        coord_columns: vec!["point".into()],
        data_columns: data,
        cells: Vec::new(),
        summary: BTreeMap::new(),
    };
    table.cells = grid
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let rows = cell_result(f_exact(rep.profile(), x).and_then(|exact| {
                let f = move |_: &[f64]| exact;
                verify_representation(&rep, &f, std::slice::from_ref(x), samples, cfg.cell_seed(&[k as u64]))
            }))
            .map(|report| {
                let p = &report.points[0];
                let mut row: Vec<Cell> = p.x.iter().map(|&v| v.into()).collect();
                row.extend([
                    p.estimate.into(),
                    p.exact.into(),
                    p.error.into(),
                    p.std_error.into(),
                    p.passed.into(),
                ]);
                vec![row]
            });
            (vec![k.into()], rows)
        })
        .collect();
    let passed = table.ok_rows().all(|(_, r)| r[d + 4] == Cell::Bool(true));
    table.summary.insert("all_passed".into(), passed.into());
    table.summary.insert("sup_bound".into(), rep.sup_bound.into());
    Ok(table)
}

/// Budget rows over the `(m, d, delta, n)` grid; pure and deterministic.
pub fn budget_rows(
    op: &OperatorSpec,
    b_m: f64,
    m_grid: &[usize],
    d_grid: &[usize],
    delta_grid: &[f64],
    n_grid: &[usize],
) -> Vec<(Vec<Cell>, reservoir_core::Result<ErrorBudget>)> {
    let mut out = Vec::new();
    for &m in m_grid {
        for &d in d_grid {
            for &delta in delta_grid {
                for &n in n_grid {
                    let budget = theorem_budget(op, RegularityConstant::assumed(b_m), m, d, n, delta);
                    out.push((vec![m.into(), d.into(), delta.into(), n.into()], budget));
                }
            }
        }
    }
    out
}

pub const BUDGET_COLUMNS: [&str; 9] = [
    "e1",
    "e2",
    "c_mdd",
    "c_feasibility",
    "feasible",
    "tail_ef",
    "direct_sum",
    "total_bound",
    "b_m_assumed",
];

pub fn budget_cells(b: &ErrorBudget) -> Vec<Cell> {
    vec![
        b.e1.into(),
        b.e2.into(),
        b.c_mdd.into(),
        b.c_feasibility.into(),
        b.feasible.into(),
        b.tail_ef.into(),
        b.direct_sum.into(),
        b.total_bound.into(),
        b.b_m_assumed.into(),
    ]
}

fn budget_table(cfg: &ExperimentConfig) -> Result<Table> {
    let op = operator(cfg)?;
    let mut table = Table::new(&["m", "d", "delta", "n"], &BUDGET_COLUMNS);
    table.cells = budget_rows(
        &op,
        cfg.float("b_m")?,
        &cfg.int_list("m_grid")?,
        &cfg.int_list("d_grid")?,
        &cfg.float_list("delta_grid")?,
        &cfg.int_list("n_grid")?,
    )
    .into_iter()
    .map(|(coords, b)| (coords, cell_result(b).map(|b| vec![budget_cells(&b)])))
    .collect();
    Ok(table)
}
