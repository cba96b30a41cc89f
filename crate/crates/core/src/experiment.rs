//! Batch experiment driver: dispatches the configured solvers over the
//! refinement levels, runs the property suites, writes the report and CSV
//! artifacts. Identical config + seed yields byte-identical CSVs (timings
//! live only in the text report).

use crate::bsde::solve_bsde_zero_noise;
use crate::checks::{run_suite, Artifacts};
use crate::config::{ExperimentConfig, GridLevel};
use crate::dpp::{evaluate_policy_value, solve_value_dpp, DppSolution};
use crate::error::{Error, Result};
use crate::fd::{solve_fd, viscosity_residuals, FdScheme};
use crate::field::ValueField;
use crate::grid::TimeGrid;
use crate::model::OperatorSpec;
use crate::report::{OrderResult, OrderTable, PointResult, SolveReport, StageTiming, TableReport};
use crate::rng;
use crate::sde::{estimate_strong_order, least_squares_slope, ConstantPolicy};
use std::path::PathBuf;
use std::time::Instant;

/// Runtime overrides (CLI flags / environment).
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub out_dir_override: Option<PathBuf>,
    /// Skip writing files (used by in-process callers).
    pub dry_run: bool,
}

impl RunOptions {
    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed_override.unwrap_or(cfg.solve.seed)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir_override.clone().unwrap_or_else(|| cfg.output.dir.clone())
    }
}

struct StageClock {
    timings: Vec<StageTiming>,
}

impl StageClock {
    fn new() -> Self {
        Self { timings: Vec::new() }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        Ok(out)
    }
}

fn solve_dpp_level(
    op: &OperatorSpec,
    cfg: &ExperimentConfig,
    level: &GridLevel,
    seed: u64,
) -> Result<DppSolution> {
    let dcfg = cfg.solve.dpp.as_ref().expect("dpp enabled implies [solve.dpp]");
    let grid = TimeGrid::new(0.0, op.horizon(), level.time_steps)?;
    let sgrid = dcfg.space_grid(level.spacing)?;
    solve_value_dpp(op, &grid, &sgrid, &dcfg.rule()?, seed)
}

fn solve_fd_level(op: &OperatorSpec, cfg: &ExperimentConfig, level: &GridLevel) -> Result<ValueField> {
    let fcfg = cfg.solve.fd.as_ref().expect("fd enabled implies [solve.fd]");
    let sgrid = fcfg.space_grid(level.spacing)?;
    let scheme = if fcfg.time_steps > 0 {
        FdScheme::new(op, sgrid, fcfg.time_steps)?
    } else {
        FdScheme::auto(op, sgrid, fcfg.cfl_safety)?
    };
    solve_fd(op, &scheme)
}

/// Consecutive-difference refinement orders of per-level values.
fn pairwise_orders(quantity: &str, params: &[f64], values: &[f64]) -> Vec<OrderResult> {
    let mut out = Vec::new();
    for i in 0..params.len().saturating_sub(2) {
        let d0 = (values[i] - values[i + 1]).abs();
        let d1 = (values[i + 1] - values[i + 2]).abs();
        if d0 > 0.0 && d1 > 0.0 {
            let order = (d0 / d1).ln() / (params[i] / params[i + 1]).ln();
            out.push(OrderResult {
                quantity: quantity.into(),
                pair: (params[i], params[i + 1]),
                order,
            });
        }
    }
    out
}

/// Execute the configured solvers and checks; returns the report after
/// writing artifacts (unless `dry_run`).
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SolveReport> {
    let seed = opts.seed(cfg);
    let op = cfg.build_operator()?;
    let levels = cfg.levels();
    let mut clock = StageClock::new();

    let mut dpp_levels: Vec<DppSolution> = Vec::new();
    if cfg.solver_enabled("dpp") {
        for (i, level) in levels.iter().enumerate() {
            let sol = clock.time(&format!("dpp level {i}"), || {
                solve_dpp_level(&op, cfg, level, rng::derive(seed, i as u64))
            })?;
            dpp_levels.push(sol);
        }
    }
    let mut fd_levels: Vec<ValueField> = Vec::new();
    if cfg.solver_enabled("fd") {
        for (i, level) in levels.iter().enumerate() {
            let field = clock.time(&format!("fd level {i}"), || solve_fd_level(&op, cfg, level))?;
            fd_levels.push(field);
        }
    }

    let mut points = Vec::new();
    let fd_at = |t: f64, x: &[f64]| fd_levels.last().map(|f| f.at(t, x));
    if let Some(sol) = dpp_levels.last() {
        for p in &cfg.solve.test_points {
            let value = sol.value.at(p.t, &p.x);
            let oracle = fd_at(p.t, &p.x);
            points.push(PointResult {
                t: p.t,
                x: p.x.clone(),
                solver: "dpp".into(),
                value,
                stderr: sol.diagnostics.expectation_noise,
                oracle,
                rel_gap: oracle.map(|o| (value - o).abs() / o.abs().max(1.0)),
            });
        }
    }
    if let Some(field) = fd_levels.last() {
        for p in &cfg.solve.test_points {
            let value = field.at(p.t, &p.x);
            points.push(PointResult {
                t: p.t,
                x: p.x.clone(),
                solver: "fd".into(),
                value,
                stderr: 0.0,
                oracle: None,
                rel_gap: None,
            });
        }
    }
    if cfg.solver_enabled("policy_mc") {
        let sol = dpp_levels.last().expect("validated: policy_mc needs dpp");
        let pcfg = cfg.solve.policy_mc.clone().unwrap_or_default();
        let basis = pcfg.regression_basis()?;
        for (i, p) in cfg.solve.test_points.iter().enumerate() {
            let t0 = if sol.value.grid().index_of(p.t).is_some() { p.t } else { 0.0 };
            let (value, stderr) = clock.time(&format!("policy_mc point {i}"), || {
                evaluate_policy_value(
                    &op,
                    &sol.policy,
                    t0,
                    &p.x,
                    pcfg.paths,
                    rng::derive(seed, 0x70 + i as u64),
                    &basis,
                    pcfg.picard,
                )
            })?;
            let oracle = fd_at(p.t, &p.x);
            points.push(PointResult {
                t: t0,
                x: p.x.clone(),
                solver: "policy_mc".into(),
                value,
                stderr,
                oracle,
                rel_gap: oracle.map(|o| (value - o).abs() / o.abs().max(1.0)),
            });
        }
    }

    // refinement orders of the headline value at the first test point
    let mut orders = Vec::new();
    if levels.len() >= 3 {
        let p0 = &cfg.solve.test_points[0];
        let hs: Vec<f64> = levels.iter().map(|l| l.spacing).collect();
        if dpp_levels.len() == levels.len() {
            let vs: Vec<f64> = dpp_levels.iter().map(|s| s.value.at(p0.t, &p0.x)).collect();
            orders.extend(pairwise_orders("dpp value vs spacing", &hs, &vs));
        }
        if fd_levels.len() == levels.len() {
            let vs: Vec<f64> = fd_levels.iter().map(|f| f.at(p0.t, &p0.x)).collect();
            orders.extend(pairwise_orders("fd value vs spacing", &hs, &vs));
        }
    }

    let mut checks = Vec::new();
    let art = Artifacts { op: &op, cfg, seed, dpp_levels: &dpp_levels, fd_levels: &fd_levels };
    for suite in &cfg.checks.suites {
        let result = clock.time(&format!("check {suite}"), || run_suite(suite, &art))?;
        checks.push(result);
    }

    let mut report = SolveReport {
        problem: cfg.problem.name.clone(),
        points,
        checks,
        orders,
        timings: clock.timings,
        boundary_contamination: dpp_levels.last().map(|s| s.diagnostics.contamination()),
        boundary_warning: dpp_levels.last().map(|s| s.diagnostics.boundary_warning).unwrap_or(false),
    };

    if !opts.dry_run {
        let dir = opts.out_dir(cfg);
        report.write_csvs(&dir)?;
        if cfg.output.write_fields {
            if let Some(sol) = dpp_levels.last() {
                let file = std::fs::File::create(dir.join("dpp_field.csv"))?;
                let policy = &sol.policy;
                sol.value.write_csv(
                    file,
                    "value",
                    Some(("argmax_control", &|k, node| {
                        if k < policy.grid().steps() {
                            policy.choice(k, node).to_string()
                        } else {
                            String::new()
                        }
                    })),
                )?;
            }
            if let Some(field) = fd_levels.last() {
                let file = std::fs::File::create(dir.join("fd_field.csv"))?;
                field.write_csv(file, "value", None)?;
                let file = std::fs::File::create(dir.join("fd_residuals.csv"))?;
                viscosity_residuals(field, &op)?.write_csv(file)?;
            }
        }
        report.write_text(&dir)?;
    }
    let _ = &mut report;
    Ok(report)
}

/// Refinement tables: configured solver values across grid levels plus the
/// standalone strong-order and zero-noise time-order studies.
pub fn convergence_table(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TableReport> {
    let table_cfg = cfg
        .table
        .as_ref()
        .ok_or_else(|| Error::Input("`table` needs a [table] section in the config".into()))?;
    let seed = opts.seed(cfg);
    let op = cfg.build_operator()?;
    let levels = cfg.levels();
    let mut clock = StageClock::new();
    let mut tables = Vec::new();

    for kind in &table_cfg.kinds {
        match kind.as_str() {
            "fd_space" => {
                let p0 = &cfg.solve.test_points[0];
                let mut values = Vec::new();
                for (i, level) in levels.iter().enumerate() {
                    let field =
                        clock.time(&format!("fd_space level {i}"), || solve_fd_level(&op, cfg, level))?;
                    values.push((level.spacing, field.at(p0.t, &p0.x)));
                }
                // error against the finest level; fit on the coarser ones
                let reference = values.last().unwrap().1;
                let rows: Vec<(f64, Option<f64>, f64)> = values
                    .iter()
                    .take(values.len() - 1)
                    .map(|&(h, v)| (h, Some(v), (v - reference).abs()))
                    .collect();
                let fitted = least_squares_slope(
                    &rows.iter().map(|r| r.0.ln()).collect::<Vec<_>>(),
                    &rows.iter().map(|r| r.2.max(1e-300).ln()).collect::<Vec<_>>(),
                );
                tables.push(OrderTable { name: "fd spatial order".into(), rows, fitted_order: fitted });
            }
            "sde_strong" => {
                for (i, scfg) in table_cfg.sde_strong.iter().enumerate() {
                    let ctrl = scfg.control(op.dim_state(), op.dim_noise())?;
                    let probe = OperatorSpec::new(
                        vec![ctrl],
                        crate::model::DriverSpec::zero(),
                        op.terminal().clone(),
                        op.horizon(),
                        0.0,
                    )?;
                    let est = clock.time(&format!("sde_strong {}", scfg.label), || {
                        estimate_strong_order(
                            &probe,
                            &ConstantPolicy(0),
                            &scfg.x0,
                            scfg.coarse_steps,
                            scfg.levels,
                            scfg.paths,
                            rng::derive(seed, 0x100 + i as u64),
                        )
                    })?;
                    let rows: Vec<(f64, Option<f64>, f64)> =
                        est.points.iter().map(|&(dt, e)| (dt, None, e)).collect();
                    tables.push(OrderTable {
                        name: format!("sde strong order [{}]", scfg.label),
                        rows,
                        fitted_order: est.rate,
                    });
                }
            }
            "bsde_time" => {
                let bcfg = table_cfg.bsde_time.as_ref().expect("validated");
                let rate = bcfg.rate;
                let mut values = Vec::new();
                for &steps in &bcfg.steps {
                    let grid = TimeGrid::new(0.0, op.horizon(), steps)?;
                    let y = solve_bsde_zero_noise(bcfg.terminal, |_, y| rate * y, &grid)?;
                    values.push((grid.dt(), y[0]));
                }
                let reference = values.last().unwrap().1;
                let rows: Vec<(f64, Option<f64>, f64)> = values
                    .iter()
                    .take(values.len() - 1)
                    .map(|&(dt, v)| (dt, Some(v), (v - reference).abs()))
                    .collect();
                let fitted = least_squares_slope(
                    &rows.iter().map(|r| r.0.ln()).collect::<Vec<_>>(),
                    &rows.iter().map(|r| r.2.max(1e-300).ln()).collect::<Vec<_>>(),
                );
                tables.push(OrderTable {
                    name: "zero-noise backward Euler time order".into(),
                    rows,
                    fitted_order: fitted,
                });
            }
            other => return Err(Error::Input(format!("unknown table kind `{other}`"))),
        }
    }

    let report = TableReport { problem: cfg.problem.name.clone(), tables, timings: clock.timings };
    if !opts.dry_run {
        report.write(&opts.out_dir(cfg))?;
    }
    Ok(report)
}
