//! Experiment results: per-point values, check outcomes, refinement orders
//! and stage timings, rendered as text and CSV.

use crate::error::Result;
use crate::sde::csv_err;
use std::io::Write;
use std::path::Path;

/// One solver value at one test point.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub t: f64,
    pub x: Vec<f64>,
    pub solver: String,
    pub value: f64,
    /// Expectation-noise / Monte Carlo standard error estimate (0 for
    /// deterministic rules).
    pub stderr: f64,
    /// Finite-difference oracle value, when the oracle ran.
    pub oracle: Option<f64>,
    /// `|value - oracle| / max(|oracle|, 1)`.
    pub rel_gap: Option<f64>,
}

/// One check suite outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed margin / constant, when meaningful.
    pub worst: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    pub fn pass(name: impl Into<String>, worst: Option<f64>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: true, worst, detail: detail.into() }
    }

    pub fn of(name: impl Into<String>, passed: bool, worst: Option<f64>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, worst, detail: detail.into() }
    }
}

/// Empirical order from one refinement pair (consecutive-difference fit).
#[derive(Debug, Clone)]
pub struct OrderResult {
    pub quantity: String,
    /// Coarser / finer refinement parameter (spacing or step count label).
    pub pair: (f64, f64),
    pub order: f64,
}

#[derive(Debug, Clone)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub problem: String,
    pub points: Vec<PointResult>,
    pub checks: Vec<CheckResult>,
    pub orders: Vec<OrderResult>,
    pub timings: Vec<StageTiming>,
    /// Fraction of one-step lookups clamped at the box boundary (dpp).
    pub boundary_contamination: Option<f64>,
    pub boundary_warning: bool,
}

impl SolveReport {
    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut push = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        push(format!("problem: {}", self.problem));
        push(String::new());
        push("test points".into());
        for p in &self.points {
            let oracle = p
                .oracle
                .map(|o| format!("  oracle {o:.6}  rel_gap {:.2e}", p.rel_gap.unwrap_or(f64::NAN)))
                .unwrap_or_default();
            push(format!(
                "  ({:.3}, {:?})  {:<9} {:+.6} +- {:.2e}{}",
                p.t, p.x, p.solver, p.value, p.stderr, oracle
            ));
        }
        if let Some(c) = self.boundary_contamination {
            push(format!(
                "boundary contamination: {:.3e}{}",
                c,
                if self.boundary_warning { "  [WARNING: box too small]" } else { "" }
            ));
        }
        if !self.orders.is_empty() {
            push(String::new());
            push("refinement orders".into());
            for o in &self.orders {
                push(format!(
                    "  {:<28} pair ({:.4}, {:.4})  order {:.3}",
                    o.quantity, o.pair.0, o.pair.1, o.order
                ));
            }
        }
        if !self.checks.is_empty() {
            push(String::new());
            push("checks".into());
            for c in &self.checks {
                push(format!(
                    "  [{}] {:<22} {}{}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst.map(|w| format!("worst {w:+.3e}  ")).unwrap_or_default(),
                    c.detail
                ));
            }
        }
        if !self.timings.is_empty() {
            push(String::new());
            push("wall clock".into());
            for t in &self.timings {
                push(format!("  {:<28} {:8.3} s", t.stage, t.seconds));
            }
        }
        push(String::new());
        push(format!(
            "overall: {}",
            if self.all_checks_passed() { "PASS" } else { "FAIL" }
        ));
        out
    }

    /// Write `points.csv`, `checks.csv` and `orders.csv` into `dir`.
    /// Timings are deliberately excluded: the CSV artifacts of a seeded run
    /// are byte-reproducible.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dim = self.points.first().map(|p| p.x.len()).unwrap_or(0);
        {
            let file = std::fs::File::create(dir.join("points.csv"))?;
            let mut w = csv::Writer::from_writer(file);
            let mut header = vec!["t".to_string()];
            header.extend((1..=dim).map(|i| format!("x_{i}")));
            header.extend(["solver", "value", "stderr", "oracle", "rel_gap"].map(String::from));
            w.write_record(&header).map_err(csv_err)?;
            for p in &self.points {
                let mut row = vec![format!("{}", p.t)];
                row.extend(p.x.iter().map(|v| format!("{v}")));
                row.push(p.solver.clone());
                row.push(format!("{}", p.value));
                row.push(format!("{}", p.stderr));
                row.push(p.oracle.map(|o| format!("{o}")).unwrap_or_default());
                row.push(p.rel_gap.map(|g| format!("{g}")).unwrap_or_default());
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        {
            let file = std::fs::File::create(dir.join("checks.csv"))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["check", "passed", "worst", "detail"]).map_err(csv_err)?;
            for c in &self.checks {
                w.write_record([
                    c.name.clone(),
                    c.passed.to_string(),
                    c.worst.map(|v| format!("{v}")).unwrap_or_default(),
                    c.detail.clone(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
        {
            let file = std::fs::File::create(dir.join("orders.csv"))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["quantity", "coarse", "fine", "order"]).map_err(csv_err)?;
            for o in &self.orders {
                w.write_record([
                    o.quantity.clone(),
                    format!("{}", o.pair.0),
                    format!("{}", o.pair.1),
                    format!("{}", o.order),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn write_text(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("report.txt"))?;
        f.write_all(self.render_text().as_bytes())?;
        Ok(())
    }
}

/// One convergence table (one refinement study).
#[derive(Debug, Clone)]
pub struct OrderTable {
    pub name: String,
    /// `(refinement parameter, value, error vs reference)` rows, coarse
    /// first; pure error studies carry no per-level value.
    pub rows: Vec<(f64, Option<f64>, f64)>,
    pub fitted_order: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TableReport {
    pub problem: String,
    pub tables: Vec<OrderTable>,
    pub timings: Vec<StageTiming>,
}

impl TableReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("problem: {}\n", self.problem));
        for t in &self.tables {
            out.push_str(&format!("\n{}  (fitted order {:.3})\n", t.name, t.fitted_order));
            out.push_str("  parameter        value            error\n");
            for (p, v, e) in &t.rows {
                let v = v.map(|v| format!("{v:<16.8}")).unwrap_or_else(|| " ".repeat(16));
                out.push_str(&format!("  {p:<14.6e} {v} {e:.6e}\n"));
            }
        }
        if !self.timings.is_empty() {
            out.push('\n');
            for t in &self.timings {
                out.push_str(&format!("  {:<28} {:8.3} s\n", t.stage, t.seconds));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join("orders_table.csv"))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["table", "parameter", "value", "error", "fitted_order"]).map_err(csv_err)?;
        for t in &self.tables {
            for (p, v, e) in &t.rows {
                w.write_record([
                    t.name.clone(),
                    format!("{p}"),
                    v.map(|v| format!("{v}")).unwrap_or_default(),
                    format!("{e}"),
                    format!("{}", t.fitted_order),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        let mut f = std::fs::File::create(dir.join("table.txt"))?;
        f.write_all(self.render_text().as_bytes())?;
        Ok(())
    }
}
