//! Experiment configuration: a single TOML file describing the problem
//! datum, solver settings, refinement levels, check suites and outputs.

use crate::bsde::RegressionBasis;
use crate::dpp::ExpectationRule;
use crate::error::{Error, Result};
use crate::grid::SpaceGrid;
use crate::model::{CoeffForm, CoefficientField, DriverSpec, OperatorSpec, TerminalSpec};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub solve: SolveConfig,
    /// Refinement levels `(time_steps, spacing, paths)`, coarse to fine;
    /// empty means a single level taken from the solver sections.
    #[serde(default)]
    pub grids: Vec<GridLevel>,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub table: Option<TableConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    #[serde(default)]
    pub ellipticity: f64,
    pub terminal: TerminalConfig,
    pub driver: DriverConfig,
    #[serde(rename = "control")]
    pub controls: Vec<ControlConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub function: String,
    #[serde(default)]
    pub shift: f64,
    pub lipschitz: f64,
    pub growth: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    pub form: String,
    pub rate: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub name: Option<String>,
    pub lipschitz_z: Option<f64>,
    pub monotonicity_mu: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub drift: Option<CoeffFormConfig>,
    pub diffusion: CoeffFormConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoeffFormConfig {
    /// Fixed entries, row-major.
    Constant { values: Vec<f64> },
    /// `out = linear * x + offset`; `linear` holds one row of length `N`
    /// per output entry.
    Affine {
        linear: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Vec<f64>,
    },
    /// Registered function.
    Named { name: String },
}

impl CoeffFormConfig {
    fn build(&self, out_len: usize) -> Result<CoeffForm> {
        Ok(match self {
            CoeffFormConfig::Constant { values } => CoeffForm::Constant(values.clone()),
            CoeffFormConfig::Affine { linear, offset } => {
                let flat: Vec<f64> = linear.iter().flatten().cloned().collect();
                let offset = if offset.is_empty() { vec![0.0; out_len] } else { offset.clone() };
                CoeffForm::Affine { linear: flat, offset }
            }
            CoeffFormConfig::Named { name } => CoeffForm::named(name)?,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default)]
    pub seed: u64,
    pub solvers: Vec<String>,
    pub test_points: Vec<TestPoint>,
    #[serde(default)]
    pub dpp: Option<DppConfig>,
    #[serde(default)]
    pub fd: Option<FdConfig>,
    #[serde(default)]
    pub policy_mc: Option<PolicyMcConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DppConfig {
    pub time_steps: usize,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub spacing: f64,
    #[serde(default = "default_expectation")]
    pub expectation: String,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_expectation() -> String {
    "gauss_hermite".into()
}

fn default_quad_points() -> usize {
    8
}

fn default_mc_samples() -> usize {
    4096
}

impl DppConfig {
    pub fn space_grid(&self, spacing: f64) -> Result<SpaceGrid> {
        SpaceGrid::from_spacing(self.box_lo.clone(), self.box_hi.clone(), spacing)
    }

    pub fn rule(&self) -> Result<ExpectationRule> {
        match self.expectation.as_str() {
            "gauss_hermite" => Ok(ExpectationRule::GaussHermite { points: self.quad_points }),
            "monte_carlo" => Ok(ExpectationRule::MonteCarlo { samples: self.mc_samples }),
            other => Err(Error::Input(format!(
                "unknown expectation rule `{other}` (gauss_hermite | monte_carlo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub spacing: f64,
    /// 0 means: derive the step count from the CFL bound.
    #[serde(default)]
    pub time_steps: usize,
    #[serde(default = "default_cfl_safety")]
    pub cfl_safety: f64,
}

fn default_cfl_safety() -> f64 {
    0.9
}

impl FdConfig {
    pub fn space_grid(&self, spacing: f64) -> Result<SpaceGrid> {
        SpaceGrid::from_spacing(self.box_lo.clone(), self.box_hi.clone(), spacing)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMcConfig {
    pub paths: usize,
    #[serde(default = "default_basis")]
    pub basis: String,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default = "default_picard")]
    pub picard: usize,
}

fn default_basis() -> String {
    "total_degree".into()
}

fn default_degree() -> u32 {
    3
}

fn default_picard() -> usize {
    2
}

impl Default for PolicyMcConfig {
    fn default() -> Self {
        Self { paths: 20_000, basis: default_basis(), degree: default_degree(), picard: default_picard() }
    }
}

impl PolicyMcConfig {
    pub fn regression_basis(&self) -> Result<RegressionBasis> {
        match self.basis.as_str() {
            "total_degree" => Ok(RegressionBasis::TotalDegree(self.degree)),
            "tensor_degree" => Ok(RegressionBasis::TensorDegree(self.degree)),
            other => Err(Error::Input(format!(
                "unknown regression basis `{other}` (total_degree | tensor_degree)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLevel {
    pub time_steps: usize,
    pub spacing: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default)]
    pub suites: Vec<String>,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
}

fn default_sample_count() -> usize {
    400
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub kinds: Vec<String>,
    #[serde(default)]
    pub sde_strong: Vec<SdeStrongConfig>,
    #[serde(default)]
    pub bsde_time: Option<BsdeTimeConfig>,
}

/// A standalone strong-order diagnostic: its own coefficient pair, coupled
/// dyadic grids on shared Brownian paths.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeStrongConfig {
    pub label: String,
    #[serde(default)]
    pub drift: Option<CoeffFormConfig>,
    pub diffusion: CoeffFormConfig,
    #[serde(default)]
    pub lipschitz: f64,
    pub x0: Vec<f64>,
    pub coarse_steps: usize,
    pub levels: usize,
    pub paths: usize,
}

impl SdeStrongConfig {
    pub fn control(&self, state_dim: usize, noise_dim: usize) -> Result<CoefficientField> {
        let drift = match &self.drift {
            Some(d) => d.build(state_dim)?,
            None => CoeffForm::Constant(vec![0.0; state_dim]),
        };
        CoefficientField::new(
            self.label.clone(),
            state_dim,
            noise_dim,
            drift,
            self.diffusion.build(state_dim * noise_dim)?,
            self.lipschitz,
        )
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeTimeConfig {
    /// Driver `f = rate * y` for the zero-noise backward solve.
    pub rate: f64,
    pub terminal: f64,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Also write full value-field / ensemble CSVs at the finest level.
    #[serde(default)]
    pub write_fields: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out_dir(), write_fields: false }
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: format!("cannot read: {e}"),
        })?;
        Self::from_str(&text, path)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let fail = |message: String| Error::Config { path: origin.to_path_buf(), message };
        if self.solve.solvers.is_empty() {
            return Err(fail("at least one solver must be enabled".into()));
        }
        for s in &self.solve.solvers {
            match s.as_str() {
                "dpp" | "fd" | "policy_mc" => {}
                other => return Err(fail(format!("unknown solver `{other}` (dpp | fd | policy_mc)"))),
            }
        }
        if self.solver_enabled("dpp") && self.solve.dpp.is_none() {
            return Err(fail("solver `dpp` enabled but [solve.dpp] missing".into()));
        }
        if self.solver_enabled("fd") && self.solve.fd.is_none() {
            return Err(fail("solver `fd` enabled but [solve.fd] missing".into()));
        }
        if self.solver_enabled("policy_mc") && !self.solver_enabled("dpp") {
            return Err(fail("solver `policy_mc` needs the dpp policy; enable `dpp` too".into()));
        }
        if self.solve.test_points.is_empty() {
            return Err(fail("at least one test point is required".into()));
        }
        for p in &self.solve.test_points {
            if p.x.len() != self.problem.state_dim {
                return Err(fail(format!(
                    "test point {:?} has dimension {}, problem has {}",
                    p.x,
                    p.x.len(),
                    self.problem.state_dim
                )));
            }
            if !(0.0 <= p.t && p.t < self.problem.horizon) {
                return Err(fail(format!("test point time {} outside [0, T)", p.t)));
            }
        }
        for suite in &self.checks.suites {
            if !crate::checks::known_suite(suite) {
                return Err(fail(format!(
                    "unknown check suite `{suite}`; see --list-checks for the known names"
                )));
            }
        }
        for w in self.grids.windows(2) {
            let strictly_finer = w[1].time_steps > w[0].time_steps
                && w[1].spacing < w[0].spacing
                && w[1].paths >= w[0].paths;
            if !strictly_finer {
                return Err(fail(format!(
                    "refinement levels must be strictly ordered coarse to fine, got {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(table) = &self.table {
            for kind in &table.kinds {
                match kind.as_str() {
                    "fd_space" => {
                        if self.grids.len() < 3 {
                            return Err(fail("table kind `fd_space` needs >= 3 grid levels".into()));
                        }
                        if self.solve.fd.is_none() {
                            return Err(fail("table kind `fd_space` needs [solve.fd]".into()));
                        }
                    }
                    "sde_strong" => {
                        if table.sde_strong.is_empty() {
                            return Err(fail("table kind `sde_strong` needs [[table.sde_strong]]".into()));
                        }
                        for c in &table.sde_strong {
                            if c.levels < 2 || c.x0.len() != self.problem.state_dim {
                                return Err(fail(format!(
                                    "sde_strong `{}` needs >= 2 levels and x0 of dimension {}",
                                    c.label, self.problem.state_dim
                                )));
                            }
                        }
                    }
                    "bsde_time" => match &table.bsde_time {
                        Some(b) if b.steps.len() >= 3 => {}
                        _ => {
                            return Err(fail(
                                "table kind `bsde_time` needs [table.bsde_time] with >= 3 step counts"
                                    .into(),
                            ))
                        }
                    },
                    other => return Err(fail(format!("unknown table kind `{other}`"))),
                }
            }
        }
        Ok(())
    }

    pub fn solver_enabled(&self, name: &str) -> bool {
        self.solve.solvers.iter().any(|s| s == name)
    }

    /// Build the problem datum from the `[problem]` section.
    pub fn build_operator(&self) -> Result<OperatorSpec> {
        let p = &self.problem;
        let n = p.state_dim;
        let m = p.noise_dim;
        let mut controls = Vec::with_capacity(p.controls.len());
        for (i, c) in p.controls.iter().enumerate() {
            let label = c.label.clone().unwrap_or_else(|| format!("control{i}"));
            let drift = match &c.drift {
                Some(d) => d.build(n)?,
                None => CoeffForm::Constant(vec![0.0; n]),
            };
            controls.push(CoefficientField::new(
                label,
                n,
                m,
                drift,
                c.diffusion.build(n * m)?,
                c.lipschitz,
            )?);
        }
        let driver = match p.driver.form.as_str() {
            "zero" => DriverSpec::zero(),
            "linear_y" => {
                let rate = p.driver.rate.ok_or_else(|| {
                    Error::Input("driver form `linear_y` needs `rate`".into())
                })?;
                DriverSpec::linear_y(rate)
            }
            "linear_z" => {
                let weights = p.driver.weights.clone().ok_or_else(|| {
                    Error::Input("driver form `linear_z` needs `weights`".into())
                })?;
                DriverSpec::linear_z(weights)
            }
            "named" => {
                let name = p.driver.name.as_deref().ok_or_else(|| {
                    Error::Input("driver form `named` needs `name`".into())
                })?;
                DriverSpec::named(
                    name,
                    p.driver.lipschitz_z.unwrap_or(0.0),
                    p.driver.monotonicity_mu.unwrap_or(0.0),
                )?
            }
            other => {
                return Err(Error::Input(format!(
                    "unknown driver form `{other}` (zero | linear_y | linear_z | named)"
                )))
            }
        };
        let driver = match (p.driver.lipschitz_z, p.driver.monotonicity_mu) {
            (None, None) => driver,
            (lz, mu) => {
                let lz = lz.unwrap_or(driver.lipschitz_z());
                let mu = mu.unwrap_or(driver.monotonicity_mu());
                driver.with_declared(lz, mu)
            }
        };
        let terminal = TerminalSpec::new(&p.terminal.function, p.terminal.lipschitz, p.terminal.growth)?
            .with_shift(p.terminal.shift);
        OperatorSpec::new(controls, driver, terminal, p.horizon, p.ellipticity)
    }

    /// Effective refinement levels: configured ones, or the single level
    /// implied by the solver sections.
    pub fn levels(&self) -> Vec<GridLevel> {
        if !self.grids.is_empty() {
            return self.grids.clone();
        }
        let time_steps = self.solve.dpp.as_ref().map(|d| d.time_steps).unwrap_or(20);
        let spacing = self
            .solve
            .dpp
            .as_ref()
            .map(|d| d.spacing)
            .or(self.solve.fd.as_ref().map(|f| f.spacing))
            .unwrap_or(0.1);
        let paths = self.solve.policy_mc.clone().unwrap_or_default().paths;
        vec![GridLevel { time_steps, spacing, paths }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [problem]
        name = "heat"
        state_dim = 1
        noise_dim = 1
        horizon = 1.0
        ellipticity = 1.0

        [problem.terminal]
        function = "quadratic"
        lipschitz = 12.0
        growth = 7.0

        [problem.driver]
        form = "zero"

        [[problem.control]]
        diffusion = { form = "constant", values = [1.0] }

        [solve]
        solvers = ["dpp"]
        test_points = [{ t = 0.0, x = [0.0] }]

        [solve.dpp]
        time_steps = 10
        box_lo = [-6.0]
        box_hi = [6.0]
        spacing = 0.1
    "#;

    #[test]
    fn minimal_config_builds() {
        let cfg = ExperimentConfig::from_str(MINIMAL, Path::new("mem")).unwrap();
        let op = cfg.build_operator().unwrap();
        assert_eq!(op.controls().len(), 1);
        assert_eq!(op.dim_state(), 1);
        assert_eq!(cfg.levels().len(), 1);
        assert!(cfg.solver_enabled("dpp"));
        assert!(!cfg.solver_enabled("fd"));
    }

    #[test]
    fn parse_error_carries_the_path() {
        let err = ExperimentConfig::from_str("[problem", Path::new("bad.cfg"));
        match err {
            Err(Error::Config { path, .. }) => assert_eq!(path, PathBuf::from("bad.cfg")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_solver_and_missing_section_are_rejected() {
        let cfg = MINIMAL.replace("solvers = [\"dpp\"]", "solvers = [\"magic\"]");
        assert!(ExperimentConfig::from_str(&cfg, Path::new("m")).is_err());
        let cfg = MINIMAL.replace("solvers = [\"dpp\"]", "solvers = [\"fd\"]");
        assert!(ExperimentConfig::from_str(&cfg, Path::new("m")).is_err());
    }

    #[test]
    fn misordered_levels_are_rejected() {
        let cfg = format!(
            "{MINIMAL}\n[[grids]]\ntime_steps = 20\nspacing = 0.1\npaths = 100\n\
             [[grids]]\ntime_steps = 10\nspacing = 0.2\npaths = 100\n"
        );
        assert!(ExperimentConfig::from_str(&cfg, Path::new("m")).is_err());
    }

    #[test]
    fn driver_forms_resolve() {
        let cfg = MINIMAL.replace("form = \"zero\"", "form = \"linear_y\"\nrate = -0.1");
        let op = ExperimentConfig::from_str(&cfg, Path::new("m")).unwrap().build_operator().unwrap();
        assert_eq!(op.driver().monotonicity_mu(), -0.1);
        let cfg = MINIMAL.replace("form = \"zero\"", "form = \"named\"\nname = \"nope\"");
        assert!(ExperimentConfig::from_str(&cfg, Path::new("m"))
            .unwrap()
            .build_operator()
            .is_err());
    }
}
