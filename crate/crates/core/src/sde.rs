//! Forward simulation of the controlled SDE by Euler-Maruyama,
//!
//! ```text
//! X_{k+1} = X_k + sigma(t_k, X_k) dW_k + b(t_k, X_k) dt,
//! ```
//!
//! with `(b, sigma)` chosen per step by a feedback policy. Brownian
//! increments come from a counter-based store keyed on `(seed, path, step)`,
//! so any increment can be regenerated bit-identically: restarting a path
//! mid-flight or coupling grids of different resolution on the same Brownian
//! path needs no stored noise.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{OpWorkspace, OperatorSpec};
use crate::rng;
use rayon::prelude::*;
use std::io::Write;

/// Counter-based Brownian increment store: `dW(p, k) ~ N(0, dt I_M)` is a
/// pure function of `(seed, p, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStore {
    seed: u64,
    paths: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    key: u64,
}

impl NoiseStore {
    pub fn new(seed: u64, paths: usize, steps: usize, dim: usize, dt: f64) -> Result<Self> {
        if paths == 0 || steps == 0 || dim == 0 {
            return Err(Error::Input("noise store needs paths, steps, dim >= 1".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Input(format!("noise store needs dt > 0, got {dt}")));
        }
        Ok(Self { seed, paths, steps, dim, dt, key: rng::derive(seed, 0xb0_05) })
    }

    pub fn for_grid(seed: u64, paths: usize, grid: &TimeGrid, dim: usize) -> Result<Self> {
        Self::new(seed, paths, grid.steps(), dim, grid.dt())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// The increment `dW_k^{(p)}`, written into `out` (length `M`).
    #[inline]
    pub fn increment(&self, path: usize, step: usize, out: &mut [f64]) {
        debug_assert!(path < self.paths && step < self.steps);
        debug_assert_eq!(out.len(), self.dim);
        let key = rng::derive(rng::derive(self.key, path as u64), step as u64);
        let scale = self.dt.sqrt();
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = rng::normal_at(key, j as u64) * scale;
        }
    }
}

/// Per-step increment source; implemented by [`NoiseStore`] and by the
/// coarsened view used for strong-convergence coupling.
trait Increments: Sync {
    fn dt(&self) -> f64;
    fn increment(&self, path: usize, step: usize, out: &mut [f64]);
}

impl Increments for NoiseStore {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn increment(&self, path: usize, step: usize, out: &mut [f64]) {
        NoiseStore::increment(self, path, step, out)
    }
}

/// Coarse view of a fine store: one coarse increment is the sum of `factor`
/// consecutive fine increments on the same Brownian path.
struct Coarsened<'a> {
    fine: &'a NoiseStore,
    factor: usize,
}

impl Increments for Coarsened<'_> {
    fn dt(&self) -> f64 {
        self.fine.dt * self.factor as f64
    }

    fn increment(&self, path: usize, step: usize, out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = [0.0; 8];
        let buf = &mut buf[..self.fine.dim.min(8)];
        if self.fine.dim <= 8 {
            for s in 0..self.factor {
                self.fine.increment(path, step * self.factor + s, buf);
                for (o, v) in out.iter_mut().zip(buf.iter()) {
                    *o += v;
                }
            }
        } else {
            let mut heap = vec![0.0; self.fine.dim];
            for s in 0..self.factor {
                self.fine.increment(path, step * self.factor + s, &mut heap);
                for (o, v) in out.iter_mut().zip(heap.iter()) {
                    *o += v;
                }
            }
        }
    }
}

/// Chooses the control index applied on step `k` from state `x`.
pub trait StepPolicy: Sync {
    fn choose(&self, step: usize, t: f64, x: &[f64]) -> usize;
}

/// Always the same control.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub usize);

impl StepPolicy for ConstantPolicy {
    fn choose(&self, _step: usize, _t: f64, _x: &[f64]) -> usize {
        self.0
    }
}

impl<F> StepPolicy for F
where
    F: Fn(usize, f64, &[f64]) -> usize + Sync,
{
    fn choose(&self, step: usize, t: f64, x: &[f64]) -> usize {
        self(step, t, x)
    }
}

/// Initial condition: one point shared by all paths, or one point per path.
#[derive(Debug, Clone, Copy)]
pub enum InitialState<'a> {
    Point(&'a [f64]),
    /// Row-major `paths x N`.
    PerPath(&'a [f64]),
}

/// Optional stopping: freeze a path at the first grid node outside the box.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum StopRule {
    #[default]
    None,
    FirstExitBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl StopRule {
    fn exited(&self, x: &[f64]) -> bool {
        match self {
            StopRule::None => false,
            StopRule::FirstExitBox { lo, hi } => {
                x.iter().zip(lo.iter().zip(hi)).any(|(v, (a, b))| v < a || v > b)
            }
        }
    }
}

/// `P` forward trajectories on a shared time grid, with the control trace
/// and the (regenerable) noise that produced them.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim_state: usize,
    noise: NoiseStore,
    stop: StopRule,
    /// Path-major states: `[p * (K+1) + k] * N + i`.
    states: Vec<f64>,
    /// Control used on step `k` of path `p`: `[p * K + k]`.
    controls: Vec<u32>,
    /// First grid node outside the stop box; `K` when the path never exits.
    exit_steps: Vec<usize>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.noise.paths()
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn noise(&self) -> &NoiseStore {
        &self.noise
    }

    pub fn stop_rule(&self) -> &StopRule {
        &self.stop
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dim_state;
        let base = (path * (self.grid.steps() + 1) + step) * n;
        &self.states[base..base + n]
    }

    #[inline]
    pub fn control(&self, path: usize, step: usize) -> usize {
        self.controls[path * self.grid.steps() + step] as usize
    }

    /// First-exit step of path `p` (`K` when it never exits).
    pub fn exit_step(&self, path: usize) -> usize {
        self.exit_steps[path]
    }

    /// Apply `f` to the terminal state of every path.
    pub fn map_terminal<T: Send>(&self, f: impl Fn(&[f64]) -> T + Sync) -> Vec<T> {
        (0..self.paths()).map(|p| f(self.state(p, self.grid.steps()))).collect()
    }

    /// CSV rows `path, step, time, x_1..x_N, control_index`; the terminal row
    /// leaves the control cell empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.dim_state;
        let mut header = vec!["path".to_string(), "step".into(), "time".into()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("control_index".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for p in 0..self.paths() {
            for k in 0..=self.grid.steps() {
                row.clear();
                row.push(p.to_string());
                row.push(k.to_string());
                row.push(format!("{}", self.grid.node(k)));
                for v in self.state(p, k) {
                    row.push(format!("{v}"));
                }
                row.push(if k < self.grid.steps() {
                    self.control(p, k).to_string()
                } else {
                    String::new()
                });
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv write failed: {e}"))
}

/// One Euler-Maruyama path segment; shared by fresh simulation and restart so
/// both run the exact same arithmetic.
#[allow(clippy::too_many_arguments)]
fn step_segment(
    op: &OperatorSpec,
    policy: &dyn StepPolicy,
    grid: &TimeGrid,
    noise: &dyn Increments,
    stop: &StopRule,
    path: usize,
    from_step: usize,
    states: &mut [f64],
    controls: &mut [u32],
    exit: &mut usize,
    ws: &mut OpWorkspace,
    dw: &mut [f64],
) -> Result<()> {
    let n = op.dim_state();
    let steps = grid.steps();
    let dt = grid.dt();
    for k in from_step..steps {
        let (head, tail) = states.split_at_mut((k + 1) * n);
        let x = &head[k * n..];
        if *exit == steps && stop.exited(x) {
            *exit = k;
        }
        let j = policy.choose(k, grid.node(k), x);
        if j >= op.controls().len() {
            return Err(Error::Input(format!(
                "policy chose control {j}, but only {} controls exist",
                op.controls().len()
            )));
        }
        controls[k] = j as u32;
        let next = &mut tail[..n];
        if *exit < steps {
            next.copy_from_slice(x);
            continue;
        }
        let ctrl = op.control(j);
        ctrl.drift(grid.node(k), x, &mut ws.b);
        ctrl.diffusion(grid.node(k), x, &mut ws.sigma);
        noise.increment(path, k, dw);
        let m = op.dim_noise();
        for i in 0..n {
            let mut acc = x[i];
            for jj in 0..m {
                acc += ws.sigma[i * m + jj] * dw[jj];
            }
            acc += ws.b[i] * dt;
            if !acc.is_finite() {
                return Err(Error::BlowUp { path, step: k });
            }
            next[i] = acc;
        }
    }
    // exit may happen exactly at the terminal node
    if *exit == steps && steps > 0 {
        let x = &states[steps * n..(steps + 1) * n];
        if stop.exited(x) {
            *exit = steps;
        }
    }
    Ok(())
}

/// Simulate `noise.paths()` forward trajectories under `policy`.
pub fn simulate_forward(
    policy: &impl StepPolicy,
    op: &OperatorSpec,
    grid: &TimeGrid,
    x0: InitialState,
    noise: &NoiseStore,
    stop: StopRule,
) -> Result<PathEnsemble> {
    let n = op.dim_state();
    if noise.dim() != op.dim_noise() {
        return Err(Error::Dimension(format!(
            "noise dim {} != operator noise dim {}",
            noise.dim(),
            op.dim_noise()
        )));
    }
    if noise.steps() < grid.steps() {
        return Err(Error::Input(format!(
            "noise store holds {} steps, grid needs {}",
            noise.steps(),
            grid.steps()
        )));
    }
    if (noise.dt() - grid.dt()).abs() > 1e-12 * grid.dt().max(1.0) {
        return Err(Error::Input(format!(
            "noise dt {} does not match grid dt {}",
            noise.dt(),
            grid.dt()
        )));
    }
    match x0 {
        InitialState::Point(x) if x.len() != n => {
            return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", x.len())))
        }
        InitialState::PerPath(x) if x.len() != n * noise.paths() => {
            return Err(Error::Dimension(format!(
                "per-path x0 has {} entries, expected {}",
                x.len(),
                n * noise.paths()
            )))
        }
        _ => {}
    }
    let finite = match x0 {
        InitialState::Point(x) | InitialState::PerPath(x) => x.iter().all(|v| v.is_finite()),
    };
    if !finite {
        return Err(Error::Input("initial condition must be finite".into()));
    }

    let steps = grid.steps();
    let paths = noise.paths();
    let per_path: Result<Vec<(Vec<f64>, Vec<u32>, usize)>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut states = vec![0.0; (steps + 1) * n];
            let mut controls = vec![0u32; steps];
            let mut exit = steps;
            match x0 {
                InitialState::Point(x) => states[..n].copy_from_slice(x),
                InitialState::PerPath(x) => states[..n].copy_from_slice(&x[p * n..(p + 1) * n]),
            }
            let mut ws = OpWorkspace::for_op(op);
            let mut dw = vec![0.0; op.dim_noise()];
            step_segment(
                op, policy, grid, noise, &stop, p, 0, &mut states, &mut controls, &mut exit,
                &mut ws, &mut dw,
            )?;
            Ok((states, controls, exit))
        })
        .collect();
    let per_path = per_path?;

    let mut states = Vec::with_capacity(paths * (steps + 1) * n);
    let mut controls = Vec::with_capacity(paths * steps);
    let mut exit_steps = Vec::with_capacity(paths);
    for (s, c, e) in per_path {
        states.extend_from_slice(&s);
        controls.extend_from_slice(&c);
        exit_steps.push(e);
    }
    Ok(PathEnsemble {
        grid: grid.clone(),
        dim_state: n,
        noise: noise.clone(),
        stop,
        states,
        controls,
        exit_steps,
    })
}

/// Resimulate from the states at `restart_step` with the same noise store;
/// the tail `k >= restart_step` is bit-identical to the original ensemble
/// (discrete flow property).
pub fn restart_flow(
    ensemble: &PathEnsemble,
    restart_step: usize,
    op: &OperatorSpec,
    policy: &impl StepPolicy,
) -> Result<PathEnsemble> {
    let steps = ensemble.grid.steps();
    if restart_step > steps {
        return Err(Error::Input(format!(
            "restart step {restart_step} beyond grid with {steps} steps"
        )));
    }
    if op.dim_state() != ensemble.dim_state || op.dim_noise() != ensemble.noise.dim() {
        return Err(Error::Dimension("operator dims do not match the ensemble".into()));
    }
    let n = ensemble.dim_state;
    let paths = ensemble.paths();
    let per_path: Result<Vec<(Vec<f64>, Vec<u32>, usize)>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut states = vec![0.0; (steps + 1) * n];
            let mut controls = vec![0u32; steps];
            // keep the prefix; it is part of the flow identity
            for k in 0..=restart_step {
                states[k * n..(k + 1) * n].copy_from_slice(ensemble.state(p, k));
            }
            for k in 0..restart_step.min(steps) {
                controls[k] = ensemble.controls[p * steps + k];
            }
            // recover the exit state of the prefix from the stored states
            let mut exit = steps;
            for k in 0..=restart_step {
                if ensemble.stop.exited(&states[k * n..(k + 1) * n]) {
                    exit = k;
                    break;
                }
            }
            let mut ws = OpWorkspace::for_op(op);
            let mut dw = vec![0.0; op.dim_noise()];
            step_segment(
                op,
                policy,
                &ensemble.grid,
                &ensemble.noise,
                &ensemble.stop,
                p,
                restart_step,
                &mut states,
                &mut controls,
                &mut exit,
                &mut ws,
                &mut dw,
            )?;
            Ok((states, controls, exit))
        })
        .collect();
    let per_path = per_path?;

    let mut states = Vec::with_capacity(paths * (steps + 1) * n);
    let mut controls = Vec::with_capacity(paths * steps);
    let mut exit_steps = Vec::with_capacity(paths);
    for (s, c, e) in per_path {
        states.extend_from_slice(&s);
        controls.extend_from_slice(&c);
        exit_steps.push(e);
    }
    Ok(PathEnsemble {
        grid: ensemble.grid.clone(),
        dim_state: n,
        noise: ensemble.noise.clone(),
        stop: ensemble.stop.clone(),
        states,
        controls,
        exit_steps,
    })
}

/// Empirical strong convergence order by coupled grid refinement.
///
/// Errors are measured against a reference grid 8x finer than the finest
/// fitted level, on the same Brownian paths; the extra refinement keeps the
/// reference's own error below the fit resolution (comparing directly
/// against the finest fitted level inflates the slope near the fine end).
#[derive(Debug, Clone)]
pub struct StrongOrderEstimate {
    /// Least-squares slope of `ln E|X_T^level - X_T^reference|` against
    /// `ln dt`. `+inf` when every level error sits at the rounding floor
    /// (the scheme is exact for the configuration, so no finite order is
    /// measurable).
    pub rate: f64,
    /// `(dt, mean terminal error)` per level, coarse to fine.
    pub points: Vec<(f64, f64)>,
    /// Levels excluded from the fit because the error was at rounding level.
    pub floored_levels: usize,
}

/// Terminal states under `increments` without materializing whole paths.
fn terminal_states(
    op: &OperatorSpec,
    policy: &(impl StepPolicy + ?Sized),
    increments: &dyn Increments,
    steps: usize,
    t0: f64,
    x0: &[f64],
    paths: usize,
) -> Result<Vec<f64>> {
    let n = op.dim_state();
    let m = op.dim_noise();
    let dt = increments.dt();
    let out: Result<Vec<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut x = x0.to_vec();
            let mut next = vec![0.0; n];
            let mut ws = OpWorkspace::for_op(op);
            let mut dw = vec![0.0; m];
            for k in 0..steps {
                let t = t0 + dt * k as f64;
                let j = policy.choose(k, t, &x);
                let ctrl = op.control(j);
                ctrl.drift(t, &x, &mut ws.b);
                ctrl.diffusion(t, &x, &mut ws.sigma);
                increments.increment(p, k, &mut dw);
                for i in 0..n {
                    let mut acc = x[i];
                    for jj in 0..m {
                        acc += ws.sigma[i * m + jj] * dw[jj];
                    }
                    acc += ws.b[i] * dt;
                    if !acc.is_finite() {
                        return Err(Error::BlowUp { path: p, step: k });
                    }
                    next[i] = acc;
                }
                std::mem::swap(&mut x, &mut next);
            }
            Ok(x)
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

/// Couple `levels` dyadic grids on the same Brownian paths (fine increments
/// summed for coarse steps) and fit the strong order from the terminal errors
/// against the finest level.
#[allow(clippy::too_many_arguments)]
pub fn estimate_strong_order(
    op: &OperatorSpec,
    policy: &impl StepPolicy,
    x0: &[f64],
    coarse_steps: usize,
    levels: usize,
    paths: usize,
    seed: u64,
) -> Result<StrongOrderEstimate> {
    if levels < 2 {
        return Err(Error::Input("strong-order estimate needs at least 2 levels".into()));
    }
    if coarse_steps == 0 || paths == 0 {
        return Err(Error::Input("strong-order estimate needs steps and paths >= 1".into()));
    }
    let n = op.dim_state();
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    const REFERENCE_EXTRA: usize = 3; // reference is 2^3 finer than the finest fitted level
    let fine_steps = coarse_steps << (levels - 1 + REFERENCE_EXTRA);
    let dt_fine = op.horizon() / fine_steps as f64;
    let fine = NoiseStore::new(seed, paths, fine_steps, op.dim_noise(), dt_fine)?;
    let reference = terminal_states(op, policy, &fine, fine_steps, 0.0, x0, paths)?;

    let floor = 1e-12 * (1.0 + x0.iter().map(|v| v * v).sum::<f64>().sqrt());
    let mut points = Vec::with_capacity(levels);
    for level in 0..levels {
        let factor = 1usize << (levels - 1 - level + REFERENCE_EXTRA);
        let coarse = Coarsened { fine: &fine, factor };
        let steps = fine_steps / factor;
        let term = terminal_states(op, policy, &coarse, steps, 0.0, x0, paths)?;
        let mut err = 0.0;
        for p in 0..paths {
            let mut d2 = 0.0;
            for i in 0..n {
                let d = term[p * n + i] - reference[p * n + i];
                d2 += d * d;
            }
            err += d2.sqrt();
        }
        points.push((coarse.dt(), err / paths as f64));
    }

    let usable: Vec<(f64, f64)> = points.iter().cloned().filter(|&(_, e)| e > floor).collect();
    let floored = points.len() - usable.len();
    let rate = if usable.len() < 2 {
        f64::INFINITY
    } else {
        least_squares_slope(
            &usable.iter().map(|&(dt, _)| dt.ln()).collect::<Vec<_>>(),
            &usable.iter().map(|&(_, e)| e.ln()).collect::<Vec<_>>(),
        )
    };
    Ok(StrongOrderEstimate { rate, points, floored_levels: floored })
}

/// Least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffForm, CoefficientField, DriverSpec, TerminalSpec};

    fn op_with(controls: Vec<CoefficientField>) -> OperatorSpec {
        OperatorSpec::new(
            controls,
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            0.0,
        )
        .unwrap()
    }

    fn ou_control() -> CoefficientField {
        CoefficientField::new(
            "ou",
            1,
            1,
            CoeffForm::Affine { linear: vec![-1.0], offset: vec![0.0] },
            CoeffForm::Constant(vec![0.0]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_drift_is_exact_for_constant_b() {
        // b = 1, sigma = 0: X_T = 1 exactly for every path and step count
        let op = op_with(vec![CoefficientField::scalar("c", 1.0, 0.0)]);
        for steps in [1, 7, 50] {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let noise = NoiseStore::for_grid(1, 3, &grid, 1).unwrap();
            let ens = simulate_forward(
                &ConstantPolicy(0),
                &op,
                &grid,
                InitialState::Point(&[0.0]),
                &noise,
                StopRule::None,
            )
            .unwrap();
            for p in 0..3 {
                let x = ens.state(p, steps)[0];
                assert!((x - 1.0).abs() < 1e-12, "steps={steps}, x={x}");
            }
        }
    }

    #[test]
    fn brownian_moments() {
        // b = 0, sigma = 1: X_T ~ N(0, 1)
        let op = op_with(vec![CoefficientField::scalar("c", 0.0, 1.0)]);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let paths = 100_000;
        let noise = NoiseStore::for_grid(11, paths, &grid, 1).unwrap();
        let ens = simulate_forward(
            &ConstantPolicy(0),
            &op,
            &grid,
            InitialState::Point(&[0.0]),
            &noise,
            StopRule::None,
        )
        .unwrap();
        let terminal: Vec<f64> = ens.map_terminal(|x| x[0]);
        let mean = terminal.iter().sum::<f64>() / paths as f64;
        let var = terminal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (paths - 1) as f64;
        assert!(mean.abs() <= 3.0 / (paths as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn linear_ode_error_and_richardson_order() {
        // b(x) = -x, sigma = 0: the explicit Euler error against e^{-1} is
        // first order; the K=2000 run halves it (Richardson comparison).
        let op = op_with(vec![ou_control()]);
        let solve = |steps: usize| -> f64 {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let noise = NoiseStore::for_grid(5, 1, &grid, 1).unwrap();
            let ens = simulate_forward(
                &ConstantPolicy(0),
                &op,
                &grid,
                InitialState::Point(&[1.0]),
                &noise,
                StopRule::None,
            )
            .unwrap();
            ens.state(0, steps)[0]
        };
        let x1000 = solve(1000);
        let x2000 = solve(2000);
        let exact = (-1.0f64).exp();
        assert!((x1000 - exact).abs() <= 2e-3);
        let richardson = 2.0 * x2000 - x1000;
        assert!((richardson - exact).abs() < (x2000 - exact).abs() / 4.0);
    }

    #[test]
    fn identical_seeds_give_bit_identical_ensembles() {
        let op = op_with(vec![CoefficientField::scalar("c", 0.2, 0.7)]);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let run = || {
            let noise = NoiseStore::for_grid(99, 64, &grid, 1).unwrap();
            simulate_forward(
                &ConstantPolicy(0),
                &op,
                &grid,
                InitialState::Point(&[0.3]),
                &noise,
                StopRule::None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.states.len(), b.states.len());
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn restart_tail_is_bit_identical() {
        // multiplicative sigma(x) = x so the tail genuinely depends on X_r
        let gbm = CoefficientField::new(
            "gbm",
            1,
            1,
            CoeffForm::Constant(vec![0.0]),
            CoeffForm::Affine { linear: vec![1.0], offset: vec![0.0] },
            1.0,
        )
        .unwrap();
        let op = op_with(vec![gbm]);
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let noise = NoiseStore::for_grid(7, 50, &grid, 1).unwrap();
        let ens = simulate_forward(
            &ConstantPolicy(0),
            &op,
            &grid,
            InitialState::Point(&[1.0]),
            &noise,
            StopRule::None,
        )
        .unwrap();
        for r in [0, 16, 32] {
            let re = restart_flow(&ens, r, &op, &ConstantPolicy(0)).unwrap();
            for p in 0..ens.paths() {
                for k in 0..=grid.steps() {
                    let a = ens.state(p, k);
                    let b = re.state(p, k);
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.to_bits(), y.to_bits(), "r={r} p={p} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn strong_order_additive_exact_case() {
        // b = 0, sigma = 1: Euler is exact at the nodes, so every coupled
        // error sits at the rounding floor and the estimate reports "exact".
        let op = op_with(vec![CoefficientField::scalar("c", 0.0, 1.0)]);
        let est = estimate_strong_order(&op, &ConstantPolicy(0), &[0.0], 8, 4, 2000, 13).unwrap();
        assert!(est.rate >= 0.8, "rate {}", est.rate);
        assert!(est.rate.is_infinite());
        assert_eq!(est.floored_levels, est.points.len());
    }

    #[test]
    fn strong_order_ode_case() {
        // b(x) = -x, sigma = 0: explicit Euler order 1
        let op = op_with(vec![ou_control()]);
        let est = estimate_strong_order(&op, &ConstantPolicy(0), &[1.0], 8, 5, 4, 13).unwrap();
        assert!((est.rate - 1.0).abs() <= 0.2, "rate {}", est.rate);
    }

    #[test]
    fn strong_order_multiplicative_case() {
        // sigma(x) = 0.5 x: classical strong order 1/2
        let gbm = CoefficientField::new(
            "gbm",
            1,
            1,
            CoeffForm::Constant(vec![0.0]),
            CoeffForm::Affine { linear: vec![0.5], offset: vec![0.0] },
            0.5,
        )
        .unwrap();
        let op = op_with(vec![gbm]);
        let est = estimate_strong_order(&op, &ConstantPolicy(0), &[1.0], 8, 5, 20_000, 21).unwrap();
        assert!(est.rate >= 0.45, "rate {}", est.rate);
        assert!(est.rate <= 0.75, "rate {}", est.rate);
    }

    #[test]
    fn multiplicative_euler_matches_exact_gbm_on_shared_paths() {
        // independent oracle for the coupled-refinement estimate: the exact
        // solution X_T = x0 exp(-s^2 T / 2 + s W_T) on the same increments
        let s = 0.5;
        let gbm = CoefficientField::new(
            "gbm",
            1,
            1,
            CoeffForm::Constant(vec![0.0]),
            CoeffForm::Affine { linear: vec![s], offset: vec![0.0] },
            s,
        )
        .unwrap();
        let op = op_with(vec![gbm]);
        let paths = 20_000;
        let mut errs = Vec::new();
        let mut dts = Vec::new();
        for steps in [16usize, 32, 64, 128] {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let noise = NoiseStore::for_grid(3, paths, &grid, 1).unwrap();
            let ens = simulate_forward(
                &ConstantPolicy(0),
                &op,
                &grid,
                InitialState::Point(&[1.0]),
                &noise,
                StopRule::None,
            )
            .unwrap();
            let mut dw = [0.0];
            let mut err = 0.0;
            for p in 0..paths {
                let mut wt = 0.0;
                for k in 0..steps {
                    noise.increment(p, k, &mut dw);
                    wt += dw[0];
                }
                let exact = (-(s * s) / 2.0 + s * wt).exp();
                err += (ens.state(p, steps)[0] - exact).abs();
            }
            errs.push((err / paths as f64).ln());
            dts.push(grid.dt().ln());
        }
        let slope = least_squares_slope(&dts, &errs);
        assert!((0.4..=0.7).contains(&slope), "slope {slope}");
    }

    #[test]
    fn first_exit_freezes_paths() {
        let op = op_with(vec![CoefficientField::scalar("c", 0.0, 1.0)]);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let noise = NoiseStore::for_grid(2, 500, &grid, 1).unwrap();
        let stop = StopRule::FirstExitBox { lo: vec![-0.5], hi: vec![0.5] };
        let ens = simulate_forward(
            &ConstantPolicy(0),
            &op,
            &grid,
            InitialState::Point(&[0.0]),
            &noise,
            stop,
        )
        .unwrap();
        let mut exited = 0;
        for p in 0..ens.paths() {
            let tau = ens.exit_step(p);
            if tau < grid.steps() {
                exited += 1;
                let frozen = ens.state(p, tau).to_vec();
                assert!(frozen[0].abs() > 0.5);
                for k in tau..=grid.steps() {
                    assert_eq!(ens.state(p, k), &frozen[..]);
                }
            }
        }
        // with sigma = 1 over [0,1] most paths leave [-0.5, 0.5]
        assert!(exited > 300, "only {exited} exits");
    }

    #[test]
    fn stability_in_initial_data_on_shared_noise() {
        // E sup_k |X_k - X'_k|^2 <= c |x0 - x0'|^2 with c stable in K
        let gbm = CoefficientField::new(
            "gbm",
            1,
            1,
            CoeffForm::Affine { linear: vec![-0.5], offset: vec![0.0] },
            CoeffForm::Affine { linear: vec![0.5], offset: vec![0.0] },
            1.0,
        )
        .unwrap();
        let op = op_with(vec![gbm]);
        let mut cs = Vec::new();
        for steps in [32usize, 64] {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let paths = 4000;
            let noise = NoiseStore::for_grid(17, paths, &grid, 1).unwrap();
            let run = |x0: f64| {
                simulate_forward(
                    &ConstantPolicy(0),
                    &op,
                    &grid,
                    InitialState::Point(&[x0]),
                    &noise,
                    StopRule::None,
                )
                .unwrap()
            };
            let (d, dd) = (run(1.0), run(1.1));
            let mut mean_sup = 0.0;
            for p in 0..paths {
                let mut sup = 0.0f64;
                for k in 0..=steps {
                    sup = sup.max((d.state(p, k)[0] - dd.state(p, k)[0]).abs());
                }
                mean_sup += sup * sup;
            }
            cs.push(mean_sup / paths as f64 / (0.1f64 * 0.1));
        }
        assert!(cs.iter().all(|c| c.is_finite() && *c < 20.0), "{cs:?}");
        let rel = (cs[0] - cs[1]).abs() / cs[1];
        assert!(rel < 0.25, "fitted constants {cs:?} drift {rel}");
    }
}
