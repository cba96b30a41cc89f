//! Backward dynamic programming for the sup-envelope value
//!
//! ```text
//! u(t_K, .) = g
//! u(t_k, x) = max over controls j of
//!     E[u(t_{k+1}, x + b_j dt + sigma_j sqrt(dt) xi)]
//!     + dt f(t_k, x, b_j, sigma_j, vbar_j, z_j),     xi ~ N(0, I_M),
//! ```
//!
//! with `vbar_j` the continuation expectation, `z_j` the projection
//! `E[u(t_{k+1}, .) xi^T] / sqrt(dt)` (a quadrature estimate of
//! `(grad u)^T sigma_j`), and the argmax recorded as a feedback policy. The
//! essential supremum over path-dependent controls is realized as this
//! pointwise maximum over the finite family: piecewise-constant Markovian
//! feedback built from the family is dense among admissible controls, and
//! on the grid the recursion is solved exactly by feedback, so richer
//! controls cannot improve the discrete value.
//!
//! Expectations use tensor Gauss-Hermite quadrature or seeded antithetic
//! Monte Carlo. Off-lattice lookups clamp to the box (so every one-step
//! update is a monotone convex combination) and are counted; test points are
//! expected to sit well inside the box, at least `3 sqrt(max ||sigma
//! sigma^T|| T)` from the faces.

use crate::bsde::{solve_bsde_lsmc, ControlTraceDriver, RegressionBasis};
use crate::error::{Error, Result};
use crate::field::ValueField;
use crate::grid::{SpaceGrid, TimeGrid};
use crate::model::{OpWorkspace, OperatorSpec};
use crate::quad::GaussHermite;
use crate::rng;
use crate::sde::{simulate_forward, ConstantPolicy, InitialState, NoiseStore, StepPolicy, StopRule};
use rayon::prelude::*;

/// How one-step expectations over the Gaussian increment are computed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpectationRule {
    /// Tensor Gauss-Hermite rule with `points` nodes per noise axis.
    GaussHermite { points: usize },
    /// Antithetic Monte Carlo with `samples` draws per (step, node, control),
    /// seeded per (step, node) so reruns are bit-identical.
    MonteCarlo { samples: usize },
}

impl ExpectationRule {
    /// Default from the problem dimensions: quadrature where affordable,
    /// antithetic sampling otherwise.
    pub fn default_for(op: &OperatorSpec) -> Self {
        if op.dim_noise() <= 2 {
            ExpectationRule::GaussHermite { points: 8 }
        } else {
            ExpectationRule::MonteCarlo { samples: 4096 }
        }
    }
}

/// Warn when more than this fraction of one-step lookups left the box:
/// lookups from the outer ring clamp routinely (and harmlessly, values there
/// are outside the scheme's validity region anyway), so the warning fires
/// only when clamping reaches a tenth of all evaluations, the signature of a
/// box that is small against the diffusion reach `3 sqrt(max sigma^2 T)`.
pub const BOUNDARY_CONTAMINATION_WARN: f64 = 0.1;

/// Argmax control per `(step, node)`, piecewise constant on grid cells
/// (lookup by nearest node), realizing a Markovian feedback control.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    grid: TimeGrid,
    sgrid: SpaceGrid,
    /// `choices[k * nodes + j]`, `k` in `0..K`.
    choices: Vec<u32>,
}

impl FeedbackPolicy {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn space_grid(&self) -> &SpaceGrid {
        &self.sgrid
    }

    #[inline]
    pub fn choice(&self, step: usize, node: usize) -> usize {
        self.choices[step * self.sgrid.len() + node] as usize
    }

    /// Control index at `(step, x)` by nearest-node lookup.
    #[inline]
    pub fn lookup(&self, step: usize, x: &[f64]) -> usize {
        let k = step.min(self.grid.steps() - 1);
        self.choice(k, self.sgrid.nearest(x))
    }

    /// Adapter choosing controls for a simulation starting at slice `offset`.
    pub fn from_step(&self, offset: usize) -> OffsetPolicy<'_> {
        OffsetPolicy { policy: self, offset }
    }

    /// Fraction of nodes choosing `control` among slices `0..K` and nodes
    /// for which `filter` returns true.
    pub fn fraction_choosing(&self, control: usize, filter: impl Fn(usize, usize) -> bool) -> f64 {
        let mut total = 0usize;
        let mut hits = 0usize;
        for k in 0..self.grid.steps() {
            for node in 0..self.sgrid.len() {
                if filter(k, node) {
                    total += 1;
                    if self.choice(k, node) == control {
                        hits += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

impl StepPolicy for FeedbackPolicy {
    fn choose(&self, step: usize, _t: f64, x: &[f64]) -> usize {
        self.lookup(step, x)
    }
}

/// [`FeedbackPolicy`] shifted to start at a later slice.
pub struct OffsetPolicy<'a> {
    policy: &'a FeedbackPolicy,
    offset: usize,
}

impl StepPolicy for OffsetPolicy<'_> {
    fn choose(&self, step: usize, _t: f64, x: &[f64]) -> usize {
        self.policy.lookup(self.offset + step, x)
    }
}

/// Solver diagnostics.
#[derive(Debug, Clone, Default)]
pub struct DppDiagnostics {
    pub clamped_evaluations: u64,
    pub total_evaluations: u64,
    /// Accumulated per-step worst one-step Monte Carlo standard error
    /// (0 for quadrature rules); an upper proxy for the expectation noise
    /// carried into the reported values.
    pub expectation_noise: f64,
    pub boundary_warning: bool,
}

impl DppDiagnostics {
    pub fn contamination(&self) -> f64 {
        if self.total_evaluations == 0 {
            0.0
        } else {
            self.clamped_evaluations as f64 / self.total_evaluations as f64
        }
    }
}

/// Value field, argmax policy and diagnostics of one backward solve.
#[derive(Debug, Clone)]
pub struct DppSolution {
    pub value: ValueField,
    pub policy: FeedbackPolicy,
    pub diagnostics: DppDiagnostics,
}

enum ResolvedRule {
    Quad { points: Vec<f64>, weights: Vec<f64> },
    Mc { pairs: usize, root: u64 },
}

struct NodeOut {
    value: f64,
    argmax: u32,
    clamped: u64,
    evals: u64,
    stderr: f64,
}

/// Solve with the terminal condition taken from the problem datum.
pub fn solve_value_dpp(
    op: &OperatorSpec,
    grid: &TimeGrid,
    sgrid: &SpaceGrid,
    rule: &ExpectationRule,
    seed: u64,
) -> Result<DppSolution> {
    let mut terminal = vec![0.0; sgrid.len()];
    let mut x = vec![0.0; sgrid.dim()];
    for node in 0..sgrid.len() {
        sgrid.coords(node, &mut x);
        terminal[node] = op.terminal().eval(&x);
    }
    solve_value_dpp_with_terminal(op, grid, sgrid, rule, seed, terminal)
}

/// Solve with an explicit terminal slice (used by the two-stage split, where
/// the terminal of the early stage is the late-stage value at `t_mid`).
pub fn solve_value_dpp_with_terminal(
    op: &OperatorSpec,
    grid: &TimeGrid,
    sgrid: &SpaceGrid,
    rule: &ExpectationRule,
    seed: u64,
    terminal: Vec<f64>,
) -> Result<DppSolution> {
    let n = op.dim_state();
    let m = op.dim_noise();
    if sgrid.dim() != n {
        return Err(Error::Dimension(format!(
            "space grid dim {} != state dim {n}",
            sgrid.dim()
        )));
    }
    if terminal.len() != sgrid.len() {
        return Err(Error::Dimension(format!(
            "terminal slice has {} entries for {} nodes",
            terminal.len(),
            sgrid.len()
        )));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("terminal slice".into()));
    }

    let resolved = match rule {
        ExpectationRule::GaussHermite { points } => {
            let (points, weights) = GaussHermite::new(*points)?.tensor(m);
            ResolvedRule::Quad { points, weights }
        }
        ExpectationRule::MonteCarlo { samples } => {
            if *samples < 2 {
                return Err(Error::Input("Monte Carlo expectation rule needs >= 2 samples".into()));
            }
            ResolvedRule::Mc { pairs: samples.div_ceil(2), root: rng::derive(seed, 0xd99) }
        }
    };

    let steps = grid.steps();
    let nodes = sgrid.len();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut values = vec![0.0; (steps + 1) * nodes];
    let mut choices = vec![0u32; steps * nodes];
    values[steps * nodes..].copy_from_slice(&terminal);

    let mut diag = DppDiagnostics::default();
    for k in (0..steps).rev() {
        let t = grid.node(k);
        let (prev_part, _) = values.split_at((k + 2) * nodes);
        let prev = &prev_part[(k + 1) * nodes..];
        let outs: Result<Vec<NodeOut>> = (0..nodes)
            .into_par_iter()
            .map(|node| {
                let mut x = vec![0.0; n];
                sgrid.coords(node, &mut x);
                let mut ws = OpWorkspace::new(n, m);
                let mut next = vec![0.0; n];
                let mut xi = vec![0.0; m];
                let mut zsum = vec![0.0; m];
                let mut z = vec![0.0; m];
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u32;
                let mut best_se = 0.0;
                let mut clamped = 0u64;
                let mut evals = 0u64;
                for (j, ctrl) in op.controls().iter().enumerate() {
                    ctrl.drift(t, &x, &mut ws.b);
                    ctrl.diffusion(t, &x, &mut ws.sigma);
                    let mut cont = 0.0;
                    zsum.fill(0.0);
                    let mut se = 0.0;
                    match &resolved {
                        ResolvedRule::Quad { points, weights } => {
                            for (q, &w) in weights.iter().enumerate() {
                                let xi_q = &points[q * m..(q + 1) * m];
                                advance(&x, &ws.b, &ws.sigma, xi_q, dt, sqrt_dt, &mut next);
                                let u = sgrid.interpolate(prev, &next, &mut clamped);
                                evals += 1;
                                cont += w * u;
                                for (zs, &xv) in zsum.iter_mut().zip(xi_q) {
                                    *zs += w * u * xv;
                                }
                            }
                        }
                        ResolvedRule::Mc { pairs, root } => {
                            let key = rng::derive(rng::derive(*root, k as u64), node as u64);
                            let w = 1.0 / (2 * pairs) as f64;
                            let mut psum = 0.0;
                            let mut psq = 0.0;
                            for i in 0..*pairs {
                                for (mm, slot) in xi.iter_mut().enumerate() {
                                    *slot = rng::normal_at(key, (i * m + mm) as u64);
                                }
                                advance(&x, &ws.b, &ws.sigma, &xi, dt, sqrt_dt, &mut next);
                                let up = sgrid.interpolate(prev, &next, &mut clamped);
                                for slot in xi.iter_mut() {
                                    *slot = -*slot;
                                }
                                advance(&x, &ws.b, &ws.sigma, &xi, dt, sqrt_dt, &mut next);
                                let um = sgrid.interpolate(prev, &next, &mut clamped);
                                evals += 2;
                                cont += w * (up + um);
                                for (mm, zs) in zsum.iter_mut().enumerate() {
                                    // xi currently holds the negated draw
                                    *zs += w * (um - up) * xi[mm];
                                }
                                let pm = 0.5 * (up + um);
                                psum += pm;
                                psq += pm * pm;
                            }
                            let np = *pairs as f64;
                            let var = (psq / np - (psum / np) * (psum / np)).max(0.0);
                            se = (var / np).sqrt();
                        }
                    }
                    for (zv, zs) in z.iter_mut().zip(&zsum) {
                        *zv = zs / sqrt_dt;
                    }
                    let v = cont + dt * op.driver().eval(t, &x, &ws.b, &ws.sigma, cont, &z);
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "one-step value at t={t}, node {node}, control {j}"
                        )));
                    }
                    // strict '>' keeps the smallest index on ties
                    if v > best {
                        best = v;
                        arg = j as u32;
                        best_se = se;
                    }
                }
                Ok(NodeOut { value: best, argmax: arg, clamped, evals, stderr: best_se })
            })
            .collect();
        let outs = outs?;
        let mut slice_se = 0.0f64;
        for (node, out) in outs.into_iter().enumerate() {
            values[k * nodes + node] = out.value;
            choices[k * nodes + node] = out.argmax;
            diag.clamped_evaluations += out.clamped;
            diag.total_evaluations += out.evals;
            slice_se = slice_se.max(out.stderr);
        }
        diag.expectation_noise += slice_se;
    }
    diag.boundary_warning = diag.contamination() > BOUNDARY_CONTAMINATION_WARN;

    Ok(DppSolution {
        value: ValueField::new(grid.clone(), sgrid.clone(), values)?,
        policy: FeedbackPolicy { grid: grid.clone(), sgrid: sgrid.clone(), choices },
        diagnostics: diag,
    })
}

#[inline]
fn advance(x: &[f64], b: &[f64], sigma: &[f64], xi: &[f64], dt: f64, sqrt_dt: f64, next: &mut [f64]) {
    let m = xi.len();
    for i in 0..x.len() {
        let mut acc = x[i] + b[i] * dt;
        let row = &sigma[i * m..(i + 1) * m];
        for (s, xv) in row.iter().zip(xi) {
            acc += s * sqrt_dt * xv;
        }
        next[i] = acc;
    }
}

/// Simulate forward under a frozen feedback policy and price the resulting
/// control-frozen BSDE by LSMC: a lower-bound estimator of the value at
/// `(t0, x0)` by envelope dominance.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy_value(
    op: &OperatorSpec,
    policy: &FeedbackPolicy,
    t0: f64,
    x0: &[f64],
    paths: usize,
    seed: u64,
    basis: &RegressionBasis,
    picard_iters: usize,
) -> Result<(f64, f64)> {
    let start = policy
        .grid()
        .index_of(t0)
        .ok_or_else(|| Error::Input(format!("t0={t0} is not a node of the policy grid")))?;
    let steps = policy.grid().steps() - start;
    if steps == 0 {
        return Err(Error::Input("policy evaluation needs t0 < T".into()));
    }
    let grid = TimeGrid::new(t0, policy.grid().t_end(), steps)?;
    let noise = NoiseStore::for_grid(seed, paths, &grid, op.dim_noise())?;
    let offset = policy.from_step(start);
    let ens = simulate_forward(&offset, op, &grid, InitialState::Point(x0), &noise, StopRule::None)?;
    let xi: Vec<f64> = ens.map_terminal(|x| op.terminal().eval(x));
    let driver = ControlTraceDriver::new(op, &ens);
    let sol = solve_bsde_lsmc(&ens, &xi, &driver, basis, picard_iters)?;
    Ok((sol.y0_estimate, sol.y0_stderr))
}

/// As [`evaluate_policy_value`] for a constant (single frozen control) policy.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_frozen_control(
    op: &OperatorSpec,
    control: usize,
    grid: &TimeGrid,
    x0: &[f64],
    paths: usize,
    seed: u64,
    basis: &RegressionBasis,
    picard_iters: usize,
) -> Result<(f64, f64)> {
    if control >= op.controls().len() {
        return Err(Error::Input(format!("no control with index {control}")));
    }
    let noise = NoiseStore::for_grid(seed, paths, grid, op.dim_noise())?;
    let ens = simulate_forward(
        &ConstantPolicy(control),
        op,
        grid,
        InitialState::Point(x0),
        &noise,
        StopRule::None,
    )?;
    let xi: Vec<f64> = ens.map_terminal(|x| op.terminal().eval(x));
    let driver = ControlTraceDriver::new(op, &ens);
    let sol = solve_bsde_lsmc(&ens, &xi, &driver, basis, picard_iters)?;
    Ok((sol.y0_estimate, sol.y0_stderr))
}

/// Configuration of the two-stage consistency split.
#[derive(Debug, Clone)]
pub struct TwoStageConfig {
    pub space_grid: SpaceGrid,
    pub direct_steps: usize,
    /// Steps of the early stage `[t0, t_mid]` and the late stage `[t_mid, T]`.
    pub stage_steps: (usize, usize),
    pub rule: ExpectationRule,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub direct: f64,
    pub two_stage: f64,
    /// `sqrt(direct_noise^2 + two_stage_noise^2)`.
    pub combined_stderr: f64,
    pub direct_noise: f64,
    pub two_stage_noise: f64,
}

/// Dynamic-programming consistency: solve directly over `[t0, T]`, then solve
/// `[t_mid, T]` and re-solve `[t0, t_mid]` with the mid-time value as
/// terminal; the two values at `(t0, x0)` must agree up to discretization and
/// expectation noise.
pub fn dpp_two_stage(
    op: &OperatorSpec,
    t0: f64,
    x0: &[f64],
    t_mid: f64,
    cfg: &TwoStageConfig,
) -> Result<TwoStageReport> {
    let t_end = op.horizon();
    if !(t0 < t_mid && t_mid < t_end) {
        return Err(Error::Input(format!("need t0 < t_mid < T, got {t0}, {t_mid}, {t_end}")));
    }
    let direct_grid = TimeGrid::new(t0, t_end, cfg.direct_steps)?;
    let direct = solve_value_dpp(op, &direct_grid, &cfg.space_grid, &cfg.rule, rng::derive(cfg.seed, 1))?;

    let late_grid = TimeGrid::new(t_mid, t_end, cfg.stage_steps.1)?;
    let late = solve_value_dpp(op, &late_grid, &cfg.space_grid, &cfg.rule, rng::derive(cfg.seed, 2))?;

    let early_grid = TimeGrid::new(t0, t_mid, cfg.stage_steps.0)?;
    let early = solve_value_dpp_with_terminal(
        op,
        &early_grid,
        &cfg.space_grid,
        &cfg.rule,
        rng::derive(cfg.seed, 3),
        late.value.slice(0).to_vec(),
    )?;

    let direct_noise = direct.diagnostics.expectation_noise;
    let two_stage_noise =
        late.diagnostics.expectation_noise + early.diagnostics.expectation_noise;
    Ok(TwoStageReport {
        direct: direct.value.value_at_slice(0, x0),
        two_stage: early.value.value_at_slice(0, x0),
        combined_stderr: (direct_noise * direct_noise + two_stage_noise * two_stage_noise).sqrt(),
        direct_noise,
        two_stage_noise,
    })
}

/// Second-order gap along frozen-control paths: the discrete compensator of
/// the value process,
///
/// ```text
/// dK_k = u(t_k, X_k) - [ E[u(t_{k+1}, X_k + b_j dt + sigma_j sqrt(dt) xi)]
///                        + dt f_j(t_k, X_k, ., .) ],      K_0 = 0.
/// ```
///
/// The bracket is the frozen control's one-step semilinear value at the path
/// point, computed by the same expectation rule as the solver; on grid nodes
/// the value recursion takes a maximum over controls, so every increment is
/// nonnegative up to interpolation/quadrature error (the discrete shadow of
/// the nondecreasing compensator path). `E[K_K]` is the value lost by
/// freezing the control; its minimum over controls is ~0 (the minimality
/// condition).
#[derive(Debug, Clone)]
pub struct GapReport {
    /// `E[K_k]` per step, `k = 0..=steps`.
    pub mean_gap: Vec<f64>,
    /// Smallest pathwise increment `K_{k+1} - K_k`.
    pub min_increment: f64,
    /// `E[K_K]`.
    pub mean_terminal_gap: f64,
    /// `max_k |E[K_k]|`.
    pub max_abs_mean_gap: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn second_order_gap(
    op: &OperatorSpec,
    solution: &DppSolution,
    frozen_control: usize,
    t0: f64,
    x0: &[f64],
    paths: usize,
    seed: u64,
    rule: &ExpectationRule,
) -> Result<GapReport> {
    if frozen_control >= op.controls().len() {
        return Err(Error::Input(format!("no control with index {frozen_control}")));
    }
    let field = &solution.value;
    let start = field
        .grid()
        .index_of(t0)
        .ok_or_else(|| Error::Input(format!("t0={t0} is not a node of the value grid")))?;
    let steps = field.grid().steps() - start;
    if steps == 0 {
        return Err(Error::Input("gap diagnostic needs t0 < T".into()));
    }
    let grid = TimeGrid::new(t0, field.grid().t_end(), steps)?;
    let noise = NoiseStore::for_grid(seed, paths, &grid, op.dim_noise())?;
    let ens = simulate_forward(
        &ConstantPolicy(frozen_control),
        op,
        &grid,
        InitialState::Point(x0),
        &noise,
        StopRule::None,
    )?;

    let n = op.dim_state();
    let m = op.dim_noise();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sgrid = field.space_grid();
    let ctrl = op.control(frozen_control);

    let resolved = match rule {
        ExpectationRule::GaussHermite { points } => {
            let (points, weights) = GaussHermite::new(*points)?.tensor(m);
            ResolvedRule::Quad { points, weights }
        }
        ExpectationRule::MonteCarlo { samples } => {
            ResolvedRule::Mc { pairs: samples.div_ceil(2), root: rng::derive(seed, 0x9a9) }
        }
    };

    let mut mean_gap = vec![0.0; steps + 1];
    let mut kpath = vec![0.0; paths];
    let mut min_increment = f64::INFINITY;
    let mut ws = OpWorkspace::for_op(op);
    let mut next = vec![0.0; n];
    let mut xi = vec![0.0; m];
    let mut zsum = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut clamped = 0u64;
    for k in 0..steps {
        let t = grid.node(k);
        let next_slice = field.slice(start + k + 1);
        for p in 0..paths {
            let x = ens.state(p, k);
            ctrl.drift(t, x, &mut ws.b);
            ctrl.diffusion(t, x, &mut ws.sigma);
            let mut cont = 0.0;
            zsum.fill(0.0);
            match &resolved {
                ResolvedRule::Quad { points, weights } => {
                    for (q, &w) in weights.iter().enumerate() {
                        let xi_q = &points[q * m..(q + 1) * m];
                        advance(x, &ws.b, &ws.sigma, xi_q, dt, sqrt_dt, &mut next);
                        let u = sgrid.interpolate(next_slice, &next, &mut clamped);
                        cont += w * u;
                        for (zs, &xv) in zsum.iter_mut().zip(xi_q) {
                            *zs += w * u * xv;
                        }
                    }
                }
                ResolvedRule::Mc { pairs, root } => {
                    let key = rng::derive(rng::derive(*root, k as u64), p as u64);
                    let w = 1.0 / (2 * pairs) as f64;
                    for i in 0..*pairs {
                        for (mm, slot) in xi.iter_mut().enumerate() {
                            *slot = rng::normal_at(key, (i * m + mm) as u64);
                        }
                        advance(x, &ws.b, &ws.sigma, &xi, dt, sqrt_dt, &mut next);
                        let up = sgrid.interpolate(next_slice, &next, &mut clamped);
                        for slot in xi.iter_mut() {
                            *slot = -*slot;
                        }
                        advance(x, &ws.b, &ws.sigma, &xi, dt, sqrt_dt, &mut next);
                        let um = sgrid.interpolate(next_slice, &next, &mut clamped);
                        cont += w * (up + um);
                        for (mm, zs) in zsum.iter_mut().enumerate() {
                            *zs += w * (um - up) * xi[mm];
                        }
                    }
                }
            }
            for (zv, zs) in z.iter_mut().zip(&zsum) {
                *zv = zs / sqrt_dt;
            }
            let one_step = cont + dt * op.driver().eval(t, x, &ws.b, &ws.sigma, cont, &z);
            let uk = field.value_at_slice(start + k, x);
            let inc = uk - one_step;
            min_increment = min_increment.min(inc);
            kpath[p] += inc;
            mean_gap[k + 1] += kpath[p];
        }
        mean_gap[k + 1] /= paths as f64;
    }
    let mean_terminal_gap = mean_gap[steps];
    let max_abs_mean_gap = mean_gap.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(GapReport { mean_gap, min_increment, mean_terminal_gap, max_abs_mean_gap })
}

/// `E[K_K]` per frozen control and its minimum (~0 when the family contains
/// an optimal control for the battery problem).
#[allow(clippy::too_many_arguments)]
pub fn gap_minimality(
    op: &OperatorSpec,
    solution: &DppSolution,
    t0: f64,
    x0: &[f64],
    paths: usize,
    seed: u64,
    rule: &ExpectationRule,
) -> Result<(f64, Vec<f64>)> {
    let mut terminal_gaps = Vec::with_capacity(op.controls().len());
    for j in 0..op.controls().len() {
        let report =
            second_order_gap(op, solution, j, t0, x0, paths, rng::derive(seed, j as u64), rule)?;
        terminal_gaps.push(report.mean_terminal_gap);
    }
    let min = terminal_gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((min, terminal_gaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientField, DriverSpec, TerminalSpec};

    pub(crate) fn heat_like(sigmas: &[f64], terminal: &str, driver: DriverSpec) -> OperatorSpec {
        let controls = sigmas
            .iter()
            .map(|&s| CoefficientField::scalar(format!("sigma{s}"), 0.0, s))
            .collect();
        OperatorSpec::new(
            controls,
            driver,
            TerminalSpec::new(terminal, 40.0, 40.0).unwrap(),
            1.0,
            sigmas.iter().map(|s| s * s).fold(f64::INFINITY, f64::min),
        )
        .unwrap()
    }

    fn grid_1d(lo: f64, hi: f64, h: f64) -> SpaceGrid {
        SpaceGrid::from_spacing(vec![lo], vec![hi], h).unwrap()
    }

    #[test]
    fn heat_equation_value() {
        // singleton (0, 1), f = 0, g = x^2: u(t, x) = x^2 + (T - t)
        let op = heat_like(&[1.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-6.0, 6.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let u00 = sol.value.value_at_slice(0, &[0.0]);
        assert!((u00 - 1.0).abs() <= 0.02, "u(0,0) = {u00}");
        // terminal slice is g on the nodes bit-exactly
        let mut xn = [0.0];
        for node in [0, sgrid.nearest(&[0.0]), sgrid.len() - 1] {
            sgrid.coords(node, &mut xn);
            assert_eq!(sol.value.node_value(20, node).to_bits(), op.terminal().eval(&xn).to_bits());
        }
        assert!(!sol.diagnostics.boundary_warning);
    }

    #[test]
    fn g_heat_convex_and_concave() {
        let op = heat_like(&[1.0, 2.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-16.0, 16.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let u00 = sol.value.value_at_slice(0, &[0.0]);
        assert!((u00 - 4.0).abs() <= 0.1, "convex G-heat u(0,0) = {u00}");
        // convex terminal selects the high-volatility control in the bulk
        let margin = 3.0 * (4.0f64).sqrt(); // 3 sqrt(max sigma^2 T)
        let sg = sol.policy.space_grid().clone();
        let frac = sol.policy.fraction_choosing(1, |_, node| {
            let mut x = [0.0];
            sg.coords(node, &mut x);
            x[0].abs() <= 16.0 - margin
        });
        assert!(frac >= 0.99, "high-vol fraction {frac}");

        let conc = heat_like(&[1.0, 2.0], "neg_quadratic", DriverSpec::zero());
        let sol = solve_value_dpp(&conc, &grid, &sgrid, &rule, 0).unwrap();
        let u00 = sol.value.value_at_slice(0, &[0.0]);
        assert!((u00 + 1.0).abs() <= 0.05, "concave G-heat u(0,0) = {u00}");
        let frac = sol.policy.fraction_choosing(0, |_, node| {
            let mut x = [0.0];
            sg.coords(node, &mut x);
            x[0].abs() <= 16.0 - margin
        });
        assert!(frac >= 0.99, "low-vol fraction {frac}");
    }

    #[test]
    fn policy_value_matches_dpp_for_singleton() {
        let op = heat_like(&[1.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-6.0, 6.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let dpp_val = sol.value.value_at_slice(0, &[0.0]);
        let (est, se) = evaluate_policy_value(
            &op,
            &sol.policy,
            0.0,
            &[0.0],
            20_000,
            42,
            &RegressionBasis::TotalDegree(3),
            2,
        )
        .unwrap();
        assert!(
            (est - dpp_val).abs() <= 3.0 * se + 0.02,
            "policy {est} +- {se} vs dpp {dpp_val}"
        );
    }

    #[test]
    fn wrong_policy_is_dominated() {
        // sigma = 1 frozen under the convex G-heat: value ~1, ~3 below dpp
        let op = heat_like(&[1.0, 2.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-16.0, 16.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let dpp_val = sol.value.value_at_slice(0, &[0.0]);
        let (est, se) = evaluate_frozen_control(
            &op,
            0,
            &grid,
            &[0.0],
            20_000,
            7,
            &RegressionBasis::TotalDegree(3),
            2,
        )
        .unwrap();
        assert!((est - 1.0).abs() <= 3.0 * se + 0.05, "frozen sigma=1 value {est}");
        assert!(dpp_val - est > 2.5, "gap {}", dpp_val - est);
    }

    #[test]
    fn two_stage_states_bit_identical_in_the_one_step_limit() {
        // t_mid = t0 + dt with aligned grids and quadrature: the two-stage
        // recursion is literally the direct recursion
        let op = heat_like(&[1.0, 2.0], "quadratic", DriverSpec::zero());
        let steps = 10usize;
        let sgrid = grid_1d(-10.0, 10.0, 0.1);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let cfg = TwoStageConfig {
            space_grid: sgrid,
            direct_steps: steps,
            stage_steps: (1, steps - 1),
            rule,
            seed: 0,
        };
        let t_mid = 0.1; // = t0 + dt
        let rep = dpp_two_stage(&op, 0.0, &[0.0], t_mid, &cfg).unwrap();
        assert_eq!(rep.direct.to_bits(), rep.two_stage.to_bits());
    }

    #[test]
    fn two_stage_consistency_heat_quadrature() {
        let op = heat_like(&[1.0], "quadratic", DriverSpec::zero());
        let cfg = TwoStageConfig {
            space_grid: grid_1d(-6.0, 6.0, 0.05),
            direct_steps: 16,
            stage_steps: (10, 10),
            rule: ExpectationRule::GaussHermite { points: 8 },
            seed: 5,
        };
        let rep = dpp_two_stage(&op, 0.0, &[0.0], 0.5, &cfg).unwrap();
        assert!(
            (rep.direct - rep.two_stage).abs() <= 0.02,
            "direct {} vs two-stage {}",
            rep.direct,
            rep.two_stage
        );
    }

    #[test]
    fn gap_diagnostic_singleton_and_g_heat() {
        let op = heat_like(&[1.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-6.0, 6.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let rep = second_order_gap(&op, &sol, 0, 0.0, &[0.0], 10_000, 3, &rule).unwrap();
        assert!(rep.max_abs_mean_gap <= 0.05, "singleton gap {}", rep.max_abs_mean_gap);
        assert!(rep.min_increment >= -0.05, "singleton min increment {}", rep.min_increment);
    }

    #[test]
    fn gap_diagnostic_separates_frozen_controls() {
        // G-heat: freezing sigma = 1 forfeits ~3 of value; freezing sigma = 2
        // forfeits ~0; increments stay nonnegative up to grid error
        let op = heat_like(&[1.0, 2.0], "quadratic", DriverSpec::zero());
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sgrid = grid_1d(-16.0, 16.0, 0.05);
        let rule = ExpectationRule::GaussHermite { points: 8 };
        let sol = solve_value_dpp(&op, &grid, &sgrid, &rule, 0).unwrap();
        let sub = second_order_gap(&op, &sol, 0, 0.0, &[0.0], 10_000, 3, &rule).unwrap();
        assert!((sub.mean_terminal_gap - 3.0).abs() <= 0.15, "suboptimal gap {}", sub.mean_terminal_gap);
        assert!(sub.min_increment >= -0.05, "min increment {}", sub.min_increment);
        let opt = second_order_gap(&op, &sol, 1, 0.0, &[0.0], 10_000, 4, &rule).unwrap();
        assert!(opt.mean_terminal_gap.abs() <= 0.1, "optimal gap {}", opt.mean_terminal_gap);
        let (min_gap, all) = gap_minimality(&op, &sol, 0.0, &[0.0], 10_000, 5, &rule).unwrap();
        assert!(min_gap.abs() <= 0.1, "minimality proxy {min_gap} ({all:?})");
    }
}
