//! Independent monotone explicit finite-difference solver for the Cauchy
//! problem, used as an oracle against the dynamic-programming values.
//!
//! One backward step is
//!
//! ```text
//! u_k(x) = u_{k+1}(x) + dt F(t_{k+1}, x, u_{k+1}(x), D_h u_{k+1}, D2_h u_{k+1})
//! ```
//!
//! with central second differences per axis, first differences upwinded by
//! the sign of each control's drift, and `F` evaluated by the model's
//! generator maximum. Under the CFL bound checked at construction every
//! update is a nondecreasing function of the previous slice, so the scheme
//! inherits a discrete comparison principle. Boundary nodes are filled by
//! one-sided second-order (linear) extrapolation after each interior sweep.

use crate::error::{Error, Result};
use crate::field::ValueField;
use crate::grid::{SpaceGrid, TimeGrid};
use crate::model::{eval_generator_ws, OpWorkspace, OperatorSpec};
use crate::rng;
use crate::sde::csv_err;
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::io::Write;

/// Explicit scheme layout: grid, step count and the CFL certificate.
#[derive(Debug, Clone)]
pub struct FdScheme {
    sgrid: SpaceGrid,
    time_steps: usize,
    dt: f64,
    admissible_dt: f64,
    nondiagonal: bool,
    allow_nondiagonal: bool,
}

impl FdScheme {
    /// Build and CFL-check a scheme with `time_steps` steps over `[0, T]`.
    ///
    /// The admissible step is `h^2 / (2 N A + h B + h^2 |mu|)` with `A` the
    /// largest eigenvalue of `sigma sigma^T` and `B` the largest drift norm
    /// over a sample sweep of the grid box.
    pub fn new(op: &OperatorSpec, sgrid: SpaceGrid, time_steps: usize) -> Result<Self> {
        if sgrid.dim() != op.dim_state() {
            return Err(Error::Dimension(format!(
                "space grid dim {} != state dim {}",
                sgrid.dim(),
                op.dim_state()
            )));
        }
        if time_steps == 0 {
            return Err(Error::Input("need at least one time step".into()));
        }
        let (a_max, b_max, nondiagonal) = coefficient_sweep(op, &sgrid);
        let h = sgrid.min_spacing();
        let denom = 2.0 * op.dim_state() as f64 * a_max
            + h * b_max
            + h * h * op.driver().monotonicity_mu().abs();
        let admissible = if denom > 0.0 { h * h / denom } else { f64::INFINITY };
        let dt = op.horizon() / time_steps as f64;
        if dt > admissible {
            return Err(Error::Cfl {
                dt,
                admissible,
                min_steps: (op.horizon() / admissible).ceil() as usize,
            });
        }
        Ok(Self {
            sgrid,
            time_steps,
            dt,
            admissible_dt: admissible,
            nondiagonal,
            allow_nondiagonal: false,
        })
    }

    /// Pick the step count from the CFL bound with a safety factor in (0, 1].
    pub fn auto(op: &OperatorSpec, sgrid: SpaceGrid, safety: f64) -> Result<Self> {
        if !(0.0 < safety && safety <= 1.0) {
            return Err(Error::Input(format!("CFL safety factor must be in (0, 1], got {safety}")));
        }
        let (a_max, b_max, _) = coefficient_sweep(op, &sgrid);
        let h = sgrid.min_spacing();
        let denom = 2.0 * op.dim_state() as f64 * a_max
            + h * b_max
            + h * h * op.driver().monotonicity_mu().abs();
        let steps = if denom > 0.0 {
            (op.horizon() * denom / (h * h * safety)).ceil().max(1.0) as usize
        } else {
            1
        };
        Self::new(op, sgrid, steps)
    }

    /// Accept non-diagonal `sigma sigma^T` by central cross differences
    /// (diagnostic quality: the cross stencil is not monotone).
    pub fn with_nondiagonal_fallback(mut self) -> Self {
        self.allow_nondiagonal = true;
        self
    }

    pub fn space_grid(&self) -> &SpaceGrid {
        &self.sgrid
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn admissible_dt(&self) -> f64 {
        self.admissible_dt
    }
}

/// Max eigenvalue of `sigma sigma^T`, max drift norm and diagonality over a
/// seeded sweep of the grid box (corners, center and random interior points).
fn coefficient_sweep(op: &OperatorSpec, sgrid: &SpaceGrid) -> (f64, f64, bool) {
    let n = op.dim_state();
    let m = op.dim_noise();
    let key = rng::derive(0xcf1, n as u64);
    let mut x = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * m];
    let mut a_max = 0.0f64;
    let mut b_max = 0.0f64;
    let mut nondiag = false;
    let corners = 1usize << n.min(10);
    let total = corners + 65;
    let mut ctr = 0u64;
    for s in 0..total {
        let t = if s == 0 { 0.0 } else { rng::uniform_in(key, ctr, 0.0, op.horizon()) };
        ctr += 1;
        for i in 0..n {
            x[i] = if s < corners {
                if (s >> i) & 1 == 1 { sgrid.hi()[i] } else { sgrid.lo()[i] }
            } else if s == corners {
                0.5 * (sgrid.lo()[i] + sgrid.hi()[i])
            } else {
                rng::uniform_in(key, ctr, sgrid.lo()[i], sgrid.hi()[i])
            };
            ctr += 1;
        }
        for ctrl in op.controls() {
            ctrl.drift(t, &x, &mut b);
            ctrl.diffusion(t, &x, &mut sigma);
            b_max = b_max.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
            let mut a = DMatrix::zeros(n, n);
            for i in 0..n {
                for jj in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..m {
                        acc += sigma[i * m + kk] * sigma[jj * m + kk];
                    }
                    a[(i, jj)] = acc;
                }
            }
            let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1.0f64, f64::max);
            for i in 0..n {
                for jj in 0..n {
                    if i != jj && a[(i, jj)].abs() > 1e-10 * scale {
                        nondiag = true;
                    }
                }
            }
            let top = a.symmetric_eigen().eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            a_max = a_max.max(top);
        }
    }
    (a_max, b_max, nondiag)
}

struct Stencil<'a> {
    sgrid: &'a SpaceGrid,
    strides: Vec<usize>,
}

impl<'a> Stencil<'a> {
    fn new(sgrid: &'a SpaceGrid) -> Self {
        let dim = sgrid.dim();
        let mut strides = vec![1usize; dim];
        for axis in (0..dim.saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * sgrid.shape()[axis + 1];
        }
        Self { sgrid, strides }
    }

    /// Fill the discrete Hessian diagonal (and cross terms when asked) and
    /// return per-axis forward/backward first differences at interior `flat`.
    #[allow(clippy::too_many_arguments)]
    fn derivatives(
        &self,
        slice: &[f64],
        flat: usize,
        cross: bool,
        s_matrix: &mut [f64],
        fwd: &mut [f64],
        bwd: &mut [f64],
    ) {
        let dim = self.sgrid.dim();
        let u0 = slice[flat];
        s_matrix.fill(0.0);
        for axis in 0..dim {
            let h = self.sgrid.spacing(axis);
            let up = slice[flat + self.strides[axis]];
            let dn = slice[flat - self.strides[axis]];
            s_matrix[axis * dim + axis] = (up - 2.0 * u0 + dn) / (h * h);
            fwd[axis] = (up - u0) / h;
            bwd[axis] = (u0 - dn) / h;
        }
        if cross {
            for i in 0..dim {
                for l in (i + 1)..dim {
                    let hi = self.sgrid.spacing(i);
                    let hl = self.sgrid.spacing(l);
                    let si = self.strides[i];
                    let sl = self.strides[l];
                    let v = (slice[flat + si + sl] + slice[flat - si - sl]
                        - slice[flat + si - sl]
                        - slice[flat - si + sl])
                        / (4.0 * hi * hl);
                    s_matrix[i * dim + l] = v;
                    s_matrix[l * dim + i] = v;
                }
            }
        }
    }
}

/// Backward explicit sweep; returns the value field on the scheme's grid.
pub fn solve_fd(op: &OperatorSpec, scheme: &FdScheme) -> Result<ValueField> {
    if scheme.nondiagonal && !scheme.allow_nondiagonal {
        return Err(Error::Unsupported(
            "sigma sigma^T is not diagonal on this problem; cross-derivative stencils are \
             only available behind the non-diagonal fallback flag"
                .into(),
        ));
    }
    let sgrid = &scheme.sgrid;
    let grid = TimeGrid::new(0.0, op.horizon(), scheme.time_steps)?;
    let nodes = sgrid.len();
    let steps = scheme.time_steps;
    let mut values = vec![0.0; (steps + 1) * nodes];

    let mut x = vec![0.0; sgrid.dim()];
    for node in 0..nodes {
        sgrid.coords(node, &mut x);
        values[steps * nodes + node] = op.terminal().eval(&x);
    }

    let stencil = Stencil::new(sgrid);
    let cross = scheme.nondiagonal && scheme.allow_nondiagonal;
    for k in (0..steps).rev() {
        let t_next = grid.node(k + 1);
        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let prev = &tail[..nodes];
        let slice = &mut head[k * nodes..];
        step_slice(op, sgrid, &stencil, prev, slice, t_next, scheme.dt, cross)?;
        extrapolate_boundary(sgrid, slice);
    }
    ValueField::new(grid, sgrid.clone(), values)
}

/// One explicit interior update of `out` from `prev`.
#[allow(clippy::too_many_arguments)]
fn step_slice(
    op: &OperatorSpec,
    sgrid: &SpaceGrid,
    stencil: &Stencil,
    prev: &[f64],
    out: &mut [f64],
    t: f64,
    dt: f64,
    cross: bool,
) -> Result<()> {
    let n = sgrid.dim();
    let computed: Result<Vec<(usize, f64)>> = (0..sgrid.len())
        .into_par_iter()
        .filter(|&flat| sgrid.is_interior(flat))
        .map(|flat| {
            let mut x = vec![0.0; n];
            sgrid.coords(flat, &mut x);
            let mut s_matrix = vec![0.0; n * n];
            let mut fwd = vec![0.0; n];
            let mut bwd = vec![0.0; n];
            let mut p = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut ws = OpWorkspace::for_op(op);
            stencil.derivatives(prev, flat, cross, &mut s_matrix, &mut fwd, &mut bwd);
            let y = prev[flat];
            let mut best = f64::NEG_INFINITY;
            for ctrl in op.controls() {
                // upwind the gradient by this control's drift sign per axis
                ctrl.drift(t, &x, &mut b);
                for axis in 0..n {
                    p[axis] = if b[axis] >= 0.0 { fwd[axis] } else { bwd[axis] };
                }
                let g = eval_generator_ws(ctrl, op.driver(), t, &x, y, &p, &s_matrix, &mut ws)?;
                if g > best {
                    best = g;
                }
            }
            let v = y + dt * best;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("fd update at t={t}, node {flat}")));
            }
            Ok((flat, v))
        })
        .collect();
    for (flat, v) in computed? {
        out[flat] = v;
    }
    Ok(())
}

/// Fill boundary nodes by one-sided second-order (quadratic, 3-point)
/// extrapolation along one boundary axis, in order of boundary multiplicity
/// so every source node is already set. Axes with fewer than 4 nodes fall
/// back to linear extrapolation.
fn extrapolate_boundary(sgrid: &SpaceGrid, slice: &mut [f64]) {
    let dim = sgrid.dim();
    let stencil = Stencil::new(sgrid);
    let mut multi = vec![0usize; dim];
    for mult in 1..=dim {
        for flat in 0..sgrid.len() {
            if sgrid.boundary_multiplicity(flat) != mult {
                continue;
            }
            sgrid.unravel(flat, &mut multi);
            let axis = (0..dim)
                .find(|&a| multi[a] == 0 || multi[a] + 1 == sgrid.shape()[a])
                .expect("boundary node has a boundary axis");
            let inward: isize = if multi[axis] == 0 { 1 } else { -1 };
            let s = stencil.strides[axis] as isize;
            let n1 = (flat as isize + inward * s) as usize;
            let n2 = (flat as isize + 2 * inward * s) as usize;
            slice[flat] = if sgrid.shape()[axis] >= 4 {
                let n3 = (flat as isize + 3 * inward * s) as usize;
                3.0 * slice[n1] - 3.0 * slice[n2] + slice[n3]
            } else {
                2.0 * slice[n1] - slice[n2]
            };
        }
    }
}

/// Space-time residual of a value field under the same stencils,
/// `r(t_k, x) = (u_{k+1} - u_k)/dt + F(t_k, x, u_k, D_h u_k, D2_h u_k)`;
/// for a converged solution `max |r|` vanishes under refinement. Nodes
/// within one cell of the boundary are excluded: their stencils read the
/// extrapolation frame, which is a numerical boundary condition rather than
/// the scheme.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Row-major `(step, node)` residuals, zero on boundary nodes,
    /// `steps x nodes` entries.
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// `(step, node)` realizing `max_abs`.
    pub argmax: (usize, usize),
    steps: usize,
    sgrid: SpaceGrid,
    grid: TimeGrid,
}

impl ResidualReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.sgrid.dim();
        let mut header = vec!["step".to_string()];
        header.extend((1..=dim).map(|i| format!("x_{i}")));
        header.push("residual".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut coords = vec![0.0; dim];
        let mut row: Vec<String> = Vec::new();
        for k in 0..self.steps {
            for node in 0..self.sgrid.len() {
                row.clear();
                row.push(k.to_string());
                self.sgrid.coords(node, &mut coords);
                row.extend(coords.iter().map(|c| format!("{c}")));
                row.push(format!("{}", self.residuals[k * self.sgrid.len() + node]));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
}

pub fn viscosity_residuals(field: &ValueField, op: &OperatorSpec) -> Result<ResidualReport> {
    let sgrid = field.space_grid();
    if sgrid.dim() != op.dim_state() {
        return Err(Error::Dimension("value field dimension does not match the operator".into()));
    }
    let grid = field.grid();
    let steps = grid.steps();
    let nodes = sgrid.len();
    let dt = grid.dt();
    let stencil = Stencil::new(sgrid);
    let n = sgrid.dim();
    let mut residuals = vec![0.0; steps * nodes];
    let mut max_abs = 0.0f64;
    let mut argmax = (0, 0);
    let mut x = vec![0.0; n];
    let mut s_matrix = vec![0.0; n * n];
    let mut fwd = vec![0.0; n];
    let mut bwd = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut ws = OpWorkspace::for_op(op);
    for k in 0..steps {
        let t = grid.node(k);
        let slice = field.slice(k);
        let next = field.slice(k + 1);
        for flat in 0..nodes {
            if sgrid.face_distance(flat) < 2 {
                continue;
            }
            sgrid.coords(flat, &mut x);
            stencil.derivatives(slice, flat, false, &mut s_matrix, &mut fwd, &mut bwd);
            let y = slice[flat];
            let mut best = f64::NEG_INFINITY;
            for ctrl in op.controls() {
                ctrl.drift(t, &x, &mut b);
                for axis in 0..n {
                    p[axis] = if b[axis] >= 0.0 { fwd[axis] } else { bwd[axis] };
                }
                let g = eval_generator_ws(ctrl, op.driver(), t, &x, y, &p, &s_matrix, &mut ws)?;
                best = best.max(g);
            }
            let r = (next[flat] - y) / dt + best;
            residuals[k * nodes + flat] = r;
            if r.abs() > max_abs {
                max_abs = r.abs();
                argmax = (k, flat);
            }
        }
    }
    Ok(ResidualReport {
        residuals,
        max_abs,
        argmax,
        steps,
        sgrid: sgrid.clone(),
        grid: grid.clone(),
    })
}

/// Nodewise ordering `u <= v + tol` with the worst margin `max(u - v)`.
#[derive(Debug, Clone)]
pub struct OrderingOutcome {
    pub ordered: bool,
    pub worst_margin: f64,
    /// `(step, node)` of the worst margin.
    pub witness: (usize, usize),
}

pub fn check_comparison_order(u: &ValueField, v: &ValueField, tol: f64) -> Result<OrderingOutcome> {
    if u.grid() != v.grid() || u.space_grid() != v.space_grid() {
        return Err(Error::Input("comparison needs fields on identical grids".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut witness = (0, 0);
    for k in 0..=u.grid().steps() {
        let us = u.slice(k);
        let vs = v.slice(k);
        for (node, (a, b)) in us.iter().zip(vs).enumerate() {
            let margin = a - b;
            if margin > worst {
                worst = margin;
                witness = (k, node);
            }
        }
    }
    Ok(OrderingOutcome { ordered: worst <= tol, worst_margin: worst, witness })
}

/// Structural checks of the comparison hypotheses on the operator itself:
/// monotonicity in the value argument and the doubling-inequality bound on
/// the second-order terms.
#[derive(Debug, Clone)]
pub struct StructuralOutcome {
    pub name: String,
    pub worst: f64,
    pub bound: f64,
    pub violations: usize,
    pub checked: usize,
}

impl StructuralOutcome {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Sampled check of `(F(..., r, ...) - F(..., r', ...)) (r - r') <= mu (r - r')^2`.
pub fn check_monotonicity_in_value(op: &OperatorSpec, samples: usize, seed: u64) -> Result<StructuralOutcome> {
    let n = op.dim_state();
    let key = rng::derive(seed, 0x300);
    let mut ctr = 0u64;
    let mut x = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n * n];
    let mu = op.driver().monotonicity_mu();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let t = rng::uniform_in(key, ctr, 0.0, op.horizon());
        ctr += 1;
        for v in x.iter_mut().chain(p.iter_mut()) {
            *v = rng::uniform_in(key, ctr, -3.0, 3.0);
            ctr += 1;
        }
        for i in 0..n {
            for j in i..n {
                let v = rng::uniform_in(key, ctr, -2.0, 2.0);
                ctr += 1;
                s[i * n + j] = v;
                s[j * n + i] = v;
            }
        }
        let r = rng::uniform_in(key, ctr, -4.0, 4.0);
        let r2 = rng::uniform_in(key, ctr + 1, -4.0, 4.0);
        ctr += 2;
        if (r - r2).abs() < 1e-9 {
            continue;
        }
        let (f1, _) = crate::model::eval_f(op, t, &x, r, &p, &s)?;
        let (f2, _) = crate::model::eval_f(op, t, &x, r2, &p, &s)?;
        let ratio = (f1 - f2) * (r - r2) / ((r - r2) * (r - r2));
        worst = worst.max(ratio);
        if ratio > mu + 1e-9 {
            violations += 1;
        }
    }
    Ok(StructuralOutcome {
        name: "operator monotonicity in value".into(),
        worst,
        bound: mu,
        violations,
        checked: samples,
    })
}

/// Sampled check of the doubling-variables second-order bound: for `S, S'`
/// satisfying the two-sided matrix inequality,
/// `<sigma sigma^T(t,x), S> - <sigma sigma^T(t,y), S'> <= 3 alpha l^2 |x-y|^2`
/// per control, with `l` the control's declared Lipschitz constant.
pub fn check_doubling_bound(op: &OperatorSpec, samples: usize, seed: u64) -> Result<StructuralOutcome> {
    let n = op.dim_state();
    let m = op.dim_noise();
    let key = rng::derive(seed, 0x3d0);
    let mut ctr = 0u64;
    let mut worst_slack = f64::INFINITY;
    let mut violations = 0;
    let mut checked = 0;
    let mut x = vec![0.0; n];
    let mut yv = vec![0.0; n];
    let mut sig = vec![0.0; n * m];
    for _ in 0..samples {
        let t = rng::uniform_in(key, ctr, 0.0, op.horizon());
        ctr += 1;
        for i in 0..n {
            x[i] = rng::uniform_in(key, ctr, -2.0, 2.0);
            yv[i] = rng::uniform_in(key, ctr + 1, -2.0, 2.0);
            ctr += 2;
        }
        let alpha = rng::uniform_in(key, ctr, 0.5, 20.0);
        ctr += 1;
        // S symmetric with ||S|| <= alpha, S' = S + beta I with
        // beta in [alpha/2, 2 alpha]: satisfies the doubling inequality
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng::uniform_in(key, ctr, -1.0, 1.0);
                ctr += 1;
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        let norm = s
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > 0.0 {
            s *= alpha / norm * rng::uniform_in(key, ctr, 0.1, 1.0);
        }
        ctr += 1;
        let beta = rng::uniform_in(key, ctr, alpha / 2.0, 2.0 * alpha);
        ctr += 1;
        let mut s2 = s.clone();
        for i in 0..n {
            s2[(i, i)] += beta;
        }
        debug_assert!(doubling_pair_is_valid(&s, &s2, alpha));

        let dist2: f64 = x.iter().zip(&yv).map(|(a, b)| (a - b) * (a - b)).sum();
        for ctrl in op.controls() {
            let lhs = {
                ctrl.diffusion(t, &x, &mut sig);
                frobenius_with_diffusion(&sig, &s, n, m)
            } - {
                ctrl.diffusion(t, &yv, &mut sig);
                frobenius_with_diffusion(&sig, &s2, n, m)
            };
            let ell = ctrl.lipschitz_bound();
            let rhs = 3.0 * alpha * ell * ell * dist2;
            let slack = rhs - lhs;
            worst_slack = worst_slack.min(slack);
            checked += 1;
            if slack < -1e-9 {
                violations += 1;
            }
        }
    }
    Ok(StructuralOutcome {
        name: "doubling-inequality second-order bound".into(),
        worst: worst_slack,
        bound: 0.0,
        violations,
        checked,
    })
}

/// `<sigma sigma^T, S>` from the raw diffusion buffer.
fn frobenius_with_diffusion(sigma: &[f64], s: &DMatrix<f64>, n: usize, m: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..m {
        for i in 0..n {
            let si = sigma[i * m + k];
            if si == 0.0 {
                continue;
            }
            for j in 0..n {
                acc += si * sigma[j * m + k] * s[(i, j)];
            }
        }
    }
    acc
}

/// Verify the constructed pair satisfies the two-sided matrix inequality.
fn doubling_pair_is_valid(s: &DMatrix<f64>, s2: &DMatrix<f64>, alpha: f64) -> bool {
    let n = s.nrows();
    let mut lower = DMatrix::zeros(2 * n, 2 * n);
    let mut upper = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            lower[(i, j)] = s[(i, j)];
            lower[(n + i, n + j)] = -s2[(i, j)];
            upper[(i, j)] = -s[(i, j)];
            upper[(n + i, n + j)] = s2[(i, j)];
        }
        lower[(i, i)] += 3.0 * alpha;
        lower[(n + i, n + i)] += 3.0 * alpha;
        upper[(i, i)] += 3.0 * alpha;
        upper[(n + i, n + i)] += 3.0 * alpha;
        upper[(i, n + i)] -= 3.0 * alpha;
        upper[(n + i, i)] -= 3.0 * alpha;
    }
    let tol = -1e-9 * alpha.max(1.0);
    let min_lower = lower.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_upper = upper.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    min_lower >= tol && min_upper >= tol
}
