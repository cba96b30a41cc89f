//! Backward solution of the BSDE along a simulated ensemble,
//!
//! ```text
//! Y_k = E[Y_{k+1} | X_k] + dt f(t_k, X_k, Y, Z_k),
//! Z_k = E[Y_{k+1} dW_k^T | X_k] / dt,
//! ```
//!
//! with conditional expectations estimated by global polynomial least squares
//! per time slice (states standardized slice by slice, constant always in the
//! basis so sample means are preserved), and the `y` argument refined by a
//! fixed number of Picard passes through the driver. A zero-noise backward
//! Euler solver doubles as an exact oracle for `sigma = 0` configurations.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::OperatorSpec;
use crate::sde::{csv_err, PathEnsemble};
use nalgebra::DMatrix;
use std::io::Write;

/// Polynomial regression basis: all monomials with total degree <= d, or the
/// tensor set with per-dimension degree <= d. States are standardized per
/// slice; features touching a degenerate coordinate (zero spread, e.g. the
/// initial slice) are dropped for that slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegressionBasis {
    TotalDegree(u32),
    TensorDegree(u32),
}

impl RegressionBasis {
    /// Exponent multi-indices, constant first, then by degree.
    fn exponents(&self, dim: usize) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = Vec::new();
        match *self {
            RegressionBasis::TotalDegree(d) => {
                let mut stack = vec![vec![]];
                for _ in 0..dim {
                    let mut next = Vec::new();
                    for prefix in &stack {
                        let used: u32 = prefix.iter().sum();
                        for e in 0..=(d - used.min(d)) {
                            let mut v = prefix.clone();
                            v.push(e);
                            next.push(v);
                        }
                    }
                    stack = next;
                }
                out = stack;
            }
            RegressionBasis::TensorDegree(d) => {
                let count = (d as usize + 1).pow(dim as u32);
                for idx in 0..count {
                    let mut rem = idx;
                    let mut v = vec![0u32; dim];
                    for slot in v.iter_mut().rev() {
                        *slot = (rem % (d as usize + 1)) as u32;
                        rem /= d as usize + 1;
                    }
                    out.push(v);
                }
            }
        }
        out.sort_by_key(|v| (v.iter().sum::<u32>(), v.clone()));
        out
    }

    pub fn len(&self, dim: usize) -> usize {
        self.exponents(dim).len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-slice standardization and active-feature selection.
struct SliceBasis {
    exponents: Vec<Vec<u32>>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    degenerate: Vec<bool>,
    max_pow: usize,
}

impl SliceBasis {
    /// `states` holds the slice as `paths` rows of `dim` coordinates.
    fn build(basis: &RegressionBasis, states: &[f64], paths: usize, dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        for p in 0..paths {
            for i in 0..dim {
                mean[i] += states[p * dim + i];
            }
        }
        for m in mean.iter_mut() {
            *m /= paths as f64;
        }
        let mut var = vec![0.0; dim];
        for p in 0..paths {
            for i in 0..dim {
                let d = states[p * dim + i] - mean[i];
                var[i] += d * d;
            }
        }
        let mut scale = vec![0.0; dim];
        let mut degenerate = vec![false; dim];
        for i in 0..dim {
            let s = (var[i] / paths as f64).sqrt();
            if s < 1e-12 * (1.0 + mean[i].abs()) {
                degenerate[i] = true;
                scale[i] = 1.0;
            } else {
                scale[i] = s;
            }
        }
        let exponents: Vec<Vec<u32>> = basis
            .exponents(dim)
            .into_iter()
            .filter(|e| e.iter().enumerate().all(|(i, &p)| p == 0 || !degenerate[i]))
            .collect();
        let max_pow = exponents.iter().flat_map(|e| e.iter()).cloned().max().unwrap_or(0) as usize;
        Self { exponents, mean, scale, degenerate, max_pow }
    }

    fn cols(&self) -> usize {
        self.exponents.len()
    }

    /// `pows` is scratch of length `dim * (max_pow + 1)`.
    fn fill_row(&self, x: &[f64], row: &mut [f64], pows: &mut [f64]) {
        debug_assert_eq!(row.len(), self.cols());
        let dim = x.len();
        let stride = self.max_pow + 1;
        for i in 0..dim {
            let s = if self.degenerate[i] { 0.0 } else { (x[i] - self.mean[i]) / self.scale[i] };
            pows[i * stride] = 1.0;
            for e in 1..=self.max_pow {
                pows[i * stride + e] = pows[i * stride + e - 1] * s;
            }
        }
        for (c, exps) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (i, &e) in exps.iter().enumerate() {
                if e > 0 {
                    v *= pows[i * stride + e as usize];
                }
            }
            row[c] = v;
        }
    }
}

/// Rank-checked least-squares projector for one slice (or one slice group),
/// reusable for several right-hand sides.
struct SliceFit {
    design: DMatrix<f64>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    eps: f64,
}

impl SliceFit {
    fn new(design: DMatrix<f64>, slice: usize) -> Result<Self> {
        let cols = design.ncols();
        let svd = design.clone().svd(true, true);
        let sv_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let eps = (sv_max * design.nrows().max(cols) as f64 * f64::EPSILON).max(f64::MIN_POSITIVE);
        let rank = svd.rank(eps);
        if rank < cols {
            return Err(Error::RankDeficient { slice, rank, cols });
        }
        Ok(Self { design, svd, eps })
    }

    /// Fitted values `design * argmin ||design b - rhs||` per RHS column.
    fn fitted(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let coeffs = self
            .svd
            .solve(rhs, self.eps)
            .map_err(|e| Error::Input(format!("least squares solve failed: {e}")))?;
        Ok(&self.design * coeffs)
    }
}

/// Largest basis degree whose feature count fits the group with slack.
fn shrink_to_group(basis: &RegressionBasis, group_size: usize, dim: usize) -> RegressionBasis {
    let mut degree = match basis {
        RegressionBasis::TotalDegree(d) | RegressionBasis::TensorDegree(d) => *d,
    };
    let rebuild = |d: u32| match basis {
        RegressionBasis::TotalDegree(_) => RegressionBasis::TotalDegree(d),
        RegressionBasis::TensorDegree(_) => RegressionBasis::TensorDegree(d),
    };
    while degree > 0 && rebuild(degree).len(dim) * 2 > group_size {
        degree -= 1;
    }
    rebuild(degree)
}

/// Driver evaluated pathwise along an ensemble.
pub trait PathDriver: Sync {
    fn eval(&self, path: usize, step: usize, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;
}

impl<F> PathDriver for F
where
    F: Fn(usize, usize, f64, &[f64], f64, &[f64]) -> f64 + Sync,
{
    fn eval(&self, path: usize, step: usize, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        self(path, step, t, x, y, z)
    }
}

/// `f_{(b,sigma)}` with `(b, sigma)` read from the ensemble's control trace.
/// On ensembles with a stop rule the driver vanishes from the exit step on,
/// matching the stopped-BSDE setup.
pub struct ControlTraceDriver<'a> {
    op: &'a OperatorSpec,
    ensemble: &'a PathEnsemble,
}

impl<'a> ControlTraceDriver<'a> {
    pub fn new(op: &'a OperatorSpec, ensemble: &'a PathEnsemble) -> Self {
        Self { op, ensemble }
    }
}

impl PathDriver for ControlTraceDriver<'_> {
    fn eval(&self, path: usize, step: usize, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        if step >= self.ensemble.exit_step(path) {
            return 0.0;
        }
        if self.op.driver().is_zero() {
            return 0.0;
        }
        let n = self.op.dim_state();
        let m = self.op.dim_noise();
        let mut b = [0.0; 8];
        let mut sigma = [0.0; 64];
        let ctrl = self.op.control(self.ensemble.control(path, step));
        ctrl.drift(t, x, &mut b[..n]);
        ctrl.diffusion(t, x, &mut sigma[..n * m]);
        self.op.driver().eval(t, x, &b[..n], &sigma[..n * m], y, z)
    }
}

/// Backward LSMC solution along an ensemble.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    paths: usize,
    dim_noise: usize,
    /// `Y_k^{(p)}`, path-major, `K + 1` per path.
    y: Vec<f64>,
    /// `Z_k^{(p)}`, path-major, `K * M` per path.
    z: Vec<f64>,
    pub y0_estimate: f64,
    /// Monte Carlo standard error of the pathwise estimator
    /// `xi + sum_k dt f(...)`, whose mean equals `Y_0`.
    pub y0_stderr: f64,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    #[inline]
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[path * (self.grid.steps() + 1) + step]
    }

    #[inline]
    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let m = self.dim_noise;
        let base = (path * self.grid.steps() + step) * m;
        &self.z[base..base + m]
    }

    /// CSV rows `path, step, Y, Z_1..Z_M` (Z cells empty on the terminal row).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "Y".into()];
        header.extend((1..=self.dim_noise).map(|m| format!("Z_{m}")));
        w.write_record(&header).map_err(csv_err)?;
        let mut row: Vec<String> = Vec::new();
        for p in 0..self.paths {
            for k in 0..=self.grid.steps() {
                row.clear();
                row.push(p.to_string());
                row.push(k.to_string());
                row.push(format!("{}", self.y(p, k)));
                if k < self.grid.steps() {
                    row.extend(self.z(p, k).iter().map(|v| format!("{v}")));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), self.dim_noise));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Backward LSMC sweep. `terminal` is `xi` per path (copied bit-exactly into
/// the last slice); `picard_iters` counts applications of the driver in the
/// `y` refinement (0 = plain conditional expectation).
pub fn solve_bsde_lsmc(
    ensemble: &PathEnsemble,
    terminal: &[f64],
    driver: &impl PathDriver,
    basis: &RegressionBasis,
    picard_iters: usize,
) -> Result<BsdeSolution> {
    let paths = ensemble.paths();
    let steps = ensemble.grid().steps();
    let n = ensemble.dim_state();
    let m = ensemble.noise().dim();
    let dt = ensemble.grid().dt();
    if terminal.len() != paths {
        return Err(Error::Dimension(format!(
            "terminal has {} entries for {} paths",
            terminal.len(),
            paths
        )));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("terminal condition".into()));
    }

    let mut y = vec![0.0; paths * (steps + 1)];
    let mut z = vec![0.0; paths * steps * m];
    for p in 0..paths {
        y[p * (steps + 1) + steps] = terminal[p];
    }
    // pathwise accumulator xi + sum dt*f for the standard error
    let mut v_accum = terminal.to_vec();

    // On ensembles with first-exit stopping, stopped and live paths carry
    // structurally different value functions (frozen vs evolving) and a Z
    // that jumps across the exit boundary; each slice is therefore regressed
    // per group. Without stopping there is a single group and the strict
    // rank-deficiency contract applies; sub-groups shrink the basis degree
    // instead when too small to support it.
    let has_exits = (0..paths).any(|p| ensemble.exit_step(p) < steps);
    let mut dw = vec![0.0; m];
    for k in (0..steps).rev() {
        let t = ensemble.grid().node(k);
        let groups: Vec<Vec<usize>> = if has_exits {
            let (stopped, live): (Vec<usize>, Vec<usize>) =
                (0..paths).partition(|&p| ensemble.exit_step(p) <= k);
            [live, stopped].into_iter().filter(|g| !g.is_empty()).collect()
        } else {
            vec![(0..paths).collect()]
        };
        for group in &groups {
            let gn = group.len();
            let group_basis = if has_exits { shrink_to_group(basis, gn, n) } else { basis.clone() };
            let mut states = vec![0.0; gn * n];
            for (row_idx, &p) in group.iter().enumerate() {
                states[row_idx * n..(row_idx + 1) * n].copy_from_slice(ensemble.state(p, k));
            }
            let slice = SliceBasis::build(&group_basis, &states, gn, n);
            let cols = slice.cols();
            let mut design = DMatrix::zeros(gn, cols);
            let mut row = vec![0.0; cols];
            let mut pows = vec![0.0; n * (slice.max_pow + 1)];
            for (row_idx, &p) in group.iter().enumerate() {
                slice.fill_row(ensemble.state(p, k), &mut row, &mut pows);
                for (c, v) in row.iter().enumerate() {
                    design[(row_idx, c)] = *v;
                }
            }
            let fit = SliceFit::new(design, k)?;

            let mut ynext_col = DMatrix::zeros(gn, 1);
            for (row_idx, &p) in group.iter().enumerate() {
                ynext_col[(row_idx, 0)] = y[p * (steps + 1) + k + 1];
            }
            let cont = fit.fitted(&ynext_col)?;

            // Z: project the continuation residual on the increments; the
            // fitted continuation acts as a control variate (it is
            // conditionally orthogonal to dW, so the target's conditional
            // expectation is unchanged while its variance drops).
            let mut ztargets = DMatrix::zeros(gn, m);
            for (row_idx, &p) in group.iter().enumerate() {
                ensemble.noise().increment(p, k, &mut dw);
                let resid = ynext_col[(row_idx, 0)] - cont[(row_idx, 0)];
                for j in 0..m {
                    ztargets[(row_idx, j)] = resid * dw[j];
                }
            }
            let zfit = fit.fitted(&ztargets)?;

            for (row_idx, &p) in group.iter().enumerate() {
                let cont_p = cont[(row_idx, 0)];
                let zbase = (p * steps + k) * m;
                for j in 0..m {
                    z[zbase + j] = zfit[(row_idx, j)] / dt;
                }
                let x = ensemble.state(p, k);
                let mut yv = cont_p;
                for _ in 0..picard_iters {
                    yv = cont_p + dt * driver.eval(p, k, t, x, yv, &z[zbase..zbase + m]);
                }
                if !yv.is_finite() {
                    return Err(Error::NonFinite(format!("Y at path {p}, step {k}")));
                }
                y[p * (steps + 1) + k] = yv;
                v_accum[p] += yv - cont_p;
            }
        }
    }

    let y0_estimate = (0..paths).map(|p| y[p * (steps + 1)]).sum::<f64>() / paths as f64;
    let mean_v = v_accum.iter().sum::<f64>() / paths as f64;
    let var_v = if paths > 1 {
        v_accum.iter().map(|v| (v - mean_v) * (v - mean_v)).sum::<f64>() / (paths - 1) as f64
    } else {
        0.0
    };
    let y0_stderr = (var_v / paths as f64).sqrt();

    Ok(BsdeSolution { grid: ensemble.grid().clone(), paths, dim_noise: m, y, z, y0_estimate, y0_stderr })
}

/// Backward explicit Euler for the deterministic case `y' = -f(t, y)`;
/// exact oracle machinery for `sigma = 0` configurations.
pub fn solve_bsde_zero_noise(
    y_terminal: f64,
    driver: impl Fn(f64, f64) -> f64,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let steps = grid.steps();
    let dt = grid.dt();
    let mut y = vec![0.0; steps + 1];
    y[steps] = y_terminal;
    for k in (0..steps).rev() {
        let t_next = grid.node(k + 1);
        y[k] = y[k + 1] + dt * driver(t_next, y[k + 1]);
        if !y[k].is_finite() {
            return Err(Error::NonFinite(format!("zero-noise Y at step {k}")));
        }
    }
    Ok(y)
}

/// Outcome of the pathwise comparison `Y^1 <= Y^2 + tol`.
#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub ordered: bool,
    /// Largest value of `Y^1 - Y^2` over all paths and steps.
    pub worst_margin: f64,
    pub witness: (usize, usize),
}

/// Check the comparison-theorem ordering between two solutions on the same
/// ensemble. The caller asserts the hypotheses (ordered terminals, dominated
/// driver); this verifies the conclusion pathwise.
pub fn check_bsde_comparison(
    sol1: &BsdeSolution,
    sol2: &BsdeSolution,
    tol: f64,
) -> Result<ComparisonOutcome> {
    if sol1.grid != sol2.grid || sol1.paths != sol2.paths {
        return Err(Error::Input("comparison needs solutions on the same ensemble and grid".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut witness = (0, 0);
    for p in 0..sol1.paths {
        for k in 0..=sol1.grid.steps() {
            let margin = sol1.y(p, k) - sol2.y(p, k);
            if margin > worst {
                worst = margin;
                witness = (p, k);
            }
        }
    }
    Ok(ComparisonOutcome { ordered: worst <= tol, worst_margin: worst, witness })
}

/// Outcome of the stopped-BSDE constancy check.
#[derive(Debug, Clone)]
pub struct StoppedOutcome {
    pub ok: bool,
    /// Largest `|Y_k - Y_tau|` over paths and `k >= tau`.
    pub worst_y_gap: f64,
    /// Largest `|Z_k|` over paths and `k >= tau`.
    pub worst_z_norm: f64,
    pub witness: (usize, usize),
}

/// Verify `Y_k = Y_tau` and `Z_k = 0` after the per-path stopping step, up
/// to `tol` (the hypotheses - driver vanishing after `tau`, terminal
/// measurable at `tau` - are the caller's responsibility).
pub fn check_stopped_bsde(sol: &BsdeSolution, exit_steps: &[usize], tol: f64) -> Result<StoppedOutcome> {
    if exit_steps.len() != sol.paths {
        return Err(Error::Dimension("one exit step per path required".into()));
    }
    let steps = sol.grid.steps();
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;
    let mut witness = (0, 0);
    for (p, &tau) in exit_steps.iter().enumerate() {
        let tau = tau.min(steps);
        let frozen = sol.y(p, tau);
        for k in tau..=steps {
            let gap = (sol.y(p, k) - frozen).abs();
            if gap > worst_y {
                worst_y = gap;
                witness = (p, k);
            }
        }
        for k in tau..steps {
            let zn = sol.z(p, k).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_z = worst_z.max(zn);
        }
    }
    Ok(StoppedOutcome { ok: worst_y <= tol && worst_z <= tol, worst_y_gap: worst_y, worst_z_norm: worst_z, witness })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientField, DriverSpec, TerminalSpec};
    use crate::sde::{simulate_forward, ConstantPolicy, InitialState, NoiseStore, StopRule};

    fn zero_driver() -> impl PathDriver {
        |_: usize, _: usize, _: f64, _: &[f64], _: f64, _: &[f64]| 0.0
    }

    fn brownian_ensemble(x0: f64, paths: usize, steps: usize, seed: u64) -> (OperatorSpec, PathEnsemble) {
        let op = OperatorSpec::new(
            vec![CoefficientField::scalar("bm", 0.0, 1.0)],
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let noise = NoiseStore::for_grid(seed, paths, &grid, 1).unwrap();
        let ens = simulate_forward(
            &ConstantPolicy(0),
            &op,
            &grid,
            InitialState::Point(&[x0]),
            &noise,
            StopRule::None,
        )
        .unwrap();
        (op, ens)
    }

    #[test]
    fn martingale_case_recovers_the_mean() {
        // f = 0, xi = X_T, X = 2 + W: Y_0 should be 2
        let (_, ens) = brownian_ensemble(2.0, 20_000, 10, 4);
        let xi: Vec<f64> = ens.map_terminal(|x| x[0]);
        let sol = solve_bsde_lsmc(&ens, &xi, &zero_driver(), &RegressionBasis::TotalDegree(3), 2).unwrap();
        assert!(
            (sol.y0_estimate - 2.0).abs() <= 3.0 * sol.y0_stderr,
            "y0 {} +- {}",
            sol.y0_estimate,
            sol.y0_stderr
        );
        // terminal slice is xi bit-exactly
        for p in 0..200 {
            assert_eq!(sol.y(p, 10).to_bits(), xi[p].to_bits());
        }
        // with f = 0 the estimate is the sample mean of xi (mean preservation)
        let mean_xi = xi.iter().sum::<f64>() / xi.len() as f64;
        assert!((sol.y0_estimate - mean_xi).abs() < 1e-10);
    }

    #[test]
    fn discounted_constant_terminal() {
        // f = -0.1 y, xi = 1: Y_0 = e^{-0.1} up to O(dt)
        let (_, ens) = brownian_ensemble(0.0, 4_000, 40, 9);
        let xi = vec![1.0; ens.paths()];
        let driver = |_: usize, _: usize, _: f64, _: &[f64], y: f64, _: &[f64]| -0.1 * y;
        let sol = solve_bsde_lsmc(&ens, &xi, &driver, &RegressionBasis::TotalDegree(2), 2).unwrap();
        let exact = (-0.1f64).exp();
        assert!(
            (sol.y0_estimate - exact).abs() <= 3.0 * sol.y0_stderr + 0.1 / 40.0,
            "y0 {} vs {}",
            sol.y0_estimate,
            exact
        );
    }

    #[test]
    fn driver_linear_in_z() {
        // f = z, xi = X_T, X = x0 + W: ansatz Y_t = X_t + (T - t), Z = 1,
        // verified by substitution, so Y_0 = x0 + 1
        let x0 = 0.5;
        let (_, ens) = brownian_ensemble(x0, 20_000, 20, 14);
        let xi: Vec<f64> = ens.map_terminal(|x| x[0]);
        let driver = |_: usize, _: usize, _: f64, _: &[f64], _: f64, z: &[f64]| z[0];
        let sol = solve_bsde_lsmc(&ens, &xi, &driver, &RegressionBasis::TotalDegree(3), 3).unwrap();
        assert!(
            (sol.y0_estimate - (x0 + 1.0)).abs() <= 3.0 * sol.y0_stderr + 0.08,
            "y0 {} +- {}",
            sol.y0_estimate,
            sol.y0_stderr
        );
        // Z near 1 in the bulk
        let mut zbar = 0.0;
        for p in 0..ens.paths() {
            zbar += sol.z(p, 10)[0];
        }
        zbar /= ens.paths() as f64;
        assert!((zbar - 1.0).abs() < 0.1, "mean Z {zbar}");
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        // 3 paths cannot support a 4-column basis
        let (_, ens) = brownian_ensemble(0.0, 3, 4, 2);
        let xi: Vec<f64> = ens.map_terminal(|x| x[0]);
        let err = solve_bsde_lsmc(&ens, &xi, &zero_driver(), &RegressionBasis::TotalDegree(3), 1);
        match err {
            Err(Error::RankDeficient { .. }) => {}
            other => panic!("expected rank-deficiency, got {other:?}"),
        }
    }

    #[test]
    fn zero_noise_constant_and_exponential() {
        let grid = TimeGrid::new(0.0, 1.0, 10);
        let grid = grid.unwrap();
        // f = 0: constant path
        let y = solve_bsde_zero_noise(3.5, |_, _| 0.0, &grid).unwrap();
        assert!(y.iter().all(|v| *v == 3.5));
        // f = 1, y_T = 0: Y_t = T - t exactly
        let y = solve_bsde_zero_noise(0.0, |_, _| 1.0, &grid).unwrap();
        assert!((y[0] - 1.0).abs() <= 1e-12);
        // f = -0.1 y, y_T = 1, K = 1e4: |Y_0 - e^{-0.1}| <= 1e-5,
        // with the error estimated independently by step halving
        let fine = TimeGrid::new(0.0, 1.0, 10_000).unwrap();
        let y1 = solve_bsde_zero_noise(1.0, |_, y| -0.1 * y, &fine).unwrap()[0];
        let fine2 = TimeGrid::new(0.0, 1.0, 20_000).unwrap();
        let y2 = solve_bsde_zero_noise(1.0, |_, y| -0.1 * y, &fine2).unwrap()[0];
        let exact = (-0.1f64).exp();
        assert!((y1 - exact).abs() <= 1e-5, "err {}", (y1 - exact).abs());
        assert!((y1 - y2).abs() * 2.0 >= (y1 - exact).abs() * 0.5); // halving consistent with order 1
    }

    #[test]
    fn comparison_shift_and_identity() {
        let (_, ens) = brownian_ensemble(0.0, 2_000, 10, 6);
        let xi1: Vec<f64> = ens.map_terminal(|x| x[0]);
        let xi2: Vec<f64> = xi1.iter().map(|v| v + 1.0).collect();
        let b = &RegressionBasis::TotalDegree(2);
        let s1 = solve_bsde_lsmc(&ens, &xi1, &zero_driver(), b, 1).unwrap();
        let s2 = solve_bsde_lsmc(&ens, &xi2, &zero_driver(), b, 1).unwrap();
        let cmp = check_bsde_comparison(&s1, &s2, 1e-9).unwrap();
        assert!(cmp.ordered);
        assert!((cmp.worst_margin + 1.0).abs() < 1e-9, "margin {}", cmp.worst_margin);
        let same = check_bsde_comparison(&s1, &s1, 0.0).unwrap();
        assert!(same.ordered);
        assert_eq!(same.worst_margin, 0.0);
    }

    #[test]
    fn zero_noise_strict_comparison() {
        // sigma = 0 with f2 > f1 strictly: Y^2_0 > Y^1_0, values exact
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let y1 = solve_bsde_zero_noise(0.5, |_, _| 0.0, &grid).unwrap();
        let y2 = solve_bsde_zero_noise(0.5, |_, _| 0.3, &grid).unwrap();
        for k in 0..grid.steps() {
            assert!(y1[k] < y2[k]);
        }
        assert!((y2[0] - y1[0] - 0.3).abs() <= 1e-10);
    }

    #[test]
    fn stopped_bsde_trivial_cases() {
        let (op, ens) = brownian_ensemble(0.0, 20_000, 8, 3);
        // tau = K everywhere: trivially constant after tau
        let xi = vec![1.0; ens.paths()];
        let sol = solve_bsde_lsmc(&ens, &xi, &zero_driver(), &RegressionBasis::TotalDegree(2), 1).unwrap();
        let taus = vec![8usize; ens.paths()];
        assert!(check_stopped_bsde(&sol, &taus, 1e-12).unwrap().ok);

        // tau = 0 via a box the start point has already left: every path is
        // frozen from step 0, so Y = c exactly and Z carries only the
        // regression's O(1/sqrt(P dt)) sampling noise
        let grid = ens.grid().clone();
        let noise = NoiseStore::for_grid(31, 20_000, &grid, 1).unwrap();
        let stop = StopRule::FirstExitBox { lo: vec![-0.5], hi: vec![0.5] };
        let frozen = simulate_forward(
            &ConstantPolicy(0),
            &op,
            &grid,
            InitialState::Point(&[1.0]),
            &noise,
            stop,
        )
        .unwrap();
        let taus: Vec<usize> = (0..frozen.paths()).map(|p| frozen.exit_step(p)).collect();
        assert!(taus.iter().all(|&t| t == 0));
        let xi = vec![1.0; frozen.paths()];
        let sol =
            solve_bsde_lsmc(&frozen, &xi, &zero_driver(), &RegressionBasis::TotalDegree(2), 1).unwrap();
        let out = check_stopped_bsde(&sol, &taus, 5e-2).unwrap();
        assert!(out.ok, "y gap {}, z {}", out.worst_y_gap, out.worst_z_norm);
        assert!(out.worst_y_gap <= 1e-12);
    }

    #[test]
    fn picard_refinement_is_stable_for_monotone_drivers() {
        let (_, ens) = brownian_ensemble(1.0, 8_000, 20, 12);
        let xi: Vec<f64> = ens.map_terminal(|x| x[0]);
        let driver = |_: usize, _: usize, _: f64, _: &[f64], y: f64, z: &[f64]| -0.5 * y + 0.2 * z[0];
        let b = &RegressionBasis::TotalDegree(3);
        let s2 = solve_bsde_lsmc(&ens, &xi, &driver, b, 2).unwrap();
        let s4 = solve_bsde_lsmc(&ens, &xi, &driver, b, 4).unwrap();
        assert!(
            (s2.y0_estimate - s4.y0_estimate).abs() < s2.y0_stderr.max(1e-6),
            "J=2 {} vs J=4 {} (stderr {})",
            s2.y0_estimate,
            s4.y0_estimate,
            s2.y0_stderr
        );
    }

    #[test]
    fn terminal_shift_moves_y0_exactly_for_y_independent_driver() {
        let (_, ens) = brownian_ensemble(0.0, 2_000, 10, 8);
        let xi: Vec<f64> = ens.map_terminal(|x| x[0] * x[0]);
        let delta = 0.37;
        let xi2: Vec<f64> = xi.iter().map(|v| v + delta).collect();
        let b = &RegressionBasis::TotalDegree(2);
        let s1 = solve_bsde_lsmc(&ens, &xi, &zero_driver(), b, 1).unwrap();
        let s2 = solve_bsde_lsmc(&ens, &xi2, &zero_driver(), b, 1).unwrap();
        assert!((s2.y0_estimate - s1.y0_estimate - delta).abs() < 1e-10);
    }
}
