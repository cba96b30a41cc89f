//! Problem datum: the control family, driver and terminal condition, and
//! evaluation of the sup-envelope operator
//!
//! ```text
//! F(t, x, y, p, S) = max over (b, sigma) of
//!     1/2 <sigma sigma^T(t,x), S> + p^T b(t,x) + f(t, x, b, sigma, y, p^T sigma)
//! ```
//!
//! The control family is a finite, user-supplied list of coefficient pairs;
//! a finite family is closed, so the maximum is attained and ties are broken
//! by smallest index for reproducibility.

pub mod registry;
mod validate;

pub use validate::{validate_assumptions, validate_assumptions_in, AssumptionCheck, AssumptionReport, SampleBox};

use crate::error::{Error, Result};
use nalgebra::DMatrix;

use registry::{DriverFn, FieldFn, TerminalFn};

/// One coefficient entry: constant, affine in `x`, or a registered function.
#[derive(Debug, Clone)]
pub enum CoeffForm {
    /// Fixed output, independent of `(t, x)`.
    Constant(Vec<f64>),
    /// `out[r] = sum_k linear[r * n + k] * x[k] + offset[r]`, per entry.
    Affine { linear: Vec<f64>, offset: Vec<f64> },
    /// Resolved from the compile-time registry.
    Named { name: String, f: FieldFn },
}

impl CoeffForm {
    pub fn named(name: &str) -> Result<Self> {
        let f = registry::field(name).ok_or_else(|| Error::UnknownFunction {
            name: name.into(),
            role: "coefficient field",
        })?;
        Ok(CoeffForm::Named { name: name.into(), f })
    }

    fn check_len(&self, out_len: usize, n: usize, what: &str) -> Result<()> {
        match self {
            CoeffForm::Constant(v) if v.len() != out_len => Err(Error::Dimension(format!(
                "{what}: constant has {} entries, expected {out_len}",
                v.len()
            ))),
            CoeffForm::Affine { linear, offset } if linear.len() != out_len * n || offset.len() != out_len => {
                Err(Error::Dimension(format!(
                    "{what}: affine form needs linear {out_len}x{n} and offset {out_len}, got {} and {}",
                    linear.len(),
                    offset.len()
                )))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            CoeffForm::Constant(v) => out.copy_from_slice(v),
            CoeffForm::Affine { linear, offset } => {
                let n = x.len();
                for r in 0..out.len() {
                    let row = &linear[r * n..(r + 1) * n];
                    let mut acc = offset[r];
                    for k in 0..n {
                        acc += row[k] * x[k];
                    }
                    out[r] = acc;
                }
            }
            CoeffForm::Named { f, .. } => f(t, x, out),
        }
    }
}

/// One admissible control: a drift/diffusion pair on `[0,T] x R^N` together
/// with its declared Lipschitz constant in `x`.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    label: String,
    dim_state: usize,
    dim_noise: usize,
    drift: CoeffForm,
    diffusion: CoeffForm,
    lipschitz_bound: f64,
}

impl CoefficientField {
    pub fn new(
        label: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        drift: CoeffForm,
        diffusion: CoeffForm,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        if dim_state == 0 || dim_noise == 0 {
            return Err(Error::Dimension("state and noise dimensions must be >= 1".into()));
        }
        if !(lipschitz_bound.is_finite() && lipschitz_bound >= 0.0) {
            return Err(Error::Input("lipschitz_bound must be a nonnegative real".into()));
        }
        drift.check_len(dim_state, dim_state, "drift")?;
        diffusion.check_len(dim_state * dim_noise, dim_state, "diffusion")?;
        Ok(Self {
            label: label.into(),
            dim_state,
            dim_noise,
            drift,
            diffusion,
            lipschitz_bound,
        })
    }

    /// Constant pair `(b, sigma)` in one dimension; handy in tests.
    pub fn scalar(label: impl Into<String>, b: f64, sigma: f64) -> Self {
        Self::new(
            label,
            1,
            1,
            CoeffForm::Constant(vec![b]),
            CoeffForm::Constant(vec![sigma]),
            0.0,
        )
        .expect("scalar coefficient field")
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    /// Drift `b(t, x)` into `out` (length `N`).
    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_state);
        self.drift.eval(t, x, out);
    }

    /// Diffusion `sigma(t, x)` into `out` (length `N * M`, row-major).
    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_state * self.dim_noise);
        self.diffusion.eval(t, x, out);
    }

    pub fn drift_form(&self) -> &CoeffForm {
        &self.drift
    }

    pub fn diffusion_form(&self) -> &CoeffForm {
        &self.diffusion
    }
}

/// Driver form; the full driver is `f(t, x, b, sigma, y, z)`.
#[derive(Debug, Clone)]
pub enum DriverForm {
    Zero,
    /// `f = rate * y`.
    LinearY { rate: f64 },
    /// `f = weights . z`.
    LinearZ { weights: Vec<f64> },
    Named { name: String, f: DriverFn },
}

/// Driver with its declared structural constants: Lipschitz constant in `z`
/// and one-sided monotonicity constant `mu` in `y`.
#[derive(Debug, Clone)]
pub struct DriverSpec {
    form: DriverForm,
    lipschitz_z: f64,
    monotonicity_mu: f64,
}

impl DriverSpec {
    pub fn zero() -> Self {
        Self { form: DriverForm::Zero, lipschitz_z: 0.0, monotonicity_mu: 0.0 }
    }

    pub fn linear_y(rate: f64) -> Self {
        Self { form: DriverForm::LinearY { rate }, lipschitz_z: 0.0, monotonicity_mu: rate }
    }

    pub fn linear_z(weights: Vec<f64>) -> Self {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        Self { form: DriverForm::LinearZ { weights }, lipschitz_z: norm, monotonicity_mu: 0.0 }
    }

    pub fn named(name: &str, lipschitz_z: f64, monotonicity_mu: f64) -> Result<Self> {
        let f = registry::driver(name).ok_or_else(|| Error::UnknownFunction {
            name: name.into(),
            role: "driver",
        })?;
        Ok(Self {
            form: DriverForm::Named { name: name.into(), f },
            lipschitz_z,
            monotonicity_mu,
        })
    }

    pub fn with_declared(mut self, lipschitz_z: f64, monotonicity_mu: f64) -> Self {
        self.lipschitz_z = lipschitz_z;
        self.monotonicity_mu = monotonicity_mu;
        self
    }

    pub fn lipschitz_z(&self) -> f64 {
        self.lipschitz_z
    }

    pub fn monotonicity_mu(&self) -> f64 {
        self.monotonicity_mu
    }

    pub fn form(&self) -> &DriverForm {
        &self.form
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.form, DriverForm::Zero)
    }

    /// True when the driver does not depend on its `y` argument.
    pub fn is_y_independent(&self) -> bool {
        matches!(self.form, DriverForm::Zero | DriverForm::LinearZ { .. })
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], b: &[f64], sigma: &[f64], y: f64, z: &[f64]) -> f64 {
        match &self.form {
            DriverForm::Zero => 0.0,
            DriverForm::LinearY { rate } => rate * y,
            DriverForm::LinearZ { weights } => weights.iter().zip(z).map(|(w, v)| w * v).sum(),
            DriverForm::Named { f, .. } => f(t, x, b, sigma, y, z),
        }
    }
}

/// Terminal condition `g` plus an additive shift, with declared Lipschitz and
/// linear-growth constants (certified on the sampling box, not globally).
#[derive(Debug, Clone)]
pub struct TerminalSpec {
    name: String,
    f: TerminalFn,
    shift: f64,
    lipschitz_bound: f64,
    growth_bound: f64,
}

impl TerminalSpec {
    pub fn new(name: &str, lipschitz_bound: f64, growth_bound: f64) -> Result<Self> {
        let f = registry::terminal(name).ok_or_else(|| Error::UnknownFunction {
            name: name.into(),
            role: "terminal condition",
        })?;
        Ok(Self { name: name.into(), f, shift: 0.0, lipschitz_bound, growth_bound })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn growth_bound(&self) -> f64 {
        self.growth_bound
    }

    /// Same terminal with `delta` added pointwise.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut out = self.clone();
        out.shift += delta;
        out
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x) + self.shift
    }
}

/// The full problem datum for the sup-envelope operator and its Cauchy
/// problem: finite control family, driver, terminal condition, horizon,
/// dimensions and the declared ellipticity floor.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    controls: Vec<CoefficientField>,
    driver: DriverSpec,
    terminal: TerminalSpec,
    horizon: f64,
    dim_state: usize,
    dim_noise: usize,
    ellipticity_lambda: f64,
}

impl OperatorSpec {
    pub fn new(
        controls: Vec<CoefficientField>,
        driver: DriverSpec,
        terminal: TerminalSpec,
        horizon: f64,
        ellipticity_lambda: f64,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Input("control family must be nonempty".into()));
        }
        let dim_state = controls[0].dim_state();
        let dim_noise = controls[0].dim_noise();
        for c in &controls {
            if c.dim_state() != dim_state || c.dim_noise() != dim_noise {
                return Err(Error::Dimension(format!(
                    "control `{}` has dims ({}, {}), expected ({}, {})",
                    c.label(),
                    c.dim_state(),
                    c.dim_noise(),
                    dim_state,
                    dim_noise
                )));
            }
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
        }
        if !(ellipticity_lambda.is_finite() && ellipticity_lambda >= 0.0) {
            return Err(Error::Input("ellipticity lambda must be nonnegative".into()));
        }
        let op = Self {
            controls,
            driver,
            terminal,
            horizon,
            dim_state,
            dim_noise,
            ellipticity_lambda,
        };
        let observed = op.min_diffusion_eigenvalue(64, 0x5eed);
        if op.ellipticity_lambda > observed + 1e-9 {
            return Err(Error::Input(format!(
                "declared ellipticity lambda {} exceeds the sampled minimum eigenvalue {:.6} of sigma sigma^T",
                op.ellipticity_lambda, observed
            )));
        }
        Ok(op)
    }

    pub fn controls(&self) -> &[CoefficientField] {
        &self.controls
    }

    pub fn control(&self, idx: usize) -> &CoefficientField {
        &self.controls[idx]
    }

    pub fn driver(&self) -> &DriverSpec {
        &self.driver
    }

    pub fn terminal(&self) -> &TerminalSpec {
        &self.terminal
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn ellipticity_lambda(&self) -> f64 {
        self.ellipticity_lambda
    }

    /// Same problem with the terminal condition replaced.
    pub fn with_terminal(&self, terminal: TerminalSpec) -> Self {
        let mut out = self.clone();
        out.terminal = terminal;
        out
    }

    pub fn with_driver(&self, driver: DriverSpec) -> Self {
        let mut out = self.clone();
        out.driver = driver;
        out
    }

    /// Minimum eigenvalue of `sigma sigma^T(t, x)` over a seeded sweep of
    /// `[0, T] x [-4, 4]^N` and all controls.
    pub fn min_diffusion_eigenvalue(&self, samples: usize, seed: u64) -> f64 {
        let n = self.dim_state;
        let m = self.dim_noise;
        let key = crate::rng::derive(seed, 0x11a);
        let mut sigma = vec![0.0; n * m];
        let mut x = vec![0.0; n];
        let mut min_eig = f64::INFINITY;
        let mut ctr = 0u64;
        for s in 0..samples.max(1) {
            let t = if s == 0 { 0.0 } else { crate::rng::uniform_in(key, ctr, 0.0, self.horizon) };
            ctr += 1;
            for xi in x.iter_mut() {
                *xi = if s == 0 { 0.0 } else { crate::rng::uniform_in(key, ctr, -4.0, 4.0) };
                ctr += 1;
            }
            for c in &self.controls {
                c.diffusion(t, &x, &mut sigma);
                let mut a = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for k in 0..m {
                            acc += sigma[i * m + k] * sigma[j * m + k];
                        }
                        a[(i, j)] = acc;
                    }
                }
                let eig = a.symmetric_eigen();
                let local = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                min_eig = min_eig.min(local);
            }
        }
        min_eig
    }
}

/// Scratch buffers reused by the per-node / per-path hot loops.
#[derive(Debug, Clone)]
pub struct OpWorkspace {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

impl OpWorkspace {
    pub fn new(dim_state: usize, dim_noise: usize) -> Self {
        Self {
            b: vec![0.0; dim_state],
            sigma: vec![0.0; dim_state * dim_noise],
            z: vec![0.0; dim_noise],
        }
    }

    pub fn for_op(op: &OperatorSpec) -> Self {
        Self::new(op.dim_state(), op.dim_noise())
    }
}

fn check_symmetric(s: &[f64], n: usize) -> Result<()> {
    let scale = s.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (s[i * n + j] - s[j * n + i]).abs() > 1e-12 * scale {
                return Err(Error::Input(format!(
                    "second-order argument is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Semilinear generator of one control:
/// `1/2 <sigma sigma^T(t,x), S> + p^T b(t,x) + f(t, x, b, sigma, y, p^T sigma)`.
///
/// `s_matrix` is the symmetric `N x N` second-order argument, row-major.
pub fn eval_generator(
    ctrl: &CoefficientField,
    driver: &DriverSpec,
    t: f64,
    x: &[f64],
    y: f64,
    p: &[f64],
    s_matrix: &[f64],
) -> Result<f64> {
    let mut ws = OpWorkspace::new(ctrl.dim_state(), ctrl.dim_noise());
    eval_generator_ws(ctrl, driver, t, x, y, p, s_matrix, &mut ws)
}

/// As [`eval_generator`] but reusing caller-provided scratch space.
#[allow(clippy::too_many_arguments)]
pub fn eval_generator_ws(
    ctrl: &CoefficientField,
    driver: &DriverSpec,
    t: f64,
    x: &[f64],
    y: f64,
    p: &[f64],
    s_matrix: &[f64],
    ws: &mut OpWorkspace,
) -> Result<f64> {
    let n = ctrl.dim_state();
    let m = ctrl.dim_noise();
    if x.len() != n || p.len() != n || s_matrix.len() != n * n {
        return Err(Error::Dimension(format!(
            "generator arguments for state dim {n}: |x|={}, |p|={}, |S|={}",
            x.len(),
            p.len(),
            s_matrix.len()
        )));
    }
    check_symmetric(s_matrix, n)?;
    ctrl.drift(t, x, &mut ws.b);
    ctrl.diffusion(t, x, &mut ws.sigma);

    // 1/2 <sigma sigma^T, S> = 1/2 sum_k sigma_col_k^T S sigma_col_k
    let mut second = 0.0;
    for k in 0..m {
        for i in 0..n {
            let si = ws.sigma[i * m + k];
            if si == 0.0 {
                continue;
            }
            for j in 0..n {
                second += si * ws.sigma[j * m + k] * s_matrix[i * n + j];
            }
        }
    }
    second *= 0.5;

    let mut first = 0.0;
    for i in 0..n {
        first += p[i] * ws.b[i];
    }

    for k in 0..m {
        let mut acc = 0.0;
        for i in 0..n {
            acc += p[i] * ws.sigma[i * m + k];
        }
        ws.z[k] = acc;
    }
    let fval = driver.eval(t, x, &ws.b, &ws.sigma, y, &ws.z);

    let total = second + first + fval;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("generator `{}` at t={t}", ctrl.label())));
    }
    Ok(total)
}

/// Sup-envelope operator value and the smallest control index attaining it.
pub fn eval_f(
    op: &OperatorSpec,
    t: f64,
    x: &[f64],
    y: f64,
    p: &[f64],
    s_matrix: &[f64],
) -> Result<(f64, usize)> {
    let mut ws = OpWorkspace::for_op(op);
    eval_f_ws(op, t, x, y, p, s_matrix, &mut ws)
}

/// As [`eval_f`] with caller scratch space.
pub fn eval_f_ws(
    op: &OperatorSpec,
    t: f64,
    x: &[f64],
    y: f64,
    p: &[f64],
    s_matrix: &[f64],
    ws: &mut OpWorkspace,
) -> Result<(f64, usize)> {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (j, ctrl) in op.controls().iter().enumerate() {
        let v = eval_generator_ws(ctrl, op.driver(), t, x, y, p, s_matrix, ws)?;
        // strict '>' keeps the smallest index on ties
        if v > best {
            best = v;
            arg = j;
        }
    }
    Ok((best, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_op(sigmas: &[f64]) -> OperatorSpec {
        let controls = sigmas
            .iter()
            .map(|&s| CoefficientField::scalar(format!("sigma{s}"), 0.0, s))
            .collect();
        OperatorSpec::new(
            controls,
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn generator_second_order_term() {
        // b = 0, sigma = 1, f = 0, S = 2 -> S/2 = 1
        let ctrl = CoefficientField::scalar("c", 0.0, 1.0);
        let v = eval_generator(&ctrl, &DriverSpec::zero(), 0.0, &[0.0], 0.0, &[0.0], &[2.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn generator_first_order_term() {
        // b = 1, sigma = 0, p = 3 -> p^T b = 3
        let ctrl = CoefficientField::scalar("c", 1.0, 0.0);
        let v = eval_generator(&ctrl, &DriverSpec::zero(), 0.0, &[0.0], 0.0, &[3.0], &[0.0]).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn generator_driver_term() {
        // f = -0.1 y with y = 5 -> -0.5
        let ctrl = CoefficientField::scalar("c", 0.0, 1.0);
        let v =
            eval_generator(&ctrl, &DriverSpec::linear_y(-0.1), 0.0, &[0.0], 5.0, &[0.0], &[0.0]).unwrap();
        assert!((v - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn envelope_singleton_and_two_controls() {
        let single = heat_op(&[1.0]);
        assert_eq!(eval_f(&single, 0.0, &[0.0], 0.0, &[0.0], &[2.0]).unwrap(), (1.0, 0));

        let two = heat_op(&[1.0, 2.0]);
        // S = -1: max(-0.5, -2) attained by sigma = 1
        assert_eq!(eval_f(&two, 0.0, &[0.0], 0.0, &[0.0], &[-1.0]).unwrap(), (-0.5, 0));
        // S = +1: max(0.5, 2) attained by sigma = 2
        assert_eq!(eval_f(&two, 0.0, &[0.0], 0.0, &[0.0], &[1.0]).unwrap(), (2.0, 1));
    }

    #[test]
    fn envelope_dominates_every_generator_exactly() {
        let op = heat_op(&[0.5, 1.0, 2.0]);
        for s in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let (fv, arg) = eval_f(&op, 0.3, &[0.2], 0.1, &[0.5], &[s]).unwrap();
            for (j, c) in op.controls().iter().enumerate() {
                let g = eval_generator(c, op.driver(), 0.3, &[0.2], 0.1, &[0.5], &[s]).unwrap();
                assert!(fv >= g);
                if j == arg {
                    assert_eq!(fv, g);
                }
            }
        }
    }

    #[test]
    fn duplicate_control_keeps_value_and_first_index() {
        let op = heat_op(&[1.0, 2.0]);
        let dup = heat_op(&[1.0, 2.0, 2.0]);
        for s in [-1.0, 0.0, 1.0, 3.0] {
            let a = eval_f(&op, 0.0, &[0.0], 0.0, &[0.0], &[s]).unwrap();
            let b = eval_f(&dup, 0.0, &[0.0], 0.0, &[0.0], &[s]).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn asymmetric_second_order_argument_is_rejected() {
        let op = heat_op(&[1.0]);
        let ctrl = CoefficientField::new(
            "c2",
            2,
            1,
            CoeffForm::Constant(vec![0.0, 0.0]),
            CoeffForm::Constant(vec![1.0, 0.0]),
            0.0,
        )
        .unwrap();
        let bad = [0.0, 1.0, -1.0, 0.0];
        let err = eval_generator(&ctrl, op.driver(), 0.0, &[0.0, 0.0], 0.0, &[0.0, 0.0], &bad);
        assert!(err.is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let op = heat_op(&[1.0]);
        assert!(eval_f(&op, 0.0, &[0.0, 1.0], 0.0, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn operator_validates_lambda_against_diffusion() {
        let controls = vec![CoefficientField::scalar("s1", 0.0, 1.0)];
        let err = OperatorSpec::new(
            controls,
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            2.0, // min eig of sigma sigma^T is 1
        );
        assert!(err.is_err());
    }

    #[test]
    fn affine_forms_evaluate() {
        // b(x) = -x in 2d, sigma = diag(1, 2) constant
        let ctrl = CoefficientField::new(
            "ou",
            2,
            2,
            CoeffForm::Affine {
                linear: vec![-1.0, 0.0, 0.0, -1.0],
                offset: vec![0.0, 0.0],
            },
            CoeffForm::Constant(vec![1.0, 0.0, 0.0, 2.0]),
            1.0,
        )
        .unwrap();
        let mut b = [0.0; 2];
        ctrl.drift(0.0, &[3.0, -4.0], &mut b);
        assert_eq!(b, [-3.0, 4.0]);
    }
}
