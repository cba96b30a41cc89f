//! Sampling-based validation of the declared structural bounds.
//!
//! The conditions are universally quantified, so we falsify rather than
//! certify: seeded samples are drawn in a configured box and the worst
//! observed ratio for each declared bound is reported, with a witness for
//! any violation. Violations are report content, not errors. All bounds are
//! certified on the sampling box only.

use super::OperatorSpec;
use crate::rng;

/// Sampling region for [`validate_assumptions_in`].
#[derive(Debug, Clone)]
pub struct SampleBox {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl SampleBox {
    pub fn default_for(op: &OperatorSpec) -> Self {
        Self {
            x_lo: vec![-4.0; op.dim_state()],
            x_hi: vec![4.0; op.dim_state()],
            y_range: (-5.0, 5.0),
            z_range: (-5.0, 5.0),
        }
    }
}

/// Outcome of one sampled bound.
#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: String,
    /// Declared bound the samples are compared against.
    pub declared_bound: f64,
    /// Worst observed value (a ratio for Lipschitz-type checks).
    pub worst_observed: f64,
    pub violations: usize,
    /// Sample tuple realizing the worst violation, if any.
    pub witness: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub samples: usize,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const RATIO_TOL: f64 = 1e-9;

struct BoundTracker {
    name: String,
    bound: f64,
    worst: f64,
    violations: usize,
    witness: Option<String>,
}

impl BoundTracker {
    fn new(name: impl Into<String>, bound: f64) -> Self {
        Self {
            name: name.into(),
            bound,
            worst: f64::NEG_INFINITY,
            violations: 0,
            witness: None,
        }
    }

    fn observe(&mut self, value: f64, witness: impl Fn() -> String) {
        let violated = value > self.bound + RATIO_TOL || !value.is_finite();
        if value > self.worst || (violated && self.witness.is_none()) {
            if violated && (value > self.worst || self.witness.is_none()) {
                self.witness = Some(witness());
            }
            self.worst = self.worst.max(value);
        }
        if violated {
            self.violations += 1;
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            passed: self.violations == 0 && self.worst.is_finite(),
            name: self.name,
            declared_bound: self.bound,
            worst_observed: self.worst,
            violations: self.violations,
            witness: self.witness,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_point(key: u64, ctr: &mut u64, lo: &[f64], hi: &[f64], out: &mut [f64]) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = rng::uniform_in(key, *ctr, lo[i], hi[i]);
        *ctr += 1;
    }
}

/// Validate with the default sampling box.
pub fn validate_assumptions(op: &OperatorSpec, sample_count: usize, seed: u64) -> AssumptionReport {
    validate_assumptions_in(op, &SampleBox::default_for(op), sample_count, seed)
}

/// Draw `sample_count` seeded tuples `(t, x, x', y, y', z, z')` and compare
/// every declared bound of the problem datum against the observed ratios.
pub fn validate_assumptions_in(
    op: &OperatorSpec,
    sample_box: &SampleBox,
    sample_count: usize,
    seed: u64,
) -> AssumptionReport {
    let n = op.dim_state();
    let m = op.dim_noise();
    let key = rng::derive(seed, 0xa55e);
    let mut ctr = 0u64;

    let mut drift_lip: Vec<BoundTracker> = op
        .controls()
        .iter()
        .map(|c| BoundTracker::new(format!("drift Lipschitz [{}]", c.label()), c.lipschitz_bound()))
        .collect();
    let mut diff_lip: Vec<BoundTracker> = op
        .controls()
        .iter()
        .map(|c| BoundTracker::new(format!("diffusion Lipschitz [{}]", c.label()), c.lipschitz_bound()))
        .collect();
    let mut bounded = BoundTracker::new("local equiboundedness (|b|+|sigma|, informational)", f64::INFINITY);
    let mut equicont =
        BoundTracker::new("equicontinuity modulus at radius 0.1 (sampled, informational)", f64::INFINITY);
    let mut f_lip_z = BoundTracker::new("driver Lipschitz in z", op.driver().lipschitz_z());
    let mut f_mono = BoundTracker::new("driver monotonicity in y", op.driver().monotonicity_mu());
    let mut g_lip = BoundTracker::new("terminal Lipschitz", op.terminal().lipschitz_bound());
    let mut g_growth = BoundTracker::new("terminal linear growth", op.terminal().growth_bound());

    let mut x = vec![0.0; n];
    let mut x2 = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut z2 = vec![0.0; m];
    let (mut b_a, mut b_b) = (vec![0.0; n], vec![0.0; n]);
    let (mut s_a, mut s_b) = (vec![0.0; n * m], vec![0.0; n * m]);

    for _ in 0..sample_count.max(1) {
        let t = rng::uniform_in(key, ctr, 0.0, op.horizon());
        ctr += 1;
        sample_point(key, &mut ctr, &sample_box.x_lo, &sample_box.x_hi, &mut x);
        sample_point(key, &mut ctr, &sample_box.x_lo, &sample_box.x_hi, &mut x2);
        let y = rng::uniform_in(key, ctr, sample_box.y_range.0, sample_box.y_range.1);
        let y2 = rng::uniform_in(key, ctr + 1, sample_box.y_range.0, sample_box.y_range.1);
        ctr += 2;
        for i in 0..m {
            z[i] = rng::uniform_in(key, ctr, sample_box.z_range.0, sample_box.z_range.1);
            z2[i] = rng::uniform_in(key, ctr + 1, sample_box.z_range.0, sample_box.z_range.1);
            ctr += 2;
        }
        // nearby point for the sampled equicontinuity modulus
        for i in 0..n {
            xn[i] = x[i] + rng::uniform_in(key, ctr, -0.1, 0.1);
            ctr += 1;
        }
        let tn = (t + rng::uniform_in(key, ctr, -0.1, 0.1)).clamp(0.0, op.horizon());
        ctr += 1;

        let dx = dist(&x, &x2);
        for (j, ctrl) in op.controls().iter().enumerate() {
            ctrl.drift(t, &x, &mut b_a);
            ctrl.diffusion(t, &x, &mut s_a);
            bounded.observe(
                b_a.iter().map(|v| v * v).sum::<f64>().sqrt()
                    + s_a.iter().map(|v| v * v).sum::<f64>().sqrt(),
                || format!("t={t:.4}, x={x:?}"),
            );
            if dx > 1e-9 {
                ctrl.drift(t, &x2, &mut b_b);
                ctrl.diffusion(t, &x2, &mut s_b);
                drift_lip[j].observe(dist(&b_a, &b_b) / dx, || {
                    format!("t={t:.4}, x={x:?}, x'={x2:?}")
                });
                diff_lip[j].observe(dist(&s_a, &s_b) / dx, || {
                    format!("t={t:.4}, x={x:?}, x'={x2:?}")
                });
            }
            ctrl.drift(tn, &xn, &mut b_b);
            ctrl.diffusion(tn, &xn, &mut s_b);
            equicont.observe(dist(&b_a, &b_b) + dist(&s_a, &s_b), || {
                format!("(t, x)=({t:.4}, {x:?}) vs ({tn:.4}, {xn:?})")
            });

            let f0 = op.driver().eval(t, &x, &b_a, &s_a, y, &z);
            let fz = op.driver().eval(t, &x, &b_a, &s_a, y, &z2);
            let dz = dist(&z, &z2);
            if dz > 1e-9 {
                f_lip_z.observe((f0 - fz).abs() / dz, || {
                    format!("t={t:.4}, x={x:?}, y={y:.4}, z={z:?}, z'={z2:?}")
                });
            }
            let fy = op.driver().eval(t, &x, &b_a, &s_a, y2, &z);
            if (y - y2).abs() > 1e-9 {
                f_mono.observe((y - y2) * (f0 - fy) / ((y - y2) * (y - y2)), || {
                    format!("t={t:.4}, x={x:?}, y={y:.4}, y'={y2:.4}")
                });
            }
        }

        let g0 = op.terminal().eval(&x);
        let g1 = op.terminal().eval(&x2);
        if dx > 1e-9 {
            g_lip.observe((g0 - g1).abs() / dx, || format!("x={x:?}, x'={x2:?}"));
        }
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        g_growth.observe(g0.abs() / (1.0 + xnorm), || format!("x={x:?}"));
    }

    let mut checks: Vec<AssumptionCheck> = Vec::new();
    checks.extend(drift_lip.into_iter().map(BoundTracker::finish));
    checks.extend(diff_lip.into_iter().map(BoundTracker::finish));
    checks.push(bounded.finish());
    checks.push(equicont.finish());
    checks.push(f_lip_z.finish());
    checks.push(f_mono.finish());
    checks.push(g_lip.finish());
    checks.push(g_growth.finish());

    // ellipticity floor: lambda must sit below the sampled minimum eigenvalue
    let observed = op.min_diffusion_eigenvalue(sample_count.min(256).max(16), seed);
    let lambda = op.ellipticity_lambda();
    checks.push(AssumptionCheck {
        name: "ellipticity floor (lambda <= min eig sigma sigma^T)".into(),
        declared_bound: lambda,
        worst_observed: observed,
        violations: usize::from(lambda > observed + RATIO_TOL),
        witness: (lambda > observed + RATIO_TOL).then(|| format!("sampled min eigenvalue {observed:.6}")),
        passed: lambda <= observed + RATIO_TOL,
    });

    AssumptionReport { checks, samples: sample_count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffForm, CoefficientField, DriverSpec, TerminalSpec};
    use nalgebra::DMatrix;

    fn terminal() -> TerminalSpec {
        TerminalSpec::new("quadratic", 12.0, 10.0).unwrap()
    }

    #[test]
    fn constant_family_linear_driver_is_clean() {
        let op = OperatorSpec::new(
            vec![CoefficientField::scalar("a", 0.3, 1.0), CoefficientField::scalar("b", 0.0, 2.0)],
            DriverSpec::linear_y(-0.1),
            terminal(),
            1.0,
            1.0,
        )
        .unwrap();
        let report = validate_assumptions(&op, 500, 7);
        assert!(report.all_passed(), "{:?}", report.failed().collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_driver_with_zero_mu_is_flagged_with_witness() {
        let op = OperatorSpec::new(
            vec![CoefficientField::scalar("a", 0.0, 1.0)],
            DriverSpec::named("y_squared", 0.0, 0.0).unwrap(),
            terminal(),
            1.0,
            0.0,
        )
        .unwrap();
        let report = validate_assumptions(&op, 500, 7);
        let mono = report
            .checks
            .iter()
            .find(|c| c.name.contains("monotonicity"))
            .unwrap();
        assert!(!mono.passed);
        assert!(mono.violations > 0);
        assert!(mono.witness.is_some());
    }

    #[test]
    fn affine_drift_with_operator_norm_bound_is_tight() {
        // Lipschitz constant of x -> A x is the spectral norm of A,
        // computed independently here via SVD.
        let a = [[0.8, -0.4], [0.2, 0.5]];
        let flat: Vec<f64> = a.iter().flatten().cloned().collect();
        let op_norm = DMatrix::from_row_slice(2, 2, &flat)
            .svd(false, false)
            .singular_values[0];
        let ctrl = CoefficientField::new(
            "affine",
            2,
            1,
            CoeffForm::Affine { linear: flat.clone(), offset: vec![0.1, -0.2] },
            CoeffForm::Constant(vec![1.0, 0.0]),
            op_norm,
        )
        .unwrap();
        let op = OperatorSpec::new(
            vec![ctrl],
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            0.0,
        )
        .unwrap();
        let report = validate_assumptions(&op, 2000, 3);
        assert!(report.all_passed(), "{:?}", report.failed().collect::<Vec<_>>());
        // and with a deliberately smaller declared bound the check trips
        let bad = CoefficientField::new(
            "affine",
            2,
            1,
            CoeffForm::Affine { linear: flat, offset: vec![0.1, -0.2] },
            CoeffForm::Constant(vec![1.0, 0.0]),
            op_norm * 0.8,
        )
        .unwrap();
        let op = OperatorSpec::new(
            vec![bad],
            DriverSpec::zero(),
            TerminalSpec::new("quadratic", 12.0, 10.0).unwrap(),
            1.0,
            0.0,
        )
        .unwrap();
        let report = validate_assumptions_in(&op, &SampleBox::default_for(&op), 2000, 3);
        assert!(!report.all_passed());
    }
}
