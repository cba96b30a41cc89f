//! Time and space grids shared by the solvers.

use crate::error::{Error, Result};

/// Uniform time grid on `[t0, t_end]` with `steps` intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) {
            return Err(Error::Input("time grid bounds must be finite".into()));
        }
        if steps == 0 || t_end <= t0 {
            return Err(Error::Input(format!(
                "time grid needs t_end > t0 and steps >= 1, got [{t0}, {t_end}] with {steps}"
            )));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    /// Node `t_k`; `node(steps)` is exactly `t_end`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + (self.t_end - self.t0) * (k as f64 / self.steps as f64)
        }
    }

    /// Index of a node equal to `t` within `1e-9 * span`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let span = self.t_end - self.t0;
        let raw = (t - self.t0) / span * self.steps as f64;
        let k = raw.round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.node(k) - t).abs() <= 1e-9 * span.max(1.0)).then_some(k)
    }
}

/// Uniform box lattice in `R^N`: per-axis bounds and node counts.
///
/// Node coordinates along axis `i` are `lo[i] + j * spacing(i)` for
/// `j = 0..shape[i]`, with `spacing(i) = (hi[i] - lo[i]) / (shape[i] - 1)`.
/// Flat indices are row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != shape.len() {
            return Err(Error::Dimension(
                "space grid bounds and shape must share a nonzero dimension".into(),
            ));
        }
        for i in 0..lo.len() {
            if !(lo[i].is_finite() && hi[i].is_finite()) || hi[i] <= lo[i] || shape[i] < 2 {
                return Err(Error::Input(format!(
                    "axis {i}: need finite lo < hi and at least 2 nodes, got [{}, {}] x {}",
                    lo[i], hi[i], shape[i]
                )));
            }
        }
        Ok(Self { lo, hi, shape })
    }

    /// Build from bounds and a target spacing; the node count per axis is
    /// chosen so the actual spacing is at most `h` (bounds are kept exact).
    pub fn from_spacing(lo: Vec<f64>, hi: Vec<f64>, h: f64) -> Result<Self> {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::Input(format!("spacing must be positive, got {h}")));
        }
        let shape = lo
            .iter()
            .zip(&hi)
            .map(|(&a, &b)| ((b - a) / h - 1e-9).ceil().max(1.0) as usize + 1)
            .collect();
        Self::new(lo, hi, shape)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.shape[axis] - 1) as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim()).map(|i| self.spacing(i)).fold(f64::INFINITY, f64::min)
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Decode a flat index into per-axis indices.
    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            out[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for axis in 0..self.dim() {
            flat = flat * self.shape[axis] + multi[axis];
        }
        flat
    }

    /// Coordinates of the node with flat index `flat`.
    pub fn coords(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.dim()).rev() {
            let j = rem % self.shape[axis];
            rem /= self.shape[axis];
            out[axis] = self.lo[axis] + j as f64 * self.spacing(axis);
        }
    }

    /// True when no per-axis index sits on the box faces.
    pub fn is_interior(&self, flat: usize) -> bool {
        let mut rem = flat;
        for axis in (0..self.dim()).rev() {
            let j = rem % self.shape[axis];
            rem /= self.shape[axis];
            if j == 0 || j + 1 == self.shape[axis] {
                return false;
            }
        }
        true
    }

    /// Smallest per-axis distance (in nodes) from the node to a face.
    pub fn face_distance(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut dist = usize::MAX;
        for axis in (0..self.dim()).rev() {
            let j = rem % self.shape[axis];
            rem /= self.shape[axis];
            dist = dist.min(j.min(self.shape[axis] - 1 - j));
        }
        dist
    }

    /// Number of axes on which the node sits on a face.
    pub fn boundary_multiplicity(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut count = 0;
        for axis in (0..self.dim()).rev() {
            let j = rem % self.shape[axis];
            rem /= self.shape[axis];
            if j == 0 || j + 1 == self.shape[axis] {
                count += 1;
            }
        }
        count
    }

    /// Flat index of the node nearest to `x` (coordinates clamped to the box).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for axis in 0..self.dim() {
            let h = self.spacing(axis);
            let s = ((x[axis] - self.lo[axis]) / h).round();
            let j = (s.max(0.0) as usize).min(self.shape[axis] - 1);
            flat = flat * self.shape[axis] + j;
        }
        flat
    }

    /// Multilinear interpolation of nodal `values` at `x`. Query points are
    /// clamped to the box (constant extension), which keeps every evaluation
    /// a convex combination of node values; `clamped` is incremented when
    /// clamping occurred.
    pub fn interpolate(&self, values: &[f64], x: &[f64], clamped: &mut u64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let dim = self.dim();
        debug_assert!(dim <= 16);
        let mut base = [0usize; 16];
        let mut frac = [0f64; 16];
        let mut was_clamped = false;
        for axis in 0..dim {
            let h = self.spacing(axis);
            let s = (x[axis] - self.lo[axis]) / h;
            let max_s = (self.shape[axis] - 1) as f64;
            let c = if s < 0.0 {
                was_clamped = true;
                0.0
            } else if s > max_s {
                was_clamped = true;
                max_s
            } else {
                s
            };
            let i = (c.floor() as usize).min(self.shape[axis] - 2);
            base[axis] = i;
            frac[axis] = c - i as f64;
        }
        if was_clamped {
            *clamped += 1;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut flat = 0;
            for axis in 0..dim {
                let up = (corner >> axis) & 1 == 1;
                w *= if up { frac[axis] } else { 1.0 - frac[axis] };
                flat = flat * self.shape[axis] + base[axis] + up as usize;
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }
}
