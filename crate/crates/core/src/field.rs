//! Grid-sampled value functions `u(t_k, x_j)` with multilinear lookup.

use crate::error::{Error, Result};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::sde::csv_err;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct ValueField {
    grid: TimeGrid,
    sgrid: SpaceGrid,
    /// Slice-major: `values[k * nodes + j]`.
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: TimeGrid, sgrid: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        let expect = (grid.steps() + 1) * sgrid.len();
        if values.len() != expect {
            return Err(Error::Dimension(format!(
                "value field needs {expect} entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("value field".into()));
        }
        Ok(Self { grid, sgrid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn space_grid(&self) -> &SpaceGrid {
        &self.sgrid
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.sgrid.len();
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn node_value(&self, k: usize, node: usize) -> f64 {
        self.values[k * self.sgrid.len() + node]
    }

    /// Multilinear interpolation within time slice `k` (clamped to the box).
    pub fn value_at_slice(&self, k: usize, x: &[f64]) -> f64 {
        let mut clamped = 0;
        self.sgrid.interpolate(self.slice(k), x, &mut clamped)
    }

    /// Value at arbitrary `(t, x)`: linear in `t` between slices, multilinear
    /// in `x` within each slice.
    pub fn at(&self, t: f64, x: &[f64]) -> f64 {
        let steps = self.grid.steps();
        let span = self.grid.t_end() - self.grid.t0();
        let s = ((t - self.grid.t0()) / span * steps as f64).clamp(0.0, steps as f64);
        let k = (s.floor() as usize).min(steps - 1);
        let w = s - k as f64;
        let a = self.value_at_slice(k, x);
        if w == 0.0 {
            return a;
        }
        let b = self.value_at_slice(k + 1, x);
        (1.0 - w) * a + w * b
    }

    /// CSV rows `step, x_1..x_N, value[, extra]`; `extra` supplies an
    /// additional column per `(step, node)` (the dpp solver passes the
    /// argmax control index).
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        value_column: &str,
        extra: Option<(&str, &dyn Fn(usize, usize) -> String)>,
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.sgrid.dim();
        let mut header = vec!["step".to_string()];
        header.extend((1..=dim).map(|i| format!("x_{i}")));
        header.push(value_column.to_string());
        if let Some((name, _)) = extra {
            header.push(name.to_string());
        }
        w.write_record(&header).map_err(csv_err)?;
        let mut coords = vec![0.0; dim];
        let mut row: Vec<String> = Vec::new();
        for k in 0..=self.grid.steps() {
            for node in 0..self.sgrid.len() {
                row.clear();
                row.push(k.to_string());
                self.sgrid.coords(node, &mut coords);
                row.extend(coords.iter().map(|c| format!("{c}")));
                row.push(format!("{}", self.node_value(k, node)));
                if let Some((_, f)) = extra {
                    row.push(f(k, node));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_time_interpolation() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let sgrid = SpaceGrid::new(vec![0.0], vec![1.0], vec![3]).unwrap();
        // u(t, x) = x + t on nodes
        let mut values = Vec::new();
        for k in 0..=2 {
            let t = grid.node(k);
            for j in 0..3 {
                values.push(0.5 * j as f64 + t);
            }
        }
        let f = ValueField::new(grid, sgrid, values).unwrap();
        assert_eq!(f.node_value(0, 2), 1.0);
        assert!((f.value_at_slice(1, &[0.25]) - 0.75).abs() < 1e-15);
        assert!((f.at(0.25, &[0.5]) - 0.75).abs() < 1e-15);
        assert!((f.at(1.0, &[1.0]) - 2.0).abs() < 1e-15);
    }
}
