//! Compile-time registry of named coefficient, driver and terminal functions.
//!
//! Config files refer to these by name; anything not expressible as a
//! constant or affine form gets an entry here.

/// Terminal condition `g(x)`.
pub type TerminalFn = fn(&[f64]) -> f64;

/// Vector/matrix field `(t, x) -> out` (drift: `out.len() == n`,
/// diffusion: `out.len() == n * m`, row-major).
pub type FieldFn = fn(f64, &[f64], &mut [f64]);

/// Driver `f(t, x, b(t,x), sigma(t,x), y, z)`.
pub type DriverFn = fn(f64, &[f64], &[f64], &[f64], f64, &[f64]) -> f64;

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn g_quadratic(x: &[f64]) -> f64 {
    norm_sq(x)
}

fn g_neg_quadratic(x: &[f64]) -> f64 {
    -norm_sq(x)
}

fn g_coord0(x: &[f64]) -> f64 {
    x[0]
}

fn g_abs_sum(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

fn g_one(_x: &[f64]) -> f64 {
    1.0
}

fn b_sin_each(_t: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = v.sin();
    }
}

fn s_cos_iso(_t: f64, x: &[f64], out: &mut [f64]) {
    // n x m entries, each cos(x_1); Lipschitz constant 1.
    let c = x[0].cos();
    for o in out.iter_mut() {
        *o = c;
    }
}

fn f_y_squared(_t: f64, _x: &[f64], _b: &[f64], _s: &[f64], y: f64, _z: &[f64]) -> f64 {
    y * y
}

pub const TERMINALS: &[(&str, TerminalFn)] = &[
    ("quadratic", g_quadratic),
    ("neg_quadratic", g_neg_quadratic),
    ("coord0", g_coord0),
    ("abs_sum", g_abs_sum),
    ("one", g_one),
];

pub const FIELDS: &[(&str, FieldFn)] = &[("sin_each", b_sin_each), ("cos_iso", s_cos_iso)];

pub const DRIVERS: &[(&str, DriverFn)] = &[("y_squared", f_y_squared)];

pub fn terminal(name: &str) -> Option<TerminalFn> {
    TERMINALS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

pub fn field(name: &str) -> Option<FieldFn> {
    FIELDS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

pub fn driver(name: &str) -> Option<DriverFn> {
    DRIVERS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_known_and_unknown() {
        assert!(terminal("quadratic").is_some());
        assert!(terminal("nope").is_none());
        assert_eq!(terminal("quadratic").unwrap()(&[2.0, 1.0]), 5.0);
        assert!(field("sin_each").is_some());
        assert!(driver("y_squared").is_some());
    }
}
