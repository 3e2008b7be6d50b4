//! Shared oracle helpers for integration tests: finite differencing and
//! tolerance-aware matrix comparison, independent of the library's own
//! derivative code paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Central finite difference of a vector-valued function with respect to one
/// coordinate of `x`: (f(x + h e_j) - f(x - h e_j)) / (2h).
pub fn central_diff_col<F>(f: &F, x: &[f64], j: usize, h: f64) -> DVector<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[j] += h;
    lo[j] -= h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}

/// Full central-difference Jacobian of `f` with respect to `x`, with the step
/// scaled per coordinate as `h_rel * max(1, |x_j|)`.
pub fn central_diff_jacobian<F>(f: &F, x: &[f64], h_rel: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for j in 0..x.len() {
        let h = h_rel * x[j].abs().max(1.0);
        jac.set_column(j, &central_diff_col(f, x, j, h));
    }
    jac
}

/// Entrywise comparison with combined relative/absolute tolerance. The
/// absolute floor absorbs central-difference roundoff noise on entries whose
/// true value is zero or tiny.
pub fn assert_matrices_close(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.shape(), fd.shape(), "{what}: shape mismatch");
    for i in 0..analytic.nrows() {
        for j in 0..analytic.ncols() {
            let a = analytic[(i, j)];
            let b = fd[(i, j)];
            let diff = (a - b).abs();
            let tol = rtol * a.abs().max(b.abs()) + atol;
            assert!(
                diff <= tol,
                "{what}: entry ({i},{j}) analytic {a:.9e} vs finite-difference {b:.9e} (diff {diff:.3e} > tol {tol:.3e})"
            );
        }
    }
}

/// Simple deterministic xorshift generator for oracle-side random states, so
/// test randomness does not depend on the library's RNG choices.
pub struct OracleRng(u64);

impl OracleRng {
    pub fn new(seed: u64) -> Self {
        OracleRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in [lo, hi) excluding a symmetric band around zero.
    pub fn range_away_from_zero(&mut self, lo: f64, hi: f64, band: f64) -> f64 {
        loop {
            let v = self.range(lo, hi);
            if v.abs() >= band {
                return v;
            }
        }
    }
}

/// Two-node line network: prescribed inflow, one vessel, one Windkessel.
pub const LINE_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["inlet", "out"],
  "vessels": [
    { "name": "v1", "from": "inlet", "to": "out",
      "parameters": { "resistance": 100.0, "inductance": 2.0, "capacitance": 1e-4, "stenosis": 0.5 } }
  ],
  "junctions": [],
  "boundary_conditions": [
    { "type": "flow", "node": "inlet",
      "times": [0.0, 0.25, 0.5, 0.75],
      "values": [10.0, 30.0, 10.0, 5.0] },
    { "type": "windkessel", "node": "out",
      "proximal_resistance": 50.0, "distal_resistance": 500.0,
      "capacitance": 1e-4, "reference_pressure": 0.0 }
  ]
}"#;

/// Ten-node tree: five vessels, two junctions, three Windkessel outlets.
pub const TREE_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["inlet", "a", "b", "c", "e", "f", "g", "d1", "d2", "d3"],
  "vessels": [
    { "name": "v1", "from": "inlet", "to": "a",
      "parameters": { "resistance": 20.0, "inductance": 1.0, "capacitance": 5e-5, "stenosis": 0.1 } },
    { "name": "v2", "from": "b", "to": "d1",
      "parameters": { "resistance": 40.0, "inductance": 1.5, "capacitance": 4e-5, "stenosis": 0.0 } },
    { "name": "v3", "from": "c", "to": "e",
      "parameters": { "resistance": 30.0, "inductance": 1.2, "capacitance": 3e-5, "stenosis": 0.2 } },
    { "name": "v4", "from": "f", "to": "d2",
      "parameters": { "resistance": 45.0, "inductance": 0.8, "capacitance": 2e-5, "stenosis": 0.0 } },
    { "name": "v5", "from": "g", "to": "d3",
      "parameters": { "resistance": 55.0, "inductance": 0.9, "capacitance": 2e-5, "stenosis": 0.3 } }
  ],
  "junctions": [
    { "name": "j1", "from": "a", "to": ["b", "c"],
      "outlets": [
        { "resistance": 10.0, "inductance": 0.5, "stenosis": 0.05 },
        { "resistance": 12.0, "inductance": 0.6, "stenosis": 0.06 } ] },
    { "name": "j2", "from": "e", "to": ["f", "g"],
      "outlets": [
        { "resistance": 9.0, "inductance": 0.4, "stenosis": 0.04 },
        { "resistance": 11.0, "inductance": 0.7, "stenosis": 0.07 } ] }
  ],
  "boundary_conditions": [
    { "type": "flow", "node": "inlet",
      "times": [0.0, 0.2, 0.4, 0.6, 0.8],
      "values": [20.0, 60.0, 35.0, 15.0, 12.0] },
    { "type": "windkessel", "node": "d1",
      "proximal_resistance": 100.0, "distal_resistance": 1000.0,
      "capacitance": 8e-5, "reference_pressure": 0.0 },
    { "type": "windkessel", "node": "d2",
      "proximal_resistance": 120.0, "distal_resistance": 1200.0,
      "capacitance": 6e-5, "reference_pressure": 0.0 },
    { "type": "windkessel", "node": "d3",
      "proximal_resistance": 90.0, "distal_resistance": 900.0,
      "capacitance": 7e-5, "reference_pressure": 0.0 }
  ]
}"#;

/// Single Windkessel node driven by a constant inflow: a pure RC relaxation
/// with time constant Rd * C = 0.1 s.
pub const WK_RELAX_JSON: &str = r#"{
  "period": 1.0,
  "fluid": { "density": 1.06, "viscosity": 0.04 },
  "nodes": ["n0"],
  "vessels": [],
  "junctions": [],
  "boundary_conditions": [
    { "type": "flow", "node": "n0",
      "times": [0.0, 0.25, 0.5, 0.75], "values": [10.0, 10.0, 10.0, 10.0] },
    { "type": "windkessel", "node": "n0",
      "proximal_resistance": 100.0, "distal_resistance": 1000.0,
      "capacitance": 1e-4, "reference_pressure": 0.0 }
  ]
}"#;

/// Ordinary least-squares slope of y against x.
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
