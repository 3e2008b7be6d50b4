//! Periodic cubic spline interpolation with analytic derivatives.
//!
//! Waveforms in the solver (inflow profiles, observed pressure and flow
//! traces) are periodic in the cardiac cycle, so the spline closes on itself:
//! value, first, and second derivative are continuous across the period wrap.
//! Knots may be non-uniform. The second derivatives at the knots solve a
//! cyclic tridiagonal system, handled by the Thomas algorithm plus a
//! Sherman-Morrison rank-one correction for the wrap coupling.

use crate::error::{Error, Result};

/// Cubic spline over one period that closes smoothly on itself.
#[derive(Debug, Clone)]
pub struct PeriodicSpline {
    times: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
    /// Interval widths; the last entry spans the wrap back to the first knot.
    h: Vec<f64>,
    period: f64,
}

impl PeriodicSpline {
    /// Fits a periodic spline through `(times[i], values[i])`. Knot times must
    /// be strictly increasing and span less than one period, so the wrap
    /// interval from the last knot back to the first stays positive. At least
    /// three knots are required.
    pub fn fit(times: &[f64], values: &[f64], period: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "spline got {} knot times but {} values",
                times.len(),
                values.len()
            )));
        }
        let n = times.len();
        if n < 3 {
            return Err(Error::InvalidParameter(format!(
                "periodic spline needs at least 3 knots, got {n}"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spline period must be positive, got {period}"
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "spline knot times must be strictly increasing".into(),
            ));
        }
        if times[n - 1] - times[0] >= period {
            return Err(Error::InvalidParameter(format!(
                "spline knots span {} but must fit inside one period {period}",
                times[n - 1] - times[0]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "spline values must be finite".into(),
            ));
        }

        let mut h = vec![0.0; n];
        for i in 0..n - 1 {
            h[i] = times[i + 1] - times[i];
        }
        h[n - 1] = times[0] + period - times[n - 1];

        // Second-derivative system: for each knot i (indices mod n),
        //   h[i-1]/6 M[i-1] + (h[i-1]+h[i])/3 M[i] + h[i]/6 M[i+1] = d[i],
        //   d[i] = (y[i+1]-y[i])/h[i] - (y[i]-y[i-1])/h[i-1].
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            sub[i] = h[prev] / 6.0;
            diag[i] = (h[prev] + h[i]) / 3.0;
            sup[i] = h[i] / 6.0;
            rhs[i] = (values[next] - values[i]) / h[i] - (values[i] - values[prev]) / h[prev];
        }
        let m = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs)?;

        Ok(Self {
            times: times.to_vec(),
            values: values.to_vec(),
            m,
            h,
            period,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Interval index and offset from its left knot, after wrapping `t` into
    /// the base period.
    fn locate(&self, t: f64) -> (usize, f64) {
        let t0 = self.times[0];
        let mut x = (t - t0).rem_euclid(self.period);
        if x >= self.period {
            // rem_euclid can round up to the modulus for tiny negative inputs.
            x = 0.0;
        }
        let p = self.times.partition_point(|&tk| tk - t0 <= x);
        let i = p - 1;
        (i, x - (self.times[i] - t0))
    }

    pub fn value(&self, t: f64) -> f64 {
        let n = self.times.len();
        let (i, dl) = self.locate(t);
        let next = (i + 1) % n;
        let h = self.h[i];
        let dr = h - dl;
        let (ml, mr) = (self.m[i], self.m[next]);
        let (yl, yr) = (self.values[i], self.values[next]);
        ml * dr * dr * dr / (6.0 * h)
            + mr * dl * dl * dl / (6.0 * h)
            + (yl - ml * h * h / 6.0) * dr / h
            + (yr - mr * h * h / 6.0) * dl / h
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let n = self.times.len();
        let (i, dl) = self.locate(t);
        let next = (i + 1) % n;
        let h = self.h[i];
        let dr = h - dl;
        let (ml, mr) = (self.m[i], self.m[next]);
        let (yl, yr) = (self.values[i], self.values[next]);
        -ml * dr * dr / (2.0 * h) + mr * dl * dl / (2.0 * h) + (yr - yl) / h
            - (mr - ml) * h / 6.0
    }
}

/// Solves A x = rhs where A is tridiagonal with cyclic corner entries
/// `sub[0]` at (0, n-1) and `sup[n-1]` at (n-1, 0). The spline system is
/// strictly diagonally dominant, so the Thomas sweeps need no pivoting.
fn solve_cyclic_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    debug_assert!(n >= 3);

    // Sherman-Morrison: A = A' + u v^T with u = (gamma, 0, .., 0, sup[n-1]),
    // v = (1, 0, .., 0, sub[0]/gamma), where A' absorbs the corners into the
    // first and last diagonal entries.
    let gamma = -diag[0];
    let mut dmod = diag.to_vec();
    dmod[0] = diag[0] - gamma;
    dmod[n - 1] = diag[n - 1] - sub[0] * sup[n - 1] / gamma;

    let x = thomas(sub, &dmod, sup, rhs)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = sup[n - 1];
    let z = thomas(sub, &dmod, sup, &u)?;

    let vx = x[0] + sub[0] / gamma * x[n - 1];
    let vz = z[0] + sub[0] / gamma * z[n - 1];
    let denom = 1.0 + vz;
    if denom.abs() < 1e-14 {
        return Err(Error::SingularNormalEquations);
    }
    let factor = vx / denom;
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - factor * zi).collect())
}

/// Plain tridiagonal solve; `sub[0]` and `sup[n-1]` are ignored (they are the
/// cyclic corners handled by the caller).
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err(Error::SingularNormalEquations);
    }
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        if denom == 0.0 {
            return Err(Error::SingularNormalEquations);
        }
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}
