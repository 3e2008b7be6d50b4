//! Local matrices for the lumped-parameter network elements.
//!
//! Every element contributes rows to the global residual
//! r(α, y, ẏ) = E(α)·ẏ + F(α)·y + c(α, y, ẏ),
//! where E and F are constant in the state and c collects the nonlinear
//! stenosis terms. Each element provides its local E, F, c together with the
//! state linearizations ∂c/∂y and ∂c/∂ẏ (used by the time integrator's Newton
//! matrix) and, separately, the parameter Jacobian ∂r/∂α (used by the
//! least-squares parameter fit).
//!
//! Local unknown ordering is (P_in, Q_in, P_out, Q_out) for a vessel,
//! (P_in, Q_in, P_out_1, Q_out_1, ..., P_out_n, Q_out_n) for a junction, and
//! (P_in, Q_in) for a Windkessel outlet.

use nalgebra::{DMatrix, DVector};

/// Sign function with sgn(0) = 0, keeping the stenosis linearization bounded
/// and symmetric at zero flow.
#[inline]
pub(crate) fn sgn0(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-outlet junction parameters: each inlet-to-outlet path carries its own
/// resistance, inductance, and stenosis coefficient (no capacitance).
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct JunctionOutletParams {
    pub resistance: f64,
    pub inductance: f64,
    pub stenosis: f64,
}

/// One element's local system matrices, evaluated at a given state.
///
/// `index_map[j]` is the global unknown index of local unknown `j`; element
/// constructors return the local identity map and the network assembly
/// replaces it with the node-based layout.
#[derive(Debug, Clone)]
pub struct ElementContribution {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub c: DVector<f64>,
    pub dc_dy: DMatrix<f64>,
    pub dc_dydot: DMatrix<f64>,
    pub index_map: Vec<usize>,
}

impl ElementContribution {
    /// Number of equations this element contributes.
    pub fn equation_count(&self) -> usize {
        self.e.nrows()
    }

    /// r = E·ẏ + F·y + c for the state this contribution was built at.
    /// `y` and `ydot` must be the same local state passed to the constructor,
    /// since `c` is state-dependent.
    pub fn residual(&self, y: &[f64], ydot: &[f64]) -> DVector<f64> {
        &self.e * DVector::from_column_slice(ydot)
            + &self.f * DVector::from_column_slice(y)
            + &self.c
    }
}

/// One element's parameter Jacobian ∂r/∂α at a given state.
///
/// `param_map[j]` is the global parameter index of local column `j`; element
/// constructors return the local identity map.
#[derive(Debug, Clone)]
pub struct ElementParamJacobian {
    pub j: DMatrix<f64>,
    pub param_map: Vec<usize>,
}

/// Vessel element matrices at state `y = [P_in, Q_in, P_out, Q_out]`.
///
/// Governing equations (ΔP = P_out - P_in, ΔQ = Q_out - Q_in):
///   -(R + S|Q_in|)·Q_in - L·Q̇_out - ΔP = 0
///   C·(R + 2S|Q_in|)·Q̇_in - C·Ṗ_in - ΔQ = 0
pub fn blood_vessel_contribution(
    r: f64,
    l: f64,
    cap: f64,
    s: f64,
    y: &[f64],
    ydot: &[f64],
) -> ElementContribution {
    debug_assert_eq!(y.len(), 4);
    debug_assert_eq!(ydot.len(), 4);
    let q_in = y[1];
    let qd_in = ydot[1];
    let abs_q = q_in.abs();
    let sgn_q = sgn0(q_in);

    let e = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, -l, -cap, cap * r, 0.0, 0.0]);
    let f = DMatrix::from_row_slice(2, 4, &[1.0, -r, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    let c = DVector::from_column_slice(&[-s * abs_q * q_in, s * abs_q * 2.0 * cap * qd_in]);
    let dc_dydot = DMatrix::from_row_slice(
        2,
        4,
        &[0.0, 0.0, 0.0, 0.0, 0.0, s * abs_q * 2.0 * cap, 0.0, 0.0],
    );
    let dc_dy = DMatrix::from_row_slice(
        2,
        4,
        &[
            0.0,
            s * sgn_q * (-2.0 * q_in),
            0.0,
            0.0,
            0.0,
            s * sgn_q * 2.0 * cap * qd_in,
            0.0,
            0.0,
        ],
    );

    ElementContribution {
        e,
        f,
        c,
        dc_dy,
        dc_dydot,
        index_map: (0..4).collect(),
    }
}

/// Vessel parameter Jacobian with columns ordered (R, C, L, S).
pub fn blood_vessel_param_jacobian(
    r: f64,
    cap: f64,
    s: f64,
    y: &[f64],
    ydot: &[f64],
) -> ElementParamJacobian {
    debug_assert_eq!(y.len(), 4);
    debug_assert_eq!(ydot.len(), 4);
    let q_in = y[1];
    let pd_in = ydot[0];
    let qd_in = ydot[1];
    let qd_out = ydot[3];
    let abs_q = q_in.abs();

    let j = DMatrix::from_row_slice(
        2,
        4,
        &[
            -q_in,
            0.0,
            -qd_out,
            -abs_q * q_in,
            cap * qd_in,
            -pd_in + (r + 2.0 * s * abs_q) * qd_in,
            0.0,
            2.0 * cap * abs_q * qd_in,
        ],
    );

    ElementParamJacobian {
        j,
        param_map: (0..4).collect(),
    }
}

/// Junction element matrices at state
/// `y = [P_in, Q_in, P_out_1, Q_out_1, ..., P_out_n, Q_out_n]`.
///
/// Row 0 conserves mass (Q_in - ΣQ_out_i); row i balances momentum along the
/// inlet-to-outlet-i path with its own R_i, L_i, S_i acting on the outlet flow.
pub fn junction_contribution(
    outlets: &[JunctionOutletParams],
    y: &[f64],
    ydot: &[f64],
) -> ElementContribution {
    let n = outlets.len();
    let dim = 2 + 2 * n;
    debug_assert_eq!(y.len(), dim);
    debug_assert_eq!(ydot.len(), dim);

    let mut e = DMatrix::zeros(n + 1, dim);
    let mut f = DMatrix::zeros(n + 1, dim);
    let mut c = DVector::zeros(n + 1);
    let mut dc_dy = DMatrix::zeros(n + 1, dim);
    let dc_dydot = DMatrix::zeros(n + 1, dim);

    f[(0, 1)] = 1.0;
    for (i, p) in outlets.iter().enumerate() {
        let p_col = 2 + 2 * i;
        let q_col = 3 + 2 * i;
        let q = y[q_col];
        f[(0, q_col)] = -1.0;
        f[(i + 1, 0)] = 1.0;
        f[(i + 1, p_col)] = -1.0;
        f[(i + 1, q_col)] = -p.resistance;
        e[(i + 1, q_col)] = -p.inductance;
        c[i + 1] = -p.stenosis * q.abs() * q;
        dc_dy[(i + 1, q_col)] = -2.0 * p.stenosis * q.abs();
    }

    ElementContribution {
        e,
        f,
        c,
        dc_dy,
        dc_dydot,
        index_map: (0..dim).collect(),
    }
}

/// Junction parameter Jacobian with columns ordered
/// (R_1..R_n, L_1..L_n, S_1..S_n). All entries depend on the state alone; the
/// mass-conservation row carries no parameters and is identically zero.
pub fn junction_param_jacobian(n_outlets: usize, y: &[f64], ydot: &[f64]) -> ElementParamJacobian {
    let dim = 2 + 2 * n_outlets;
    debug_assert_eq!(y.len(), dim);
    debug_assert_eq!(ydot.len(), dim);

    let mut j = DMatrix::zeros(n_outlets + 1, 3 * n_outlets);
    for i in 0..n_outlets {
        let q_col = 3 + 2 * i;
        let q = y[q_col];
        let qd = ydot[q_col];
        j[(i + 1, i)] = -q;
        j[(i + 1, n_outlets + i)] = -qd;
        j[(i + 1, 2 * n_outlets + i)] = -q.abs() * q;
    }

    ElementParamJacobian {
        j,
        param_map: (0..3 * n_outlets).collect(),
    }
}

/// Windkessel outlet matrices at state `y = [P_in, Q_in]`.
///
/// Governing equation:
///   (Rp + Rd)·Q_in - P_in + Pref - Rd·C·Ṗ_in + Rp·Rd·C·Q̇_in = 0,
/// a single row that is linear in the state, so the c-derivatives vanish.
pub fn windkessel_contribution(
    rp: f64,
    rd: f64,
    cap: f64,
    pref: f64,
    y: &[f64],
    ydot: &[f64],
) -> ElementContribution {
    debug_assert_eq!(y.len(), 2);
    debug_assert_eq!(ydot.len(), 2);
    let _ = (y, ydot);

    // Kirchhoff current law at the capacitor node (pressure P_in - Rp Q_in):
    //   Q_in = C d(P_in - Rp Q_in)/dt + (P_in - Rp Q_in - Pref) / Rd,
    // scaled by Rd so every term is a pressure.
    ElementContribution {
        e: DMatrix::from_row_slice(1, 2, &[-rd * cap, rp * rd * cap]),
        f: DMatrix::from_row_slice(1, 2, &[-1.0, rp + rd]),
        c: DVector::from_column_slice(&[pref]),
        dc_dy: DMatrix::zeros(1, 2),
        dc_dydot: DMatrix::zeros(1, 2),
        index_map: vec![0, 1],
    }
}
