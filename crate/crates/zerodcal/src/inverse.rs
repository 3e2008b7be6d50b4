//! Element-parameter estimation from observed trajectories.
//!
//! An observed cycle (typically exported from a high-fidelity simulation) is
//! resampled through periodic cubic splines so every unknown carries an
//! analytic time derivative. With (y, ẏ) fixed, each element equation becomes
//! an algebraic residual in the parameter vector α; stacking those rows over
//! all observed time points yields an overdetermined system that a damped
//! least-squares (Levenberg-Marquardt) iteration drives to the best fit.
//! Boundary-condition rows never enter the stack: they carry no element
//! parameters and their data is treated as known.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::elements::{
    blood_vessel_contribution, blood_vessel_param_jacobian, junction_contribution,
    junction_param_jacobian, JunctionOutletParams,
};
use crate::error::{Error, Result};
use crate::model::{LpnModel, Quantity, Trajectory};
use crate::spline::PeriodicSpline;

/// Relative slack for detecting a duplicated wrap sample at t0 + period.
const WRAP_TOL: f64 = 1e-9;

/// Fits a periodic cubic spline to every unknown of `traj`, takes its
/// analytic derivative, and resamples both onto `n_resample` uniform points
/// `k * period / n_resample`.
///
/// A trailing sample that repeats the first one a full period later (common in
/// exported cycles) is dropped before fitting. At least 4 distinct samples per
/// unknown are required.
pub fn spline_derivative(traj: &Trajectory, n_resample: usize, period: f64) -> Result<Trajectory> {
    if n_resample == 0 {
        return Err(Error::InvalidParameter(
            "resample count must be positive".into(),
        ));
    }
    if !period.is_finite() || period <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "period must be positive and finite, got {period}"
        )));
    }
    let mut n = traj.len();
    if n >= 2 && (traj.times[n - 1] - traj.times[0] - period).abs() < WRAP_TOL * period {
        n -= 1;
    }
    if n < 4 {
        return Err(Error::Observation(format!(
            "periodic spline fitting needs at least 4 samples per cycle, got {n}"
        )));
    }

    let times = &traj.times[..n];
    let cols = traj.values.ncols();
    let new_times: Vec<f64> = (0..n_resample)
        .map(|k| k as f64 * period / n_resample as f64)
        .collect();
    let mut values = DMatrix::zeros(n_resample, cols);
    let mut derivatives = DMatrix::zeros(n_resample, cols);
    let mut column = vec![0.0; n];
    for j in 0..cols {
        for i in 0..n {
            column[i] = traj.values[(i, j)];
        }
        let spline = PeriodicSpline::fit(times, &column, period)?;
        for (k, &t) in new_times.iter().enumerate() {
            values[(k, j)] = spline.value(t);
            derivatives[(k, j)] = spline.derivative(t);
        }
    }
    Trajectory::new(
        traj.node_names.clone(),
        new_times,
        values,
        Some(derivatives),
    )
}

/// An observed trajectory with derivatives, ready for residual stacking, plus
/// the per-unit-class row weights applied to the stacked system.
///
/// Pressures and flows differ by orders of magnitude in physiological units;
/// weighting every row by the inverse RMS of its unit class keeps both
/// classes at comparable magnitude in the least-squares objective.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    trajectory: Trajectory,
    pressure_weight: f64,
    flow_weight: f64,
}

impl ObservationSet {
    /// Wraps a trajectory with inverse-RMS row weights per unit class.
    pub fn new(trajectory: Trajectory) -> Result<Self> {
        Self::build(trajectory, true)
    }

    /// Wraps a trajectory with all row weights set to 1.
    pub fn unweighted(trajectory: Trajectory) -> Result<Self> {
        Self::build(trajectory, false)
    }

    /// Resamples `traj` through [`spline_derivative`] and wraps the result
    /// with inverse-RMS row weights.
    pub fn resampled(traj: &Trajectory, n_resample: usize, period: f64) -> Result<Self> {
        Self::new(spline_derivative(traj, n_resample, period)?)
    }

    fn build(trajectory: Trajectory, scale: bool) -> Result<Self> {
        if trajectory.derivatives.is_none() {
            return Err(Error::Observation(
                "observed trajectory carries no time derivatives; resample it through a periodic spline first".into(),
            ));
        }
        if trajectory.is_empty() {
            return Err(Error::Observation(
                "observed trajectory has no time points".into(),
            ));
        }
        let (pressure_weight, flow_weight) = if scale {
            // Columns alternate (P, Q) per node.
            let n_t = trajectory.len();
            let n_nodes = trajectory.node_names.len();
            let mut sum_p = 0.0;
            let mut sum_q = 0.0;
            for k in 0..n_t {
                for i in 0..n_nodes {
                    sum_p += trajectory.values[(k, 2 * i)].powi(2);
                    sum_q += trajectory.values[(k, 2 * i + 1)].powi(2);
                }
            }
            let count = (n_t * n_nodes) as f64;
            let rms_p = (sum_p / count).sqrt();
            let rms_q = (sum_q / count).sqrt();
            (1.0 / rms_p.max(1e-12), 1.0 / rms_q.max(1e-12))
        } else {
            (1.0, 1.0)
        };
        Ok(Self {
            trajectory,
            pressure_weight,
            flow_weight,
        })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Weight applied to rows in pressure units (vessel and junction momentum).
    pub fn pressure_weight(&self) -> f64 {
        self.pressure_weight
    }

    /// Weight applied to rows in flow units (mass conservation).
    pub fn flow_weight(&self) -> f64 {
        self.flow_weight
    }
}

/// Stacked residual and parameter Jacobian of all element equations over all
/// observed time points, evaluated at parameters `alpha` with (y, ẏ) fixed.
///
/// Rows are time-major: for each observed time, every vessel contributes its
/// (momentum, mass) pair, then every junction its mass row followed by one
/// momentum row per outlet. Jacobian columns cover the unfrozen entries of
/// `alpha` in global order; pass an empty `frozen` mask to keep all columns.
pub fn stack_system(
    model: &LpnModel,
    alpha: &[f64],
    obs: &ObservationSet,
    frozen: &[bool],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = model.parameter_count();
    if alpha.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "model has {p} element parameters, got {}",
            alpha.len()
        )));
    }
    if !frozen.is_empty() && frozen.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "freeze mask covers {} entries, model has {p} parameters",
            frozen.len()
        )));
    }
    // Map each global parameter to its Jacobian column, if unfrozen.
    let mut free_col: Vec<Option<usize>> = Vec::with_capacity(p);
    let mut n_free = 0;
    for g in 0..p {
        if frozen.get(g).copied().unwrap_or(false) {
            free_col.push(None);
        } else {
            free_col.push(Some(n_free));
            n_free += 1;
        }
    }

    let traj = obs.trajectory();
    let derivs = traj.derivatives.as_ref().ok_or_else(|| {
        Error::Observation("observed trajectory carries no time derivatives".into())
    })?;
    // Trajectory columns may be ordered differently from the model's nodes.
    let mut pressure_col = Vec::with_capacity(model.node_names().len());
    for name in model.node_names() {
        let col = traj
            .column_index(name, Quantity::Pressure)
            .ok_or_else(|| Error::Observation(format!("observed trajectory has no node {name}")))?;
        pressure_col.push(col);
    }

    let n_t = traj.len();
    let rows_per: usize = 2 * model.vessels().len()
        + model.junctions().iter().map(|j| 1 + j.to.len()).sum::<usize>();
    let mut r = DVector::zeros(n_t * rows_per);
    let mut jac = DMatrix::zeros(n_t * rows_per, n_free);

    let mut y = Vec::new();
    let mut ydot = Vec::new();
    let gather = |y: &mut Vec<f64>, ydot: &mut Vec<f64>, k: usize, nodes: &[usize]| {
        y.clear();
        ydot.clear();
        for &node in nodes {
            let col = pressure_col[node];
            y.push(traj.values[(k, col)]);
            y.push(traj.values[(k, col + 1)]);
            ydot.push(derivs[(k, col)]);
            ydot.push(derivs[(k, col + 1)]);
        }
    };

    let mut row = 0;
    for k in 0..n_t {
        for (i, vessel) in model.vessels().iter().enumerate() {
            let base = model.vessel_param_base(i);
            let (vr, vl, vc, vs) = (alpha[base], alpha[base + 1], alpha[base + 2], alpha[base + 3]);
            gather(&mut y, &mut ydot, k, &[vessel.from, vessel.to]);
            let contrib = blood_vessel_contribution(vr, vl, vc, vs, &y, &ydot);
            let res = contrib.residual(&y, &ydot);
            let pjac = blood_vessel_param_jacobian(vr, vc, vs, &y, &ydot);
            // Local columns are (R, C, L, S); globally a vessel block is
            // laid out (R, L, C, S).
            let global = [base, base + 2, base + 1, base + 3];
            let weights = [obs.pressure_weight(), obs.flow_weight()];
            for (eq, w) in weights.iter().enumerate() {
                r[row] = w * res[eq];
                for (local, &g) in global.iter().enumerate() {
                    if let Some(col) = free_col[g] {
                        jac[(row, col)] = w * pjac.j[(eq, local)];
                    }
                }
                row += 1;
            }
        }
        for (ji, junction) in model.junctions().iter().enumerate() {
            let base = model.junction_param_base(ji);
            let n_out = junction.to.len();
            let outlets: Vec<JunctionOutletParams> = (0..n_out)
                .map(|o| JunctionOutletParams {
                    resistance: alpha[base + o],
                    inductance: alpha[base + n_out + o],
                    stenosis: alpha[base + 2 * n_out + o],
                })
                .collect();
            let mut nodes = Vec::with_capacity(1 + n_out);
            nodes.push(junction.from);
            nodes.extend_from_slice(&junction.to);
            gather(&mut y, &mut ydot, k, &nodes);
            let contrib = junction_contribution(&outlets, &y, &ydot);
            let res = contrib.residual(&y, &ydot);
            let pjac = junction_param_jacobian(n_out, &y, &ydot);
            // Row 0 conserves mass; the rest are momentum rows. Local
            // parameter columns (R.., L.., S..) match the global block.
            for eq in 0..=n_out {
                let w = if eq == 0 {
                    obs.flow_weight()
                } else {
                    obs.pressure_weight()
                };
                r[row] = w * res[eq];
                for local in 0..3 * n_out {
                    if let Some(col) = free_col[base + local] {
                        jac[(row, col)] = w * pjac.j[(eq, local)];
                    }
                }
                row += 1;
            }
        }
    }
    Ok((r, jac))
}

/// Damped least-squares configuration.
///
/// `frozen` marks parameters excluded from the fit (empty = fit everything).
/// `lower_bounds` is never enforced during iterations; when present, the
/// final estimate is projected onto it just before the report is returned, so
/// a fitted model stays safe to hand to the forward solver.
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub tol_grad: f64,
    pub tol_inc: f64,
    pub max_iters: usize,
    pub lower_bounds: Option<Vec<f64>>,
    pub frozen: Vec<bool>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1.0,
            tol_grad: 1e-5,
            tol_inc: 1e-10,
            max_iters: 100,
            lower_bounds: None,
            frozen: Vec::new(),
        }
    }
}

/// Outcome of a damped least-squares fit.
///
/// `converged` is true only when both the gradient norm and the increment
/// norm passed their tolerances; a max-iterations exit instead reports the
/// best iterate seen (lowest residual sum) with `converged = false`.
#[derive(Debug, Clone, Serialize)]
pub struct LmReport {
    #[serde(skip)]
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub increment_norm: f64,
    pub residual_sum: f64,
    pub converged: bool,
    #[serde(skip)]
    pub gradient_history: Vec<f64>,
    /// Set by callers that re-ran the fit with stenosis coefficients frozen
    /// after the fitted model failed to simulate.
    pub stenosis_refrozen: bool,
}

/// Minimizes the stacked sum of squares S(α) = ‖r(α)‖² by Levenberg-Marquardt
/// iterations `[JᵀJ + λ diag(JᵀJ)] Δα = -Jᵀr`, rescaling the damping each
/// iteration by the ratio of consecutive gradient norms.
pub fn lm_optimize(
    model: &LpnModel,
    alpha0: &[f64],
    obs: &ObservationSet,
    config: &LmConfig,
) -> Result<LmReport> {
    let p = model.parameter_count();
    if alpha0.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "model has {p} element parameters, starting point has {}",
            alpha0.len()
        )));
    }
    if !config.frozen.is_empty() && config.frozen.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "freeze mask covers {} entries, model has {p} parameters",
            config.frozen.len()
        )));
    }
    if !config.initial_damping.is_finite() || config.initial_damping < 0.0 {
        return Err(Error::InvalidParameter(
            "initial damping must be finite and non-negative".into(),
        ));
    }
    if config.tol_grad <= 0.0 || config.tol_inc <= 0.0 {
        return Err(Error::InvalidParameter(
            "convergence tolerances must be positive".into(),
        ));
    }
    if config.max_iters == 0 {
        return Err(Error::InvalidParameter(
            "at least one iteration is required".into(),
        ));
    }
    if let Some(bounds) = &config.lower_bounds {
        if bounds.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "lower bounds cover {} entries, model has {p} parameters",
                bounds.len()
            )));
        }
    }
    let free: Vec<usize> = (0..p)
        .filter(|&g| !config.frozen.get(g).copied().unwrap_or(false))
        .collect();
    if free.is_empty() {
        return Err(Error::InvalidParameter(
            "every parameter is frozen; nothing to fit".into(),
        ));
    }

    let mut alpha = alpha0.to_vec();
    let mut lambda = config.initial_damping;
    let mut prev_grad_norm: Option<f64> = None;
    let mut gradient_history = Vec::new();
    let mut best_alpha = alpha.clone();
    let mut best_s = f64::INFINITY;
    let mut gradient_norm = f64::INFINITY;
    let mut increment_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..config.max_iters {
        iterations += 1;
        let (r, jac) = stack_system(model, &alpha, obs, &config.frozen)?;
        let s = r.norm_squared();
        if s < best_s {
            best_s = s;
            best_alpha = alpha.clone();
        }

        let grad = jac.transpose() * &r;
        gradient_norm = grad.norm();
        if let Some(prev) = prev_grad_norm {
            if prev > 0.0 {
                lambda *= gradient_norm / prev;
            }
        }
        prev_grad_norm = Some(gradient_norm);
        gradient_history.push(gradient_norm);

        let mut normal = jac.transpose() * &jac;
        for d in 0..normal.nrows() {
            normal[(d, d)] *= 1.0 + lambda;
        }
        let delta = normal
            .lu()
            .solve(&(-&grad))
            .ok_or(Error::SingularNormalEquations)?;
        increment_norm = delta.norm();
        for (i, &g) in free.iter().enumerate() {
            alpha[g] += delta[i];
        }

        if gradient_norm < config.tol_grad && increment_norm < config.tol_inc {
            converged = true;
            break;
        }
    }

    // Score the post-update iterate too, then report the final point when
    // converged and the best one seen otherwise.
    let (r_final, _) = stack_system(model, &alpha, obs, &config.frozen)?;
    let s_final = r_final.norm_squared();
    if s_final < best_s {
        best_s = s_final;
        best_alpha = alpha.clone();
    }
    let (mut alpha_out, residual_sum) = if converged {
        (alpha, s_final)
    } else {
        (best_alpha, best_s)
    };
    if let Some(bounds) = &config.lower_bounds {
        for (a, &lo) in alpha_out.iter_mut().zip(bounds) {
            if *a < lo {
                *a = lo;
            }
        }
    }

    Ok(LmReport {
        alpha: alpha_out,
        iterations,
        gradient_norm,
        increment_norm,
        residual_sum,
        converged,
        gradient_history,
        stenosis_refrozen: false,
    })
}
