//! Generalized-alpha time integration of the network equations.
//!
//! The scheme advances the implicit system r(t, y, ydot) = 0 with controlled
//! high-frequency damping set by a spectral radius in [0, 1]. Each step
//! predicts ydot at the new time, then Newton-iterates on the intermediate
//! (stage) state until the residual drops below an absolute tolerance; the
//! converged stage state is what gets reported, so every trajectory row
//! carries a residual certificate.
//!
//! [`run_cycles`] repeats whole periods until two consecutive cycles agree
//! within a relative tolerance, returning the final cycle. A non-periodic
//! outcome after the cycle budget is reported as a flag, not an error, so
//! callers can decide how much convergence they need.
//!
//! With [`IntegratorConfig::reuse_iteration_matrix`] set, the Newton matrix
//! is factorized once and reused across iterations and steps, refreshed
//! whenever the iteration stops contracting; the convergence check always
//! uses the true residual, so reuse trades iteration counts, never accuracy.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{GlobalSystem, LpnModel, Trajectory};

/// Implicit differential-algebraic system r(t, y, ydot) = 0.
pub trait DaeSystem {
    fn dim(&self) -> usize;
    fn residual_into(&self, t: f64, y: &DVector<f64>, ydot: &DVector<f64>, out: &mut DVector<f64>);
    /// Newton matrix K = am dr/dydot + afgdt dr/dy at the given state.
    fn iteration_matrix_into(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        am: f64,
        afgdt: f64,
        out: &mut DMatrix<f64>,
    );
}

impl DaeSystem for GlobalSystem {
    fn dim(&self) -> usize {
        GlobalSystem::dim(self)
    }
    fn residual_into(&self, t: f64, y: &DVector<f64>, ydot: &DVector<f64>, out: &mut DVector<f64>) {
        GlobalSystem::residual_into(self, t, y, ydot, out)
    }
    fn iteration_matrix_into(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        am: f64,
        afgdt: f64,
        out: &mut DMatrix<f64>,
    ) {
        GlobalSystem::iteration_matrix_into(self, y, ydot, am, afgdt, out)
    }
}

/// Scheme coefficients for a first-order system, parameterized by the
/// spectral radius at infinite time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenAlphaCoeffs {
    pub alpha_m: f64,
    pub alpha_f: f64,
    pub gamma: f64,
}

impl GenAlphaCoeffs {
    /// alpha_m = (3 - rho) / (2 (1 + rho)), alpha_f = 1 / (1 + rho),
    /// gamma = 1/2 + alpha_m - alpha_f. rho = 1 preserves high frequencies,
    /// rho = 0 annihilates them in one step.
    pub fn from_spectral_radius(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && (0.0..=1.0).contains(&rho)) {
            return Err(Error::InvalidParameter(format!(
                "spectral radius must lie in [0, 1], got {rho}"
            )));
        }
        let alpha_m = 0.5 * (3.0 - rho) / (1.0 + rho);
        let alpha_f = 1.0 / (1.0 + rho);
        Ok(Self {
            alpha_m,
            alpha_f,
            gamma: 0.5 + alpha_m - alpha_f,
        })
    }
}

/// Step-size selection for cycle runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// Target step length; snapped so an integer number of steps tiles the
    /// period exactly.
    Dt(f64),
    StepsPerCycle(usize),
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub spectral_radius: f64,
    pub step: StepSize,
    pub max_newton_iters: usize,
    pub newton_abs_tol: f64,
    pub cycles_max: usize,
    /// Relative agreement between consecutive cycles, per unknown, that
    /// counts as periodic.
    pub periodicity_tol: f64,
    /// Freeze and reuse the factorized Newton matrix across iterations and
    /// steps, refreshing on stalls. Saves most of the linear algebra when the
    /// nonlinear terms are mild.
    pub reuse_iteration_matrix: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            spectral_radius: 0.2,
            step: StepSize::StepsPerCycle(1000),
            max_newton_iters: 30,
            newton_abs_tol: 1e-8,
            cycles_max: 100,
            periodicity_tol: 1e-3,
            reuse_iteration_matrix: false,
        }
    }
}

/// Outcome of a single time step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub y: DVector<f64>,
    pub ydot: DVector<f64>,
    /// Converged stage state: the residual at (stage_t, stage_y, stage_ydot)
    /// is below the Newton tolerance.
    pub stage_y: DVector<f64>,
    pub stage_ydot: DVector<f64>,
    pub stage_t: f64,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Scratch buffers and the optional frozen factorization shared across steps.
struct Workspace {
    stage_y: DVector<f64>,
    stage_ydot: DVector<f64>,
    r: DVector<f64>,
    k: DMatrix<f64>,
    lu: Option<nalgebra::linalg::LU<f64, Dyn, Dyn>>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        Self {
            stage_y: DVector::zeros(dim),
            stage_ydot: DVector::zeros(dim),
            r: DVector::zeros(dim),
            k: DMatrix::zeros(dim, dim),
            lu: None,
        }
    }
}

/// One generalized-alpha step; on success the workspace stage buffers hold
/// the converged stage state. `y_out`/`ydot_out` receive the step endpoints.
#[allow(clippy::too_many_arguments)]
fn newton_step<S: DaeSystem>(
    sys: &S,
    t: f64,
    dt: f64,
    y_n: &DVector<f64>,
    ydot_n: &DVector<f64>,
    coeffs: &GenAlphaCoeffs,
    max_iters: usize,
    tol: f64,
    reuse: bool,
    ws: &mut Workspace,
    y_out: &mut DVector<f64>,
    ydot_out: &mut DVector<f64>,
) -> Result<(usize, f64)> {
    let dim = sys.dim();
    let (am, af, gamma) = (coeffs.alpha_m, coeffs.alpha_f, coeffs.gamma);
    let afgdt = af * gamma * dt;
    let t_stage = t + af * dt;

    // Same-rate predictor: ydot scaled so the gamma-update reproduces a
    // constant-state step when the residual already vanishes.
    let predictor = (gamma - 1.0) / gamma;
    for i in 0..dim {
        ydot_out[i] = predictor * ydot_n[i];
        y_out[i] = y_n[i];
    }

    let mut prev_norm = f64::INFINITY;
    let mut iter = 0;
    loop {
        for i in 0..dim {
            ws.stage_ydot[i] = ydot_n[i] + am * (ydot_out[i] - ydot_n[i]);
            ws.stage_y[i] = y_n[i] + af * (y_out[i] - y_n[i]);
        }
        sys.residual_into(t_stage, &ws.stage_y, &ws.stage_ydot, &mut ws.r);
        let norm = ws.r.amax();
        if norm < tol {
            return Ok((iter, norm));
        }
        if iter >= max_iters {
            return Err(Error::NewtonDivergence {
                time: t_stage,
                iterations: iter,
                residual: norm,
            });
        }

        // Refresh the factorization unless a frozen one is still contracting.
        let stalled = iter > 0 && norm > 0.5 * prev_norm;
        let mut fresh = false;
        if !reuse || ws.lu.is_none() || stalled {
            sys.iteration_matrix_into(&ws.stage_y, &ws.stage_ydot, am, afgdt, &mut ws.k);
            ws.lu = Some(ws.k.clone().lu());
            fresh = true;
        }
        let rhs = -&ws.r;
        let delta = match ws.lu.as_ref().unwrap().solve(&rhs) {
            Some(d) => d,
            None if !fresh => {
                // The frozen matrix went singular; rebuild at the current
                // stage and retry once.
                sys.iteration_matrix_into(&ws.stage_y, &ws.stage_ydot, am, afgdt, &mut ws.k);
                ws.lu = Some(ws.k.clone().lu());
                ws.lu
                    .as_ref()
                    .unwrap()
                    .solve(&rhs)
                    .ok_or(Error::SingularIterationMatrix { time: t_stage })?
            }
            None => return Err(Error::SingularIterationMatrix { time: t_stage }),
        };
        for i in 0..dim {
            ydot_out[i] += delta[i];
            y_out[i] += gamma * dt * delta[i];
        }
        prev_norm = norm;
        iter += 1;
    }
}

/// Advances the system one step of length `dt` from `(y, ydot)` at time `t`,
/// rebuilding the Newton matrix every iteration.
pub fn step<S: DaeSystem>(
    sys: &S,
    t: f64,
    dt: f64,
    y: &DVector<f64>,
    ydot: &DVector<f64>,
    coeffs: &GenAlphaCoeffs,
    max_iters: usize,
    tol: f64,
) -> Result<StepResult> {
    let dim = sys.dim();
    if y.len() != dim || ydot.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "state length {} / {} does not match system dimension {dim}",
            y.len(),
            ydot.len()
        )));
    }
    let mut ws = Workspace::new(dim);
    let mut y_out = DVector::zeros(dim);
    let mut ydot_out = DVector::zeros(dim);
    let (iterations, residual_norm) = newton_step(
        sys, t, dt, y, ydot, coeffs, max_iters, tol, false, &mut ws, &mut y_out, &mut ydot_out,
    )?;
    Ok(StepResult {
        y: y_out,
        ydot: ydot_out,
        stage_y: ws.stage_y,
        stage_ydot: ws.stage_ydot,
        stage_t: t + coeffs.alpha_f * dt,
        iterations,
        residual_norm,
    })
}

/// Newton solve of the steady problem r(t, y, 0) = 0 starting from `guess`.
pub fn solve_steady<S: DaeSystem>(
    sys: &S,
    t: f64,
    guess: &DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let dim = sys.dim();
    let zero = DVector::zeros(dim);
    let mut y = guess.clone();
    let mut r = DVector::zeros(dim);
    let mut k = DMatrix::zeros(dim, dim);
    for iter in 0.. {
        sys.residual_into(t, &y, &zero, &mut r);
        let norm = r.amax();
        if norm < tol {
            return Ok(y);
        }
        if iter >= max_iters {
            return Err(Error::SteadyNonConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        sys.iteration_matrix_into(&y, &zero, 0.0, 1.0, &mut k);
        let delta = k
            .clone()
            .lu()
            .solve(&(-&r))
            .ok_or(Error::SingularIterationMatrix { time: t })?;
        y += delta;
    }
    unreachable!("loop exits via return")
}

/// The final integrated cycle, sampled at the converged stage states.
#[derive(Debug, Clone)]
pub struct CycleRun {
    /// Stage times within the cycle, (k + alpha_f) dt for step k.
    pub times: Vec<f64>,
    /// Row k holds the stage state of step k.
    pub states: DMatrix<f64>,
    pub derivatives: DMatrix<f64>,
    /// Whether two consecutive cycles agreed within the tolerance before the
    /// cycle budget ran out.
    pub periodic: bool,
    /// Cycles actually integrated.
    pub cycles: usize,
    /// Endpoint state after the last step, for chaining runs.
    pub final_y: DVector<f64>,
    pub final_ydot: DVector<f64>,
}

/// Integrates whole periods until consecutive cycles agree within
/// `config.periodicity_tol` (relative, per unknown) or the budget runs out.
pub fn run_cycles<S: DaeSystem>(
    sys: &S,
    period: f64,
    y0: &DVector<f64>,
    ydot0: &DVector<f64>,
    config: &IntegratorConfig,
) -> Result<CycleRun> {
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "period must be positive, got {period}"
        )));
    }
    let coeffs = GenAlphaCoeffs::from_spectral_radius(config.spectral_radius)?;
    let steps = match config.step {
        StepSize::StepsPerCycle(n) => n,
        StepSize::Dt(dt) => {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "step length must be positive, got {dt}"
                )));
            }
            (period / dt).round().max(1.0) as usize
        }
    };
    if steps == 0 {
        return Err(Error::InvalidParameter(
            "steps per cycle must be at least 1".into(),
        ));
    }
    if config.cycles_max == 0 {
        return Err(Error::InvalidParameter(
            "cycle budget must be at least 1".into(),
        ));
    }
    let dt = period / steps as f64;
    let dim = sys.dim();
    if y0.len() != dim || ydot0.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "initial state length {} / {} does not match system dimension {dim}",
            y0.len(),
            ydot0.len()
        )));
    }

    let mut ws = Workspace::new(dim);
    let mut y = y0.clone();
    let mut ydot = ydot0.clone();
    let mut y_next = DVector::zeros(dim);
    let mut ydot_next = DVector::zeros(dim);
    let mut prev = DMatrix::zeros(steps, dim);
    let mut cur = DMatrix::zeros(steps, dim);
    let mut cur_d = DMatrix::zeros(steps, dim);
    let times: Vec<f64> = (0..steps)
        .map(|k| (k as f64 + coeffs.alpha_f) * dt)
        .collect();

    let mut periodic = false;
    let mut cycles = 0;
    for cycle in 0..config.cycles_max {
        for k in 0..steps {
            let t = (cycle * steps + k) as f64 * dt;
            newton_step(
                sys,
                t,
                dt,
                &y,
                &ydot,
                &coeffs,
                config.max_newton_iters,
                config.newton_abs_tol,
                config.reuse_iteration_matrix,
                &mut ws,
                &mut y_next,
                &mut ydot_next,
            )?;
            for j in 0..dim {
                cur[(k, j)] = ws.stage_y[j];
                cur_d[(k, j)] = ws.stage_ydot[j];
            }
            std::mem::swap(&mut y, &mut y_next);
            std::mem::swap(&mut ydot, &mut ydot_next);
        }
        cycles = cycle + 1;
        if cycle > 0 && cycles_agree(&prev, &cur, config.periodicity_tol) {
            periodic = true;
            break;
        }
        if cycle + 1 < config.cycles_max {
            std::mem::swap(&mut prev, &mut cur);
        }
    }

    Ok(CycleRun {
        times,
        states: cur,
        derivatives: cur_d,
        periodic,
        cycles,
        final_y: y,
        final_ydot: ydot,
    })
}

/// Relative agreement per unknown: max_t |cur - prev| over max_t |cur|.
fn cycles_agree(prev: &DMatrix<f64>, cur: &DMatrix<f64>, tol: f64) -> bool {
    for j in 0..cur.ncols() {
        let mut num = 0.0f64;
        let mut den = 1e-12f64;
        for k in 0..cur.nrows() {
            num = num.max((cur[(k, j)] - prev[(k, j)]).abs());
            den = den.max(cur[(k, j)].abs());
        }
        if num / den > tol {
            return false;
        }
    }
    true
}

/// A model simulation that reached (or exhausted the budget chasing) the
/// periodic regime.
#[derive(Debug, Clone)]
pub struct SimulatedCycles {
    pub trajectory: Trajectory,
    pub periodic: bool,
    pub cycles: usize,
    pub final_y: DVector<f64>,
    pub final_ydot: DVector<f64>,
}

/// Assembles the model, initializes from the steady problem at t = 0, and
/// integrates to the periodic regime.
pub fn simulate_model(model: &LpnModel, config: &IntegratorConfig) -> Result<SimulatedCycles> {
    let sys = model.assemble()?;
    let y0 = solve_steady(&sys, 0.0, &DVector::zeros(sys.dim()), 50, config.newton_abs_tol)?;
    let ydot0 = DVector::zeros(sys.dim());
    let run = run_cycles(&sys, model.period(), &y0, &ydot0, config)?;
    let trajectory = Trajectory::new(
        model.node_names().to_vec(),
        run.times,
        run.states,
        Some(run.derivatives),
    )?;
    Ok(SimulatedCycles {
        trajectory,
        periodic: run.periodic,
        cycles: run.cycles,
        final_y: run.final_y,
        final_ydot: run.final_ydot,
    })
}
