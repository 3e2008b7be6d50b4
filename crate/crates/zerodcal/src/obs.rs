//! Clinical-style observations and approximation-error metrics.
//!
//! The calibration observable is deliberately sparse: the minimum and maximum
//! inlet pressure over one cycle plus the time-averaged flow through each
//! outlet, mirroring what cuff/catheter pressure readings and per-branch flow
//! imaging provide. This module extracts that vector from a simulated cycle,
//! corrupts it with seeded signal-to-noise-scaled Gaussian noise, and scores
//! reduced-order trajectories against reference ones with normalized maximum
//! pressure and flow errors at the model caps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LpnModel, Quantity, Trajectory};
use crate::smc::NoiseModel;
use crate::spline::PeriodicSpline;

/// Relative time tolerance when comparing sample grids and cycle spans.
const TIME_TOL: f64 = 1e-9;
/// Signal-to-noise ratios at or above this are treated as the noise-free
/// limit: synthesis adds no noise at all.
const NOISE_FREE_SNR: f64 = 1e12;

/// Sparse cycle observations: inlet pressure envelope plus mean outlet flows,
/// ordered by outlet index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationVector {
    pub p_in_min: f64,
    pub p_in_max: f64,
    pub q_means: Vec<f64>,
}

impl ObservationVector {
    pub fn new(p_in_min: f64, p_in_max: f64, q_means: Vec<f64>) -> Result<Self> {
        if !(p_in_min.is_finite() && p_in_max.is_finite())
            || q_means.iter().any(|q| !q.is_finite())
        {
            return Err(Error::InvalidParameter(
                "observations must be finite".into(),
            ));
        }
        if p_in_max < p_in_min {
            return Err(Error::InvalidParameter(format!(
                "max inlet pressure {p_in_max} below min {p_in_min}"
            )));
        }
        Ok(Self {
            p_in_min,
            p_in_max,
            q_means,
        })
    }

    /// Stacks as [P_min, P_max, Q_mean per outlet].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.p_in_min);
        v.push(self.p_in_max);
        v.extend_from_slice(&self.q_means);
        v
    }

    pub fn len(&self) -> usize {
        self.q_means.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Integral mean of one column over the cycle by the trapezoid rule. An open
/// grid (span < period) gets a periodic wrap segment; a closed grid (span =
/// period, duplicate endpoint) is integrated as-is.
fn periodic_mean(times: &[f64], values: &[f64], period: f64) -> f64 {
    let n = times.len();
    let mut integral = 0.0;
    for k in 0..n - 1 {
        integral += 0.5 * (values[k] + values[k + 1]) * (times[k + 1] - times[k]);
    }
    let span = times[n - 1] - times[0];
    if (span - period).abs() > TIME_TOL * period {
        integral += 0.5 * (values[n - 1] + values[0]) * (times[0] + period - times[n - 1]);
    }
    integral / period
}

fn require_column(traj: &Trajectory, node: &str, quantity: Quantity) -> Result<usize> {
    traj.column_index(node, quantity).ok_or_else(|| {
        Error::Observation(format!(
            "trajectory has no {quantity:?} column for node '{node}'"
        ))
    })
}

fn check_single_cycle(traj: &Trajectory, period: f64) -> Result<()> {
    if traj.len() < 2 {
        return Err(Error::Observation(
            "trajectory needs at least two samples".into(),
        ));
    }
    let span = traj.times[traj.len() - 1] - traj.times[0];
    if span > period * (1.0 + TIME_TOL) {
        return Err(Error::Observation(format!(
            "trajectory spans {span}, more than one cycle of period {period}"
        )));
    }
    Ok(())
}

/// Reads the observation vector off one simulated cycle: inlet pressure
/// min/max over the samples and the trapezoidal time-average of each outlet
/// flow.
pub fn extract_observations(traj: &Trajectory, model: &LpnModel) -> Result<ObservationVector> {
    let period = model.period();
    check_single_cycle(traj, period)?;
    let p_col = require_column(traj, model.inflow_node(), Quantity::Pressure)?;
    let pressures = traj.column_vec(p_col);
    let p_in_min = pressures.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_in_max = pressures.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut q_means = Vec::new();
    for (node, _) in model.windkessel_bcs() {
        let q_col = require_column(traj, &node, Quantity::Flow)?;
        q_means.push(periodic_mean(&traj.times, &traj.column_vec(q_col), period));
    }
    ObservationVector::new(p_in_min, p_in_max, q_means)
}

/// Corrupts true observations with independent Gaussian noise of variance
/// y_i^2 / SNR, drawn deterministically from the seed, and returns both the
/// noisy vector and the inference-side noise model. The inference variances
/// are computed from the *observed* values (the only quantity available in
/// practice), not from the truth. SNR at or above 1e12 is the noise-free
/// limit and copies the truth through unchanged.
pub fn synthesize_noisy_observations(
    y_true: &ObservationVector,
    snr: f64,
    seed: u64,
) -> Result<(Vec<f64>, NoiseModel)> {
    if !snr.is_finite() || snr <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "signal-to-noise ratio must be positive, got {snr}"
        )));
    }
    let truth = y_true.to_vec();
    let y_obs: Vec<f64> = if snr >= NOISE_FREE_SNR {
        truth
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        truth
            .into_iter()
            .map(|y| {
                let z: f64 = StandardNormal.sample(&mut rng);
                y + (y * y / snr).sqrt() * z
            })
            .collect()
    };
    let noise = NoiseModel::from_snr(y_obs.clone(), snr)?;
    Ok((y_obs, noise))
}

/// One cap's normalized error contribution.
#[derive(Debug, Clone, Serialize)]
pub struct CapError {
    pub node: String,
    pub value: f64,
}

/// Normalized maximum approximation errors of a reduced trajectory against a
/// reference one, averaged over the model caps.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    /// Mean over caps (inlet + outlets) of max_t |dP| / mean_t P_ref.
    pub max_pressure_error: f64,
    /// Mean over outlets of max_t |dQ| / (max_t Q_ref - min_t Q_ref);
    /// zero-range outlets are excluded (reported as NaN per cap).
    pub max_flow_error: f64,
    pub pressure_per_cap: Vec<CapError>,
    pub flow_per_cap: Vec<CapError>,
}

/// One trajectory's column evaluated on a target grid, resampling through a
/// periodic spline when the grids differ.
fn column_on_grid(
    traj: &Trajectory,
    col: usize,
    grid: &[f64],
    period: f64,
    same_grid: bool,
) -> Result<Vec<f64>> {
    let values = traj.column_vec(col);
    if same_grid {
        return Ok(values);
    }
    // Drop a duplicate wrap sample; the spline closes the cycle itself.
    let span = traj.times[traj.len() - 1] - traj.times[0];
    let keep = if (span - period).abs() <= TIME_TOL * period {
        traj.len() - 1
    } else {
        traj.len()
    };
    let spline = PeriodicSpline::fit(&traj.times[..keep], &values[..keep], period)?;
    Ok(grid.iter().map(|&t| spline.value(t)).collect())
}

/// Scores a reduced-order trajectory against a reference one at the model
/// caps. Both must cover one cycle; when their sample grids differ, the finer
/// trajectory is resampled onto the coarser grid by periodic splines.
pub fn error_metrics(
    reduced: &Trajectory,
    reference: &Trajectory,
    model: &LpnModel,
) -> Result<ErrorReport> {
    let period = model.period();
    check_single_cycle(reduced, period)?;
    check_single_cycle(reference, period)?;

    let same_grid = reduced.len() == reference.len()
        && reduced
            .times
            .iter()
            .zip(&reference.times)
            .all(|(a, b)| (a - b).abs() <= TIME_TOL * period);
    // The coarser grid is the common one; on a tie the reference grid wins.
    let reduced_is_finer = reduced.len() > reference.len();
    let grid: &[f64] = if same_grid || reduced_is_finer {
        &reference.times
    } else {
        &reduced.times
    };
    let n_t = grid.len() as f64;

    let mut pressure_caps: Vec<&str> = vec![model.inflow_node()];
    let outlets: Vec<String> = model.windkessel_bcs().into_iter().map(|(n, _)| n).collect();
    pressure_caps.extend(outlets.iter().map(String::as_str));

    let mut pressure_per_cap = Vec::new();
    for node in &pressure_caps {
        let red = column_on_grid(
            reduced,
            require_column(reduced, node, Quantity::Pressure)?,
            grid,
            period,
            same_grid || !reduced_is_finer,
        )?;
        let rf = column_on_grid(
            reference,
            require_column(reference, node, Quantity::Pressure)?,
            grid,
            period,
            same_grid || reduced_is_finer,
        )?;
        let max_diff = red
            .iter()
            .zip(&rf)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ref_sum: f64 = rf.iter().sum();
        pressure_per_cap.push(CapError {
            node: node.to_string(),
            value: n_t * max_diff / ref_sum,
        });
    }

    let mut flow_per_cap = Vec::new();
    for node in &outlets {
        let red = column_on_grid(
            reduced,
            require_column(reduced, node, Quantity::Flow)?,
            grid,
            period,
            same_grid || !reduced_is_finer,
        )?;
        let rf = column_on_grid(
            reference,
            require_column(reference, node, Quantity::Flow)?,
            grid,
            period,
            same_grid || reduced_is_finer,
        )?;
        let max_diff = red
            .iter()
            .zip(&rf)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let range = rf.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rf.iter().cloned().fold(f64::INFINITY, f64::min);
        let value = if range <= 0.0 {
            eprintln!(
                "warning: outlet '{node}' has zero reference flow range; its flow error is undefined and excluded from the mean"
            );
            f64::NAN
        } else {
            max_diff / range
        };
        flow_per_cap.push(CapError {
            node: node.clone(),
            value,
        });
    }

    let max_pressure_error =
        pressure_per_cap.iter().map(|c| c.value).sum::<f64>() / pressure_per_cap.len() as f64;
    let defined: Vec<f64> = flow_per_cap
        .iter()
        .map(|c| c.value)
        .filter(|v| !v.is_nan())
        .collect();
    let max_flow_error = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };

    Ok(ErrorReport {
        max_pressure_error,
        max_flow_error,
        pressure_per_cap,
        flow_per_cap,
    })
}
