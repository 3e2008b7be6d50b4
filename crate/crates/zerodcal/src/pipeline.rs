//! Two-run boundary-condition calibration workflow and its file plumbing.
//!
//! The workflow calibrates Windkessel outlet parameters against sparse
//! observations in two posterior-sampling runs. Run 1 samples with the case's
//! own (geometric) network as the surrogate and yields a point estimate; that
//! estimate is decoded to Windkessel values and handed off to an external
//! high-fidelity solver through a request/response file pair. The returned
//! trajectory trains an optimized network (spline derivatives + least-squares
//! fit of every element parameter), and run 2 samples again, independently,
//! with the optimized network. A surrogate mode substitutes a designated
//! network for the external solver so the whole loop runs in-process.
//!
//! Every artifact lands in a single workspace directory guarded by a lock
//! file. The workspace is append-only: resuming verifies recorded hashes and
//! never rewrites earlier artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{simulate_model, IntegratorConfig, StepSize};
use crate::inverse::{lm_optimize, LmConfig, LmReport, ObservationSet};
use crate::model::{LpnModel, Trajectory, WindkesselBc};
use crate::obs::{error_metrics, extract_observations, synthesize_noisy_observations, ErrorReport};
use crate::smc::{run_smc, NoiseModel, Prior, SmcConfig, SmcResult, ThetaModel};

/// Forward-integrator settings for sampler-side model evaluations.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub steps_per_cycle: usize,
    pub cycles_max: usize,
    pub periodicity_tol: f64,
    pub spectral_radius: f64,
    pub newton_abs_tol: f64,
    pub reuse_iteration_matrix: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            steps_per_cycle: 300,
            cycles_max: 100,
            periodicity_tol: 1e-3,
            spectral_radius: 0.2,
            newton_abs_tol: 1e-8,
            reuse_iteration_matrix: true,
        }
    }
}

impl SimSettings {
    pub fn to_config(&self) -> IntegratorConfig {
        IntegratorConfig {
            spectral_radius: self.spectral_radius,
            step: StepSize::StepsPerCycle(self.steps_per_cycle),
            newton_abs_tol: self.newton_abs_tol,
            cycles_max: self.cycles_max,
            periodicity_tol: self.periodicity_tol,
            reuse_iteration_matrix: self.reuse_iteration_matrix,
            ..IntegratorConfig::default()
        }
    }
}

/// Posterior-sampler settings; run 2 defaults to seed + 1 so the two runs
/// are independent but still fully determined by the case file.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcSettings {
    pub particle_count: usize,
    pub ess_min: f64,
    pub rejuvenation_steps: usize,
    pub seed: u64,
    pub proposal_scale: f64,
    pub max_stages: usize,
    pub run2_seed: Option<u64>,
}

impl Default for SmcSettings {
    fn default() -> Self {
        let base = SmcConfig::default();
        Self {
            particle_count: base.particle_count,
            ess_min: base.ess_min,
            rejuvenation_steps: base.rejuvenation_steps,
            seed: base.seed,
            proposal_scale: base.proposal_scale,
            max_stages: base.max_stages,
            run2_seed: None,
        }
    }
}

impl SmcSettings {
    fn to_config(&self, seed: u64) -> SmcConfig {
        SmcConfig {
            particle_count: self.particle_count,
            ess_min: self.ess_min,
            rejuvenation_steps: self.rejuvenation_steps,
            seed,
            proposal_scale: self.proposal_scale,
            max_stages: self.max_stages,
        }
    }

    pub fn run2_seed(&self) -> u64 {
        self.run2_seed.unwrap_or(self.seed.wrapping_add(1))
    }
}

/// Element-fit settings for the trajectory-training stage.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub initial_damping: f64,
    pub tol_grad: f64,
    pub tol_inc: f64,
    pub max_iters: usize,
    /// Number of evenly spaced cycle samples the response trajectory is
    /// resampled to before fitting.
    pub n_resample: usize,
    /// Project the fitted parameters onto [0, inf) at export.
    pub nonnegative: bool,
}

impl Default for LmSettings {
    fn default() -> Self {
        let base = LmConfig::default();
        Self {
            initial_damping: base.initial_damping,
            tol_grad: base.tol_grad,
            tol_inc: base.tol_inc,
            max_iters: base.max_iters,
            n_resample: 128,
            nonnegative: true,
        }
    }
}

impl LmSettings {
    fn to_config(&self, parameter_count: usize) -> LmConfig {
        LmConfig {
            initial_damping: self.initial_damping,
            tol_grad: self.tol_grad,
            tol_inc: self.tol_inc,
            max_iters: self.max_iters,
            lower_bounds: if self.nonnegative {
                Some(vec![0.0; parameter_count])
            } else {
                None
            },
            frozen: Vec::new(),
        }
    }
}

/// Pre-recorded observation vector with its noise, read from a file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub file: PathBuf,
}

/// Observations synthesized from a reference trajectory by seeded noise.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSource {
    pub trajectory: PathBuf,
    pub snr: f64,
    pub seed: u64,
}

/// Exactly one way to obtain the observation vector.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ObservationSource {
    File(FileSource),
    Synthesize(SynthesisSource),
}

/// On-disk observation file: values plus either an SNR or explicit variances.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationFile {
    values: Vec<f64>,
    #[serde(default)]
    snr: Option<f64>,
    #[serde(default)]
    variances: Option<Vec<f64>>,
}

/// Independent prior, one marginal per calibrated outlet parameter.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// (lo, hi) bounds per parameter.
    Uniform(Vec<(f64, f64)>),
    /// (mean, std) per parameter.
    Normal(Vec<(f64, f64)>),
}

impl PriorSpec {
    fn to_prior(&self, n_out: usize) -> Result<Prior> {
        let prior = match self {
            PriorSpec::Uniform(b) => Prior::uniform(b)?,
            PriorSpec::Normal(p) => Prior::normal(p)?,
        };
        if prior.dim() != n_out {
            return Err(Error::InvalidParameter(format!(
                "prior has {} marginals but the model has {n_out} outlets",
                prior.dim()
            )));
        }
        Ok(prior)
    }
}

/// Default prior bounds (log total resistance) when the case does not
/// specify a prior.
pub const DEFAULT_LOG_RESISTANCE_BOUNDS: (f64, f64) = (2.0, 8.0);

/// One axis of the posterior evaluation grid, possibly shared by several
/// outlet parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub bounds: (f64, f64),
    /// Outlet-parameter indices that take this axis's value.
    pub components: Vec<usize>,
}

fn default_grid_cells() -> usize {
    10
}

/// Uniform cell-centred evaluation grid over coupled parameter axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    #[serde(default = "default_grid_cells")]
    pub cells: usize,
}

impl GridSpec {
    /// Full parameter dimension implied by the coupling map.
    pub fn theta_dim(&self) -> usize {
        self.axes
            .iter()
            .flat_map(|a| a.components.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.cells == 0 {
            return Err(Error::InvalidParameter(
                "grid needs at least one axis and one cell".into(),
            ));
        }
        let dim = self.theta_dim();
        let mut owner = vec![None; dim];
        for (i, axis) in self.axes.iter().enumerate() {
            let (lo, hi) = axis.bounds;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "grid axis {i} needs finite bounds lo < hi, got [{lo}, {hi}]"
                )));
            }
            if axis.components.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "grid axis {i} couples no parameter components"
                )));
            }
            for &c in &axis.components {
                if owner[c].replace(i).is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "parameter component {c} appears on more than one grid axis"
                    )));
                }
            }
        }
        if let Some(unassigned) = owner.iter().position(Option::is_none) {
            return Err(Error::InvalidParameter(format!(
                "parameter component {unassigned} is not covered by any grid axis"
            )));
        }
        Ok(())
    }

    /// Uniform prior spanning each component's owning axis bounds.
    pub fn default_prior(&self) -> Result<Prior> {
        self.validate()?;
        let dim = self.theta_dim();
        let mut bounds = vec![(0.0, 0.0); dim];
        for axis in &self.axes {
            for &c in &axis.components {
                bounds[c] = axis.bounds;
            }
        }
        Prior::uniform(&bounds)
    }

    /// Cell centres along one axis.
    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let (lo, hi) = self.axes[axis].bounds;
        let w = (hi - lo) / self.cells as f64;
        (0..self.cells).map(|i| lo + (i as f64 + 0.5) * w).collect()
    }
}

/// Complete calibration problem definition, loaded from one JSON file; all
/// paths are resolved relative to that file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationCase {
    pub model: PathBuf,
    pub workspace: PathBuf,
    pub observations: ObservationSource,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub smc: SmcSettings,
    #[serde(default)]
    pub lm: LmSettings,
    #[serde(default)]
    pub simulation: SimSettings,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl CalibrationCase {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut case: CalibrationCase = serde_json::from_str(&text).map_err(|e| {
            Error::Workspace(format!("case file {} is invalid: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        case.model = base.join(&case.model);
        case.workspace = base.join(&case.workspace);
        match &mut case.observations {
            ObservationSource::File(f) => f.file = base.join(&f.file),
            ObservationSource::Synthesize(s) => s.trajectory = base.join(&s.trajectory),
        }
        case.validate()?;
        Ok(case)
    }

    fn validate(&self) -> Result<()> {
        if !self.model.is_file() {
            return Err(Error::Workspace(format!(
                "model file {} does not exist",
                self.model.display()
            )));
        }
        let source: &Path = match &self.observations {
            ObservationSource::File(f) => &f.file,
            ObservationSource::Synthesize(s) => &s.trajectory,
        };
        if !source.is_file() {
            return Err(Error::Workspace(format!(
                "observation source {} does not exist",
                source.display()
            )));
        }
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        Ok(())
    }

    /// Loads the network and resolves the observation vector, noise model,
    /// and prior.
    pub fn load_inputs(&self) -> Result<CaseInputs> {
        let model = LpnModel::from_json_file(&self.model)?;
        let n_out = model.windkessel_bcs().len();
        if n_out == 0 {
            return Err(Error::ModelDefinition(
                "calibration needs at least one Windkessel outlet".into(),
            ));
        }
        let (y_obs, noise, synthesis_seed) = match &self.observations {
            ObservationSource::File(f) => {
                let text = fs::read_to_string(&f.file)?;
                let parsed: ObservationFile = serde_json::from_str(&text).map_err(|e| {
                    Error::Observation(format!(
                        "observation file {} is invalid: {e}",
                        f.file.display()
                    ))
                })?;
                let noise = match (&parsed.snr, &parsed.variances) {
                    (Some(snr), None) => NoiseModel::from_snr(parsed.values.clone(), *snr)?,
                    (None, Some(v)) => NoiseModel::new(parsed.values.clone(), v.clone())?,
                    _ => {
                        return Err(Error::Observation(
                            "observation file needs exactly one of `snr` or `variances`".into(),
                        ))
                    }
                };
                (parsed.values, noise, None)
            }
            ObservationSource::Synthesize(s) => {
                let traj = Trajectory::read_csv(&s.trajectory, None)?;
                let y_true = extract_observations(&traj, &model)?;
                let (y_obs, noise) = synthesize_noisy_observations(&y_true, s.snr, s.seed)?;
                (y_obs, noise, Some(s.seed))
            }
        };
        if y_obs.len() != n_out + 2 {
            return Err(Error::Observation(format!(
                "expected {} observations (2 pressures + {n_out} flows), got {}",
                n_out + 2,
                y_obs.len()
            )));
        }
        let prior = match &self.prior {
            Some(spec) => spec.to_prior(n_out)?,
            None => Prior::uniform(&vec![DEFAULT_LOG_RESISTANCE_BOUNDS; n_out])?,
        };
        Ok(CaseInputs {
            model,
            y_obs,
            noise,
            prior,
            synthesis_seed,
        })
    }
}

/// Resolved case inputs ready for sampling.
#[derive(Debug)]
pub struct CaseInputs {
    pub model: LpnModel,
    pub y_obs: Vec<f64>,
    pub noise: NoiseModel,
    pub prior: Prior,
    pub synthesis_seed: Option<u64>,
}

/// Sampler-facing forward model: log total resistances in, observation
/// vector out; any solver failure or non-periodic run counts as a failed
/// evaluation.
pub struct OutletResistanceModel {
    model: LpnModel,
    base_bcs: Vec<WindkesselBc>,
    config: IntegratorConfig,
}

impl OutletResistanceModel {
    pub fn new(model: LpnModel, config: IntegratorConfig) -> Self {
        let base_bcs = model.windkessel_bcs().into_iter().map(|(_, bc)| bc).collect();
        Self {
            model,
            base_bcs,
            config,
        }
    }

    /// Current parameter location of the wrapped network.
    pub fn theta(&self) -> Vec<f64> {
        self.base_bcs
            .iter()
            .map(WindkesselBc::log_total_resistance)
            .collect()
    }

    /// Windkessel values at a parameter location, preserving each outlet's
    /// resistance split and time constant.
    pub fn decode(&self, theta: &[f64]) -> Vec<WindkesselBc> {
        self.base_bcs
            .iter()
            .zip(theta)
            .map(|(bc, &t)| bc.with_log_total_resistance(t))
            .collect()
    }

    /// One full forward evaluation at a parameter location.
    pub fn simulate(&self, theta: &[f64]) -> Result<Trajectory> {
        let decoded = self.decode(theta);
        let model = self.model.with_windkessel_bcs(&decoded)?;
        let sim = simulate_model(&model, &self.config)?;
        if !sim.periodic {
            return Err(Error::SteadyNonConvergence {
                iterations: sim.cycles,
                residual: f64::NAN,
            });
        }
        Ok(sim.trajectory)
    }
}

impl ThetaModel for OutletResistanceModel {
    fn evaluate(&self, theta: &[f64]) -> Option<Vec<f64>> {
        if theta.len() != self.base_bcs.len() {
            return None;
        }
        let traj = self.simulate(theta).ok()?;
        let obs = extract_observations(&traj, &self.model).ok()?;
        Some(obs.to_vec())
    }
}

// --- Workspace bookkeeping -------------------------------------------------

const LOCK_FILE: &str = ".lock";
const MANIFEST_FILE: &str = "manifest.json";
const RUN1_POSTERIOR: &str = "run1_posterior.csv";
const RUN1_SUMMARY: &str = "run1_summary.json";
const HIFI_REQUEST: &str = "hifi_request.json";
const HIFI_RESPONSE: &str = "hifi_response.csv";
const OPTIMIZED_MODEL: &str = "optimized.json";
const RUN2_POSTERIOR: &str = "run2_posterior.csv";
const RUN2_SUMMARY: &str = "run2_summary.json";

const STAGE_AWAITING: &str = "awaiting-hifi";
const STAGE_COMPLETE: &str = "complete";

/// 64-bit FNV-1a content hash, recorded per artifact for the append-only
/// check.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(format!("fnv1a:{:016x}", fnv1a64(&fs::read(path)?)))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    /// Artifact file name -> content hash at the time it was written.
    artifacts: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
}

impl Manifest {
    fn path(workspace: &Path) -> PathBuf {
        workspace.join(MANIFEST_FILE)
    }

    fn read(workspace: &Path) -> Result<Self> {
        let p = Self::path(workspace);
        let text = fs::read_to_string(&p).map_err(|_| {
            Error::Workspace(format!(
                "workspace {} has no manifest; nothing to resume",
                workspace.display()
            ))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Workspace(format!("manifest is corrupt: {e}")))
    }

    fn write(&self, workspace: &Path) -> Result<()> {
        fs::write(Self::path(workspace), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn record(&mut self, workspace: &Path, name: &str) -> Result<()> {
        let hash = hash_file(&workspace.join(name))?;
        self.artifacts.insert(name.to_string(), hash);
        Ok(())
    }

    /// Append-only check: every recorded artifact must still exist with its
    /// recorded content.
    fn verify(&self, workspace: &Path) -> Result<()> {
        for (name, recorded) in &self.artifacts {
            let current = hash_file(&workspace.join(name)).map_err(|_| {
                Error::Workspace(format!("recorded artifact {name} is missing"))
            })?;
            if &current != recorded {
                return Err(Error::Workspace(format!(
                    "artifact {name} was modified after it was recorded ({recorded} -> {current}); the workspace is append-only"
                )));
            }
        }
        Ok(())
    }
}

/// Exclusive workspace lock; the file is removed when the guard drops.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(workspace: &Path) -> Result<Self> {
        let path = workspace.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(Self { path })
            }
            Err(_) => Err(Error::Workspace(format!(
                "workspace {} is locked by another pipeline instance (remove {} if stale)",
                workspace.display(),
                path.display()
            ))),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// --- Artifact writers --------------------------------------------------------

fn write_posterior_csv(path: &Path, result: &SmcResult) -> Result<()> {
    let set = &result.posterior;
    let dim = set.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|j| format!("theta_{j}")).collect();
    header.push("weight".into());
    header.push("log_likelihood".into());
    w.write_record(&header)?;
    let weights = set.normalized_weights()?;
    for i in 0..set.len() {
        let mut rec: Vec<String> = set.locations[i].iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", weights[i]));
        rec.push(format!("{}", set.log_likelihoods[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSummaryFile {
    seed: u64,
    particle_count: usize,
    gamma_s: f64,
    map: Vec<f64>,
    weighted_mean: Vec<f64>,
    weighted_variance: Vec<f64>,
    weighted_covariance: Vec<Vec<f64>>,
    ess_history: Vec<f64>,
    zeta_schedule: Vec<f64>,
    resampled: Vec<bool>,
    evaluation_count: usize,
    outlet_nodes: Vec<String>,
}

fn write_run_summary(
    path: &Path,
    result: &SmcResult,
    seed: u64,
    outlet_nodes: &[String],
) -> Result<()> {
    let set = &result.posterior;
    let dim = set.dim();
    let cov = set.weighted_covariance();
    let summary = RunSummaryFile {
        seed,
        particle_count: set.len(),
        gamma_s: set.gamma_s,
        map: result.map.clone(),
        weighted_mean: set.weighted_mean(),
        weighted_variance: (0..dim).map(|j| cov[(j, j)]).collect(),
        weighted_covariance: (0..dim)
            .map(|i| (0..dim).map(|j| cov[(i, j)]).collect())
            .collect(),
        ess_history: result.ess_history.clone(),
        zeta_schedule: result.zeta_schedule.clone(),
        resampled: result.resampled.clone(),
        evaluation_count: result.evaluation_count,
        outlet_nodes: outlet_nodes.to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Hand-off request: the decoded Windkessel values to evaluate externally,
/// plus everything the external solver needs to reproduce the setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HifiRequest {
    pub theta_map: Vec<f64>,
    pub windkessel: Vec<HifiOutlet>,
    pub inflow: HifiInflow,
    pub period: f64,
    /// Node names whose pressure and flow columns the response CSV must
    /// contain (same layout as every trajectory CSV).
    pub trajectory_nodes: Vec<String>,
    pub response_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HifiOutlet {
    pub node: String,
    pub proximal_resistance: f64,
    pub distal_resistance: f64,
    pub capacitance: f64,
    pub reference_pressure: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HifiInflow {
    pub node: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl HifiRequest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Workspace(format!("hand-off request is invalid: {e}")))
    }

    /// Re-encodes the parameter vector from the decoded Windkessel values.
    pub fn encode_theta(&self) -> Vec<f64> {
        self.windkessel
            .iter()
            .map(|o| (o.proximal_resistance + o.distal_resistance).ln())
            .collect()
    }
}

fn write_hifi_request(
    path: &Path,
    model: &LpnModel,
    theta_map: &[f64],
    decoded: &[WindkesselBc],
) -> Result<()> {
    let (times, values) = model.inflow_waveform();
    let request = HifiRequest {
        theta_map: theta_map.to_vec(),
        windkessel: model
            .windkessel_bcs()
            .iter()
            .zip(decoded)
            .map(|((node, _), bc)| HifiOutlet {
                node: node.clone(),
                proximal_resistance: bc.proximal_resistance,
                distal_resistance: bc.distal_resistance,
                capacitance: bc.capacitance,
                reference_pressure: bc.reference_pressure,
            })
            .collect(),
        inflow: HifiInflow {
            node: model.inflow_node().to_string(),
            times: times.to_vec(),
            values: values.to_vec(),
        },
        period: model.period(),
        trajectory_nodes: model.node_names().to_vec(),
        response_file: HIFI_RESPONSE.to_string(),
    };
    fs::write(path, serde_json::to_string_pretty(&request)?)?;
    Ok(())
}

// --- The workflow ------------------------------------------------------------

/// What a calibration invocation produced.
#[derive(Debug)]
pub enum CalibrationOutcome {
    /// Run 1 is done and the hand-off request is written; the external
    /// high-fidelity evaluation must fill in the response before resuming.
    AwaitingHandoff { request: PathBuf },
    Complete(Box<CalibrationReport>),
}

/// Results of a completed two-run calibration.
#[derive(Debug)]
pub struct CalibrationReport {
    pub run1_map: Vec<f64>,
    pub run1_mean: Vec<f64>,
    pub lm: LmReport,
    pub optimized_alpha: Vec<f64>,
    /// Training-condition errors of the optimized network against the
    /// high-fidelity response trajectory.
    pub training_errors: ErrorReport,
    pub run2: SmcResult,
    pub workspace: PathBuf,
}

/// Runs the two-run calibration workflow.
///
/// Fresh start: run 1 samples the case network, the point estimate is decoded
/// into a hand-off request, and (without a surrogate) the call returns
/// [`CalibrationOutcome::AwaitingHandoff`]. With `surrogate` set, that
/// network plays the external solver in-process and the workflow runs to
/// completion. With `resume`, the workspace must hold the response
/// trajectory; the workflow then fits the optimized network and performs
/// run 2.
pub fn run_calibration(
    case: &CalibrationCase,
    resume: bool,
    surrogate: Option<&Path>,
) -> Result<CalibrationOutcome> {
    fs::create_dir_all(&case.workspace)?;
    let _lock = LockGuard::acquire(&case.workspace)?;
    let inputs = case.load_inputs().map_err(|e| e.in_stage("case-setup"))?;
    let outlet_nodes: Vec<String> = inputs
        .model
        .windkessel_bcs()
        .into_iter()
        .map(|(n, _)| n)
        .collect();

    let mut manifest = if resume {
        let m = Manifest::read(&case.workspace)?;
        if m.stage == STAGE_COMPLETE {
            return Err(Error::Workspace(
                "workspace already holds a completed calibration".into(),
            ));
        }
        m.verify(&case.workspace)?;
        m
    } else {
        if Manifest::path(&case.workspace).exists() {
            return Err(Error::Workspace(
                "workspace already has a manifest; pass resume or use a fresh workspace".into(),
            ));
        }
        Manifest::default()
    };

    let evaluator = OutletResistanceModel::new(inputs.model.clone(), case.simulation.to_config());

    let theta_map = if resume {
        // Run 1 already happened; recover its point estimate from the
        // hand-off request.
        let request = HifiRequest::read(&case.workspace.join(HIFI_REQUEST))
            .map_err(|e| e.in_stage("resume"))?;
        request.theta_map
    } else {
        if let Some(seed) = inputs.synthesis_seed {
            manifest.seeds.insert("observation-synthesis".into(), seed);
        }
        manifest.seeds.insert("run1-smc".into(), case.smc.seed);
        manifest
            .seeds
            .insert("run2-smc".into(), case.smc.run2_seed());

        let run1 = run_smc(
            &evaluator,
            &inputs.prior,
            &inputs.noise,
            &case.smc.to_config(case.smc.seed),
        )
        .map_err(|e| e.in_stage("run1-smc"))?;
        write_posterior_csv(&case.workspace.join(RUN1_POSTERIOR), &run1)?;
        write_run_summary(
            &case.workspace.join(RUN1_SUMMARY),
            &run1,
            case.smc.seed,
            &outlet_nodes,
        )?;
        let decoded = evaluator.decode(&run1.map);
        write_hifi_request(
            &case.workspace.join(HIFI_REQUEST),
            &inputs.model,
            &run1.map,
            &decoded,
        )?;
        manifest.record(&case.workspace, RUN1_POSTERIOR)?;
        manifest.record(&case.workspace, RUN1_SUMMARY)?;
        manifest.record(&case.workspace, HIFI_REQUEST)?;
        manifest.stage = STAGE_AWAITING.into();
        manifest.write(&case.workspace)?;
        run1.map
    };

    let response_path = case.workspace.join(HIFI_RESPONSE);
    if !response_path.is_file() {
        match surrogate {
            Some(surrogate_path) => {
                evaluate_surrogate(surrogate_path, &inputs.model, &evaluator, &theta_map, &response_path)
                    .map_err(|e| e.in_stage("surrogate-hifi"))?;
            }
            None => {
                if resume {
                    return Err(Error::Workspace(format!(
                        "cannot resume: response trajectory {} is missing",
                        response_path.display()
                    ))
                    .in_stage("resume"));
                }
                return Ok(CalibrationOutcome::AwaitingHandoff {
                    request: case.workspace.join(HIFI_REQUEST),
                });
            }
        }
    }

    // Train the optimized network on the response trajectory.
    let response = Trajectory::read_csv(&response_path, None).map_err(|e| e.in_stage("training"))?;
    let trained_model = inputs.model.with_windkessel_bcs(&evaluator.decode(&theta_map))?;
    let (optimized, lm_report) = fit_elements(
        &trained_model,
        &response,
        &case.lm,
        &case.simulation.to_config(),
    )
    .map_err(|e| e.in_stage("training"))?;
    let optimized_path = case.workspace.join(OPTIMIZED_MODEL);
    write_optimized_model(&optimized_path, &optimized, &lm_report)?;

    // Training-condition error of the optimized network vs the response.
    let optimized_sim = simulate_model(&optimized, &case.simulation.to_config())
        .map_err(|e| e.in_stage("training"))?;
    let training_errors = error_metrics(&optimized_sim.trajectory, &response, &optimized)
        .map_err(|e| e.in_stage("training"))?;

    // Run 2: a fresh, independent sampler on the optimized network with the
    // case's original Windkessel baseline (the calibration target), not the
    // run-1 point estimate.
    let optimized_base = optimized.with_windkessel_bcs(
        &inputs
            .model
            .windkessel_bcs()
            .into_iter()
            .map(|(_, bc)| bc)
            .collect::<Vec<_>>(),
    )?;
    let run2_evaluator =
        OutletResistanceModel::new(optimized_base, case.simulation.to_config());
    let run2_seed = case.smc.run2_seed();
    let run2 = run_smc(
        &run2_evaluator,
        &inputs.prior,
        &inputs.noise,
        &case.smc.to_config(run2_seed),
    )
    .map_err(|e| e.in_stage("run2-smc"))?;
    write_posterior_csv(&case.workspace.join(RUN2_POSTERIOR), &run2)?;
    write_run_summary(
        &case.workspace.join(RUN2_SUMMARY),
        &run2,
        run2_seed,
        &outlet_nodes,
    )?;

    let mut manifest = Manifest::read(&case.workspace)?;
    manifest.seeds.insert("run2-smc".into(), run2_seed);
    manifest.record(&case.workspace, HIFI_RESPONSE)?;
    manifest.record(&case.workspace, OPTIMIZED_MODEL)?;
    manifest.record(&case.workspace, RUN2_POSTERIOR)?;
    manifest.record(&case.workspace, RUN2_SUMMARY)?;
    manifest.stage = STAGE_COMPLETE.into();
    manifest.write(&case.workspace)?;

    let run1_summary: RunSummaryFile = serde_json::from_str(&fs::read_to_string(
        case.workspace.join(RUN1_SUMMARY),
    )?)
    .map_err(|e| Error::Workspace(format!("run-1 summary is corrupt: {e}")))?;

    let optimized_alpha: Vec<f64> = optimized.parameter_vector().iter().cloned().collect();
    Ok(CalibrationOutcome::Complete(Box::new(CalibrationReport {
        run1_map: run1_summary.map,
        run1_mean: run1_summary.weighted_mean,
        lm: lm_report,
        optimized_alpha,
        training_errors,
        run2,
        workspace: case.workspace.clone(),
    })))
}

/// Plays the external high-fidelity solver with a designated network: apply
/// the requested Windkessel values, simulate to a periodic cycle, and write
/// the response trajectory.
fn evaluate_surrogate(
    surrogate_path: &Path,
    case_model: &LpnModel,
    evaluator: &OutletResistanceModel,
    theta_map: &[f64],
    response_path: &Path,
) -> Result<()> {
    let surrogate = LpnModel::from_json_file(surrogate_path)?;
    let case_outlets: Vec<String> = case_model
        .windkessel_bcs()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let surrogate_outlets: Vec<String> = surrogate
        .windkessel_bcs()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    if case_outlets != surrogate_outlets {
        return Err(Error::ModelDefinition(format!(
            "surrogate outlets {surrogate_outlets:?} do not match the case outlets {case_outlets:?}"
        )));
    }
    let decoded = evaluator.decode(theta_map);
    let at_map = surrogate.with_windkessel_bcs(&decoded)?;
    let sim = simulate_model(&at_map, &IntegratorConfig::default())?;
    sim.trajectory.write_csv(response_path)?;
    Ok(())
}

/// Fits every element parameter of the network to the response trajectory.
/// If the fitted network fails to simulate, the fit is repeated with the
/// stenosis coefficients frozen at their starting values.
pub fn fit_elements(
    model: &LpnModel,
    response: &Trajectory,
    settings: &LmSettings,
    sim_config: &IntegratorConfig,
) -> Result<(LpnModel, LmReport)> {
    let observations = ObservationSet::resampled(response, settings.n_resample, model.period())?;
    let alpha0: Vec<f64> = model.parameter_vector().iter().cloned().collect();
    let config = settings.to_config(alpha0.len());
    let report = lm_optimize(model, &alpha0, &observations, &config)?;
    let fitted = model.with_parameters(&report.alpha)?;
    match simulate_model(&fitted, sim_config) {
        Ok(_) => Ok((fitted, report)),
        Err(_) => {
            // Mirror the fallback used when a stenosis-optimized network
            // cannot be integrated: keep those coefficients at their
            // starting values and refit everything else.
            let mut frozen_config = config;
            frozen_config.frozen = model.stenosis_parameter_mask();
            let mut report = lm_optimize(model, &alpha0, &observations, &frozen_config)?;
            report.stenosis_refrozen = true;
            let fitted = model.with_parameters(&report.alpha)?;
            simulate_model(&fitted, sim_config)?;
            Ok((fitted, report))
        }
    }
}

/// Writes the optimized network with the fit diagnostics embedded under an
/// `lm_report` key.
fn write_optimized_model(path: &Path, model: &LpnModel, report: &LmReport) -> Result<()> {
    let mut value: serde_json::Value = serde_json::from_str(&model.to_json_string()?)?;
    value["lm_report"] = serde_json::to_value(report)?;
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

// --- Grid posterior ----------------------------------------------------------

/// Pointwise posterior over the coupled-parameter grid, normalized to sum 1.
#[derive(Debug, Clone, Serialize)]
pub struct GridPosterior {
    /// Cell centres per axis.
    pub centers: Vec<Vec<f64>>,
    /// Cell probability masses, row-major over the axes in order (the last
    /// axis varies fastest); they sum to 1.
    pub masses: Vec<f64>,
    /// Per-axis cell index of the highest-mass cell.
    pub argmax: Vec<usize>,
    /// Number of grid points where the model failed (density 0).
    pub failures: usize,
}

impl GridPosterior {
    /// Cell centre of the highest-mass cell.
    pub fn argmax_center(&self) -> Vec<f64> {
        self.argmax
            .iter()
            .zip(&self.centers)
            .map(|(&i, c)| c[i])
            .collect()
    }
}

/// Evaluates prior x likelihood at every cell centre of the coupled grid and
/// normalizes the result into cell masses. Failed model evaluations carry
/// zero mass and are counted.
pub fn grid_posterior<M: ThetaModel + ?Sized>(
    model: &M,
    prior: &Prior,
    noise: &NoiseModel,
    spec: &GridSpec,
) -> Result<GridPosterior> {
    spec.validate()?;
    let dim = spec.theta_dim();
    if prior.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "prior has {} marginals but the grid couples {dim} components",
            prior.dim()
        )));
    }
    let centers: Vec<Vec<f64>> = (0..spec.axes.len()).map(|a| spec.centers(a)).collect();
    let n_axes = spec.axes.len();
    let total = spec.cells.pow(n_axes as u32);

    let mut log_masses = Vec::with_capacity(total);
    let mut failures = 0usize;
    let mut index = vec![0usize; n_axes];
    for flat in 0..total {
        // Decode the row-major flat index (last axis fastest).
        let mut rem = flat;
        for a in (0..n_axes).rev() {
            index[a] = rem % spec.cells;
            rem /= spec.cells;
        }
        let mut theta = vec![0.0; dim];
        for (a, axis) in spec.axes.iter().enumerate() {
            for &c in &axis.components {
                theta[c] = centers[a][index[a]];
            }
        }
        let log_prior = prior.log_density(&theta);
        let log_lik = match model.evaluate(&theta) {
            Some(y) => noise.log_likelihood(&y),
            None => f64::NEG_INFINITY,
        };
        if log_lik == f64::NEG_INFINITY {
            failures += 1;
            eprintln!(
                "warning: model failed at grid point {theta:?}; assigning zero density"
            );
        }
        log_masses.push(log_prior + log_lik);
    }

    let m = log_masses
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::AllParticlesFailed);
    }
    let mut masses: Vec<f64> = log_masses.iter().map(|lm| (lm - m).exp()).collect();
    let total_mass: f64 = masses.iter().sum();
    for mass in &mut masses {
        *mass /= total_mass;
    }
    let best = masses
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut argmax = vec![0usize; n_axes];
    let mut rem = best;
    for a in (0..n_axes).rev() {
        argmax[a] = rem % spec.cells;
        rem /= spec.cells;
    }

    Ok(GridPosterior {
        centers,
        masses,
        argmax,
        failures,
    })
}

/// Writes the grid masses as CSV: one row per cell, axis centre columns then
/// the mass.
pub fn write_grid_csv(path: &Path, grid: &GridPosterior, spec: &GridSpec) -> Result<()> {
    let n_axes = spec.axes.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..n_axes).map(|a| format!("axis_{a}")).collect();
    header.push("mass".into());
    w.write_record(&header)?;
    let mut index = vec![0usize; n_axes];
    for (flat, mass) in grid.masses.iter().enumerate() {
        let mut rem = flat;
        for a in (0..n_axes).rev() {
            index[a] = rem % spec.cells;
            rem /= spec.cells;
        }
        let mut rec: Vec<String> = (0..n_axes)
            .map(|a| format!("{}", grid.centers[a][index[a]]))
            .collect();
        rec.push(format!("{mass}"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
