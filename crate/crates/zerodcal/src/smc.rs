//! Sequential Monte Carlo with adaptive likelihood tempering.
//!
//! A population of particles drawn from the prior is pushed toward the
//! posterior through a sequence of tempered targets p(θ)·L(θ)^γ, with the
//! exponent schedule chosen adaptively from the effective sample size.
//! Stages reweight, resample (systematic) when the ESS falls below its
//! threshold, and rejuvenate every particle with random-walk Metropolis moves
//! so duplicates decorrelate. All randomness derives from one seed through
//! per-particle counter streams, so results are reproducible bit for bit no
//! matter how the particle loop is scheduled.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Forward model seen by the sampler: parameters in, observation-space
/// outputs out. `None` marks a failed evaluation (for instance a diverged
/// solver run); the particle keeps zero weight instead of aborting the run.
///
/// Evaluations may run concurrently, so implementations must be pure.
pub trait ThetaModel: Sync {
    fn evaluate(&self, theta: &[f64]) -> Option<Vec<f64>>;
}

impl<F> ThetaModel for F
where
    F: Fn(&[f64]) -> Option<Vec<f64>> + Sync,
{
    fn evaluate(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self(theta)
    }
}

/// Independent Gaussian observation noise with a diagonal covariance.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    y_obs: Vec<f64>,
    variances: Vec<f64>,
}

impl NoiseModel {
    pub fn new(y_obs: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if y_obs.len() != variances.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} observations but {} variances",
                y_obs.len(),
                variances.len()
            )));
        }
        if y_obs.is_empty() {
            return Err(Error::Observation("empty observation vector".into()));
        }
        if y_obs.iter().any(|y| !y.is_finite()) {
            return Err(Error::Observation("observations must be finite".into()));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidParameter(
                "observation variances must be positive and finite".into(),
            ));
        }
        Ok(Self { y_obs, variances })
    }

    /// Builds the noise from a constant signal-to-noise ratio,
    /// SNR = y_i² / σ_i², so louder observations carry more noise.
    pub fn from_snr(y_obs: Vec<f64>, snr: f64) -> Result<Self> {
        if !snr.is_finite() || snr <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "signal-to-noise ratio must be positive, got {snr}"
            )));
        }
        if y_obs.iter().any(|y| *y == 0.0) {
            return Err(Error::Observation(
                "zero-valued observations have no SNR-defined noise level".into(),
            ));
        }
        let variances = y_obs.iter().map(|y| y * y / snr).collect();
        Self::new(y_obs, variances)
    }

    pub fn y_obs(&self) -> &[f64] {
        &self.y_obs
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn len(&self) -> usize {
        self.y_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_obs.is_empty()
    }

    /// Gaussian log-density of a model output:
    /// −½ [n·ln 2π + Σ ln σ_i² + Σ (y_i − y_obs,i)²/σ_i²].
    ///
    /// Non-finite outputs and dimension mismatches are treated as failed
    /// model evaluations and return −∞ (zero likelihood).
    pub fn log_likelihood(&self, y: &[f64]) -> f64 {
        if y.len() != self.y_obs.len() || y.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let mut acc = self.y_obs.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..y.len() {
            acc += self.variances[i].ln();
            acc += (y[i] - self.y_obs[i]).powi(2) / self.variances[i];
        }
        -0.5 * acc
    }
}

/// One independent prior marginal.
#[derive(Debug, Clone, Copy)]
pub enum Marginal {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

/// Independent product prior over the parameter vector.
#[derive(Debug, Clone)]
pub struct Prior {
    marginals: Vec<Marginal>,
}

impl Prior {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidParameter(
                "prior needs at least one marginal".into(),
            ));
        }
        for m in &marginals {
            match *m {
                Marginal::Uniform { lo, hi } => {
                    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                        return Err(Error::InvalidParameter(format!(
                            "uniform marginal needs finite bounds lo < hi, got [{lo}, {hi}]"
                        )));
                    }
                }
                Marginal::Normal { mean, std } => {
                    if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "normal marginal needs a finite mean and positive std, got ({mean}, {std})"
                        )));
                    }
                }
            }
        }
        Ok(Self { marginals })
    }

    pub fn uniform(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            bounds
                .iter()
                .map(|&(lo, hi)| Marginal::Uniform { lo, hi })
                .collect(),
        )
    }

    pub fn normal(params: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            params
                .iter()
                .map(|&(mean, std)| Marginal::Normal { mean, std })
                .collect(),
        )
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals
            .iter()
            .map(|m| match *m {
                Marginal::Uniform { lo, hi } => rng.gen_range(lo..hi),
                Marginal::Normal { mean, std } => {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + std * z
                }
            })
            .collect()
    }

    /// Joint log-density; −∞ outside a uniform marginal's support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.marginals.len() {
            return f64::NEG_INFINITY;
        }
        let mut acc = 0.0;
        for (m, &t) in self.marginals.iter().zip(theta) {
            match *m {
                Marginal::Uniform { lo, hi } => {
                    if t < lo || t >= hi {
                        return f64::NEG_INFINITY;
                    }
                    acc -= (hi - lo).ln();
                }
                Marginal::Normal { mean, std } => {
                    acc -= 0.5 * (2.0 * std::f64::consts::PI * std * std).ln();
                    acc -= (t - mean).powi(2) / (2.0 * std * std);
                }
            }
        }
        acc
    }
}

/// Weighted particle population with its cached model evaluations and the
/// cumulative tempering exponent.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub locations: Vec<Vec<f64>>,
    /// Unnormalized, non-negative weights; zero marks a failed particle.
    pub weights: Vec<f64>,
    /// Full-data log-likelihood per particle; −∞ for failed evaluations.
    pub log_likelihoods: Vec<f64>,
    /// Cached model outputs; `None` for failed evaluations.
    pub outputs: Vec<Option<Vec<f64>>>,
    /// Cumulative tempering exponent γ_s ∈ [0, 1].
    pub gamma_s: f64,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations.first().map_or(0, Vec::len)
    }

    /// Weights rescaled to sum to 1. Errors when no particle carries weight.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize_weights(&self.weights)
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.weights)
    }

    /// Weight-averaged particle location; zeros if every weight is zero.
    pub fn weighted_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let total: f64 = self.weights.iter().sum();
        let mut mean = vec![0.0; d];
        if total <= 0.0 {
            return mean;
        }
        for (theta, w) in self.locations.iter().zip(&self.weights) {
            for j in 0..d {
                mean[j] += w / total * theta[j];
            }
        }
        mean
    }

    /// Weighted population covariance around the weighted mean.
    pub fn weighted_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mean = self.weighted_mean();
        let total: f64 = self.weights.iter().sum();
        let mut cov = DMatrix::zeros(d, d);
        if total <= 0.0 {
            return cov;
        }
        for (theta, w) in self.locations.iter().zip(&self.weights) {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += w / total * (theta[a] - mean[a]) * (theta[b] - mean[b]);
                }
            }
        }
        cov
    }

    /// Highest-weight particle; ties are broken by the tempered posterior
    /// log-density so a freshly resampled (uniform-weight) set still returns
    /// the most probable location.
    pub fn map_estimate(&self, prior: &Prior) -> Vec<f64> {
        let weights = match self.normalized_weights() {
            Ok(w) => w,
            Err(_) => vec![0.0; self.len()],
        };
        let w_max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.len() {
            if weights[i] < w_max - 1e-12 {
                continue;
            }
            let density = prior.log_density(&self.locations[i])
                + tempered_loglik(self.gamma_s, self.log_likelihoods[i]);
            if best.map_or(true, |(b, _)| density > b) {
                best = Some((density, i));
            }
        }
        self.locations[best.map_or(0, |(_, i)| i)].clone()
    }
}

fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParameter(
            "particle weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter(
            "at least one particle weight must be positive".into(),
        ));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// γ·log-likelihood with the conventions that a failed particle (−∞) stays
/// impossible under any positive exponent and irrelevant at γ = 0.
fn tempered_loglik(gamma: f64, log_lik: f64) -> f64 {
    if log_lik.is_finite() {
        gamma * log_lik
    } else if gamma > 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Effective sample size 1/Σ W_i² of the normalized weights; ranges from 1
/// (one particle carries everything) to the particle count (uniform).
pub fn ess(weights: &[f64]) -> Result<f64> {
    let w = normalize_weights(weights)?;
    Ok(1.0 / w.iter().map(|wi| wi * wi).sum::<f64>())
}

/// ESS of the set after a hypothetical tempering step ζ, in log space.
fn ess_after_step(log_likelihoods: &[f64], weights: &[f64], zeta: f64) -> f64 {
    let log_w: Vec<f64> = weights
        .iter()
        .zip(log_likelihoods)
        .map(|(w, ll)| {
            if *w <= 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() + tempered_loglik(zeta, *ll)
            }
        })
        .collect();
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for lw in &log_w {
        let u = (lw - m).exp();
        s1 += u;
        s2 += u * u;
    }
    s1 * s1 / s2
}

/// Absolute bisection tolerance on the tempering step ζ.
const ZETA_TOL: f64 = 1e-6;
/// Relative ESS slack treating near-equal values as equal, so a uniform
/// reweighting at ESS ≈ k never trips an ESS_min = k threshold.
const ESS_SLACK: f64 = 1e-9;

/// Chooses the tempering step ζ so the post-reweight effective sample size
/// lands on `ess_min`, by bisection; when even the full remaining budget
/// keeps the ESS at or above the target, the full budget is returned, so the
/// cumulative exponent never overshoots 1.
pub fn select_temper_step(
    log_likelihoods: &[f64],
    weights: &[f64],
    ess_min: f64,
    remaining: f64,
) -> Result<f64> {
    if log_likelihoods.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} log-likelihoods but {} weights",
            log_likelihoods.len(),
            weights.len()
        )));
    }
    if !(remaining > 0.0 && remaining <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "remaining tempering budget must lie in (0, 1], got {remaining}"
        )));
    }
    if ess_min <= 0.0 {
        return Err(Error::InvalidParameter(
            "ESS target must be positive".into(),
        ));
    }
    normalize_weights(weights)?;

    let slack = ESS_SLACK * weights.len() as f64;
    if ess_after_step(log_likelihoods, weights, remaining) >= ess_min - slack {
        return Ok(remaining);
    }
    let mut lo = 0.0;
    let mut hi = remaining;
    while hi - lo > ZETA_TOL {
        let mid = 0.5 * (lo + hi);
        if ess_after_step(log_likelihoods, weights, mid) >= ess_min {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Scales every weight by likelihood^ζ (computed in log space with
/// max-subtraction, so the largest weight is always 1) and advances the
/// cumulative tempering exponent.
pub fn reweight(set: &mut ParticleSet, zeta: f64) {
    let log_w: Vec<f64> = set
        .weights
        .iter()
        .zip(&set.log_likelihoods)
        .map(|(w, ll)| {
            if *w <= 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() + tempered_loglik(zeta, *ll)
            }
        })
        .collect();
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (w, lw) in set.weights.iter_mut().zip(&log_w) {
        *w = if m == f64::NEG_INFINITY {
            0.0
        } else {
            (lw - m).exp()
        };
    }
    set.gamma_s += zeta;
}

/// Systematic resampling: one uniform draw stratified into k offspring slots,
/// each mapped through the inverse weight CDF. Offspring replace the set with
/// uniform weight 1; cached outputs and log-likelihoods follow their
/// ancestors. The targeted distribution is unchanged in expectation.
pub fn systematic_resample(set: &mut ParticleSet, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = set.len();
    let w = set.normalized_weights()?;
    let u: f64 = rng.gen();

    let mut ancestors = Vec::with_capacity(k);
    let mut cum = w[0];
    let mut i = 0;
    for j in 0..k {
        let target = (j as f64 + u) / k as f64;
        while cum <= target && i < k - 1 {
            i += 1;
            cum += w[i];
        }
        ancestors.push(i);
    }

    set.locations = ancestors.iter().map(|&a| set.locations[a].clone()).collect();
    set.log_likelihoods = ancestors.iter().map(|&a| set.log_likelihoods[a]).collect();
    set.outputs = ancestors.iter().map(|&a| set.outputs[a].clone()).collect();
    set.weights = vec![1.0; k];
    Ok(())
}

/// Counts of what a rejuvenation pass did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoveStats {
    pub accepted: usize,
    pub proposals: usize,
    /// Model evaluations spent; proposals outside the prior support are
    /// rejected without evaluating the model.
    pub evaluations: usize,
}

/// Moves every particle through `steps` random-walk Metropolis updates
/// targeting p(θ)·likelihood^γ_s at the set's current exponent. The proposal
/// is Gaussian with covariance scale² × the weighted empirical covariance of
/// the entering set. Weights are untouched; rejected proposals leave the
/// particle in place. Each particle consumes its own counter-derived random
/// stream, so the result is independent of scheduling.
pub fn rejuvenate<M: ThetaModel + ?Sized>(
    set: &mut ParticleSet,
    model: &M,
    noise: &NoiseModel,
    prior: &Prior,
    steps: usize,
    proposal_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MoveStats> {
    if !proposal_scale.is_finite() || proposal_scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "proposal scale must be positive, got {proposal_scale}"
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot rejuvenate an empty particle set".into(),
        ));
    }
    if steps == 0 {
        return Ok(MoveStats {
            accepted: 0,
            proposals: 0,
            evaluations: 0,
        });
    }

    let d = set.dim();
    let cov = set.weighted_covariance() * (proposal_scale * proposal_scale);
    // Fall back to a per-coordinate proposal when the covariance is not
    // positive definite (e.g. a fully collapsed population).
    let root = Cholesky::new(cov.clone()).map_or_else(
        || DMatrix::from_diagonal(&cov.diagonal().map(|v| v.max(0.0).sqrt())),
        |c| c.l(),
    );
    let gamma = set.gamma_s;
    let base = rng.next_u64();

    let results: Vec<(Vec<f64>, f64, Option<Vec<f64>>, MoveStats)> = (0..set.len())
        .into_par_iter()
        .map(|p| {
            let mut stream = ChaCha8Rng::seed_from_u64(base);
            stream.set_stream(p as u64);
            let mut theta = set.locations[p].clone();
            let mut log_lik = set.log_likelihoods[p];
            let mut output = set.outputs[p].clone();
            let mut log_prior = prior.log_density(&theta);
            let mut stats = MoveStats {
                accepted: 0,
                proposals: 0,
                evaluations: 0,
            };
            let mut z = DVector::zeros(d);
            for _ in 0..steps {
                stats.proposals += 1;
                for zi in z.iter_mut() {
                    *zi = stream.sample(StandardNormal);
                }
                let u: f64 = stream.gen();
                let step = &root * &z;
                let proposal: Vec<f64> =
                    theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                let log_prior_new = prior.log_density(&proposal);
                if log_prior_new == f64::NEG_INFINITY {
                    continue;
                }
                stats.evaluations += 1;
                let output_new = model.evaluate(&proposal);
                let log_lik_new = output_new
                    .as_deref()
                    .map_or(f64::NEG_INFINITY, |y| noise.log_likelihood(y));
                let log_accept = log_prior_new + tempered_loglik(gamma, log_lik_new)
                    - (log_prior + tempered_loglik(gamma, log_lik));
                if u.ln() < log_accept {
                    theta = proposal;
                    log_lik = log_lik_new;
                    output = output_new;
                    log_prior = log_prior_new;
                    stats.accepted += 1;
                }
            }
            (theta, log_lik, output, stats)
        })
        .collect();

    let mut total = MoveStats {
        accepted: 0,
        proposals: 0,
        evaluations: 0,
    };
    for (p, (theta, log_lik, output, stats)) in results.into_iter().enumerate() {
        set.locations[p] = theta;
        set.log_likelihoods[p] = log_lik;
        set.outputs[p] = output;
        total.accepted += stats.accepted;
        total.proposals += stats.proposals;
        total.evaluations += stats.evaluations;
    }
    Ok(total)
}

/// Sampler configuration. `ess_min` is an absolute particle count.
#[derive(Debug, Clone)]
pub struct SmcConfig {
    pub particle_count: usize,
    pub ess_min: f64,
    pub rejuvenation_steps: usize,
    pub seed: u64,
    /// Proposal standard deviation as a fraction of the population spread.
    pub proposal_scale: f64,
    /// Stage cap guarding against a stalled tempering schedule.
    pub max_stages: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particle_count: 10_000,
            ess_min: 5_000.0,
            rejuvenation_steps: 2,
            seed: 0,
            proposal_scale: 0.5,
            max_stages: 1_000,
        }
    }
}

/// Everything a finished run reports: the weighted posterior particles, the
/// maximum-a-posteriori location, and the per-stage diagnostics.
#[derive(Debug, Clone)]
pub struct SmcResult {
    pub posterior: ParticleSet,
    pub map: Vec<f64>,
    /// Effective sample size after each stage's reweighting.
    pub ess_history: Vec<f64>,
    /// Tempering step taken at each stage; sums to 1.
    pub zeta_schedule: Vec<f64>,
    /// Whether each stage resampled (ESS fell below the threshold).
    pub resampled: Vec<bool>,
    /// Total forward-model evaluations, including rejected proposals.
    pub evaluation_count: usize,
}

/// Runs the full tempered sampler: draw from the prior, then alternate
/// adaptive reweighting, threshold-triggered systematic resampling, and
/// Metropolis rejuvenation until the tempering exponent reaches exactly 1.
/// Returns the final weighted particle population and the MAP estimate.
pub fn run_smc<M: ThetaModel + ?Sized>(
    model: &M,
    prior: &Prior,
    noise: &NoiseModel,
    config: &SmcConfig,
) -> Result<SmcResult> {
    let k = config.particle_count;
    if k == 0 {
        return Err(Error::InvalidParameter(
            "particle count must be positive".into(),
        ));
    }
    if !(config.ess_min > 0.0 && config.ess_min <= k as f64) {
        return Err(Error::InvalidParameter(format!(
            "resampling threshold must lie in (0, {k}], got {}",
            config.ess_min
        )));
    }
    if !config.proposal_scale.is_finite() || config.proposal_scale <= 0.0 {
        return Err(Error::InvalidParameter(
            "proposal scale must be positive".into(),
        ));
    }
    if config.max_stages == 0 {
        return Err(Error::InvalidParameter(
            "at least one tempering stage is required".into(),
        ));
    }

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let init_base = master.next_u64();

    // Initialization: prior draws with unit weights, evaluated once.
    let particles: Vec<(Vec<f64>, Option<Vec<f64>>, f64)> = (0..k)
        .into_par_iter()
        .map(|p| {
            let mut stream = ChaCha8Rng::seed_from_u64(init_base);
            stream.set_stream(p as u64);
            let theta = prior.sample(&mut stream);
            let output = model.evaluate(&theta);
            let log_lik = output
                .as_deref()
                .map_or(f64::NEG_INFINITY, |y| noise.log_likelihood(y));
            (theta, output, log_lik)
        })
        .collect();
    let mut evaluation_count = k;

    let mut set = ParticleSet {
        locations: Vec::with_capacity(k),
        weights: Vec::with_capacity(k),
        log_likelihoods: Vec::with_capacity(k),
        outputs: Vec::with_capacity(k),
        gamma_s: 0.0,
    };
    for (theta, output, log_lik) in particles {
        set.weights
            .push(if log_lik == f64::NEG_INFINITY { 0.0 } else { 1.0 });
        set.locations.push(theta);
        set.log_likelihoods.push(log_lik);
        set.outputs.push(output);
    }
    if set.weights.iter().all(|w| *w == 0.0) {
        return Err(Error::AllParticlesFailed);
    }

    let mut ess_history = Vec::new();
    let mut zeta_schedule = Vec::new();
    let mut resampled = Vec::new();
    let slack = ESS_SLACK * k as f64;
    let mut finished = false;

    for _ in 0..config.max_stages {
        let remaining = 1.0 - set.gamma_s;
        let zeta = select_temper_step(&set.log_likelihoods, &set.weights, config.ess_min, remaining)?;
        reweight(&mut set, zeta);
        if (set.gamma_s - 1.0).abs() <= 1e-12 {
            set.gamma_s = 1.0;
        }
        zeta_schedule.push(zeta);

        let current_ess = set.ess().map_err(|_| Error::AllParticlesFailed)?;
        ess_history.push(current_ess);
        let fire = current_ess < config.ess_min - slack;
        resampled.push(fire);
        if fire {
            systematic_resample(&mut set, &mut master)?;
        }

        if config.rejuvenation_steps > 0 {
            let stats = rejuvenate(
                &mut set,
                model,
                noise,
                prior,
                config.rejuvenation_steps,
                config.proposal_scale,
                &mut master,
            )?;
            evaluation_count += stats.evaluations;
        }

        if set.gamma_s >= 1.0 {
            finished = true;
            break;
        }
    }
    if !finished {
        return Err(Error::TemperingStalled(config.max_stages));
    }

    let map = set.map_estimate(prior);
    Ok(SmcResult {
        posterior: set,
        map,
        ess_history,
        zeta_schedule,
        resampled,
        evaluation_count,
    })
}
