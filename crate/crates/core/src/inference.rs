//! Weighted-particle posterior and the sequential Bayes update.

use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::ground_state_outcomes;
use crate::params::{SystemParams, PARAM_COUNT};
use crate::pulse::ControlPulse;

/// Probability floor applied before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Liu-West shrinkage factor.
pub const LIU_WEST_SHRINKAGE: f64 = 0.98;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// Independent uniform priors; ω, χ in GHz, T1, T2 in µs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub omega: Interval,
    pub chi: Interval,
    pub t1: Interval,
    pub t2: Interval,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            omega: Interval::new(3.5, 4.5),
            chi: Interval::new(0.1, 0.2),
            t1: Interval::new(30.0, 60.0),
            t2: Interval::new(20.0, 40.0),
        }
    }
}

impl PriorSpec {
    pub fn intervals(&self) -> [Interval; PARAM_COUNT] {
        [self.omega, self.chi, self.t1, self.t2]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in crate::params::PARAM_NAMES.iter().zip(self.intervals()) {
            if !(r.lower.is_finite() && r.upper.is_finite() && r.lower < r.upper && r.lower > 0.0)
            {
                return Err(Error::InvalidParameter(format!(
                    "prior range for {name} must satisfy 0 < lower < upper, got [{}, {}]",
                    r.lower, r.upper
                )));
            }
        }
        Ok(())
    }

    /// True when every component lies inside its range.
    pub fn contains(&self, theta: &SystemParams) -> bool {
        self.intervals()
            .iter()
            .zip(theta.to_vector())
            .all(|(r, x)| r.contains(x))
    }

    /// Standard deviation of each uniform marginal.
    pub fn std(&self) -> [f64; PARAM_COUNT] {
        self.intervals().map(|r| r.width() / 12f64.sqrt())
    }
}

/// Outcome data from one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotRecord {
    Counts([u64; 3]),
    /// Infinite-shot limit: the outcome probabilities themselves.
    Exact([f64; 3]),
}

impl ShotRecord {
    pub fn total(&self) -> Option<u64> {
        match self {
            ShotRecord::Counts(c) => Some(c.iter().sum()),
            ShotRecord::Exact(_) => None,
        }
    }

    /// Observed outcome frequencies.
    pub fn frequencies(&self) -> [f64; 3] {
        match *self {
            ShotRecord::Counts(c) => {
                let n = c.iter().sum::<u64>().max(1) as f64;
                c.map(|k| k as f64 / n)
            }
            ShotRecord::Exact(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodMode {
    Multinomial,
    #[default]
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    pub mode: LikelihoodMode,
    /// Per-outcome standard deviation in probability units.
    pub gaussian_sigma: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            mode: LikelihoodMode::Gaussian,
            gaussian_sigma: 0.01,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == LikelihoodMode::Gaussian
            && !(self.gaussian_sigma.is_finite() && self.gaussian_sigma > 0.0)
        {
            return Err(Error::InvalidParameter(format!(
                "gaussian_sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        Ok(())
    }
}

/// Log-likelihood of `record` given model outcome probabilities.
///
/// Multinomial: `Σ nᵢ log Pᵢ` without the multinomial coefficient; an exact
/// record uses its probabilities as fractional counts. Gaussian:
/// `−½ Σ (P_obs,i − Pᵢ)² / σ²`.
pub fn log_likelihood_from_probs(
    model: &[f64; 3],
    record: &ShotRecord,
    cfg: &LikelihoodConfig,
) -> f64 {
    match cfg.mode {
        LikelihoodMode::Multinomial => {
            let n: [f64; 3] = match *record {
                ShotRecord::Counts(c) => c.map(|k| k as f64),
                ShotRecord::Exact(p) => p,
            };
            (0..3)
                .filter(|&i| n[i] > 0.0)
                .map(|i| n[i] * model[i].clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR).ln())
                .sum()
        }
        LikelihoodMode::Gaussian => {
            let obs = record.frequencies();
            let s2 = cfg.gaussian_sigma * cfg.gaussian_sigma;
            -0.5 * (0..3).map(|i| (obs[i] - model[i]).powi(2)).sum::<f64>() / s2
        }
    }
}

pub fn log_likelihood(
    theta: &SystemParams,
    pulse: &ControlPulse,
    record: &ShotRecord,
    cfg: &LikelihoodConfig,
) -> Result<f64> {
    let probs = ground_state_outcomes(theta, pulse)?;
    Ok(log_likelihood_from_probs(&probs, record, cfg))
}

/// Outcome probabilities of every particle for `pulse`, in particle order.
pub fn model_probabilities(
    particles: &[SystemParams],
    pulse: &ControlPulse,
) -> Result<Vec<[f64; 3]>> {
    particles
        .par_iter()
        .map(|theta| ground_state_outcomes(theta, pulse))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    particles: Vec<SystemParams>,
    weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<SystemParams>, weights: Vec<f64>) -> Result<Self> {
        let e = Self { particles, weights };
        e.check()?;
        Ok(e)
    }

    pub fn uniform(particles: Vec<SystemParams>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![1.0 / n as f64; n])
    }

    pub fn check(&self) -> Result<()> {
        if self.particles.is_empty() || self.particles.len() != self.weights.len() {
            return Err(Error::InvalidParameter(format!(
                "{} particles with {} weights",
                self.particles.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("negative or non-finite weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidParameter(format!("weights sum to {total}")));
        }
        if let Some(p) = self.particles.iter().find(|p| !p.is_physical()) {
            return Err(Error::InvalidParameter(format!("non-physical particle {p:?}")));
        }
        Ok(())
    }

    pub fn particles(&self) -> &[SystemParams] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// A single particle with weight one.
    pub fn point(theta: SystemParams) -> Self {
        Self {
            particles: vec![theta],
            weights: vec![1.0],
        }
    }

    pub fn mean(&self) -> [f64; PARAM_COUNT] {
        let mut m = [0.0; PARAM_COUNT];
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            for (k, x) in p.to_vector().iter().enumerate() {
                m[k] += w * x;
            }
        }
        m
    }

    /// Weighted covariance `Σ wᵢ (θᵢ − θ̂)(θᵢ − θ̂)ᵀ`.
    pub fn covariance(&self) -> Matrix4<f64> {
        let m = Vector4::from(self.mean());
        let mut c = Matrix4::zeros();
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            let d = Vector4::from(p.to_vector()) - m;
            c += d * d.transpose() * w;
        }
        c
    }

    pub fn std(&self) -> [f64; PARAM_COUNT] {
        let c = self.covariance();
        [0, 1, 2, 3].map(|k| c[(k, k)].max(0.0).sqrt())
    }
}

pub fn sample_prior<R: Rng + ?Sized>(
    spec: &PriorSpec,
    n: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 particles, got {n}")));
    }
    let particles = (0..n)
        .map(|_| {
            let v = spec
                .intervals()
                .map(|r| rng.random_range(r.lower..r.upper));
            SystemParams::from_vector(v)
        })
        .collect();
    ParticleEnsemble::uniform(particles)
}

/// Reweights by `exp(logLᵢ)` in log space with max subtraction.
pub fn bayes_update_log(
    ensemble: &ParticleEnsemble,
    log_likelihoods: &[f64],
) -> Result<ParticleEnsemble> {
    if log_likelihoods.len() != ensemble.len() {
        return Err(Error::InvalidParameter(format!(
            "{} likelihoods for {} particles",
            log_likelihoods.len(),
            ensemble.len()
        )));
    }
    if log_likelihoods.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::DegenerateUpdate);
    }
    let log_w: Vec<f64> = ensemble
        .weights
        .iter()
        .zip(log_likelihoods)
        .map(|(w, l)| w.ln() + l)
        .collect();
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::DegenerateUpdate);
    }
    let raw: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateUpdate);
    }
    Ok(ParticleEnsemble {
        particles: ensemble.particles.clone(),
        weights: raw.iter().map(|w| w / total).collect(),
    })
}

/// Update with precomputed per-particle outcome probabilities.
pub fn bayes_update_with_probs(
    ensemble: &ParticleEnsemble,
    probs: &[[f64; 3]],
    record: &ShotRecord,
    cfg: &LikelihoodConfig,
) -> Result<ParticleEnsemble> {
    let ll: Vec<f64> = probs
        .iter()
        .map(|p| log_likelihood_from_probs(p, record, cfg))
        .collect();
    bayes_update_log(ensemble, &ll)
}

pub fn bayes_update(
    ensemble: &ParticleEnsemble,
    pulse: &ControlPulse,
    record: &ShotRecord,
    cfg: &LikelihoodConfig,
) -> Result<ParticleEnsemble> {
    let probs = model_probabilities(&ensemble.particles, pulse)?;
    bayes_update_with_probs(ensemble, &probs, record, cfg)
}

/// `1 / Σ wᵢ²`.
pub fn effective_sample_size(ensemble: &ParticleEnsemble) -> f64 {
    1.0 / ensemble.weights.iter().map(|w| w * w).sum::<f64>()
}

/// True when the ESS has dropped below half the particle count.
pub fn needs_rejuvenation(ensemble: &ParticleEnsemble) -> bool {
    effective_sample_size(ensemble) < 0.5 * ensemble.len() as f64
}

/// Systematic resampling indices.
pub(crate) fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let start = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for k in 0..n {
        let u = start + k as f64 * step;
        while u > cumulative && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

/// Noise factor `L` with `L Lᵀ = C`, built on standardized coordinates.
pub(crate) fn kernel_factor(cov: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let std = Vector4::from_fn(|k, _| cov[(k, k)]);
    if std.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::SingularCovariance);
    }
    let std = std.map(f64::sqrt);
    let scale = Matrix4::from_diagonal(&std);
    if std.iter().all(|s| *s > 0.0) {
        let corr = Matrix4::from_fn(|i, j| cov[(i, j)] / (std[i] * std[j]));
        if let Some(ch) = corr.cholesky() {
            return Ok(scale * ch.l());
        }
    }
    Ok(scale)
}

/// Systematic resampling followed by the Liu-West shrinkage move
/// `θ' = aθ + (1 − a)θ̂ + ε`, `ε ~ N(0, (1 − a²) C)`. Non-physical proposals
/// are redrawn; weights come back uniform.
pub fn rejuvenate<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let a = LIU_WEST_SHRINKAGE;
    let mean = Vector4::from(ensemble.mean());
    let factor = kernel_factor(&ensemble.covariance())? * (1.0 - a * a).sqrt();
    let idx = systematic_indices(&ensemble.weights, rng);
    let mut particles = Vec::with_capacity(idx.len());
    for i in idx {
        let centre = Vector4::from(ensemble.particles[i].to_vector()) * a + mean * (1.0 - a);
        let mut moved = None;
        for _ in 0..100 {
            let z = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
            let candidate = SystemParams::from_vector((centre + factor * z).into());
            if candidate.is_physical() {
                moved = Some(candidate);
                break;
            }
        }
        // The shrunk centre is a convex combination of physical points.
        particles.push(moved.unwrap_or_else(|| SystemParams::from_vector(centre.into())));
    }
    ParticleEnsemble::uniform(particles)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStats {
    pub mean: [f64; PARAM_COUNT],
    pub std: [f64; PARAM_COUNT],
}

impl PosteriorStats {
    /// `δ(μ̂) = truth − mean` per parameter.
    pub fn error_in_mean(&self, truth: &SystemParams) -> [f64; PARAM_COUNT] {
        let t = truth.to_vector();
        [0, 1, 2, 3].map(|k| t[k] - self.mean[k])
    }
}

pub fn posterior_stats(ensemble: &ParticleEnsemble) -> PosteriorStats {
    PosteriorStats {
        mean: ensemble.mean(),
        std: ensemble.std(),
    }
}

/// Self-describing snapshot of an ensemble for restart and audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSnapshot {
    pub format: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Label of the random stream that continues from this point.
    pub rng_state: String,
    pub particles: Vec<SystemParams>,
    pub weights: Vec<f64>,
}

pub const SNAPSHOT_FORMAT: &str = "qutrit-bexd/ensemble/v1";

impl EnsembleSnapshot {
    pub fn new(ensemble: &ParticleEnsemble, epoch: usize, rng_state: String) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.into(),
            epoch,
            rng_state,
            particles: ensemble.particles.clone(),
            weights: ensemble.weights.clone(),
        }
    }

    pub fn ensemble(&self) -> Result<ParticleEnsemble> {
        ParticleEnsemble::new(self.particles.clone(), self.weights.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("unknown snapshot format `{}`", snap.format),
            });
        }
        snap.ensemble()?;
        Ok(snap)
    }
}
