//! Tempered resample-move update used by the campaign.
//!
//! A sharp likelihood is folded in as a sequence of powers `L^δ₁, L^δ₂, …`
//! summing to one, each the largest that keeps the ESS at N/2. Between
//! powers the ensemble is resampled and moved by random-walk
//! Metropolis-Hastings against prior × every earlier likelihood × the current
//! tempered one. Without that test a moved particle only answers to the
//! newest record and the ensemble drifts away from the older ones.
//!
//! The same path handles a Gaussian likelihood whose width shrinks between
//! updates: narrowing σ raises every past likelihood to the power
//! `(σ_old/σ_new)²`, which is folded in together with the new record.

use nalgebra::Vector4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    bayes_update_log, effective_sample_size, kernel_factor, log_likelihood,
    log_likelihood_from_probs, model_probabilities, needs_rejuvenation, systematic_indices,
    LikelihoodConfig, LikelihoodMode, ParticleEnsemble, PriorSpec, ShotRecord,
};
use crate::params::SystemParams;
use crate::pulse::ControlPulse;

/// Upper limit on tempering stages per update; the last stage absorbs
/// whatever likelihood power remains.
pub const MAX_TEMPERING_STAGES: usize = 200;

/// One played experiment and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pulse: ControlPulse,
    pub record: ShotRecord,
}

/// `Σₖ log L(recordₖ | θ)` accumulated in history order.
pub fn history_log_likelihood(
    theta: &SystemParams,
    history: &[Observation],
    cfg: &LikelihoodConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for obs in history {
        acc += log_likelihood(theta, &obs.pulse, &obs.record, cfg)?;
    }
    Ok(acc)
}

/// Log target split as `past + φ·current`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitTarget {
    pub past: f64,
    pub current: f64,
}

impl SplitTarget {
    const OUTSIDE: Self = Self {
        past: f64::NEG_INFINITY,
        current: 0.0,
    };

    fn at(&self, phi: f64) -> f64 {
        self.past + phi * self.current
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: usize,
    pub accepted: usize,
}

impl MoveStats {
    fn absorb(&mut self, other: MoveStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
    }
}

/// Settings of the Metropolis-Hastings rejuvenation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveConfig {
    /// Upper limit on passes over the ensemble.
    pub max_sweeps: usize,
    /// Stop once this fraction of particles has moved at least once.
    pub target_moved: f64,
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 10,
            target_moved: 0.9,
        }
    }
}

/// Initial random-walk scale relative to the ensemble covariance, the usual
/// `2.38/√d` for four parameters.
const INITIAL_SCALE: f64 = 1.19;

/// Systematic resampling followed by Metropolis-Hastings passes with
/// Gaussian random-walk proposals shaped by the ensemble covariance. The
/// step is halved after a pass accepting under 15% and grown after one
/// above 40%. `values` holds the split target of every current particle and
/// `evaluate` computes it for a proposal; the returned ensemble is uniform.
pub fn resample_move<R, F>(
    ensemble: &ParticleEnsemble,
    values: &[SplitTarget],
    evaluate: F,
    phi: f64,
    cfg: &MoveConfig,
    rng: &mut R,
) -> Result<(ParticleEnsemble, Vec<SplitTarget>, MoveStats)>
where
    R: Rng + ?Sized,
    F: Fn(&SystemParams) -> Result<SplitTarget> + Sync,
{
    let factor = kernel_factor(&ensemble.covariance())?;
    let idx = systematic_indices(ensemble.weights(), rng);
    let mut particles: Vec<SystemParams> = idx.iter().map(|&i| ensemble.particles()[i]).collect();
    let mut targets: Vec<SplitTarget> = idx.iter().map(|&i| values[i]).collect();
    let mut moved = vec![false; particles.len()];
    let mut stats = MoveStats::default();
    let mut scale = INITIAL_SCALE;

    for _ in 0..cfg.max_sweeps {
        let mut proposals = Vec::with_capacity(particles.len());
        let mut log_u = Vec::with_capacity(particles.len());
        for p in &particles {
            let z = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
            let y = Vector4::from(p.to_vector()) + factor * z * scale;
            proposals.push(SystemParams::from_vector(y.into()));
            log_u.push(rng.random::<f64>().ln());
        }
        let proposed: Vec<SplitTarget> = proposals
            .par_iter()
            .map(|theta| {
                if theta.is_physical() {
                    evaluate(theta)
                } else {
                    Ok(SplitTarget::OUTSIDE)
                }
            })
            .collect::<Result<_>>()?;
        let mut accepted = 0;
        for k in 0..particles.len() {
            if log_u[k] < proposed[k].at(phi) - targets[k].at(phi) {
                particles[k] = proposals[k];
                targets[k] = proposed[k];
                moved[k] = true;
                accepted += 1;
            }
        }
        stats.proposed += particles.len();
        stats.accepted += accepted;
        let rate = accepted as f64 / particles.len() as f64;
        if rate < 0.15 {
            scale *= 0.5;
        } else if rate > 0.4 {
            scale = (scale * 1.5).min(INITIAL_SCALE);
        }
        let fraction = moved.iter().filter(|m| **m).count() as f64 / moved.len() as f64;
        if fraction >= cfg.target_moved {
            break;
        }
    }
    Ok((ParticleEnsemble::uniform(particles)?, targets, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperedUpdate {
    pub ensemble: ParticleEnsemble,
    /// Full log-likelihood of every record so far, including the new one,
    /// per particle of `ensemble`.
    pub history_ll: Vec<f64>,
    pub stages: usize,
    /// ESS after the last stage, before any rejuvenation.
    pub ess: f64,
    pub rejuvenated: bool,
    pub moves: MoveStats,
}

/// Power that turns a log-likelihood under `previous` into one under `next`.
/// Only a Gaussian width change rescales; otherwise it is 1.
pub fn likelihood_rescale(previous: &LikelihoodConfig, next: &LikelihoodConfig) -> Result<f64> {
    if previous.mode != next.mode {
        return Err(Error::InvalidParameter("likelihood mode cannot change mid-campaign".into()));
    }
    Ok(match next.mode {
        LikelihoodMode::Gaussian => (previous.gaussian_sigma / next.gaussian_sigma).powi(2),
        LikelihoodMode::Multinomial => 1.0,
    })
}

/// Folds `record` into `ensemble`. `history_ll[i]` is particle `i`'s log
/// likelihood of `history` under `previous`; the result targets every record
/// under `cfg`. With equal configurations and an ESS that stays above N/2
/// this reduces to a single [`bayes_update_log`].
#[allow(clippy::too_many_arguments)]
pub fn tempered_update<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    history_ll: &[f64],
    history: &[Observation],
    previous: &LikelihoodConfig,
    pulse: &ControlPulse,
    record: &ShotRecord,
    prior: &PriorSpec,
    cfg: &LikelihoodConfig,
    moves_cfg: &MoveConfig,
    rng: &mut R,
) -> Result<TemperedUpdate> {
    let r = likelihood_rescale(previous, cfg)?;
    let evaluate = |theta: &SystemParams| -> Result<SplitTarget> {
        if !prior.contains(theta) {
            return Ok(SplitTarget::OUTSIDE);
        }
        let past = history_log_likelihood(theta, history, cfg)? / r;
        Ok(SplitTarget {
            past,
            current: (r - 1.0) * past + log_likelihood(theta, pulse, record, cfg)?,
        })
    };
    let threshold = 0.5 * ensemble.len() as f64;
    let mut current = ensemble.clone();
    let mut past = history_ll.to_vec();
    let mut moves = MoveStats::default();
    let mut rejuvenated = false;
    let mut phi = 0.0;
    let mut stages = 0;

    let mut lls: Vec<f64> = current_log_likelihoods(&current, pulse, record, cfg)?
        .iter()
        .zip(&past)
        .map(|(l, p)| l + (r - 1.0) * p)
        .collect();
    if needs_rejuvenation(&current) {
        let values = split(&past, &lls);
        let (e, v, s) = resample_move(&current, &values, evaluate, phi, moves_cfg, rng)?;
        (current, past, lls) = unsplit(e, v);
        moves.absorb(s);
        rejuvenated = true;
    }

    loop {
        stages += 1;
        let remaining = 1.0 - phi;
        let delta = if stages == MAX_TEMPERING_STAGES {
            remaining
        } else {
            tempering_step(current.weights(), &lls, remaining, threshold)
        };
        let scaled: Vec<f64> = lls.iter().map(|l| l * delta).collect();
        let posterior = bayes_update_log(&current, &scaled)?;
        let ess = effective_sample_size(&posterior);
        phi = if delta >= remaining { 1.0 } else { phi + delta };
        let done = phi == 1.0;
        if done && !needs_rejuvenation(&posterior) {
            let history_ll = past.iter().zip(&lls).map(|(p, l)| p + l).collect();
            return Ok(TemperedUpdate {
                ensemble: posterior,
                history_ll,
                stages,
                ess,
                rejuvenated,
                moves,
            });
        }
        let values = split(&past, &lls);
        let (e, v, s) = resample_move(&posterior, &values, evaluate, phi, moves_cfg, rng)?;
        (current, past, lls) = unsplit(e, v);
        moves.absorb(s);
        rejuvenated = true;
        if done {
            let history_ll = past.iter().zip(&lls).map(|(p, l)| p + l).collect();
            return Ok(TemperedUpdate {
                ensemble: current,
                history_ll,
                stages,
                ess,
                rejuvenated,
                moves,
            });
        }
    }
}

fn current_log_likelihoods(
    ensemble: &ParticleEnsemble,
    pulse: &ControlPulse,
    record: &ShotRecord,
    cfg: &LikelihoodConfig,
) -> Result<Vec<f64>> {
    Ok(model_probabilities(ensemble.particles(), pulse)?
        .iter()
        .map(|p| log_likelihood_from_probs(p, record, cfg))
        .collect())
}

fn split(past: &[f64], current: &[f64]) -> Vec<SplitTarget> {
    past.iter()
        .zip(current)
        .map(|(&past, &current)| SplitTarget { past, current })
        .collect()
}

fn unsplit(e: ParticleEnsemble, v: Vec<SplitTarget>) -> (ParticleEnsemble, Vec<f64>, Vec<f64>) {
    let past = v.iter().map(|t| t.past).collect();
    let current = v.iter().map(|t| t.current).collect();
    (e, past, current)
}

fn tempered_ess(log_w: &[f64], ll: &[f64], delta: f64) -> f64 {
    let top = log_w
        .iter()
        .zip(ll)
        .map(|(w, l)| w + delta * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for (w, l) in log_w.iter().zip(ll) {
        let x = (w + delta * l - top).exp();
        s1 += x;
        s2 += x * x;
    }
    s1 * s1 / s2
}

/// Largest power in `(0, remaining]` whose reweighting keeps the ESS at or
/// above `threshold`.
fn tempering_step(weights: &[f64], ll: &[f64], remaining: f64, threshold: f64) -> f64 {
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    if tempered_ess(&log_w, ll, remaining) >= threshold {
        return remaining;
    }
    let (mut lo, mut hi) = (0.0, remaining);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tempered_ess(&log_w, ll, mid) >= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > 0.0 {
        lo
    } else {
        hi
    }
}
