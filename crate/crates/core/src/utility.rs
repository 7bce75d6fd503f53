//! Expected-information scores for candidate pulses.
//!
//! Sums over particles are accumulated with Kahan compensation in a canonical
//! order (sorted by weight and outcome probabilities), so the result does not
//! depend on how the ensemble is ordered.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::{model_probabilities, ParticleEnsemble, PriorSpec};
use crate::params::PARAM_COUNT;
use crate::pulse::ControlPulse;

#[derive(Clone, Copy, Debug, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityValue {
    /// Nats.
    pub value: f64,
    /// Predictive outcome distribution P̄(y).
    pub predictive: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityKind {
    #[default]
    MutualInformation,
    NegPosteriorVariance,
}

fn canonical_order(weights: &[f64], probs: &[[f64; 3]]) -> Vec<usize> {
    let key = |i: usize| {
        (
            weights[i].to_bits(),
            probs[i][0].to_bits(),
            probs[i][1].to_bits(),
            probs[i][2].to_bits(),
        )
    };
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_unstable_by_key(|&i| key(i));
    idx
}

/// Weighted outcome sums divided by the total weight accumulated in the same
/// order, so particles that all predict `y` give `P̄(y) = 1` exactly.
fn predictive_in_order(weights: &[f64], probs: &[[f64; 3]], order: &[usize]) -> [f64; 3] {
    let mut acc = [Kahan::default(); 3];
    let mut total = Kahan::default();
    for &i in order {
        total.add(weights[i]);
        for y in 0..3 {
            acc[y].add(weights[i] * probs[i][y]);
        }
    }
    acc.map(|k| k.sum / total.sum)
}

/// `P̄(y) = Σᵢ wᵢ P(y | θᵢ)`.
pub fn predictive_from_probs(weights: &[f64], probs: &[[f64; 3]]) -> [f64; 3] {
    predictive_in_order(weights, probs, &canonical_order(weights, probs))
}

pub fn predictive_distribution(ensemble: &ParticleEnsemble, pulse: &ControlPulse) -> Result<[f64; 3]> {
    let probs = model_probabilities(ensemble.particles(), pulse)?;
    Ok(predictive_from_probs(ensemble.weights(), &probs))
}

/// Single-shot categorical mutual information between outcome and parameters.
pub fn mutual_information_from_probs(weights: &[f64], probs: &[[f64; 3]]) -> UtilityValue {
    let order = canonical_order(weights, probs);
    let predictive = predictive_in_order(weights, probs, &order);
    let mut acc = Kahan::default();
    for &i in &order {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for y in 0..3 {
            let p = probs[i][y];
            if p > 0.0 && predictive[y] > 0.0 {
                acc.add(w * p * (p / predictive[y]).ln());
            }
        }
    }
    UtilityValue {
        value: acc.sum,
        predictive,
    }
}

pub fn mutual_information(ensemble: &ParticleEnsemble, pulse: &ControlPulse) -> Result<UtilityValue> {
    let probs = model_probabilities(ensemble.particles(), pulse)?;
    Ok(mutual_information_from_probs(ensemble.weights(), &probs))
}

/// Σₖ Var(θₖ) / widthₖ² under `weights`.
fn normalized_variance_trace(
    ensemble: &ParticleEnsemble,
    weights: &[f64],
    order: &[usize],
    widths: &[f64; PARAM_COUNT],
) -> f64 {
    let values: Vec<[f64; PARAM_COUNT]> =
        ensemble.particles().iter().map(|p| p.to_vector()).collect();
    let mut trace = 0.0;
    for k in 0..PARAM_COUNT {
        let mut m = Kahan::default();
        for &i in order {
            m.add(weights[i] * values[i][k]);
        }
        let mut v = Kahan::default();
        for &i in order {
            let d = values[i][k] - m.sum;
            v.add(weights[i] * d * d);
        }
        trace += v.sum / (widths[k] * widths[k]);
    }
    trace
}

/// Expected negative normalized posterior-variance trace after one
/// hypothetical single-shot outcome, from precomputed probabilities.
pub fn neg_posterior_variance_from_probs(
    ensemble: &ParticleEnsemble,
    probs: &[[f64; 3]],
    prior: &PriorSpec,
) -> f64 {
    let widths = prior.intervals().map(|r| r.width());
    let weights = ensemble.weights();
    let order = canonical_order(weights, probs);
    let predictive = predictive_in_order(weights, probs, &order);
    let mut total = 0.0;
    for y in 0..3 {
        if predictive[y] <= 0.0 {
            continue;
        }
        let post: Vec<f64> = weights
            .iter()
            .zip(probs)
            .map(|(w, p)| w * p[y] / predictive[y])
            .collect();
        total -= predictive[y] * normalized_variance_trace(ensemble, &post, &order, &widths);
    }
    total
}

pub fn neg_posterior_variance(
    ensemble: &ParticleEnsemble,
    pulse: &ControlPulse,
    prior: &PriorSpec,
) -> Result<f64> {
    let probs = model_probabilities(ensemble.particles(), pulse)?;
    Ok(neg_posterior_variance_from_probs(ensemble, &probs, prior))
}

/// Current normalized variance trace, the value of an uninformative pulse (negated).
pub fn normalized_variance(ensemble: &ParticleEnsemble, prior: &PriorSpec) -> f64 {
    let widths = prior.intervals().map(|r| r.width());
    let order: Vec<usize> = (0..ensemble.len()).collect();
    normalized_variance_trace(ensemble, ensemble.weights(), &order, &widths)
}

/// Score of `pulse` under the chosen utility.
pub fn evaluate(
    kind: UtilityKind,
    ensemble: &ParticleEnsemble,
    pulse: &ControlPulse,
    prior: &PriorSpec,
) -> Result<f64> {
    match kind {
        UtilityKind::MutualInformation => Ok(mutual_information(ensemble, pulse)?.value),
        UtilityKind::NegPosteriorVariance => neg_posterior_variance(ensemble, pulse, prior),
    }
}
