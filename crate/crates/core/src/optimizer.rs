//! Differential evolution (DE/rand/1/bin) over the bounded pulse space.
//!
//! All random draws of a generation are taken from one seeded stream before
//! the trial vectors are scored in parallel, so results do not depend on the
//! number of worker threads.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Interval;
use crate::pulse::{ControlPulse, PulseSegment};

/// Box for pulses with a fixed number of segments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    /// p and q, MHz.
    pub amplitude: Interval,
    /// Segment duration, µs.
    pub duration: Interval,
    /// ω_d, GHz.
    pub drive_freq: Interval,
    pub segments: usize,
}

impl ControlBounds {
    pub fn new(segments: usize) -> Self {
        Self {
            amplitude: Interval::new(-12.0, 12.0),
            duration: Interval::new(1.0, 30.0),
            drive_freq: Interval::new(3.5, 4.5),
            segments,
        }
    }

    pub fn with_segments(self, segments: usize) -> Self {
        Self { segments, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: &Interval| r.lower.is_finite() && r.upper.is_finite() && r.lower <= r.upper;
        if !(ok(&self.amplitude) && ok(&self.duration) && ok(&self.drive_freq)) {
            return Err(Error::InvalidParameter("control bounds are not ordered".into()));
        }
        if self.duration.lower <= 0.0 {
            return Err(Error::InvalidParameter("segment durations must be positive".into()));
        }
        if self.segments == 0 {
            return Err(Error::InvalidParameter("at least one segment is required".into()));
        }
        Ok(())
    }

    /// Decision-vector length `3·N_p + 1`.
    pub fn dimension(&self) -> usize {
        3 * self.segments + 1
    }

    pub fn lower(&self) -> Vec<f64> {
        self.corner(|r| r.lower)
    }

    pub fn upper(&self) -> Vec<f64> {
        self.corner(|r| r.upper)
    }

    fn corner(&self, f: impl Fn(&Interval) -> f64) -> Vec<f64> {
        let mut v = vec![f(&self.drive_freq)];
        for _ in 0..self.segments {
            v.extend([f(&self.amplitude), f(&self.amplitude), f(&self.duration)]);
        }
        v
    }

    pub fn contains(&self, pulse: &ControlPulse) -> bool {
        pulse.segments.len() == self.segments
            && self.drive_freq.contains(pulse.drive_freq)
            && pulse.segments.iter().all(|s| {
                self.amplitude.contains(s.p)
                    && self.amplitude.contains(s.q)
                    && self.duration.contains(s.dt)
            })
    }

    pub fn decode(&self, v: &[f64]) -> ControlPulse {
        assert_eq!(v.len(), self.dimension());
        ControlPulse {
            drive_freq: v[0],
            segments: v[1..]
                .chunks_exact(3)
                .map(|c| PulseSegment::new(c[0], c[1], c[2]))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DEConfig {
    /// `None` selects `max(15, 5·dimension)`.
    pub population: Option<usize>,
    pub differential_weight: f64,
    pub crossover_rate: f64,
    pub max_generations: usize,
    /// Stop when the population's fitness spread falls below `tol·|mean|`; 0 disables.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            population: None,
            differential_weight: 0.7,
            crossover_rate: 0.9,
            max_generations: 60,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl DEConfig {
    pub fn population_for(&self, dimension: usize) -> usize {
        self.population.unwrap_or_else(|| (5 * dimension).max(15))
    }

    pub fn validate(&self) -> Result<()> {
        if self.population.is_some_and(|p| p < 4) {
            return Err(Error::InvalidParameter("DE population must be at least 4".into()));
        }
        if !(self.differential_weight > 0.0 && self.differential_weight <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "differential weight {} outside (0, 2]",
                self.differential_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::InvalidParameter(format!(
                "crossover rate {} outside [0, 1]",
                self.crossover_rate
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidParameter("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DEResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best value seen after each generation (index 0 is the initial population).
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

fn score<F>(objective: &F, candidates: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let values: Vec<f64> = candidates
        .par_iter()
        .map(|c| objective(c))
        .collect::<Result<_>>()?;
    // NaN ranks below everything so selection stays well defined.
    Ok(values
        .into_iter()
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Maximizes `objective` over the box `[lower, upper]`. Candidates in `warm`
/// replace the first members of the initial population (clipped to the box).
pub fn differential_evolution<F>(
    objective: F,
    lower: &[f64],
    upper: &[f64],
    cfg: &DEConfig,
    warm: &[Vec<f64>],
) -> Result<DEResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let dim = lower.len();
    if dim == 0 || upper.len() != dim || lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::InvalidParameter("malformed search box".into()));
    }
    let np = cfg.population_for(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clip = |v: &mut Vec<f64>| {
        for k in 0..dim {
            v[k] = v[k].clamp(lower[k], upper[k]);
        }
    };
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| {
            (0..dim)
                .map(|k| {
                    if lower[k] < upper[k] {
                        rng.random_range(lower[k]..upper[k])
                    } else {
                        lower[k]
                    }
                })
                .collect()
        })
        .collect();
    for (slot, w) in pop.iter_mut().zip(warm) {
        if w.len() == dim {
            *slot = w.clone();
            clip(slot);
        }
    }
    let mut fitness = score(&objective, &pop)?;
    let mut evaluations = np;
    let mut best_idx = argmax(&fitness);
    let mut best = pop[best_idx].clone();
    let mut best_value = fitness[best_idx];
    let mut trace = vec![best_value];

    for _ in 0..cfg.max_generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let picks = loop {
                    let s = sample(&mut rng, np, 3);
                    let (a, b, c) = (s.index(0), s.index(1), s.index(2));
                    if a != i && b != i && c != i {
                        break (a, b, c);
                    }
                };
                let j_rand = rng.random_range(0..dim);
                let mut trial = pop[i].clone();
                for k in 0..dim {
                    if k == j_rand || rng.random::<f64>() < cfg.crossover_rate {
                        trial[k] = pop[picks.0][k]
                            + cfg.differential_weight * (pop[picks.1][k] - pop[picks.2][k]);
                    }
                }
                clip(&mut trial);
                trial
            })
            .collect();
        let trial_fitness = score(&objective, &trials)?;
        evaluations += np;
        for (i, (t, f)) in trials.into_iter().zip(trial_fitness).enumerate() {
            if f >= fitness[i] {
                pop[i] = t;
                fitness[i] = f;
            }
        }
        best_idx = argmax(&fitness);
        if fitness[best_idx] > best_value {
            best_value = fitness[best_idx];
            best = pop[best_idx].clone();
        }
        trace.push(best_value);
        if cfg.tolerance > 0.0 && fitness.iter().all(|f| f.is_finite()) {
            let mean = fitness.iter().sum::<f64>() / np as f64;
            let var = fitness.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / np as f64;
            if var.sqrt() <= cfg.tolerance * mean.abs() {
                break;
            }
        }
    }
    Ok(DEResult {
        best,
        best_value,
        trace,
        evaluations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseOptimum {
    pub pulse: ControlPulse,
    pub value: f64,
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Maximizes a pulse objective inside `bounds`.
pub fn optimize<F>(
    objective: F,
    bounds: &ControlBounds,
    cfg: &DEConfig,
    warm: &[ControlPulse],
) -> Result<PulseOptimum>
where
    F: Fn(&ControlPulse) -> Result<f64> + Sync,
{
    bounds.validate()?;
    let warm: Vec<Vec<f64>> = warm
        .iter()
        .filter(|p| p.segments.len() == bounds.segments)
        .map(|p| p.to_vector())
        .collect();
    let res = differential_evolution(
        |v| objective(&bounds.decode(v)),
        &bounds.lower(),
        &bounds.upper(),
        cfg,
        &warm,
    )?;
    Ok(PulseOptimum {
        pulse: bounds.decode(&res.best),
        value: res.best_value,
        trace: res.trace,
        evaluations: res.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_population_rule() {
        let cfg = DEConfig::default();
        assert_eq!(cfg.population_for(2), 15);
        assert_eq!(cfg.population_for(10), 50);
        assert_eq!(ControlBounds::new(3).dimension(), 10);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            DEConfig { population: Some(3), ..DEConfig::default() },
            DEConfig { differential_weight: 0.0, ..DEConfig::default() },
            DEConfig { differential_weight: 2.5, ..DEConfig::default() },
            DEConfig { crossover_rate: 1.5, ..DEConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn decode_round_trip() {
        let b = ControlBounds::new(2);
        let v = vec![4.0, 1.0, -2.0, 3.0, 5.0, 6.0, 7.0];
        let p = b.decode(&v);
        assert_eq!(p.to_vector(), v);
        assert!(b.contains(&p));
        assert!(!b.contains(&b.decode(&[4.0, 13.0, 0.0, 3.0, 5.0, 6.0, 7.0])));
    }

    #[test]
    fn constant_objective_has_flat_trace() {
        let cfg = DEConfig { max_generations: 5, tolerance: 0.0, ..DEConfig::default() };
        let res = differential_evolution(|_| Ok(1.0), &[0.0; 3], &[1.0; 3], &cfg, &[]).unwrap();
        assert!(res.trace.iter().all(|&v| v == 1.0));
        assert!(res.best.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn objective_errors_propagate() {
        let cfg = DEConfig { max_generations: 2, ..DEConfig::default() };
        let res = differential_evolution(|_| Err(Error::DegenerateUpdate), &[0.0], &[1.0], &cfg, &[]);
        assert!(matches!(res, Err(Error::DegenerateUpdate)));
    }
}
