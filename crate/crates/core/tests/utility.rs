mod common;

use common::{random_params, random_pulse, rng};
use proptest::prelude::*;
use qutrit_bexd::inference::{model_probabilities, ParticleEnsemble, PriorSpec};
use qutrit_bexd::lindblad::ground_state_outcomes;
use qutrit_bexd::params::SystemParams;
use qutrit_bexd::pulse::{ControlPulse, PulseSegment};
use qutrit_bexd::utility::{
    mutual_information, mutual_information_from_probs, neg_posterior_variance,
    normalized_variance, predictive_distribution,
};
use rand::seq::SliceRandom;
use rand::Rng;

const LOG3: f64 = 1.0986122886681098;

fn ensemble(seed: u64, n: usize, closed: bool) -> ParticleEnsemble {
    let mut r = rng(seed);
    let particles = (0..n)
        .map(|_| {
            let p = random_params(&mut r);
            if closed {
                SystemParams::closed(p.omega, p.chi)
            } else {
                p
            }
        })
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ParticleEnsemble::new(particles, raw.iter().map(|w| w / total).collect()).unwrap()
}

/// Pulse near the band centre so most particles respond differently.
fn lively_pulse(seed: u64) -> ControlPulse {
    let mut p = random_pulse(&mut rng(seed), 3);
    p.drive_freq = 3.9 + 0.2 * rng(seed ^ 77).random::<f64>();
    p
}

#[test]
fn zero_pulse_carries_nothing() {
    let e = ensemble(1, 40, false);
    let idle = ControlPulse::idle(4.0, 25.0);
    let u = mutual_information(&e, &idle).unwrap();
    assert_eq!(u.value, 0.0);
    assert_eq!(u.predictive, [1.0, 0.0, 0.0]);
    assert_eq!(predictive_distribution(&e, &idle).unwrap(), [1.0, 0.0, 0.0]);
}

#[test]
fn two_deterministic_particles_give_log_two() {
    let u = mutual_information_from_probs(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    assert!((u.value - 2f64.ln()).abs() <= 1e-12);
}

#[test]
fn single_particle_predictive_is_its_model() {
    let theta = SystemParams::qpu_reference();
    let pulse = lively_pulse(3);
    let e = ParticleEnsemble::point(theta);
    assert_eq!(
        predictive_distribution(&e, &pulse).unwrap(),
        ground_state_outcomes(&theta, &pulse).unwrap()
    );
    assert_eq!(mutual_information(&e, &pulse).unwrap().value, 0.0);
}

#[test]
fn posterior_variance_utility_examples() {
    let spec = PriorSpec::default();
    let e = ensemble(4, 60, false);
    let idle = ControlPulse::idle(4.0, 10.0);
    let base = neg_posterior_variance(&e, &idle, &spec).unwrap();
    assert_eq!(base, -normalized_variance(&e, &spec));
    for seed in 0..10 {
        let v = neg_posterior_variance(&e, &lively_pulse(seed), &spec).unwrap();
        assert!(v >= base - 1e-12, "seed {seed}: {v} < {base}");
    }
    let single = ParticleEnsemble::point(SystemParams::qpu_reference());
    assert_eq!(neg_posterior_variance(&single, &lively_pulse(1), &spec).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn information_is_bounded(seed in any::<u64>(), n in 2usize..40) {
        let e = ensemble(seed, n, false);
        let u = mutual_information(&e, &lively_pulse(seed ^ 9)).unwrap();
        prop_assert!(u.value >= -1e-12);
        prop_assert!(u.value <= LOG3 + 1e-12);
        prop_assert!((u.predictive.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn predictive_matches_direct_sum(seed in any::<u64>(), n in 1usize..30) {
        let e = ensemble(seed, n.max(2), false);
        let pulse = lively_pulse(seed ^ 5);
        let probs = model_probabilities(e.particles(), &pulse).unwrap();
        let mut direct = [0.0; 3];
        for (w, p) in e.weights().iter().zip(&probs) {
            for y in 0..3 {
                direct[y] += w * p[y];
            }
        }
        let pred = predictive_distribution(&e, &pulse).unwrap();
        for y in 0..3 {
            prop_assert!((pred[y] - direct[y]).abs() <= 1e-14);
        }
    }

    #[test]
    fn particle_order_is_irrelevant(seed in any::<u64>(), n in 2usize..40) {
        let e = ensemble(seed, n, false);
        let pulse = lively_pulse(seed ^ 6);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(seed ^ 7));
        let shuffled = ParticleEnsemble::new(
            idx.iter().map(|&i| e.particles()[i]).collect(),
            idx.iter().map(|&i| e.weights()[i]).collect(),
        ).unwrap();
        let a = mutual_information(&e, &pulse).unwrap();
        let b = mutual_information(&shuffled, &pulse).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.predictive.map(f64::to_bits), b.predictive.map(f64::to_bits));
    }

    #[test]
    fn idle_tail_changes_nothing_without_loss(seed in any::<u64>(), tail in 1.0f64..30.0) {
        let e = ensemble(seed, 16, true);
        let pulse = lively_pulse(seed ^ 8);
        let mut longer = pulse.clone();
        longer.segments.push(PulseSegment::idle(tail));
        let a = mutual_information(&e, &pulse).unwrap().value;
        let b = mutual_information(&e, &longer).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }
}
