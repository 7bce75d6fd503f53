use std::fs;

use qutrit_bexd::campaign::{
    idle_gate, likelihood_at, load_records, run_campaign, validate_gate, validate_gate_from, Campaign, CampaignConfig,
    EpochRecord, Profile, Schedule, SigmaSchedule, ValidationGate, CONFIG_FILE, CONVERGENCE_TABLE,
    EPOCH_LOG, FINAL_ENSEMBLE_FILE, PARAMETER_TABLE, SNAPSHOT_FILE, TIMING_LOG,
};
use qutrit_bexd::error::Error;
use qutrit_bexd::inference::ParticleEnsemble;
use qutrit_bexd::lindblad::DensityMatrix;
use qutrit_bexd::optimizer::DEConfig;
use qutrit_bexd::params::SystemParams;
use qutrit_bexd::pulse::ControlPulse;
use qutrit_bexd::testbed::{Shots, TruthModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A few-second campaign that still crosses the σ ramp.
fn tiny(epochs: usize) -> CampaignConfig {
    let desk = CampaignConfig::profile(Profile::Desk);
    CampaignConfig {
        epochs,
        particles: 24,
        anneal: Some(SigmaSchedule {
            initial: 0.3,
            hold: 1,
            ramp: 2,
        }),
        de: DEConfig {
            population: Some(8),
            max_generations: 2,
            ..desk.de
        },
        seed: 5,
        snapshot_every: 2,
        ..desk
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn single_epoch_smoke() {
    let cfg = CampaignConfig {
        epochs: 1,
        particles: 4,
        ..tiny(1)
    };
    let res = run_campaign(&cfg, false).unwrap();
    assert_eq!(res.records.len(), 1);
    assert_eq!(res.timings.len(), 1);
    assert!(res.records[0].ess <= 4.0 + 1e-12);
    assert!((res.ensemble.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn outputs_are_written_and_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CampaignConfig {
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny(3)
    };
    let res = run_campaign(&cfg, false).unwrap();
    for f in [CONFIG_FILE, EPOCH_LOG, TIMING_LOG, SNAPSHOT_FILE, FINAL_ENSEMBLE_FILE, PARAMETER_TABLE, CONVERGENCE_TABLE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(load_records(dir.path()).unwrap(), res.records);
    for r in &res.records {
        let text = serde_json::to_string(r).unwrap();
        let back: EpochRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, r);
        assert!(cfg.bounds.with_segments(r.segments).contains(&r.pulse));
        assert_eq!(r.delta, [0, 1, 2, 3].map(|k| cfg.truth.mean.to_vector()[k] - r.mean[k]));
    }
    // Wall time lives only in the sidecar, so the epoch log is replayable.
    assert!(!fs::read_to_string(dir.path().join(EPOCH_LOG)).unwrap().contains("wall_time"));
}

#[test]
fn campaigns_are_replayable() {
    let a = run_campaign(&tiny(3), false).unwrap();
    let b = run_campaign(&tiny(3), false).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.ensemble, b.ensemble);
    let other = run_campaign(&CampaignConfig { seed: 6, ..tiny(3) }, false).unwrap();
    assert_ne!(a.records, other.records);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let whole = run_campaign(&tiny(5), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = CampaignConfig {
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny(3)
    };
    run_campaign(&first, false).unwrap();
    let rest = run_campaign(&CampaignConfig { epochs: 5, ..first.clone() }, true).unwrap();
    assert_eq!(rest.records, whole.records);
    assert_eq!(rest.ensemble, whole.ensemble);
    assert_eq!(load_records(dir.path()).unwrap(), whole.records);

    let changed = CampaignConfig { particles: 30, epochs: 6, ..first };
    assert!(matches!(run_campaign(&changed, true), Err(Error::InvalidParameter(_))));
}

#[test]
fn branch_continues_like_a_fresh_run() {
    let adaptive = Schedule::Adaptive { start: 3, every: 2 };
    let mut fixed = Campaign::new(tiny(2)).unwrap();
    while !fixed.is_finished() {
        fixed.step().unwrap();
    }
    let mut branched = fixed.branch(adaptive, 3).unwrap();
    branched.step().unwrap();
    assert_eq!(branched.records()[2].segments, 4);

    let mut fresh = Campaign::new(CampaignConfig { schedule: adaptive, ..tiny(3) }).unwrap();
    while !fresh.is_finished() {
        fresh.step().unwrap();
    }
    assert_eq!(branched.records(), fresh.records());
    assert_eq!(branched.ensemble(), fresh.ensemble());

    let early = Schedule::Adaptive { start: 3, every: 1 };
    assert!(fixed.branch(early, 3).is_err());
}

#[test]
fn sigma_schedule_holds_then_narrows() {
    let cfg = CampaignConfig::profile(Profile::Desk);
    let s = |e| likelihood_at(&cfg, e).gaussian_sigma;
    assert_eq!(s(0), 0.3);
    assert_eq!(s(49), 0.3);
    assert!(s(50) < 0.3 && s(50) > s(51));
    assert_eq!(s(80), cfg.likelihood.gaussian_sigma);
    assert_eq!(s(99), cfg.likelihood.gaussian_sigma);
    let flat = CampaignConfig { anneal: None, ..cfg.clone() };
    assert_eq!(likelihood_at(&flat, 0), flat.likelihood);
    let inverted = CampaignConfig {
        anneal: Some(SigmaSchedule { initial: 0.001, hold: 1, ramp: 1 }),
        ..cfg
    };
    assert!(inverted.validate().is_err());
}

#[test]
fn config_invariants_are_enforced() {
    assert!(CampaignConfig { epochs: 0, ..tiny(1) }.validate().is_err());
    assert!(CampaignConfig { particles: 1, ..tiny(1) }.validate().is_err());
    assert!(CampaignConfig { shots: Shots::Finite(0), ..tiny(1) }.validate().is_err());
    assert!(tiny(1).validate().is_ok());
}

fn placeholder_pulse() -> ControlPulse {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/swap02_placeholder.pulse");
    ControlPulse::load(std::path::Path::new(path)).unwrap()
}

#[test]
fn perfect_posterior_has_no_error() {
    let truth = TruthModel::point(SystemParams::qpu_reference());
    let gate = ValidationGate::swap02(Some(placeholder_pulse()));
    let s = validate_gate(&ParticleEnsemble::point(truth.mean), &truth, &gate, 1, &mut rng(1)).unwrap();
    assert_eq!(s.times.len(), gate.repetitions + 1);
    assert!(s.errors.iter().all(|e| *e == [0.0; 3]));
    assert_eq!(s.mean, [0.0; 3]);
    assert_eq!(s.std, [0.0; 3]);
}

#[test]
fn missing_pulse_is_reported() {
    let truth = TruthModel::point(SystemParams::qpu_reference());
    let e = ParticleEnsemble::point(truth.mean);
    let gate = ValidationGate::swap02(None);
    assert!(matches!(validate_gate(&e, &truth, &gate, 1, &mut rng(1)), Err(Error::MissingReferencePulse)));
}

#[test]
fn shifted_lifetime_matches_two_exponentials() {
    let theta = SystemParams::qpu_reference();
    let t1 = theta.t1.as_f64();
    let mut shifted = theta;
    shifted.t1 = (1.1 * t1).into();
    let truth = TruthModel::point(theta);
    let gate = idle_gate(4.0, 0.5, 100);
    let s = validate_gate_from(
        &ParticleEnsemble::point(shifted),
        &truth,
        &gate,
        1,
        &DensityMatrix::basis(1),
        &mut rng(2),
    )
    .unwrap();
    for (t, e) in s.times.iter().zip(&s.errors) {
        let d = (-t / t1).exp() - (-t / (1.1 * t1)).exp();
        assert!((e[1] - d).abs() <= 1e-8, "t = {t}: {} vs {d}", e[1]);
        assert!((e[0] + d).abs() <= 1e-8);
        assert!(e[2].abs() <= 1e-12);
    }
}
