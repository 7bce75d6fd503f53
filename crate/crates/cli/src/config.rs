//! TOML configuration. Every section is optional and overrides the selected
//! profile; every physical quantity carries its unit in the key name.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use qutrit_bexd::campaign::{CampaignConfig, Profile, Schedule, SigmaSchedule};
use qutrit_bexd::inference::{Interval, LikelihoodMode};
use qutrit_bexd::params::SystemParams;
use qutrit_bexd::testbed::{Shots, TruthMode};
use qutrit_bexd::utility::UtilityKind;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// `paper` or `desk`; the command-line flag wins.
    pub profile: Option<Profile>,
    #[serde(default)]
    pub campaign: CampaignSection,
    /// Mean of the synthetic truth and the parameters used by `simulate`.
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub truth: TruthSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub likelihood: LikelihoodSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub smc: SmcSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub identifiability: IdentifiabilitySection,
    #[serde(default)]
    pub validation: ValidationSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    pub epochs: Option<usize>,
    pub particles: Option<usize>,
    pub seed: Option<u64>,
    /// A positive integer or `"inf"`.
    pub shots: Option<Shots>,
    pub schedule: Option<Schedule>,
    pub utility: Option<UtilityKind>,
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub omega_ghz: Option<f64>,
    pub chi_mhz: Option<f64>,
    pub t1_us: Option<f64>,
    pub t2_us: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub mode: Option<TruthMode>,
    pub omega_var_ghz2: Option<f64>,
    pub chi_var_mhz2: Option<f64>,
    pub t1_var_us2: Option<f64>,
    pub t2_var_us2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub omega_ghz: Option<[f64; 2]>,
    pub chi_mhz: Option<[f64; 2]>,
    pub t1_us: Option<[f64; 2]>,
    pub t2_us: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodSection {
    pub mode: Option<LikelihoodMode>,
    /// Final Gaussian width, probability units.
    pub sigma: Option<f64>,
    /// Set to false to use the final width from the first epoch.
    pub anneal: Option<bool>,
    pub initial_sigma: Option<f64>,
    pub hold_epochs: Option<usize>,
    pub ramp_epochs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub population: Option<usize>,
    pub max_generations: Option<usize>,
    pub differential_weight: Option<f64>,
    pub crossover_rate: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub amplitude_mhz: Option<[f64; 2]>,
    pub segment_us: Option<[f64; 2]>,
    pub drive_ghz: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    pub max_sweeps: Option<usize>,
    pub target_moved: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub pulse: Option<PathBuf>,
    /// Basis state the evolution starts from.
    pub initial_level: Option<usize>,
    /// Largest spacing of the output time grid.
    pub step_us: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifiabilitySection {
    pub pulse: Option<PathBuf>,
    /// Defaults to 20 equally spaced times over the pulse.
    pub probe_times_us: Option<Vec<f64>>,
    /// Measurement basis rotation; rows of `[re, im]` pairs. Identity by default.
    pub basis_unitary: Option<[[[f64; 2]; 3]; 3]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub pulse: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub repetitions: Option<usize>,
    /// Truth draws averaged for a Gaussian truth.
    pub truth_samples: Option<usize>,
}

fn interval(v: [f64; 2], scale: f64) -> Interval {
    Interval::new(v[0] * scale, v[1] * scale)
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Truth mean: the reference QPU with any `[system]` overrides.
    pub fn system_params(&self) -> SystemParams {
        let r = SystemParams::qpu_reference();
        let s = &self.system;
        SystemParams::new(
            s.omega_ghz.unwrap_or(r.omega),
            s.chi_mhz.map(|x| x * 1e-3).unwrap_or(r.chi),
            s.t1_us.unwrap_or(r.t1.as_f64()),
            s.t2_us.unwrap_or(r.t2.as_f64()),
        )
    }

    /// Profile defaults with every section of the file applied.
    pub fn campaign_config(&self, profile: Profile) -> CampaignConfig {
        let mut cfg = CampaignConfig::profile(profile);
        let c = &self.campaign;
        cfg.epochs = c.epochs.unwrap_or(cfg.epochs);
        cfg.particles = c.particles.unwrap_or(cfg.particles);
        cfg.seed = c.seed.unwrap_or(cfg.seed);
        cfg.shots = c.shots.unwrap_or(cfg.shots);
        cfg.schedule = c.schedule.unwrap_or(cfg.schedule);
        cfg.utility = c.utility.unwrap_or(cfg.utility);
        cfg.snapshot_every = c.snapshot_every.unwrap_or(cfg.snapshot_every);

        cfg.truth.mean = self.system_params();
        let t = &self.truth;
        cfg.truth.mode = t.mode.unwrap_or(cfg.truth.mode);
        let v = &mut cfg.truth.variances;
        v[0] = t.omega_var_ghz2.unwrap_or(v[0]);
        v[1] = t.chi_var_mhz2.map(|x| x * 1e-6).unwrap_or(v[1]);
        v[2] = t.t1_var_us2.unwrap_or(v[2]);
        v[3] = t.t2_var_us2.unwrap_or(v[3]);

        let p = &self.prior;
        let prior = &mut cfg.prior;
        prior.omega = p.omega_ghz.map(|x| interval(x, 1.0)).unwrap_or(prior.omega);
        prior.chi = p.chi_mhz.map(|x| interval(x, 1e-3)).unwrap_or(prior.chi);
        prior.t1 = p.t1_us.map(|x| interval(x, 1.0)).unwrap_or(prior.t1);
        prior.t2 = p.t2_us.map(|x| interval(x, 1.0)).unwrap_or(prior.t2);

        let l = &self.likelihood;
        cfg.likelihood.mode = l.mode.unwrap_or(cfg.likelihood.mode);
        cfg.likelihood.gaussian_sigma = l.sigma.unwrap_or(cfg.likelihood.gaussian_sigma);
        let default_anneal = cfg.anneal.unwrap_or(SigmaSchedule {
            initial: 0.3,
            hold: 0,
            ramp: 0,
        });
        let anneal = l.anneal.unwrap_or(cfg.anneal.is_some() && cfg.likelihood.mode == LikelihoodMode::Gaussian);
        cfg.anneal = anneal.then(|| SigmaSchedule {
            initial: l.initial_sigma.unwrap_or(default_anneal.initial),
            hold: l.hold_epochs.unwrap_or(default_anneal.hold),
            ramp: l.ramp_epochs.unwrap_or(default_anneal.ramp),
        });

        let o = &self.optimizer;
        let de = &mut cfg.de;
        de.population = o.population.or(de.population);
        de.max_generations = o.max_generations.unwrap_or(de.max_generations);
        de.differential_weight = o.differential_weight.unwrap_or(de.differential_weight);
        de.crossover_rate = o.crossover_rate.unwrap_or(de.crossover_rate);
        de.tolerance = o.tolerance.unwrap_or(de.tolerance);

        let b = &self.bounds;
        let bounds = &mut cfg.bounds;
        bounds.amplitude = b.amplitude_mhz.map(|x| interval(x, 1.0)).unwrap_or(bounds.amplitude);
        bounds.duration = b.segment_us.map(|x| interval(x, 1.0)).unwrap_or(bounds.duration);
        bounds.drive_freq = b.drive_ghz.map(|x| interval(x, 1.0)).unwrap_or(bounds.drive_freq);

        cfg.moves.max_sweeps = self.smc.max_sweeps.unwrap_or(cfg.moves.max_sweeps);
        cfg.moves.target_moved = self.smc.target_moved.unwrap_or(cfg.moves.target_moved);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_profile() {
        let cfg = ConfigFile::parse("").unwrap().campaign_config(Profile::Desk);
        assert_eq!(cfg, CampaignConfig::profile(Profile::Desk));
    }

    #[test]
    fn units_are_converted() {
        let text = r#"
            [system]
            chi_mhz = 150.0
            [prior]
            chi_mhz = [120.0, 180.0]
            [truth]
            chi_var_mhz2 = 2.0
        "#;
        let cfg = ConfigFile::parse(text).unwrap().campaign_config(Profile::Paper);
        assert!((cfg.truth.mean.chi - 0.15).abs() < 1e-15);
        assert!((cfg.prior.chi.lower - 0.12).abs() < 1e-15);
        assert!((cfg.truth.variances[1] - 2e-6).abs() < 1e-21);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ConfigFile::parse("[campaign]\nepoch = 3\n").unwrap_err();
        assert!(err.contains("epoch"), "{err}");
        assert!(ConfigFile::parse("[system]\nomega = 4.0\n").is_err());
    }

    #[test]
    fn schedules_and_shots_parse() {
        let text = r#"
            [campaign]
            shots = 1000
            schedule = { kind = "adaptive", start = 3, every = 100 }
            [likelihood]
            anneal = false
        "#;
        let cfg = ConfigFile::parse(text).unwrap().campaign_config(Profile::Desk);
        assert_eq!(cfg.shots, Shots::Finite(1000));
        assert_eq!(cfg.schedule, Schedule::adaptive());
        assert_eq!(cfg.anneal, None);
        let inf = ConfigFile::parse("[campaign]\nshots = \"inf\"\n").unwrap();
        assert_eq!(inf.campaign.shots, Some(Shots::Infinite));
    }
}
