//! The design loop: pick the most informative pulse, play it on the testbed,
//! fold the outcome into the posterior, repeat.
//!
//! Every random draw comes from a ChaCha stream selected by `(epoch, purpose)`
//! under the campaign seed, so a run resumed from a snapshot replays exactly
//! the epochs the uninterrupted run would have produced.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    posterior_stats, sample_prior, EnsembleSnapshot, LikelihoodConfig, LikelihoodMode, ParticleEnsemble,
    PriorSpec, ShotRecord,
};
use crate::sequential::{history_log_likelihood, tempered_update, MoveConfig, Observation};
use crate::lindblad::{segment_propagator, CMat3, DensityMatrix, RVec9};
use crate::optimizer::{optimize, ControlBounds, DEConfig};
use crate::params::{SystemParams, PARAM_COUNT};
use crate::pulse::{ControlPulse, PulseSegment};
use crate::testbed::{run_experiment, Shots, TruthMode, TruthModel};
use crate::utility::{self, UtilityKind};

pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const FINAL_ENSEMBLE_FILE: &str = "final_ensemble.json";
pub const CONFIG_FILE: &str = "campaign.json";
pub const PARTIAL_FILE: &str = "partial.json";
pub const PARAMETER_TABLE: &str = "parameters.csv";
pub const CONVERGENCE_TABLE: &str = "convergence.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Fixed { segments: usize },
    /// `start + ⌊epoch / every⌋` segments.
    Adaptive { start: usize, every: usize },
}

impl Schedule {
    pub fn adaptive() -> Self {
        Schedule::Adaptive {
            start: 3,
            every: 100,
        }
    }

    pub fn segments_at(&self, epoch: usize) -> usize {
        match *self {
            Schedule::Fixed { segments } => segments,
            Schedule::Adaptive { start, every } => start + epoch / every,
        }
    }

    fn label(&self) -> String {
        match self {
            Schedule::Fixed { segments } => segments.to_string(),
            Schedule::Adaptive { .. } => "adaptive".into(),
        }
    }
}

/// Gaussian likelihood width that starts wide and narrows to the configured
/// one. A wide likelihood keeps the ensemble from locking onto one of the
/// many near-fits of a few sharp records; the narrow one then resolves the
/// lifetimes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSchedule {
    /// Width used up to `hold`, in probability units.
    pub initial: f64,
    pub hold: usize,
    /// Epochs over which σ falls geometrically to the likelihood's own σ.
    pub ramp: usize,
}

impl SigmaSchedule {
    pub fn sigma_at(&self, epoch: usize, last: f64) -> f64 {
        if epoch < self.hold {
            return self.initial;
        }
        let k = epoch - self.hold;
        if k >= self.ramp {
            return last;
        }
        let frac = (k + 1) as f64 / (self.ramp + 1) as f64;
        self.initial * (last / self.initial).powf(frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub epochs: usize,
    pub particles: usize,
    pub schedule: Schedule,
    pub shots: Shots,
    pub truth: TruthModel,
    pub prior: PriorSpec,
    /// Final likelihood; with `anneal` set its σ is reached only after the ramp.
    pub likelihood: LikelihoodConfig,
    pub anneal: Option<SigmaSchedule>,
    /// The seed inside is replaced by a per-epoch stream.
    pub de: DEConfig,
    /// Segment count inside is replaced by the schedule.
    pub bounds: ControlBounds,
    pub utility: UtilityKind,
    pub moves: MoveConfig,
    pub seed: u64,
    /// Snapshot cadence in epochs; 0 keeps only the final snapshot.
    pub snapshot_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl CampaignConfig {
    /// `Paper`: 2000 particles, 500 epochs, full DE budget.
    /// `Desk`: 500 particles, 100 epochs, 16 members for 8 generations.
    pub fn profile(profile: Profile) -> Self {
        let base = Self {
            epochs: 500,
            particles: 2000,
            schedule: Schedule::Fixed { segments: 3 },
            shots: Shots::Infinite,
            truth: TruthModel::reference(TruthMode::Point),
            prior: PriorSpec::default(),
            likelihood: LikelihoodConfig::default(),
            anneal: Some(SigmaSchedule {
                initial: 0.3,
                hold: 200,
                ramp: 150,
            }),
            de: DEConfig::default(),
            bounds: ControlBounds::new(3),
            utility: UtilityKind::MutualInformation,
            moves: MoveConfig::default(),
            seed: 0,
            snapshot_every: 25,
            out_dir: None,
        };
        match profile {
            Profile::Paper => base,
            Profile::Desk => Self {
                epochs: 100,
                particles: 500,
                anneal: Some(SigmaSchedule {
                    initial: 0.3,
                    hold: 50,
                    ramp: 30,
                }),
                de: DEConfig {
                    population: Some(16),
                    max_generations: 8,
                    tolerance: 0.0,
                    ..DEConfig::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.particles < 2 {
            return Err(Error::InvalidParameter("at least 2 particles are required".into()));
        }
        match self.schedule {
            Schedule::Fixed { segments: 0 } | Schedule::Adaptive { start: 0, .. } => {
                return Err(Error::InvalidParameter("schedule needs at least one segment".into()))
            }
            Schedule::Adaptive { every: 0, .. } => {
                return Err(Error::InvalidParameter("adaptive increment period must be positive".into()))
            }
            _ => {}
        }
        self.shots.validate()?;
        self.truth.validate()?;
        self.prior.validate()?;
        self.likelihood.validate()?;
        if let Some(a) = &self.anneal {
            if self.likelihood.mode != LikelihoodMode::Gaussian {
                return Err(Error::InvalidParameter(
                    "a sigma schedule needs the gaussian likelihood".into(),
                ));
            }
            if !(a.initial.is_finite() && a.initial >= self.likelihood.gaussian_sigma) {
                return Err(Error::InvalidParameter(format!(
                    "initial sigma {} must be at least the final {}",
                    a.initial, self.likelihood.gaussian_sigma
                )));
            }
        }
        self.de.validate()?;
        self.bounds.with_segments(1).validate()
    }
}

/// Segment count used in `epoch`.
pub fn segment_schedule(cfg: &CampaignConfig, epoch: usize) -> Result<usize> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} is past the last epoch {}",
            cfg.epochs - 1
        )));
    }
    Ok(cfg.schedule.segments_at(epoch))
}

/// Likelihood in force during `epoch`.
pub fn likelihood_at(cfg: &CampaignConfig, epoch: usize) -> LikelihoodConfig {
    match &cfg.anneal {
        Some(a) => LikelihoodConfig {
            gaussian_sigma: a.sigma_at(epoch, cfg.likelihood.gaussian_sigma),
            ..cfg.likelihood
        },
        None => cfg.likelihood,
    }
}

#[derive(Clone, Copy)]
enum Purpose {
    Prior = 0,
    Design = 1,
    Experiment = 2,
    Rejuvenate = 3,
}

fn stream(seed: u64, epoch: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 * epoch as u64 + purpose as u64);
    rng
}

fn stream_label(seed: u64, epoch: usize) -> String {
    format!("chacha8 seed={seed} epoch={epoch}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub segments: usize,
    pub pulse: ControlPulse,
    pub utility: f64,
    pub record: ShotRecord,
    pub mean: [f64; PARAM_COUNT],
    pub std: [f64; PARAM_COUNT],
    /// Truth mean minus posterior mean.
    pub delta: [f64; PARAM_COUNT],
    /// Effective sample size after the last tempering stage, before any rejuvenation.
    pub ess: f64,
    /// Number of tempering stages the update was split into.
    pub stages: usize,
    pub rejuvenated: bool,
    /// Fraction of accepted rejuvenation moves, absent when none were proposed.
    pub acceptance: Option<f64>,
    pub evaluations: usize,
    pub de_trace: Vec<f64>,
}

/// Wall-clock cost of an epoch, kept apart from the records so those stay
/// reproducible byte for byte.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct CampaignResult {
    pub records: Vec<EpochRecord>,
    pub timings: Vec<EpochTiming>,
    pub ensemble: ParticleEnsemble,
}

#[derive(Serialize)]
struct PartialResults<'a> {
    completed_epochs: usize,
    failed_epoch: usize,
    error: String,
    last_record: Option<&'a EpochRecord>,
}

/// Appends the new segment of an adaptive schedule by repeating the last one.
fn warm_start(previous: Option<&ControlPulse>, segments: usize) -> Vec<ControlPulse> {
    let Some(p) = previous else { return Vec::new() };
    let mut pulse = p.clone();
    while pulse.segments.len() < segments {
        let last = *pulse.segments.last().expect("pulses have segments");
        pulse.segments.push(last);
    }
    pulse.segments.truncate(segments);
    vec![pulse]
}

/// Posterior together with the evidence it was built from.
#[derive(Clone)]
struct State {
    ensemble: ParticleEnsemble,
    history: Vec<Observation>,
    /// Log-likelihood of `history` per particle.
    history_ll: Vec<f64>,
}

impl State {
    fn rebuild(ensemble: ParticleEnsemble, records: &[EpochRecord], cfg: &LikelihoodConfig) -> Result<Self> {
        let history: Vec<Observation> = records
            .iter()
            .map(|r| Observation {
                pulse: r.pulse.clone(),
                record: r.record,
            })
            .collect();
        use rayon::prelude::*;
        let history_ll = ensemble
            .particles()
            .par_iter()
            .map(|p| history_log_likelihood(p, &history, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            ensemble,
            history,
            history_ll,
        })
    }
}

fn run_epoch(
    cfg: &CampaignConfig,
    epoch: usize,
    state: &State,
) -> Result<(EpochRecord, State)> {
    let ensemble = &state.ensemble;
    let previous = state.history.last().map(|o| &o.pulse);
    let segments = segment_schedule(cfg, epoch)?;
    let bounds = cfg.bounds.with_segments(segments);
    let de = DEConfig {
        seed: stream(cfg.seed, epoch, Purpose::Design).next_u64(),
        ..cfg.de
    };
    let best = optimize(
        |pulse| utility::evaluate(cfg.utility, ensemble, pulse, &cfg.prior),
        &bounds,
        &de,
        &warm_start(previous, segments),
    )?;

    let mut rng = stream(cfg.seed, epoch, Purpose::Experiment);
    let record = run_experiment(&best.pulse, &cfg.truth, cfg.shots, &mut rng)?;
    let update = tempered_update(
        ensemble,
        &state.history_ll,
        &state.history,
        &likelihood_at(cfg, epoch.saturating_sub(1)),
        &best.pulse,
        &record,
        &cfg.prior,
        &likelihood_at(cfg, epoch),
        &cfg.moves,
        &mut stream(cfg.seed, epoch, Purpose::Rejuvenate),
    )?;
    let posterior = update.ensemble;

    let stats = posterior_stats(&posterior);
    let entry = EpochRecord {
        epoch,
        segments,
        pulse: best.pulse,
        utility: best.value,
        record,
        mean: stats.mean,
        std: stats.std,
        delta: stats.error_in_mean(&cfg.truth.mean),
        ess: update.ess,
        stages: update.stages,
        rejuvenated: update.rejuvenated,
        acceptance: (update.moves.proposed > 0)
            .then(|| update.moves.accepted as f64 / update.moves.proposed as f64),
        evaluations: best.evaluations,
        de_trace: best.trace,
    };
    let mut history = state.history.clone();
    history.push(Observation {
        pulse: entry.pulse.clone(),
        record,
    });
    let next = State {
        ensemble: posterior,
        history,
        history_ll: update.history_ll,
    };
    Ok((entry, next))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(item)?)?;
    Ok(())
}

/// Reads the records of a finished or interrupted campaign directory.
pub fn load_records(dir: &Path) -> Result<Vec<EpochRecord>> {
    read_jsonl(&dir.join(EPOCH_LOG))
}

struct ResumePoint {
    ensemble: ParticleEnsemble,
    records: Vec<EpochRecord>,
    timings: Vec<EpochTiming>,
}

fn resume_point(cfg: &CampaignConfig, dir: &Path) -> Result<ResumePoint> {
    let saved: CampaignConfig =
        serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    // Only the horizon may change between the original run and its resumption.
    let comparable = CampaignConfig {
        epochs: cfg.epochs,
        out_dir: cfg.out_dir.clone(),
        ..saved
    };
    if comparable != *cfg {
        return Err(Error::InvalidParameter(format!(
            "configuration differs from the one stored in {}",
            dir.display()
        )));
    }
    let snap = EnsembleSnapshot::load(&dir.join(SNAPSHOT_FILE))?;
    let mut records = load_records(dir)?;
    let mut timings: Vec<EpochTiming> = read_jsonl(&dir.join(TIMING_LOG)).unwrap_or_default();
    records.retain(|r| r.epoch < snap.epoch);
    timings.retain(|t| t.epoch < snap.epoch);
    if records.len() != snap.epoch || records.iter().enumerate().any(|(k, r)| r.epoch != k) {
        return Err(Error::InvalidParameter(format!(
            "epoch log in {} does not cover the {} snapshot epochs",
            dir.display(),
            snap.epoch
        )));
    }
    Ok(ResumePoint {
        ensemble: snap.ensemble()?,
        records,
        timings,
    })
}

fn save_snapshot(dir: &Path, file: &str, ensemble: &ParticleEnsemble, cfg: &CampaignConfig, epoch: usize) -> Result<()> {
    EnsembleSnapshot::new(ensemble, epoch, stream_label(cfg.seed, epoch)).save(&dir.join(file))
}

/// A campaign held in memory and advanced one epoch at a time.
pub struct Campaign {
    cfg: CampaignConfig,
    state: State,
    records: Vec<EpochRecord>,
    timings: Vec<EpochTiming>,
}

impl Campaign {
    /// Draws the initial ensemble from the prior.
    pub fn new(cfg: CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        let ensemble = sample_prior(&cfg.prior, cfg.particles, &mut stream(cfg.seed, 0, Purpose::Prior))?;
        Self::from_parts(cfg, ensemble, Vec::new(), Vec::new())
    }

    fn from_parts(
        cfg: CampaignConfig,
        ensemble: ParticleEnsemble,
        records: Vec<EpochRecord>,
        timings: Vec<EpochTiming>,
    ) -> Result<Self> {
        let last = likelihood_at(&cfg, records.len().saturating_sub(1));
        let state = State::rebuild(ensemble, &records, &last)?;
        Ok(Self {
            cfg,
            state,
            records,
            timings,
        })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.records.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn timings(&self) -> &[EpochTiming] {
        &self.timings
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.state.ensemble
    }

    /// Runs the next epoch. On failure the campaign is left unchanged.
    pub fn step(&mut self) -> Result<&EpochRecord> {
        let epoch = self.epoch();
        let clock = Instant::now();
        let (record, next) = run_epoch(&self.cfg, epoch, &self.state)?;
        self.state = next;
        self.timings.push(EpochTiming {
            epoch,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Copy that continues under another schedule and horizon. The schedules
    /// must agree on every completed epoch, so the copy is exactly what a run
    /// under the new schedule would have produced so far.
    pub fn branch(&self, schedule: Schedule, epochs: usize) -> Result<Self> {
        let cfg = CampaignConfig {
            schedule,
            epochs,
            ..self.cfg.clone()
        };
        cfg.validate()?;
        if let Some(k) = (0..self.epoch()).find(|&k| schedule.segments_at(k) != self.cfg.schedule.segments_at(k)) {
            return Err(Error::InvalidParameter(format!(
                "schedules disagree at completed epoch {k}"
            )));
        }
        Ok(Self {
            cfg,
            state: self.state.clone(),
            records: self.records.clone(),
            timings: self.timings.clone(),
        })
    }

    pub fn into_result(self) -> CampaignResult {
        CampaignResult {
            records: self.records,
            timings: self.timings,
            ensemble: self.state.ensemble,
        }
    }
}

/// Runs a campaign from scratch, or from the latest snapshot in `out_dir`
/// when `resume` is set.
pub fn run_campaign(cfg: &CampaignConfig, resume: bool) -> Result<CampaignResult> {
    cfg.validate()?;
    let dir = cfg.out_dir.as_deref();
    let mut campaign = match (dir, resume) {
        (Some(d), true) => {
            let p = resume_point(cfg, d)?;
            Campaign::from_parts(cfg.clone(), p.ensemble, p.records, p.timings)?
        }
        (None, true) => {
            return Err(Error::InvalidParameter("resuming needs an output directory".into()))
        }
        (_, false) => Campaign::new(cfg.clone())?,
    };

    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        let mut stored = cfg.clone();
        stored.out_dir = None;
        fs::write(d.join(CONFIG_FILE), serde_json::to_string_pretty(&stored)?)?;
        write_jsonl(&d.join(EPOCH_LOG), campaign.records())?;
        write_jsonl(&d.join(TIMING_LOG), campaign.timings())?;
        let _ = fs::remove_file(d.join(PARTIAL_FILE));
        if campaign.epoch() == 0 {
            save_snapshot(d, SNAPSHOT_FILE, campaign.ensemble(), cfg, 0)?;
        }
    }

    while !campaign.is_finished() {
        let epoch = campaign.epoch();
        if let Err(e) = campaign.step() {
            let message = e.to_string();
            if let Some(d) = dir {
                let partial = PartialResults {
                    completed_epochs: epoch,
                    failed_epoch: epoch,
                    error: message.clone(),
                    last_record: campaign.records().last(),
                };
                fs::write(d.join(PARTIAL_FILE), serde_json::to_string_pretty(&partial)?)?;
                save_snapshot(d, SNAPSHOT_FILE, campaign.ensemble(), cfg, epoch)?;
            }
            return Err(Error::CampaignAborted { epoch, message });
        }
        if let Some(d) = dir {
            append_jsonl(&d.join(EPOCH_LOG), &campaign.records()[epoch])?;
            append_jsonl(&d.join(TIMING_LOG), &campaign.timings()[epoch])?;
            let done = epoch + 1;
            if cfg.snapshot_every > 0 && done % cfg.snapshot_every == 0 {
                save_snapshot(d, SNAPSHOT_FILE, campaign.ensemble(), cfg, done)?;
            }
        }
    }

    let result = campaign.into_result();
    if let Some(d) = dir {
        save_snapshot(d, SNAPSHOT_FILE, &result.ensemble, cfg, cfg.epochs)?;
        save_snapshot(d, FINAL_ENSEMBLE_FILE, &result.ensemble, cfg, cfg.epochs)?;
        write_parameter_table(&d.join(PARAMETER_TABLE), cfg, &result.ensemble)?;
        write_convergence_table(&d.join(CONVERGENCE_TABLE), &result.records)?;
    }
    Ok(result)
}

/// Row label for the noise sources switched on in a configuration.
pub fn noise_label(truth: &TruthModel, shots: Shots) -> &'static str {
    match (truth.mode, shots) {
        (TruthMode::Point, Shots::Infinite) => "none",
        (TruthMode::Point, Shots::Finite(_)) => "shot",
        (TruthMode::Gaussian, Shots::Infinite) => "parameter",
        (TruthMode::Gaussian, Shots::Finite(_)) => "parameter and shot",
    }
}

fn shots_label(shots: Shots) -> String {
    match shots {
        Shots::Finite(n) => n.to_string(),
        Shots::Infinite => "inf".into(),
    }
}

/// Posterior mean and std per parameter, one row, χ reported in MHz.
pub fn write_parameter_table(path: &Path, cfg: &CampaignConfig, ensemble: &ParticleEnsemble) -> Result<()> {
    let stats = posterior_stats(ensemble);
    let scale = [1.0, 1e3, 1.0, 1.0];
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([
        "noise", "segments", "shots", "omega_ghz", "omega_ghz_std", "chi_mhz", "chi_mhz_std",
        "t1_us", "t1_us_std", "t2_us", "t2_us_std",
    ])
    .map_err(csv_error)?;
    let mut row = vec![
        noise_label(&cfg.truth, cfg.shots).to_string(),
        cfg.schedule.label(),
        shots_label(cfg.shots),
    ];
    for (k, s) in scale.iter().enumerate() {
        row.push((stats.mean[k] * s).to_string());
        row.push((stats.std[k] * s).to_string());
    }
    w.write_record(&row).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

/// Per-epoch posterior mean, std and error in the mean.
pub fn write_convergence_table(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let names = ["omega_ghz", "chi_ghz", "t1_us", "t2_us"];
    let mut header = vec!["epoch".to_string(), "segments".to_string(), "ess".to_string()];
    for prefix in ["mean", "std", "delta"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.segments.to_string(), r.ess.to_string()];
        for v in [r.mean, r.std, r.delta] {
            row.extend(v.iter().map(f64::to_string));
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reference gate used to measure model-prediction error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationGate {
    /// Ideal gate as a real permutation matrix.
    pub unitary: [[f64; 3]; 3],
    pub pulse: Option<ControlPulse>,
    pub repetitions: usize,
}

impl ValidationGate {
    /// The gate exchanging |0⟩ and |2⟩.
    pub fn swap02(pulse: Option<ControlPulse>) -> Self {
        Self {
            unitary: [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
            pulse,
            repetitions: 100,
        }
    }

    pub fn load(pulse_path: &Path) -> Result<Self> {
        Ok(Self::swap02(Some(ControlPulse::load(pulse_path)?)))
    }

    pub fn validate(&self) -> Result<()> {
        let is_perm = self.unitary.iter().all(|row| {
            row.iter().filter(|&&x| x == 1.0).count() == 1
                && row.iter().all(|&x| x == 0.0 || x == 1.0)
        }) && (0..3).all(|j| (0..3).filter(|&i| self.unitary[i][j] == 1.0).count() == 1);
        if !is_perm {
            return Err(Error::InvalidParameter("reference gate must be a permutation matrix".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidParameter("gate must be repeated at least once".into()));
        }
        match &self.pulse {
            Some(p) => p.validate(),
            None => Err(Error::MissingReferencePulse),
        }
    }

    pub fn unitary_matrix(&self) -> CMat3 {
        CMat3::from_fn(|i, j| self.unitary[i][j].into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize) -> Self {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if samples.is_empty() {
            (-0.5, 0.5)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &x in samples {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    /// Time after each completed repetition, starting at 0, µs.
    pub times: Vec<f64>,
    /// `E(|ĩ⟩, |i⟩)` per time: truth-averaged minus posterior-averaged population.
    pub errors: Vec<[f64; 3]>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub histograms: [Histogram; 3],
    /// Mean population of the gate's target state after one application under the truth mean.
    pub gate_population_fidelity: f64,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Populations after 0, 1, …, `reps` applications of `pulse`.
fn repeated_populations(
    params: &SystemParams,
    pulse: &ControlPulse,
    reps: usize,
    rho0: &DensityMatrix,
) -> Result<Vec<[f64; 3]>> {
    let mut gate = crate::lindblad::RMat9::identity();
    for seg in &pulse.segments {
        gate = segment_propagator(params, pulse.drive_freq, seg)? * gate;
    }
    let mut x: RVec9 = rho0.to_real();
    let mut out = Vec::with_capacity(reps + 1);
    for k in 0..=reps {
        if k > 0 {
            x = gate * x;
        }
        let rho = DensityMatrix::from_real(&x);
        out.push([0, 1, 2].map(|i| rho.entry(i, i).re));
    }
    Ok(out)
}

fn accumulate(acc: &mut [[f64; 3]], series: &[[f64; 3]], w: f64) {
    for (a, s) in acc.iter_mut().zip(series) {
        for i in 0..3 {
            a[i] += w * s[i];
        }
    }
}

/// Prediction error of `ensemble` on the repeated reference gate started
/// from the ground state. Gaussian truth is averaged over `samples` draws.
pub fn validate_gate<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    truth: &TruthModel,
    gate: &ValidationGate,
    samples: usize,
    rng: &mut R,
) -> Result<ValidationSummary> {
    validate_gate_from(ensemble, truth, gate, samples, &DensityMatrix::ground(), rng)
}

/// As [`validate_gate`] from an arbitrary initial state.
pub fn validate_gate_from<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    truth: &TruthModel,
    gate: &ValidationGate,
    samples: usize,
    rho0: &DensityMatrix,
    rng: &mut R,
) -> Result<ValidationSummary> {
    gate.validate()?;
    let pulse = gate.pulse.as_ref().ok_or(Error::MissingReferencePulse)?;
    let reps = gate.repetitions;

    let draws = match truth.mode {
        TruthMode::Point => 1,
        TruthMode::Gaussian => samples.max(1),
    };
    let mut expected_truth = vec![[0.0; 3]; reps + 1];
    for _ in 0..draws {
        let theta = truth.sample(rng)?;
        let series = repeated_populations(&theta, pulse, reps, rho0)?;
        accumulate(&mut expected_truth, &series, 1.0 / draws as f64);
    }

    use rayon::prelude::*;
    let series: Vec<Vec<[f64; 3]>> = ensemble
        .particles()
        .par_iter()
        .map(|theta| repeated_populations(theta, pulse, reps, rho0))
        .collect::<Result<_>>()?;
    let mut expected_model = vec![[0.0; 3]; reps + 1];
    for (s, w) in series.iter().zip(ensemble.weights()) {
        accumulate(&mut expected_model, s, *w);
    }

    let errors: Vec<[f64; 3]> = expected_truth
        .iter()
        .zip(&expected_model)
        .map(|(t, m)| [t[0] - m[0], t[1] - m[1], t[2] - m[2]])
        .collect();
    let n = errors.len() as f64;
    let mean = [0, 1, 2].map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / n);
    let std = [0, 1, 2].map(|i| {
        (errors.iter().map(|e| (e[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt()
    });
    let histograms = [0, 1, 2].map(|i| {
        let col: Vec<f64> = errors.iter().map(|e| e[i]).collect();
        Histogram::new(&col, HISTOGRAM_BINS)
    });

    let target = gate.unitary;
    let fidelity = (0..3)
        .map(|i| {
            let pops = repeated_populations(&truth.mean, pulse, 1, &DensityMatrix::basis(i))?[1];
            Ok((0..3).map(|j| target[j][i] * pops[j]).sum::<f64>())
        })
        .sum::<Result<f64>>()?
        / 3.0;

    let period = pulse.duration();
    Ok(ValidationSummary {
        times: (0..=reps).map(|k| k as f64 * period).collect(),
        errors,
        mean,
        std,
        histograms,
        gate_population_fidelity: fidelity,
    })
}

/// Mean and std of the error per state, one row.
pub fn write_error_table(path: &Path, label: &[(&str, String)], summary: &ValidationSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = label.iter().map(|(k, _)| k.to_string()).collect();
    let mut row: Vec<String> = label.iter().map(|(_, v)| v.clone()).collect();
    for i in 0..3 {
        header.push(format!("state{i}_mean"));
        header.push(format!("state{i}_std"));
        row.push(summary.mean[i].to_string());
        row.push(summary.std[i].to_string());
    }
    w.write_record(&header).map_err(csv_error)?;
    w.write_record(&row).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

/// Histogram table with one row per bin and state.
pub fn write_histogram_table(path: &Path, summary: &ValidationSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["state", "bin_lower", "bin_upper", "count"]).map_err(csv_error)?;
    for (i, h) in summary.histograms.iter().enumerate() {
        for (k, c) in h.counts.iter().enumerate() {
            w.write_record([
                i.to_string(),
                h.edges[k].to_string(),
                h.edges[k + 1].to_string(),
                c.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A gate that only waits, useful for decay checks.
pub fn idle_gate(drive_freq: f64, dt: f64, repetitions: usize) -> ValidationGate {
    ValidationGate {
        repetitions,
        ..ValidationGate::swap02(Some(ControlPulse {
            drive_freq,
            segments: vec![PulseSegment::idle(dt)],
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_schedule_steps() {
        let cfg = CampaignConfig {
            schedule: Schedule::adaptive(),
            ..CampaignConfig::default()
        };
        let at = |e| segment_schedule(&cfg, e).unwrap();
        assert_eq!([at(0), at(99), at(100), at(200), at(300), at(400), at(499)], [3, 3, 4, 5, 6, 7, 7]);
        assert!(segment_schedule(&cfg, 500).is_err());
    }

    #[test]
    fn streams_are_distinct() {
        let a = stream(1, 0, Purpose::Design).next_u64();
        let b = stream(1, 0, Purpose::Experiment).next_u64();
        let c = stream(1, 1, Purpose::Design).next_u64();
        let d = stream(2, 0, Purpose::Design).next_u64();
        assert!(a != b && a != c && a != d);
        assert_eq!(a, stream(1, 0, Purpose::Design).next_u64());
    }

    #[test]
    fn warm_start_extends_pulses() {
        let p = ControlPulse::new(4.0, vec![PulseSegment::new(1.0, 2.0, 3.0)]).unwrap();
        let w = warm_start(Some(&p), 3);
        assert_eq!(w[0].segments, vec![PulseSegment::new(1.0, 2.0, 3.0); 3]);
        assert!(warm_start(None, 3).is_empty());
    }

    #[test]
    fn gate_must_be_a_permutation() {
        let mut g = ValidationGate::swap02(Some(ControlPulse::idle(4.0, 0.1)));
        assert!(g.validate().is_ok());
        g.unitary[0][0] = 1.0;
        assert!(g.validate().is_err());
        let g = ValidationGate::swap02(None);
        assert!(matches!(g.validate(), Err(Error::MissingReferencePulse)));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts[3], 2);
        let flat = Histogram::new(&[0.0; 7], 5);
        assert_eq!(flat.counts.iter().sum::<usize>(), 7);
    }
}
