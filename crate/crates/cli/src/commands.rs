use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qutrit_bexd::campaign::{
    noise_label, run_campaign, validate_gate, write_error_table, write_histogram_table, CampaignConfig,
    Profile, ValidationGate, FINAL_ENSEMBLE_FILE,
};
use qutrit_bexd::identifiability::{check_identifiability, ConditionSystem, IdentifiabilityReport};
use qutrit_bexd::inference::EnsembleSnapshot;
use qutrit_bexd::lindblad::{propagate_trajectory, CMat3, DensityMatrix};
use qutrit_bexd::pulse::{ControlPulse, PulseSegment};
use qutrit_bexd::Error;

use crate::config::ConfigFile;
use crate::{Cli, Command, Failure};

pub const POPULATIONS_FILE: &str = "populations.csv";
pub const IDENTIFIABILITY_JSON: &str = "identifiability.json";
pub const IDENTIFIABILITY_TEXT: &str = "identifiability.txt";
pub const VALIDATION_JSON: &str = "validation.json";
pub const VALIDATION_ERRORS: &str = "validation_errors.csv";
pub const VALIDATION_HISTOGRAM: &str = "validation_histogram.csv";

fn config_error(e: impl ToString) -> Failure {
    Failure::Config(e.to_string())
}

/// Input problems are configuration errors; everything else aborts the run.
fn runtime_error(e: Error) -> Failure {
    match e {
        Error::Parse { .. } | Error::MissingReferencePulse => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

struct Context {
    file: ConfigFile,
    /// Directory relative paths in the configuration are resolved against.
    base: PathBuf,
    profile: Profile,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let (file, base) = match &cli.config {
            Some(p) => (
                ConfigFile::load(p).map_err(Failure::Config)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (ConfigFile::default(), PathBuf::new()),
        };
        let profile = cli.profile.map(Profile::from).or(file.profile).unwrap_or(Profile::Desk);
        Ok(Self { file, base, profile })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// The flag wins over the configuration key.
    fn pulse(&self, flag: Option<&PathBuf>, key: Option<&PathBuf>, what: &str) -> Result<ControlPulse, Failure> {
        let path = match (flag, key) {
            (Some(f), _) => f.clone(),
            (None, Some(k)) => self.resolve(k),
            (None, None) => return Err(Failure::Config(format!("no pulse file given for {what}"))),
        };
        ControlPulse::load(&path).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("{}: {io}", path.display())),
            other => runtime_error(other),
        })
    }

    fn campaign(&self, cli: &Cli) -> Result<CampaignConfig, Failure> {
        let mut cfg = self.file.campaign_config(self.profile);
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cfg.out_dir = Some(cli.out_dir.clone());
        cfg.validate().map_err(config_error)?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Simulate { pulse } => simulate(cli, &ctx, pulse.as_ref()),
        Command::Characterize => characterize(cli, &ctx),
        Command::IdentifiabilityCheck { pulse } => identifiability(cli, &ctx, pulse.as_ref()),
        Command::Validate { snapshot, pulse } => validate(cli, &ctx, snapshot.as_ref(), pulse.as_ref()),
    }
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Splits every segment into equal pieces no longer than `step`.
fn refine(pulse: &ControlPulse, step: f64) -> ControlPulse {
    let segments = pulse
        .segments
        .iter()
        .flat_map(|s| {
            let n = (s.dt / step).ceil().max(1.0) as usize;
            std::iter::repeat_n(PulseSegment::new(s.p, s.q, s.dt / n as f64), n)
        })
        .collect();
    ControlPulse {
        drive_freq: pulse.drive_freq,
        segments,
    }
}

fn simulate(cli: &Cli, ctx: &Context, flag: Option<&PathBuf>) -> Result<(), Failure> {
    let s = &ctx.file.simulate;
    let pulse = ctx.pulse(flag, s.pulse.as_ref(), "simulate")?;
    let params = ctx.file.system_params();
    params.validate().map_err(config_error)?;
    let level = s.initial_level.unwrap_or(0);
    if level > 2 {
        return Err(Failure::Config(format!("initial_level must be 0, 1 or 2, got {level}")));
    }
    let step = s.step_us.unwrap_or(0.1);
    if !(step.is_finite() && step > 0.0) {
        return Err(Failure::Config(format!("step_us must be positive, got {step}")));
    }
    let fine = refine(&pulse, step);
    let states = propagate_trajectory(&DensityMatrix::basis(level), &params, &fine).map_err(runtime_error)?;
    let mut out = String::from("time_us,p0,p1,p2\n");
    let mut t = 0.0;
    for (k, rho) in states.iter().enumerate() {
        if k > 0 {
            t += fine.segments[k - 1].dt;
        }
        let p = [0, 1, 2].map(|i| rho.entry(i, i).re);
        writeln!(out, "{t},{},{},{}", p[0], p[1], p[2]).expect("writing to a string");
    }
    create_out_dir(&cli.out_dir)?;
    write(&cli.out_dir.join(POPULATIONS_FILE), &out)
}

fn characterize(cli: &Cli, ctx: &Context) -> Result<(), Failure> {
    let cfg = ctx.campaign(cli)?;
    let res = run_campaign(&cfg, cli.resume).map_err(|e| match e {
        Error::InvalidParameter(m) => Failure::Config(m),
        other => runtime_error(other),
    })?;
    if let Some(last) = res.records.last() {
        eprintln!(
            "completed {} epochs; posterior mean omega {:.9} GHz, chi {:.6} MHz, T1 {:.3} us, T2 {:.3} us",
            res.records.len(),
            last.mean[0],
            last.mean[1] * 1e3,
            last.mean[2],
            last.mean[3]
        );
    }
    Ok(())
}

fn unitary(rows: &[[[f64; 2]; 3]; 3]) -> Result<CMat3, Failure> {
    let u = CMat3::from_fn(|i, j| Complex64::new(rows[i][j][0], rows[i][j][1]));
    let gap = (u.adjoint() * u - CMat3::identity()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if gap > 1e-9 {
        return Err(Failure::Config(format!("basis_unitary is not unitary (U†U − I up to {gap:.1e})")));
    }
    Ok(u)
}

fn system_line(label: &str, at: Option<f64>) -> String {
    match at {
        Some(t) => format!("{label}: identifiable from t = {t} us"),
        None => format!("{label}: not identifiable at any probe time"),
    }
}

fn verdict(sys: &ConditionSystem) -> &'static str {
    if sys.is_identifiable() {
        "yes"
    } else {
        "no"
    }
}

fn identifiability_text(report: &IdentifiabilityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "drive F = {} MHz (first segment p amplitude)", report.drive);
    let _ = writeln!(s, "{}", system_line("(F, tau1)", report.first_order_identifiable_at));
    let _ = writeln!(s, "{}", system_line("(omega, chi)", report.frequency_identifiable_at));
    let _ = writeln!(s, "{}", system_line("(omega, chi, tau2)", report.second_order_identifiable_at));
    let _ = writeln!(s, "basis invariance residual: {:e}", report.basis_invariance_residual);
    let _ = writeln!(s);
    let _ = writeln!(s, "t_us p0 p1 p2 (F,tau1) (omega,chi) (omega,chi,tau2)");
    for p in &report.probes {
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {} {} {}",
            p.time,
            p.populations[0],
            p.populations[1],
            p.populations[2],
            verdict(&p.first_order),
            verdict(&p.frequency),
            verdict(&p.second_order)
        );
    }
    s
}

fn identifiability(cli: &Cli, ctx: &Context, flag: Option<&PathBuf>) -> Result<(), Failure> {
    let sec = &ctx.file.identifiability;
    let pulse = ctx.pulse(flag, sec.pulse.as_ref(), "identifiability-check")?;
    let params = ctx.file.system_params();
    params.validate().map_err(config_error)?;
    let times = match &sec.probe_times_us {
        Some(t) => t.clone(),
        None => (1..=20).map(|k| pulse.duration() * k as f64 / 20.0).collect(),
    };
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Failure::Config("probe times must be non-negative".into()));
    }
    let u = match &sec.basis_unitary {
        Some(rows) => unitary(rows)?,
        None => CMat3::identity(),
    };
    let report = check_identifiability(&pulse, &params, &times, &u).map_err(runtime_error)?;
    create_out_dir(&cli.out_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&cli.out_dir.join(IDENTIFIABILITY_JSON), &json)?;
    write(&cli.out_dir.join(IDENTIFIABILITY_TEXT), &identifiability_text(&report))
}

fn validate(cli: &Cli, ctx: &Context, snapshot: Option<&PathBuf>, flag: Option<&PathBuf>) -> Result<(), Failure> {
    let cfg = ctx.campaign(cli)?;
    let sec = &ctx.file.validation;
    let snap_path = match (snapshot, &sec.snapshot) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => ctx.resolve(p),
        (None, None) => cli.out_dir.join(FINAL_ENSEMBLE_FILE),
    };
    let snap = EnsembleSnapshot::load(&snap_path).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("{}: {io}", snap_path.display())),
        Error::Json(j) => Failure::Config(format!("{}: {j}", snap_path.display())),
        other => runtime_error(other),
    })?;
    let ensemble = snap.ensemble().map_err(config_error)?;
    let pulse = match (flag, &sec.pulse) {
        (None, None) => None,
        (f, k) => Some(ctx.pulse(f, k.as_ref(), "validate")?),
    };
    let gate = ValidationGate {
        repetitions: sec.repetitions.unwrap_or(100),
        ..ValidationGate::swap02(pulse)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let summary = validate_gate(&ensemble, &cfg.truth, &gate, sec.truth_samples.unwrap_or(100), &mut rng)
        .map_err(runtime_error)?;
    create_out_dir(&cli.out_dir)?;
    let label = [
        ("noise", noise_label(&cfg.truth, cfg.shots).to_string()),
        ("epochs", snap.epoch.to_string()),
    ];
    write_error_table(&cli.out_dir.join(VALIDATION_ERRORS), &label, &summary).map_err(runtime_error)?;
    write_histogram_table(&cli.out_dir.join(VALIDATION_HISTOGRAM), &summary).map_err(runtime_error)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&cli.out_dir.join(VALIDATION_JSON), &json)
}
