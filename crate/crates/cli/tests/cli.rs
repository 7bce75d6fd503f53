use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qutrit_bexd::inference::{EnsembleSnapshot, ParticleEnsemble};
use qutrit_bexd::params::SystemParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qutrit-bexd"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn placeholder() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/swap02_placeholder.pulse")
}

fn populations(path: &Path) -> Vec<[f64; 4]> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

#[test]
fn idle_ground_state_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("idle.pulse"), "drive_freq_ghz = 4.0\n0 0 5\n").unwrap();
    let o = run(&["simulate", "--pulse", "idle.pulse", "--out-dir", "sim"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = populations(&dir.path().join("sim/populations.csv"));
    assert_eq!(rows.len(), 51);
    assert!(rows.iter().all(|r| r[1] == 1.0 && r[2] == 0.0 && r[3] == 0.0));
}

#[test]
fn decay_follows_the_lifetime() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("idle.pulse"), "drive_freq_ghz = 4.0\n0 0 60\n").unwrap();
    fs::write(
        dir.path().join("cfg.toml"),
        "[system]\nt1_us = 40.0\n[simulate]\npulse = \"idle.pulse\"\ninitial_level = 1\nstep_us = 2.0\n",
    )
    .unwrap();
    let o = run(&["simulate", "--config", "cfg.toml", "--out-dir", "sim"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for r in populations(&dir.path().join("sim/populations.csv")) {
        assert!((r[2] - (-r[0] / 40.0).exp()).abs() < 1e-9, "t = {}", r[0]);
    }
}

#[test]
fn malformed_pulse_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.pulse"), "drive_freq_ghz = 4.0\n1 2 3\n1 2\n").unwrap();
    let o = run(&["simulate", "--pulse", "bad.pulse"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.pulse:3"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), "[campaign]\nepochz = 3\n").unwrap();
    let o = run(&["characterize", "--config", "cfg.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    let o = run(&["characterize", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["characterize", "--profile", "bench"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

const TINY: &str = r#"
profile = "desk"
[campaign]
epochs = 3
particles = 16
snapshot_every = 1
[optimizer]
population = 6
max_generations = 2
"#;

fn characterize(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["characterize", "--config", "tiny.toml", "--out-dir", out, "--workers", "1"];
    args.extend_from_slice(extra);
    run(&args, dir)
}

#[test]
fn campaign_outputs_resume_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let o = characterize(d, "a", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "campaign.json",
        "epochs.jsonl",
        "timing.jsonl",
        "snapshot.json",
        "final_ensemble.json",
        "parameters.csv",
        "convergence.csv",
    ] {
        assert!(d.join("a").join(f).is_file(), "{f} missing");
    }
    let log = |out: &str| fs::read_to_string(d.join(out).join("epochs.jsonl")).unwrap();
    assert_eq!(log("a").lines().count(), 3);

    assert!(characterize(d, "b", &[]).status.success());
    assert_eq!(log("a"), log("b"));
    assert!(characterize(d, "c", &["--seed", "9"]).status.success());
    assert_ne!(log("a"), log("c"));

    // Extend the horizon and continue from the last snapshot.
    fs::write(d.join("tiny.toml"), TINY.replace("epochs = 3", "epochs = 5")).unwrap();
    let o = characterize(d, "a", &["--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(characterize(d, "full", &[]).status.success());
    assert_eq!(log("a"), log("full"));
    let epochs: Vec<usize> = log("a")
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap() as usize)
        .collect();
    assert_eq!(epochs, [0, 1, 2, 3, 4]);

    // A different configuration may not continue the stored run.
    fs::write(d.join("tiny.toml"), TINY.replace("particles = 16", "particles = 20")).unwrap();
    assert_eq!(characterize(d, "a", &["--resume"]).status.code(), Some(2));
}

#[test]
fn identifiability_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("idle.pulse"), "drive_freq_ghz = 4.0108\n0 0 10\n").unwrap();
    let o = run(&["identifiability-check", "--pulse", "idle.pulse", "--out-dir", "idle"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("idle/identifiability.txt")).unwrap();
    assert!(text.contains("(omega, chi): not identifiable"), "{text}");
    assert!(d.join("idle/identifiability.json").is_file());

    fs::write(d.join("drive.pulse"), "drive_freq_ghz = 4.0078\n6 2 2\n-4 5 3\n").unwrap();
    let o = run(&["identifiability-check", "--pulse", "drive.pulse", "--out-dir", "plain"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("plain/identifiability.txt")).unwrap();
    assert!(text.contains("(omega, chi): identifiable from"), "{text}");

    fs::write(
        d.join("id.toml"),
        "[identifiability]\nbasis_unitary = [[[1,0],[0,0],[0,0]],[[0,0],[1,0],[0,0]],[[0,0],[0,0],[1,0]]]\n",
    )
    .unwrap();
    let o = run(
        &["identifiability-check", "--config", "id.toml", "--pulse", "drive.pulse", "--out-dir", "ident"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["identifiability.txt", "identifiability.json"] {
        assert_eq!(fs::read(d.join("plain").join(f)).unwrap(), fs::read(d.join("ident").join(f)).unwrap());
    }
}

fn write_point_snapshot(path: &Path) {
    let e = ParticleEnsemble::point(SystemParams::qpu_reference());
    EnsembleSnapshot::new(&e, 0, "none".into()).save(path).unwrap();
}

#[test]
fn validation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_point_snapshot(&d.join("truth.json"));
    let pulse = placeholder();
    let o = run(
        &["validate", "--snapshot", "truth.json", "--pulse", pulse.to_str().unwrap(), "--out-dir", "v"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(d.join("v/validation_errors.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "noise,epochs,state0_mean,state0_std,state1_mean,state1_std,state2_mean,state2_std"
    );
    assert_eq!(lines.next().unwrap(), "none,0,0,0,0,0,0,0");
    assert!(d.join("v/validation_histogram.csv").is_file());
    assert!(d.join("v/validation.json").is_file());

    let again = run(
        &["validate", "--snapshot", "truth.json", "--pulse", pulse.to_str().unwrap(), "--out-dir", "w"],
        d,
    );
    assert!(again.status.success());
    assert_eq!(fs::read(d.join("v/validation.json")).unwrap(), fs::read(d.join("w/validation.json")).unwrap());

    let o = run(&["validate", "--snapshot", "truth.json", "--out-dir", "x"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reference pulse"), "{}", stderr(&o));
    let o = run(&["validate", "--snapshot", "nowhere.json", "--pulse", pulse.to_str().unwrap()], d);
    assert_eq!(o.status.code(), Some(2));
}
