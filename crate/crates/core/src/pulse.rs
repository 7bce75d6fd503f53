//! Piecewise-constant control pulses and their text file format.
//!
//! A pulse file has one `drive_freq_ghz = <value>` line followed by one row
//! per segment with the in-phase amplitude (MHz), quadrature amplitude (MHz)
//! and duration (µs), separated by whitespace or commas. `#` starts a comment.
//!
//! ```text
//! drive_freq_ghz = 4.0108
//! # p_mhz  q_mhz  dt_us
//! 5.0      0.0    0.025
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSegment {
    /// In-phase amplitude, MHz.
    pub p: f64,
    /// Quadrature amplitude, MHz.
    pub q: f64,
    /// Duration, µs.
    pub dt: f64,
}

impl PulseSegment {
    pub fn new(p: f64, q: f64, dt: f64) -> Self {
        Self { p, q, dt }
    }

    /// A segment with no drive.
    pub fn idle(dt: f64) -> Self {
        Self { p: 0.0, q: 0.0, dt }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPulse {
    /// Drive frequency ω_d, GHz.
    pub drive_freq: f64,
    pub segments: Vec<PulseSegment>,
}

impl ControlPulse {
    pub fn new(drive_freq: f64, segments: Vec<PulseSegment>) -> Result<Self> {
        let pulse = Self {
            drive_freq,
            segments,
        };
        pulse.validate()?;
        Ok(pulse)
    }

    /// Single idle segment of length `dt`.
    pub fn idle(drive_freq: f64, dt: f64) -> Self {
        Self {
            drive_freq,
            segments: vec![PulseSegment::idle(dt)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidParameter("pulse has no segments".into()));
        }
        if !self.drive_freq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "drive frequency {} is not finite",
                self.drive_freq
            )));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.dt.is_finite() && s.dt > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "segment {i} has non-positive duration {}",
                    s.dt
                )));
            }
            if !(s.p.is_finite() && s.q.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "segment {i} has a non-finite amplitude"
                )));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.dt).sum()
    }

    /// In-phase amplitude of the first segment, the drive value at t₀.
    pub fn initial_drive(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.p)
    }

    /// The pulse played `times` times back to back.
    pub fn repeated(&self, times: usize) -> Self {
        let mut segments = Vec::with_capacity(self.segments.len() * times);
        for _ in 0..times {
            segments.extend_from_slice(&self.segments);
        }
        Self {
            drive_freq: self.drive_freq,
            segments,
        }
    }

    /// Flattened `[ω_d, p₁, q₁, Δt₁, …]` decision vector.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + 3 * self.segments.len());
        v.push(self.drive_freq);
        for s in &self.segments {
            v.extend_from_slice(&[s.p, s.q, s.dt]);
        }
        v
    }

    /// Inverse of [`ControlPulse::to_vector`]. Panics if the length is not `3k + 1`.
    pub fn from_vector(v: &[f64]) -> Self {
        assert!(
            !v.is_empty() && (v.len() - 1).is_multiple_of(3),
            "pulse vector length must be 3·segments + 1, got {}",
            v.len()
        );
        let segments = v[1..]
            .chunks_exact(3)
            .map(|c| PulseSegment::new(c[0], c[1], c[2]))
            .collect();
        Self {
            drive_freq: v[0],
            segments,
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut drive_freq = None;
        let mut segments = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let key = key.trim();
                if key != "drive_freq_ghz" {
                    return Err(err(lineno, format!("unknown key `{key}`")));
                }
                if drive_freq.is_some() {
                    return Err(err(lineno, "duplicate `drive_freq_ghz`".into()));
                }
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| err(lineno, format!("invalid number `{}`", value.trim())))?;
                drive_freq = Some(v);
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 3 {
                return Err(err(
                    lineno,
                    format!("expected `p_mhz q_mhz dt_us`, found {} fields", fields.len()),
                ));
            }
            let mut vals = [0.0; 3];
            for (slot, f) in vals.iter_mut().zip(&fields) {
                *slot = f
                    .parse()
                    .map_err(|_| err(lineno, format!("invalid number `{f}`")))?;
            }
            let seg = PulseSegment::new(vals[0], vals[1], vals[2]);
            if !(seg.dt.is_finite() && seg.dt > 0.0) {
                return Err(err(lineno, format!("duration must be positive, got {}", seg.dt)));
            }
            segments.push(seg);
        }
        let drive_freq = drive_freq.ok_or_else(|| err(0, "missing `drive_freq_ghz`".into()))?;
        if segments.is_empty() {
            return Err(err(0, "pulse has no segments".into()));
        }
        Self::new(drive_freq, segments)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "drive_freq_ghz = {}", self.drive_freq);
        let _ = writeln!(out, "# p_mhz q_mhz dt_us");
        for s in &self.segments {
            let _ = writeln!(out, "{} {} {}", s.p, s.q, s.dt);
        }
        out
    }
}
