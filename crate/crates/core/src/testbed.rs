//! Synthetic stand-in for the hardware: hidden truth, per-experiment
//! parameter noise and shot sampling.

use std::fmt;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::inference::ShotRecord;
use crate::lindblad::ground_state_outcomes;
use crate::params::{SystemParams, PARAM_COUNT};
use crate::pulse::ControlPulse;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TruthMode {
    #[default]
    Point,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub mode: TruthMode,
    pub mean: SystemParams,
    /// Variances of (ω, χ, T1, T2) in GHz², GHz², µs², µs².
    pub variances: [f64; PARAM_COUNT],
}

impl TruthModel {
    /// QPU reference mean with variances (1e-6 GHz², 1e-3 MHz², 0.2 µs², 0.2 µs²).
    pub fn reference(mode: TruthMode) -> Self {
        Self {
            mode,
            mean: SystemParams::qpu_reference(),
            variances: [1e-6, 1e-3 * 1e-6, 0.2, 0.2],
        }
    }

    pub fn point(mean: SystemParams) -> Self {
        Self {
            mode: TruthMode::Point,
            mean,
            variances: [0.0; PARAM_COUNT],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mean.validate()?;
        if self.variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "truth variances must be non-negative, got {:?}",
                self.variances
            )));
        }
        if self.mode == TruthMode::Gaussian && !(self.mean.is_physical() && self.mean.is_lossy()) {
            return Err(Error::InvalidParameter(
                "gaussian truth needs finite lifetimes".into(),
            ));
        }
        Ok(())
    }

    /// One parameter draw: the mean in point mode, otherwise independent
    /// normals redrawn until every component is positive.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SystemParams> {
        match self.mode {
            TruthMode::Point => Ok(self.mean),
            TruthMode::Gaussian => {
                let mean = self.mean.to_vector();
                let mut out = [0.0; PARAM_COUNT];
                for k in 0..PARAM_COUNT {
                    let sd = self.variances[k].sqrt();
                    if sd == 0.0 {
                        out[k] = mean[k];
                        continue;
                    }
                    let dist = Normal::new(mean[k], sd)
                        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    out[k] = loop {
                        let x = dist.sample(rng);
                        if x > 0.0 {
                            break x;
                        }
                    };
                }
                Ok(SystemParams::from_vector(out))
            }
        }
    }
}

/// Number of measurement shots, or the infinite-shot limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Shots {
    Finite(u64),
    #[default]
    Infinite,
}

impl Shots {
    pub fn validate(&self) -> Result<()> {
        match self {
            Shots::Finite(0) => Err(Error::InvalidParameter("shots must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::Finite(n) => s.serialize_u64(*n),
            Shots::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ShotsVisitor;
        impl Visitor<'_> for ShotsVisitor {
            type Value = Shots;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Shots, E> {
                if v == 0 {
                    Err(E::custom("shots must be at least 1"))
                } else {
                    Ok(Shots::Finite(v))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Shots, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom("shots must be positive"))
                    .and_then(|v| self.visit_u64(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Shots, E> {
                match v {
                    "inf" | "infinite" => Ok(Shots::Infinite),
                    _ => Err(E::custom(format!("invalid shot count `{v}`"))),
                }
            }
        }
        d.deserialize_any(ShotsVisitor)
    }
}

/// Multinomial counts from sequential binomial draws.
pub fn sample_counts<R: Rng + ?Sized>(probs: &[f64; 3], shots: u64, rng: &mut R) -> Result<[u64; 3]> {
    let mut bin = |n: u64, p: f64| -> Result<u64> {
        let p = p.clamp(0.0, 1.0);
        Ok(Binomial::new(n, p)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(rng))
    };
    let n0 = bin(shots, probs[0])?;
    let rest = 1.0 - probs[0];
    let n1 = if rest > 0.0 {
        bin(shots - n0, probs[1] / rest)?
    } else {
        0
    };
    Ok([n0, n1, shots - n0 - n1])
}

/// Plays `pulse` from the ground state on a fresh truth draw and records the outcomes.
pub fn run_experiment<R: Rng + ?Sized>(
    pulse: &ControlPulse,
    truth: &TruthModel,
    shots: Shots,
    rng: &mut R,
) -> Result<ShotRecord> {
    pulse.validate()?;
    let theta = truth.sample(rng)?;
    let probs = ground_state_outcomes(&theta, pulse)?;
    match shots {
        Shots::Infinite => Ok(ShotRecord::Exact(probs)),
        Shots::Finite(n) => Ok(ShotRecord::Counts(sample_counts(&probs, n, rng)?)),
    }
}
