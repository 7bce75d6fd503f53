//! System parameters and unit conventions.
//!
//! Frequencies are stored as ordinary frequencies: `omega` and `chi` in GHz,
//! pulse amplitudes in MHz. Times are in microseconds. The only place where
//! these are turned into angular rates (rad/µs) is [`angular_ghz`] and
//! [`angular_mhz`], which the Hamiltonian builder calls.

use std::f64::consts::PI;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of estimated parameters (ω, χ, T1, T2).
pub const PARAM_COUNT: usize = 4;

/// Parameter labels in vector order.
pub const PARAM_NAMES: [&str; PARAM_COUNT] = ["omega", "chi", "t1", "t2"];

/// GHz → rad/µs.
#[inline]
pub fn angular_ghz(f: f64) -> f64 {
    2.0 * PI * 1000.0 * f
}

/// MHz → rad/µs.
#[inline]
pub fn angular_mhz(f: f64) -> f64 {
    2.0 * PI * f
}

/// A decay or dephasing time in µs, or the closed-system sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lifetime {
    Finite(f64),
    Infinite,
}

impl Lifetime {
    /// Rate 1/T in 1/µs; zero for [`Lifetime::Infinite`].
    pub fn rate(self) -> f64 {
        match self {
            Lifetime::Finite(t) => 1.0 / t,
            Lifetime::Infinite => 0.0,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Lifetime::Infinite)
    }

    /// The time as a float, `f64::INFINITY` for the sentinel.
    pub fn as_f64(self) -> f64 {
        match self {
            Lifetime::Finite(t) => t,
            Lifetime::Infinite => f64::INFINITY,
        }
    }

    pub fn from_f64(t: f64) -> Self {
        if t.is_infinite() && t > 0.0 {
            Lifetime::Infinite
        } else {
            Lifetime::Finite(t)
        }
    }
}

impl From<f64> for Lifetime {
    fn from(t: f64) -> Self {
        Lifetime::from_f64(t)
    }
}

impl Serialize for Lifetime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lifetime::Finite(t) => s.serialize_f64(*t),
            Lifetime::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lifetime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LifetimeVisitor;

        impl Visitor<'_> for LifetimeVisitor {
            type Value = Lifetime;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive time in µs or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Lifetime, E> {
                Ok(Lifetime::from_f64(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Lifetime, E> {
                Ok(Lifetime::Finite(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Lifetime, E> {
                Ok(Lifetime::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Lifetime, E> {
                match v {
                    "inf" | "infinite" | "Infinity" => Ok(Lifetime::Infinite),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }

        d.deserialize_any(LifetimeVisitor)
    }
}

/// The estimand θ = (ω, χ, T1, T2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// 0-1 transition frequency, GHz.
    pub omega: f64,
    /// Anharmonicity, GHz.
    pub chi: f64,
    /// Energy decay time, µs.
    pub t1: Lifetime,
    /// Dephasing time, µs.
    pub t2: Lifetime,
}

impl SystemParams {
    pub fn new(omega: f64, chi: f64, t1: f64, t2: f64) -> Self {
        Self {
            omega,
            chi,
            t1: Lifetime::from_f64(t1),
            t2: Lifetime::from_f64(t2),
        }
    }

    /// Closed-system parameters (no jump operators).
    pub fn closed(omega: f64, chi: f64) -> Self {
        Self {
            omega,
            chi,
            t1: Lifetime::Infinite,
            t2: Lifetime::Infinite,
        }
    }

    /// The QPU values used as the synthetic truth: 4.0108 GHz, 127.8 MHz,
    /// 45 µs, 24 µs.
    pub fn qpu_reference() -> Self {
        Self::new(4.0108, 0.1278, 45.0, 24.0)
    }

    pub fn tau1(&self) -> f64 {
        self.t1.rate()
    }

    pub fn tau2(&self) -> f64 {
        self.t2.rate()
    }

    /// Detuning ω − ω_d in GHz.
    pub fn detuning(&self, drive_freq: f64) -> f64 {
        self.omega - drive_freq
    }

    pub fn validate(&self) -> Result<()> {
        let ok_time = |t: Lifetime| match t {
            Lifetime::Finite(t) => t.is_finite() && t > 0.0,
            Lifetime::Infinite => true,
        };
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::InvalidParameter(format!("omega = {} GHz", self.omega)));
        }
        if !(self.chi.is_finite() && self.chi > 0.0) {
            return Err(Error::InvalidParameter(format!("chi = {} GHz", self.chi)));
        }
        if !ok_time(self.t1) || !ok_time(self.t2) {
            return Err(Error::InvalidParameter(format!(
                "t1 = {:?}, t2 = {:?}",
                self.t1, self.t2
            )));
        }
        Ok(())
    }

    /// `[ω, χ, T1, T2]` with infinite times mapped to `f64::INFINITY`.
    pub fn to_vector(&self) -> [f64; PARAM_COUNT] {
        [self.omega, self.chi, self.t1.as_f64(), self.t2.as_f64()]
    }

    pub fn from_vector(v: [f64; PARAM_COUNT]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// True when the frequencies are finite and positive and the lifetimes
    /// positive; an infinite lifetime (no loss channel) counts as physical.
    pub fn is_physical(&self) -> bool {
        let [omega, chi, t1, t2] = self.to_vector();
        omega.is_finite() && omega > 0.0 && chi.is_finite() && chi > 0.0 && t1 > 0.0 && t2 > 0.0
    }

    pub fn is_lossy(&self) -> bool {
        !(self.t1.is_infinite() || self.t2.is_infinite())
    }
}
