// SPDX-License-Identifier: Apache-2.0

//! Identifiers shared by every layer of the simulator.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Network-wide bridge identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BridgeId(pub u16);

impl fmt::Display for BridgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A port is addressed by its bridge plus a bridge-local index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId {
    pub bridge: BridgeId,
    pub index: u16,
}

impl PortId {
    pub const fn new(bridge: u16, index: u16) -> Self {
        PortId {
            bridge: BridgeId(bridge),
            index,
        }
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.bridge, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid port id {0:?}, expected <bridge>.<port>")]
pub struct ParsePortIdError(pub String);

impl FromStr for PortId {
    type Err = ParsePortIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParsePortIdError(s.to_string());
        let (b, p) = s.split_once('.').ok_or_else(err)?;
        Ok(PortId {
            bridge: BridgeId(b.trim().parse().map_err(|_| err())?),
            index: p.trim().parse().map_err(|_| err())?,
        })
    }
}

impl Serialize for PortId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Simulated time in integer nanoseconds. Integer time keeps event ordering
/// and token-bucket arithmetic exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const NANOS_PER_SEC: u64 = 1_000_000_000;

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * Self::NANOS_PER_SEC)
    }

    /// Rounds to the nearest nanosecond. Negative and non-finite inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if !s.is_finite() || s <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((s * Self::NANOS_PER_SEC as f64).round() as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / Self::NANOS_PER_SEC as f64
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:09}",
            self.0 / Self::NANOS_PER_SEC,
            self.0 % Self::NANOS_PER_SEC
        )
    }
}

/// The control plane that owns an MSTI, and through it every VLAN and FID
/// allocated to that MSTI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControlPlane {
    Spb,
    ExternalAgent,
}

impl fmt::Display for ControlPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPlane::Spb => f.write_str("Spb"),
            ControlPlane::ExternalAgent => f.write_str("ExternalAgent"),
        }
    }
}

/// Who is asking for a configuration write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    SpbPlane,
    SdnController,
    Management,
}

impl Actor {
    /// Whether this actor may write state owned by `owner`. Management is
    /// always allowed; it is restricted to Static entries elsewhere.
    pub fn may_write(self, owner: ControlPlane) -> bool {
        matches!(
            (self, owner),
            (Actor::Management, _)
                | (Actor::SpbPlane, ControlPlane::Spb)
                | (Actor::SdnController, ControlPlane::ExternalAgent)
        )
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::SpbPlane => f.write_str("SpbPlane"),
            Actor::SdnController => f.write_str("SdnController"),
            Actor::Management => f.write_str("Management"),
        }
    }
}
