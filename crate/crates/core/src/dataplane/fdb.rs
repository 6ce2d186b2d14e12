// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::frames::MacAddress;
use crate::ids::{ControlPlane, PortId, SimTime};

/// Who put an entry into a forwarding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Learned,
    Spb,
    Sdn,
    Static,
}

impl Origin {
    /// Whether an entry of this origin may live in a FID owned by `owner`.
    pub fn allowed_in(self, owner: ControlPlane) -> bool {
        matches!(
            (self, owner),
            (Origin::Static, _)
                | (Origin::Learned, ControlPlane::Spb)
                | (Origin::Spb, ControlPlane::Spb)
                | (Origin::Sdn, ControlPlane::ExternalAgent)
        )
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Learned => "Learned",
            Origin::Spb => "Spb",
            Origin::Sdn => "Sdn",
            Origin::Static => "Static",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdbEntry {
    pub mac: MacAddress,
    /// Singleton for unicast, several ports for group entries.
    pub ports: BTreeSet<PortId>,
    pub origin: Origin,
    /// Last refresh; only meaningful for learned entries.
    pub last_seen: SimTime,
}

impl FdbEntry {
    pub fn new(mac: MacAddress, ports: impl IntoIterator<Item = PortId>, origin: Origin) -> Self {
        FdbEntry {
            mac,
            ports: ports.into_iter().collect(),
            origin,
            last_seen: SimTime::ZERO,
        }
    }

    pub fn age(&self, now: SimTime) -> SimTime {
        match self.origin {
            Origin::Learned => now.saturating_sub(self.last_seen),
            _ => SimTime::ZERO,
        }
    }
}

/// One filtering database, keyed by MAC.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fdb {
    entries: BTreeMap<MacAddress, FdbEntry>,
}

impl Fdb {
    pub fn get(&self, mac: &MacAddress) -> Option<&FdbEntry> {
        self.entries.get(mac)
    }

    pub fn insert(&mut self, entry: FdbEntry) -> Option<FdbEntry> {
        self.entries.insert(entry.mac, entry)
    }

    pub fn remove(&mut self, mac: &MacAddress) -> Option<FdbEntry> {
        self.entries.remove(mac)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FdbEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&FdbEntry) -> bool) {
        self.entries.retain(|_, e| keep(e));
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// A forwarding table identifier with its single controlling plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fid {
    pub id: u16,
    pub owner: ControlPlane,
    pub vids: BTreeSet<crate::frames::Vid>,
}

impl Fid {
    /// Learning from data frames is forced off for externally controlled FIDs.
    pub fn permits_learning(&self) -> bool {
        self.owner == ControlPlane::Spb
    }
}
