// SPDX-License-Identifier: Apache-2.0

//! Continuity checking between maintenance end points.
//!
//! A CCM is an ordinary customer frame: it is injected into the edge port's
//! ingress pipeline, encapsulated and forwarded like service data, and only
//! recognised again when it leaves the remote edge port.

use std::collections::BTreeMap;
use std::fmt;

use crate::frames::{Frame, Isid, MacAddress, Vid, VlanTag};
use crate::ids::{PortId, SimTime};

/// Group destination of every CCM.
pub const CFM_GROUP_MAC: MacAddress = MacAddress::new(0x0180_c200_0030);
pub const CFM_ETHERTYPE: u16 = 0x8902;
/// Priority of CCMs; forwarding does not look at it.
pub const CCM_PCP: u8 = 7;
/// Missed intervals before a peer is declared lost.
pub const LOSS_THRESHOLD: u64 = 3;

pub type MaId = u32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OamError {
    #[error("a maintenance association needs at least two end points")]
    TooFewMeps,
    #[error("duplicate mep id {0}")]
    DuplicateMepId(u16),
    #[error("interval must be positive")]
    ZeroInterval,
    #[error("ccm for ma {got} received by a mep of ma {expected}")]
    MaMismatch { expected: MaId, got: MaId },
    #[error("unknown maintenance association {0}")]
    UnknownMa(MaId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaScope {
    Vlan(Vid),
    Service { isid: Isid, bvid: Vid },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MepConfig {
    pub mep_id: u16,
    pub port: PortId,
    /// Customer tag the CCMs carry, the same as the service's data frames.
    pub vid: Vid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaConfig {
    pub service: String,
    pub scope: MaScope,
    pub interval: SimTime,
    pub meps: Vec<MepConfig>,
    /// Forces the B-VID chosen at encapsulation, so CCMs of one path of a
    /// protected service stay on that path.
    pub bvid_override: Option<Vid>,
}

/// Decoded CCM payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ccm {
    pub ma: MaId,
    pub mep: u16,
    pub seq: u32,
}

impl Ccm {
    const LEN: usize = 12;

    pub fn payload(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(Self::LEN);
        p.extend_from_slice(&CFM_ETHERTYPE.to_be_bytes());
        p.extend_from_slice(&self.ma.to_be_bytes());
        p.extend_from_slice(&self.mep.to_be_bytes());
        p.extend_from_slice(&self.seq.to_be_bytes());
        p
    }

    /// Recognises a CCM by destination and payload type.
    pub fn parse(frame: &Frame) -> Option<Ccm> {
        if frame.dst != CFM_GROUP_MAC || frame.is_encapsulated() {
            return None;
        }
        let p = &frame.payload;
        if p.len() != Self::LEN || p[0..2] != CFM_ETHERTYPE.to_be_bytes() {
            return None;
        }
        Some(Ccm {
            ma: u32::from_be_bytes(p[2..6].try_into().ok()?),
            mep: u16::from_be_bytes(p[6..8].try_into().ok()?),
            seq: u32::from_be_bytes(p[8..12].try_into().ok()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OamEventKind {
    DefectRaised,
    DefectCleared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OamEvent {
    pub kind: OamEventKind,
    pub ma: MaId,
    pub mep: u16,
    pub peer: u16,
    pub t: SimTime,
}

impl fmt::Display for OamEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            OamEventKind::DefectRaised => "defect-raised",
            OamEventKind::DefectCleared => "defect-cleared",
        };
        write!(
            f,
            "OAM {kind} ma={} mep={} peer={} t={}",
            self.ma, self.mep, self.peer, self.t
        )
    }
}

#[derive(Debug, Clone)]
pub struct Mep {
    pub ma: MaId,
    pub mep_id: u16,
    pub port: PortId,
    pub vid: Vid,
    pub seq: u32,
    pub last_rx: BTreeMap<u16, SimTime>,
    pub defect: BTreeMap<u16, bool>,
    pub emitted: u64,
    pub received: u64,
    pub mismatches: u64,
}

impl Mep {
    fn new(ma: MaId, cfg: &MepConfig, peers: impl Iterator<Item = u16>, now: SimTime) -> Self {
        let peers: Vec<u16> = peers.filter(|p| *p != cfg.mep_id).collect();
        Mep {
            ma,
            mep_id: cfg.mep_id,
            port: cfg.port,
            vid: cfg.vid,
            seq: 0,
            last_rx: peers.iter().map(|p| (*p, now)).collect(),
            defect: peers.iter().map(|p| (*p, false)).collect(),
            emitted: 0,
            received: 0,
            mismatches: 0,
        }
    }

    pub fn mac(&self) -> MacAddress {
        MacAddress::new(0x0a00_0000_0000 | (u64::from(self.ma) << 16) | u64::from(self.mep_id))
    }

    /// Builds the next CCM; the caller injects it at the MEP's port.
    pub fn ccm_tick(&mut self) -> Frame {
        self.seq += 1;
        self.emitted += 1;
        let ccm = Ccm {
            ma: self.ma,
            mep: self.mep_id,
            seq: self.seq,
        };
        Frame::new(CFM_GROUP_MAC, self.mac(), ccm.payload())
            .push_tag(VlanTag::new(crate::frames::TagKind::S, self.vid).with_pcp(CCM_PCP))
            .expect("untagged frame accepts a tag")
    }

    pub fn ccm_receive(&mut self, ccm: &Ccm, now: SimTime) -> Result<Option<OamEvent>, OamError> {
        if ccm.ma != self.ma {
            self.mismatches += 1;
            return Err(OamError::MaMismatch {
                expected: self.ma,
                got: ccm.ma,
            });
        }
        if ccm.mep == self.mep_id || !self.last_rx.contains_key(&ccm.mep) {
            return Ok(None);
        }
        self.received += 1;
        self.last_rx.insert(ccm.mep, now);
        let was = self.defect.insert(ccm.mep, false).unwrap_or(false);
        Ok(was.then_some(OamEvent {
            kind: OamEventKind::DefectCleared,
            ma: self.ma,
            mep: self.mep_id,
            peer: ccm.mep,
            t: now,
        }))
    }

    /// Raises a defect for every peer silent for more than three intervals.
    pub fn defect_scan(&mut self, interval: SimTime, now: SimTime) -> Vec<OamEvent> {
        let limit = SimTime::from_nanos(interval.as_nanos() * LOSS_THRESHOLD);
        let mut events = Vec::new();
        for (peer, last) in &self.last_rx {
            let flag = self.defect.get_mut(peer).expect("same keys");
            if !*flag && now.saturating_sub(*last) > limit {
                *flag = true;
                events.push(OamEvent {
                    kind: OamEventKind::DefectRaised,
                    ma: self.ma,
                    mep: self.mep_id,
                    peer: *peer,
                    t: now,
                });
            }
        }
        events
    }

    /// Earliest instant at which a scan could raise a new defect.
    pub fn next_deadline(&self, interval: SimTime) -> Option<SimTime> {
        let limit = SimTime::from_nanos(interval.as_nanos() * LOSS_THRESHOLD + 1);
        self.last_rx
            .iter()
            .filter(|(p, _)| !self.defect[*p])
            .map(|(_, t)| *t + limit)
            .min()
    }

    pub fn has_defect(&self) -> bool {
        self.defect.values().any(|d| *d)
    }
}

#[derive(Debug, Clone)]
pub struct MaintenanceAssociation {
    pub id: MaId,
    pub config: MaConfig,
    pub meps: Vec<Mep>,
}

impl MaintenanceAssociation {
    pub fn new(id: MaId, config: MaConfig, now: SimTime) -> Result<Self, OamError> {
        if config.meps.len() < 2 {
            return Err(OamError::TooFewMeps);
        }
        if config.interval == SimTime::ZERO {
            return Err(OamError::ZeroInterval);
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &config.meps {
            if !ids.insert(m.mep_id) {
                return Err(OamError::DuplicateMepId(m.mep_id));
            }
        }
        let meps = config
            .meps
            .iter()
            .map(|m| Mep::new(id, m, ids.iter().copied(), now))
            .collect();
        Ok(MaintenanceAssociation { id, config, meps })
    }

    /// True while any MEP reports any defect.
    pub fn defective(&self) -> bool {
        self.meps.iter().any(Mep::has_defect)
    }
}
