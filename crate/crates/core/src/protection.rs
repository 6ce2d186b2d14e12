// SPDX-License-Identifier: Apache-2.0

//! 1:1 linear protection for point-to-point explicit-path services.

use std::collections::BTreeSet;
use std::fmt;

use crate::frames::Vid;
use crate::ids::{BridgeId, PortId, SimTime};
use crate::oam::MaId;
use crate::topology::LinkKey;

pub const DEFAULT_WTR: SimTime = SimTime::from_secs(5);

pub type GroupId = u32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtectionError {
    #[error("working and protection paths share links {0:?}")]
    PathsNotDisjoint(Vec<LinkKey>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProtState {
    WorkingActive,
    ProtectionActive,
    WaitToRestore,
}

impl ProtState {
    pub const ALL: [ProtState; 3] = [
        ProtState::WorkingActive,
        ProtState::ProtectionActive,
        ProtState::WaitToRestore,
    ];
}

impl fmt::Display for ProtState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtState::WorkingActive => "WorkingActive",
            ProtState::ProtectionActive => "ProtectionActive",
            ProtState::WaitToRestore => "WaitToRestore",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProtEvent {
    SfWorking,
    SfProtection,
    ClearWorking,
    WtrExpired,
}

impl ProtEvent {
    pub const ALL: [ProtEvent; 4] = [
        ProtEvent::SfWorking,
        ProtEvent::SfProtection,
        ProtEvent::ClearWorking,
        ProtEvent::WtrExpired,
    ];
}

impl fmt::Display for ProtEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtEvent::SfWorking => "SF_Working",
            ProtEvent::SfProtection => "SF_Protection",
            ProtEvent::ClearWorking => "Clear_Working",
            ProtEvent::WtrExpired => "WtrExpired",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Selector {
    Working,
    Protection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timer {
    Keep,
    Start,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transition {
    pub next: ProtState,
    /// Set when traffic must move to another path.
    pub switch_to: Option<Selector>,
    pub timer: Timer,
    /// Signal fail with nothing left to switch to.
    pub alarm: bool,
}

/// The transition table. Pairs not listed are explicit no-ops.
pub fn transition(state: ProtState, event: ProtEvent, revertive: bool) -> Transition {
    use ProtEvent::*;
    use ProtState::*;
    let stay = Transition {
        next: state,
        switch_to: None,
        timer: Timer::Keep,
        alarm: false,
    };
    match (state, event) {
        (WorkingActive, SfWorking) => Transition {
            next: ProtectionActive,
            switch_to: Some(Selector::Protection),
            ..stay
        },
        (ProtectionActive, ClearWorking) if revertive => Transition {
            next: WaitToRestore,
            timer: Timer::Start,
            ..stay
        },
        (WaitToRestore, WtrExpired) => Transition {
            next: WorkingActive,
            switch_to: Some(Selector::Working),
            ..stay
        },
        (WaitToRestore, SfWorking) => Transition {
            next: ProtectionActive,
            timer: Timer::Cancel,
            ..stay
        },
        (ProtectionActive, SfProtection) => Transition { alarm: true, ..stay },
        _ => stay,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathInfo {
    pub bridges: Vec<BridgeId>,
    pub links: Vec<LinkKey>,
    pub bvid: Vid,
    pub ma: Option<MaId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupConfig {
    pub service: String,
    /// Both edge attachment points with their customer VID.
    pub endpoints: [(PortId, Vid); 2],
    pub working: PathInfo,
    pub protection: PathInfo,
    pub revertive: bool,
    pub wtr: SimTime,
}

pub fn check_disjoint(a: &[LinkKey], b: &[LinkKey]) -> Result<(), ProtectionError> {
    let a: BTreeSet<_> = a.iter().collect();
    let shared: Vec<LinkKey> = b.iter().filter(|k| a.contains(k)).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(ProtectionError::PathsNotDisjoint(shared))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtRecord {
    pub group: GroupId,
    pub event: ProtEvent,
    pub from: ProtState,
    pub to: ProtState,
    pub t: SimTime,
}

impl fmt::Display for ProtRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PROT group={} event={} state={}->{} t={}",
            self.group, self.event, self.from, self.to, self.t
        )
    }
}

#[derive(Debug, Clone)]
pub struct ProtectionGroup {
    pub id: GroupId,
    pub config: GroupConfig,
    pub state: ProtState,
    pub wtr_deadline: Option<SimTime>,
    pub alarms: u64,
}

impl ProtectionGroup {
    pub fn new(id: GroupId, config: GroupConfig) -> Result<Self, ProtectionError> {
        check_disjoint(&config.working.links, &config.protection.links)?;
        Ok(ProtectionGroup {
            id,
            config,
            state: ProtState::WorkingActive,
            wtr_deadline: None,
            alarms: 0,
        })
    }

    pub fn selected(&self) -> Selector {
        match self.state {
            ProtState::ProtectionActive | ProtState::WaitToRestore => Selector::Protection,
            ProtState::WorkingActive => Selector::Working,
        }
    }

    pub fn active_bvid(&self) -> Vid {
        match self.selected() {
            Selector::Working => self.config.working.bvid,
            Selector::Protection => self.config.protection.bvid,
        }
    }

    /// Applies one event; the caller performs the selector swap and arms a
    /// timer at `wtr_deadline` when one is set.
    pub fn on_event(&mut self, event: ProtEvent, now: SimTime) -> (Transition, ProtRecord) {
        let tr = transition(self.state, event, self.config.revertive);
        let record = ProtRecord {
            group: self.id,
            event,
            from: self.state,
            to: tr.next,
            t: now,
        };
        match tr.timer {
            Timer::Start => self.wtr_deadline = Some(now + self.config.wtr),
            Timer::Cancel => self.wtr_deadline = None,
            Timer::Keep => {}
        }
        if tr.next == ProtState::WorkingActive {
            self.wtr_deadline = None;
        }
        if tr.alarm {
            self.alarms += 1;
        }
        self.state = tr.next;
        (tr, record)
    }
}
