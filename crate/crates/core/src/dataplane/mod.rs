// SPDX-License-Identifier: Apache-2.0

//! Per-bridge data plane: ingress action set, relay, egress action set.
//!
//! Every bridge keeps one FID per VLAN. Each FID is owned by exactly one
//! control plane, and every write to it goes through an owner check. Frames
//! move through three stages:
//!
//! * ingress: classify, VID translation, ingress filtering, PBB
//!   encapsulation (optionally steered by edge flow rules), metering
//! * relay: FDB lookup on (VID, destination), unknown-destination policy,
//!   local I-SID termination at edge ports
//! * egress: egress filtering, PBB decapsulation, VID translation, queue
//!   selection by PCP

mod fdb;
mod meter;
mod queue;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use fdb::{Fdb, FdbEntry, Fid, Origin};
pub use meter::{MeterConfig, TokenBucket};
pub use queue::{EgressQueues, NUM_QUEUES};

use crate::flowmap::{flow_hash, FlowAction, FlowTable};
use crate::frames::{backbone_group_mac, encoded_len, Frame, ITag, Isid, MacAddress, TagKind, Vid, VlanTag};
use crate::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};

/// Default aging time for learned entries.
pub const DEFAULT_AGING_TIME: SimTime = SimTime::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataplaneError {
    #[error("ownership violation: {actor} may not write {what} owned by {owner}")]
    OwnershipViolation {
        actor: Actor,
        owner: ControlPlane,
        what: String,
    },
    #[error("unknown port {0}")]
    UnknownPort(PortId),
    #[error("vid {0} is not allocated on this bridge")]
    UnknownVid(Vid),
    #[error("unknown fid {0}")]
    UnknownFid(u16),
    #[error("translation table maps two vids onto {0}")]
    TranslationNotInjective(Vid),
}

/// How the B-DA of an encapsulated frame is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdaPolicy {
    /// A remote edge bridge's backbone address.
    Unicast(MacAddress),
    /// The I-SID group address: per-source on SPB B-VIDs, shared otherwise.
    Group,
}

/// Edge association: customer VID -> I-SID -> B-VID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncapParams {
    pub isid: Isid,
    pub bvid: Vid,
    pub bda: BdaPolicy,
    /// Additional B-VIDs on which this I-SID is accepted for local delivery.
    pub rx_bvids: BTreeSet<Vid>,
}

impl EncapParams {
    pub fn new(isid: Isid, bvid: Vid, bda: BdaPolicy) -> Self {
        EncapParams {
            isid,
            bvid,
            bda,
            rx_bvids: BTreeSet::new(),
        }
    }

    fn accepts(&self, isid: Isid, bvid: Vid) -> bool {
        self.isid == isid && (self.bvid == bvid || self.rx_bvids.contains(&bvid))
    }
}

#[derive(Debug, Clone)]
pub struct PortConfig {
    pub vlan_membership: BTreeSet<Vid>,
    pub ingress_filtering: bool,
    pub egress_filtering: bool,
    /// Classification for untagged frames.
    pub pvid: Vid,
    pub default_pcp: u8,
    pub ingress_vid_translation: BTreeMap<Vid, Vid>,
    pub egress_vid_translation: BTreeMap<Vid, Vid>,
    /// Keyed by the customer VID seen after ingress translation.
    pub encap_rules: BTreeMap<Vid, EncapParams>,
    pub decap_rule: bool,
    pub flow_rules: FlowTable,
    pub meter: Option<MeterConfig>,
    pub learning_enabled: bool,
    pub admin_up: bool,
}

impl Default for PortConfig {
    fn default() -> Self {
        PortConfig {
            vlan_membership: BTreeSet::new(),
            ingress_filtering: true,
            egress_filtering: true,
            pvid: Vid::service(1).expect("1 is a service vid"),
            default_pcp: 0,
            ingress_vid_translation: BTreeMap::new(),
            egress_vid_translation: BTreeMap::new(),
            encap_rules: BTreeMap::new(),
            decap_rule: false,
            flow_rules: FlowTable::new(),
            meter: None,
            learning_enabled: true,
            admin_up: true,
        }
    }
}

impl PortConfig {
    fn check_translation(table: &BTreeMap<Vid, Vid>) -> Result<(), DataplaneError> {
        let mut seen = BTreeSet::new();
        for to in table.values() {
            if !seen.insert(*to) {
                return Err(DataplaneError::TranslationNotInjective(*to));
            }
        }
        Ok(())
    }

    /// Checks port-level invariants.
    pub fn validate(&self) -> Result<(), DataplaneError> {
        Self::check_translation(&self.ingress_vid_translation)?;
        Self::check_translation(&self.egress_vid_translation)
    }

    fn dump(&self) -> String {
        let vids = |s: &BTreeSet<Vid>| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let table = |t: &BTreeMap<Vid, Vid>| t.iter().map(|(a, b)| format!("{a}>{b}")).collect::<Vec<_>>().join(",");
        let encap = self
            .encap_rules
            .iter()
            .map(|(v, p)| {
                let bda = match p.bda {
                    BdaPolicy::Unicast(m) => m.to_string(),
                    BdaPolicy::Group => "group".into(),
                };
                format!("{v}>{}/{}/{bda}/{}", p.isid, p.bvid, vids(&p.rx_bvids))
            })
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "members={} ifilter={} efilter={} pvid={} pcp={} itrans={} etrans={} encap={} decap={} flows={} meter={} learn={} up={}",
            vids(&self.vlan_membership),
            self.ingress_filtering,
            self.egress_filtering,
            self.pvid,
            self.default_pcp,
            table(&self.ingress_vid_translation),
            table(&self.egress_vid_translation),
            encap,
            self.decap_rule,
            self.flow_rules.rules().len(),
            self.meter.map_or("none".into(), |m| format!("{}/{}", m.rate, m.burst)),
            self.learning_enabled,
            self.admin_up,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnknownPolicy {
    Flood,
    Drop,
}

impl UnknownPolicy {
    /// SDN VLANs drop unknown destinations; distributed control floods.
    pub fn default_for(owner: ControlPlane) -> Self {
        match owner {
            ControlPlane::Spb => UnknownPolicy::Flood,
            ControlPlane::ExternalAgent => UnknownPolicy::Drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlanState {
    pub fid: u16,
    pub unknown: UnknownPolicy,
    /// Ports of the VLAN's active tree; flooding is confined to these when set.
    pub flood_ports: Option<BTreeSet<PortId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    PortDown,
    IngressFiltered,
    MeterExceeded,
    EncapFailed,
    EgressFiltered,
    NoEgress,
    LinkDown,
    HopLimit,
    HostFiltered,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::PortDown => "PortDown",
            DropReason::IngressFiltered => "IngressFiltered",
            DropReason::MeterExceeded => "MeterExceeded",
            DropReason::EncapFailed => "EncapFailed",
            DropReason::EgressFiltered => "EgressFiltered",
            DropReason::NoEgress => "NoEgress",
            DropReason::LinkDown => "LinkDown",
            DropReason::HopLimit => "HopLimit",
            DropReason::HostFiltered => "HostFiltered",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngressOutcome {
    Drop(DropReason),
    Admitted { frame: Frame, vid: Vid },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EgressOutcome {
    Drop(DropReason),
    Transmit { frame: Frame, queue: u8 },
}

/// Which header fields relay and edge processing consulted; used to show
/// that core bridges never look below the backbone header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InspectionCounters {
    /// Reads of the outer header (DA, outer VID, I-SID).
    pub outer: u64,
    /// Reads of any field of an encapsulated customer frame, or flow
    /// classification of customer payload.
    pub inner: u64,
}

#[derive(Debug, Clone)]
pub struct BridgeState {
    pub id: BridgeId,
    /// Backbone MAC address of the bridge.
    pub bmac: MacAddress,
    ports: BTreeMap<PortId, PortConfig>,
    meters: BTreeMap<PortId, TokenBucket>,
    fids: BTreeMap<u16, Fid>,
    fdbs: BTreeMap<u16, Fdb>,
    vlans: BTreeMap<Vid, VlanState>,
    pub aging_time: SimTime,
    ownership_violations: u64,
    writes: BTreeMap<Actor, u64>,
    outer_reads: Cell<u64>,
    inner_reads: Cell<u64>,
}

impl BridgeState {
    pub fn new(id: BridgeId, bmac: MacAddress) -> Self {
        BridgeState {
            id,
            bmac,
            ports: BTreeMap::new(),
            meters: BTreeMap::new(),
            fids: BTreeMap::new(),
            fdbs: BTreeMap::new(),
            vlans: BTreeMap::new(),
            aging_time: DEFAULT_AGING_TIME,
            ownership_violations: 0,
            writes: BTreeMap::new(),
            outer_reads: Cell::new(0),
            inner_reads: Cell::new(0),
        }
    }

    fn own_port(&self, port: PortId) -> Result<(), DataplaneError> {
        if port.bridge != self.id || !self.ports.contains_key(&port) {
            return Err(DataplaneError::UnknownPort(port));
        }
        Ok(())
    }

    pub fn add_port(&mut self, index: u16, config: PortConfig) -> Result<PortId, DataplaneError> {
        config.validate()?;
        let id = PortId { bridge: self.id, index };
        if let Some(m) = config.meter {
            self.meters.insert(id, TokenBucket::new(m));
        }
        self.ports.insert(id, config);
        Ok(id)
    }

    pub fn port(&self, port: PortId) -> Option<&PortConfig> {
        self.ports.get(&port)
    }

    pub fn ports(&self) -> impl Iterator<Item = (&PortId, &PortConfig)> {
        self.ports.iter()
    }

    /// Replaces a port's configuration. The caller is responsible for
    /// ownership checks on VLAN membership changes; see
    /// [`BridgeState::set_vlan_members`] for the checked path.
    pub fn update_port(
        &mut self,
        port: PortId,
        actor: Actor,
        f: impl FnOnce(&mut PortConfig),
    ) -> Result<(), DataplaneError> {
        self.own_port(port)?;
        let cfg = self.ports.get_mut(&port).expect("checked");
        let mut next = cfg.clone();
        f(&mut next);
        next.validate()?;
        let meter_changed = next.meter != cfg.meter;
        *cfg = next;
        if meter_changed {
            match cfg.meter {
                Some(m) => {
                    self.meters.insert(port, TokenBucket::new(m));
                }
                None => {
                    self.meters.remove(&port);
                }
            }
        }
        *self.writes.entry(actor).or_default() += 1;
        Ok(())
    }

    pub fn set_admin(&mut self, port: PortId, up: bool) -> Result<(), DataplaneError> {
        self.own_port(port)?;
        self.ports.get_mut(&port).expect("checked").admin_up = up;
        Ok(())
    }

    // ----- VLAN / FID ownership -------------------------------------------

    /// Binds `vid` to its own FID owned by `owner`. A change of owner wipes
    /// the FID, so entries of the previous plane cannot survive.
    pub fn assign_vlan(&mut self, vid: Vid, owner: ControlPlane) {
        let fid_id = vid.value();
        let fid = self.fids.entry(fid_id).or_insert_with(|| Fid {
            id: fid_id,
            owner,
            vids: BTreeSet::new(),
        });
        if fid.owner != owner {
            fid.owner = owner;
            self.fdbs.entry(fid_id).or_default().clear();
            for cfg in self.ports.values_mut() {
                cfg.vlan_membership.remove(&vid);
            }
        }
        fid.vids.insert(vid);
        self.fdbs.entry(fid_id).or_default();
        self.vlans.insert(
            vid,
            VlanState {
                fid: fid_id,
                unknown: UnknownPolicy::default_for(owner),
                flood_ports: None,
            },
        );
    }

    pub fn vlan(&self, vid: Vid) -> Option<&VlanState> {
        self.vlans.get(&vid)
    }

    pub fn vlans(&self) -> impl Iterator<Item = (&Vid, &VlanState)> {
        self.vlans.iter()
    }

    pub fn fid_of(&self, vid: Vid) -> Option<&Fid> {
        self.vlans.get(&vid).and_then(|v| self.fids.get(&v.fid))
    }

    pub fn fid(&self, id: u16) -> Option<&Fid> {
        self.fids.get(&id)
    }

    pub fn fids(&self) -> impl Iterator<Item = &Fid> {
        self.fids.values()
    }

    pub fn owner_of(&self, vid: Vid) -> Option<ControlPlane> {
        self.fid_of(vid).map(|f| f.owner)
    }

    fn check_owner(&mut self, vid: Vid, actor: Actor, what: &str) -> Result<(), DataplaneError> {
        let owner = self.owner_of(vid).ok_or(DataplaneError::UnknownVid(vid))?;
        if !actor.may_write(owner) {
            self.ownership_violations += 1;
            return Err(DataplaneError::OwnershipViolation {
                actor,
                owner,
                what: format!("{what} of vid {vid}"),
            });
        }
        Ok(())
    }

    /// Member ports of `vid` on this bridge.
    pub fn members(&self, vid: Vid) -> BTreeSet<PortId> {
        self.ports
            .iter()
            .filter(|(_, c)| c.vlan_membership.contains(&vid))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Atomically replaces the member set of `vid` on this bridge.
    pub fn set_vlan_members(&mut self, vid: Vid, ports: &BTreeSet<PortId>, actor: Actor) -> Result<(), DataplaneError> {
        self.check_owner(vid, actor, "VLAN membership")?;
        if let Some(p) = ports.iter().find(|p| self.own_port(**p).is_err()) {
            return Err(DataplaneError::UnknownPort(*p));
        }
        for (p, cfg) in self.ports.iter_mut() {
            if ports.contains(p) {
                cfg.vlan_membership.insert(vid);
            } else {
                cfg.vlan_membership.remove(&vid);
            }
        }
        *self.writes.entry(actor).or_default() += 1;
        Ok(())
    }

    pub fn set_flood_ports(
        &mut self,
        vid: Vid,
        ports: Option<BTreeSet<PortId>>,
        actor: Actor,
    ) -> Result<(), DataplaneError> {
        self.check_owner(vid, actor, "active tree")?;
        self.vlans.get_mut(&vid).expect("checked").flood_ports = ports;
        *self.writes.entry(actor).or_default() += 1;
        Ok(())
    }

    pub fn set_unknown_policy(&mut self, vid: Vid, policy: UnknownPolicy, actor: Actor) -> Result<(), DataplaneError> {
        self.check_owner(vid, actor, "unknown-destination policy")?;
        self.vlans.get_mut(&vid).expect("checked").unknown = policy;
        Ok(())
    }

    // ----- FDB --------------------------------------------------------------

    pub fn fdb(&self, fid: u16) -> Option<&Fdb> {
        self.fdbs.get(&fid)
    }

    fn check_fdb_write(&mut self, fid: u16, origin: Option<Origin>, actor: Actor) -> Result<(), DataplaneError> {
        let owner = self.fids.get(&fid).ok_or(DataplaneError::UnknownFid(fid))?.owner;
        let origin_ok = match (actor, origin) {
            (_, None) => true,
            (Actor::Management, Some(o)) => o == Origin::Static,
            (Actor::SpbPlane, Some(o)) => o == Origin::Spb,
            (Actor::SdnController, Some(o)) => o == Origin::Sdn,
        };
        if !actor.may_write(owner) || !origin_ok {
            self.ownership_violations += 1;
            return Err(DataplaneError::OwnershipViolation {
                actor,
                owner,
                what: format!("fdb entry in fid {fid}"),
            });
        }
        Ok(())
    }

    /// Owner-checked FDB insert or replace.
    pub fn fdb_write(&mut self, fid: u16, entry: FdbEntry, actor: Actor) -> Result<(), DataplaneError> {
        self.check_fdb_write(fid, Some(entry.origin), actor)?;
        self.fdbs.entry(fid).or_default().insert(entry);
        *self.writes.entry(actor).or_default() += 1;
        Ok(())
    }

    /// Owner-checked removal; returns the removed entry.
    pub fn fdb_remove(&mut self, fid: u16, mac: MacAddress, actor: Actor) -> Result<Option<FdbEntry>, DataplaneError> {
        self.check_fdb_write(fid, None, actor)?;
        let removed = self.fdbs.get_mut(&fid).and_then(|f| f.remove(&mac));
        if removed.is_some() {
            *self.writes.entry(actor).or_default() += 1;
        }
        Ok(removed)
    }

    /// Drops every entry of `origin` in `fid`, owner-checked.
    pub fn fdb_flush(&mut self, fid: u16, origin: Origin, actor: Actor) -> Result<usize, DataplaneError> {
        self.check_fdb_write(fid, Some(origin), actor)?;
        let fdb = self.fdbs.entry(fid).or_default();
        let before = fdb.len();
        fdb.retain(|e| e.origin != origin);
        Ok(before - fdb.len())
    }

    pub fn ownership_violations(&self) -> u64 {
        self.ownership_violations
    }

    pub fn writes_by(&self, actor: Actor) -> u64 {
        self.writes.get(&actor).copied().unwrap_or(0)
    }

    pub fn inspection(&self) -> InspectionCounters {
        InspectionCounters {
            outer: self.outer_reads.get(),
            inner: self.inner_reads.get(),
        }
    }

    fn read_outer(&self) {
        self.outer_reads.set(self.outer_reads.get() + 1);
    }

    fn read_inner(&self) {
        self.inner_reads.set(self.inner_reads.get() + 1);
    }

    /// No entry contradicts its FID owner.
    pub fn ownership_consistent(&self) -> bool {
        self.fdbs.iter().all(|(id, fdb)| {
            let owner = self.fids.get(id).map(|f| f.owner);
            fdb.iter().all(|e| owner.is_some_and(|o| e.origin.allowed_in(o)))
        })
    }

    // ----- pipeline -----------------------------------------------------------

    /// Ingress action set.
    pub fn ingress_process(&mut self, port: PortId, frame: Frame, now: SimTime) -> IngressOutcome {
        self.ingress_with(port, frame, now, None)
    }

    /// Ingress with the B-VID of the port's encapsulation forced to `bvid`.
    /// Continuity checks of one path of a protected service use this so
    /// they stay on their path whatever the selector state.
    pub fn ingress_with(
        &mut self,
        port: PortId,
        frame: Frame,
        now: SimTime,
        bvid_override: Option<Vid>,
    ) -> IngressOutcome {
        let Some(cfg) = self.ports.get(&port) else {
            return IngressOutcome::Drop(DropReason::PortDown);
        };
        if !cfg.admin_up {
            return IngressOutcome::Drop(DropReason::PortDown);
        }

        // classify
        let mut frame = if frame.tags.is_empty() {
            match frame.push_tag(VlanTag::new(TagKind::C, cfg.pvid).with_pcp(cfg.default_pcp)) {
                Ok(f) => f,
                Err(_) => return IngressOutcome::Drop(DropReason::EncapFailed),
            }
        } else {
            frame
        };

        // ingress VID translation
        if !cfg.ingress_vid_translation.is_empty() {
            frame = frame
                .translate_vid(&cfg.ingress_vid_translation)
                .expect("frame is tagged");
        }
        let mut vid = frame.outer_vid().expect("frame is tagged");

        if cfg.ingress_filtering && !cfg.vlan_membership.contains(&vid) {
            return IngressOutcome::Drop(DropReason::IngressFiltered);
        }

        // encapsulation, optionally steered by flow rules
        if !frame.is_encapsulated() {
            if let Some(params) = self.select_encap(cfg, &frame, vid) {
                let params = match bvid_override {
                    Some(b) => EncapParams { bvid: b, ..params },
                    None => params,
                };
                let bda = match params.bda {
                    BdaPolicy::Unicast(m) => m,
                    BdaPolicy::Group => match self.owner_of(params.bvid) {
                        Some(ControlPlane::Spb) => backbone_group_mac(self.id.0, params.isid),
                        _ => backbone_group_mac(0, params.isid),
                    },
                };
                let pcp = frame.outer_tag().map_or(0, |t| t.pcp);
                let btag = VlanTag::new(TagKind::B, params.bvid).with_pcp(pcp);
                let mut itag = ITag::new(params.isid);
                itag.pcp = pcp;
                frame = match frame.encapsulate_pbb(bda, self.bmac, btag, itag) {
                    Ok(f) => f,
                    Err(_) => return IngressOutcome::Drop(DropReason::EncapFailed),
                };
                vid = params.bvid;
            }
        }

        // metering, on post-encapsulation bytes
        if let Some(tb) = self.meters.get_mut(&port) {
            if !tb.conform(encoded_len(&frame), now) {
                return IngressOutcome::Drop(DropReason::MeterExceeded);
            }
        }
        IngressOutcome::Admitted { frame, vid }
    }

    fn select_encap(&self, cfg: &PortConfig, frame: &Frame, vid: Vid) -> Option<EncapParams> {
        let base = cfg.encap_rules.get(&vid);
        if !cfg.flow_rules.is_empty() {
            // edge classification reads customer headers and payload
            self.read_inner();
            if let Some(rule) = cfg.flow_rules.classify(frame) {
                match rule.action {
                    FlowAction::MapToIsid { isid, bvid } => {
                        return Some(EncapParams::new(isid, bvid, BdaPolicy::Group));
                    }
                    FlowAction::MapToBvid { bvid } => {
                        if let Some(b) = base {
                            return Some(EncapParams { bvid, ..b.clone() });
                        }
                    }
                    FlowAction::MapToFlowHash => {
                        if let (Some(b), Ok(bvid)) = (base, flow_hash(frame, cfg.flow_rules.hash_range())) {
                            return Some(EncapParams { bvid, ..b.clone() });
                        }
                    }
                }
            }
        }
        base.cloned()
    }

    /// Relay (action set 2): egress candidates for an admitted frame.
    pub fn relay(&self, ingress: PortId, frame: &Frame, vid: Vid) -> BTreeSet<PortId> {
        let mut out = BTreeSet::new();
        let Some(vlan) = self.vlans.get(&vid) else {
            return out;
        };
        self.read_outer();

        let terminates_here = frame.dst == self.bmac;
        if !terminates_here {
            let members = self.members(vid);
            match self.fdbs.get(&vlan.fid).and_then(|f| f.get(&frame.dst)) {
                Some(entry) => {
                    out.extend(entry.ports.intersection(&members).copied());
                }
                None => {
                    if vlan.unknown == UnknownPolicy::Flood {
                        match &vlan.flood_ports {
                            Some(tree) => out.extend(members.intersection(tree).copied()),
                            None => out.extend(members),
                        }
                    }
                }
            }
        }

        // local I-SID termination on edge ports
        if let Some(itag) = frame.itag() {
            if terminates_here || frame.dst.is_group() {
                for (p, cfg) in &self.ports {
                    if cfg.decap_rule && cfg.encap_rules.values().any(|e| e.accepts(itag.isid, vid)) {
                        out.insert(*p);
                    }
                }
            }
        }

        out.remove(&ingress);
        out
    }

    /// Egress action set.
    pub fn egress_process(&self, port: PortId, frame: Frame, vid: Vid) -> EgressOutcome {
        let Some(cfg) = self.ports.get(&port) else {
            return EgressOutcome::Drop(DropReason::PortDown);
        };
        if !cfg.admin_up {
            return EgressOutcome::Drop(DropReason::PortDown);
        }
        let decap = cfg.decap_rule && frame.is_encapsulated();
        // filter on the VID the frame will carry on this port's wire
        let wire_vid = if decap {
            self.read_inner();
            frame.inner().and_then(Frame::outer_vid)
        } else {
            Some(vid)
        };
        if cfg.egress_filtering && !wire_vid.is_some_and(|v| cfg.vlan_membership.contains(&v)) {
            return EgressOutcome::Drop(DropReason::EgressFiltered);
        }
        let mut frame = if decap {
            frame.decapsulate_pbb().expect("checked encapsulated").inner
        } else {
            frame
        };
        if !cfg.egress_vid_translation.is_empty() && !frame.tags.is_empty() && !frame.is_encapsulated() {
            frame = frame
                .translate_vid(&cfg.egress_vid_translation)
                .expect("frame is tagged");
        }
        let queue = frame.outer_tag().map_or(cfg.default_pcp, |t| t.pcp);
        EgressOutcome::Transmit { frame, queue }
    }

    /// Source learning. Returns true if the FDB changed.
    pub fn learn(&mut self, port: PortId, frame: &Frame, vid: Vid, now: SimTime) -> bool {
        let Some(cfg) = self.ports.get(&port) else {
            return false;
        };
        if !cfg.learning_enabled || frame.src.is_group() || frame.src == self.bmac {
            return false;
        }
        let Some(fid) = self.fid_of(vid) else {
            return false;
        };
        if !fid.permits_learning() {
            return false;
        }
        let fdb = self.fdbs.entry(fid.id).or_default();
        match fdb.get(&frame.src) {
            Some(e) if e.origin != Origin::Learned => false,
            Some(e) if e.ports.len() == 1 && e.ports.contains(&port) => {
                let mut e = e.clone();
                e.last_seen = now;
                fdb.insert(e);
                false
            }
            _ => {
                let mut e = FdbEntry::new(frame.src, [port], Origin::Learned);
                e.last_seen = now;
                fdb.insert(e);
                true
            }
        }
    }

    /// Removes learned entries older than the aging time. Returns the count.
    pub fn age_fdb(&mut self, now: SimTime) -> usize {
        let aging = self.aging_time;
        let mut removed = 0;
        for fdb in self.fdbs.values_mut() {
            let before = fdb.len();
            fdb.retain(|e| e.origin != Origin::Learned || e.age(now) <= aging);
            removed += before - fdb.len();
        }
        removed
    }

    // ----- dumps ------------------------------------------------------------

    /// `fid=<n> mac=<mac> ports=<p,...> origin=<o> age=<s>`, sorted by (fid, mac).
    pub fn fdb_dump(&self, now: SimTime) -> Vec<String> {
        let mut lines = Vec::new();
        for (fid, fdb) in &self.fdbs {
            for e in fdb.iter() {
                let ports: Vec<String> = e.ports.iter().map(ToString::to_string).collect();
                lines.push(format!(
                    "fid={fid} mac={} ports={} origin={} age={}",
                    e.mac,
                    ports.join(","),
                    e.origin,
                    e.age(now)
                ));
            }
        }
        lines
    }

    /// Port configuration, one line per port.
    pub fn config_dump(&self) -> Vec<String> {
        self.ports
            .iter()
            .map(|(p, c)| format!("port {p} {}", c.dump()))
            .collect()
    }
}
