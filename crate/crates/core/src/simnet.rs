// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation core.
//!
//! Events run in `(time, seq)` order. Frames travel hop by hop through the
//! bridge pipelines; every step is written to a line-oriented trace.
//!
//! Trace line fields, in order: `t kind node port frame flow hop`, then
//! per-kind `key=value` pairs. Absent fields print as `-`. `frame` is
//! the first eight bytes of the SHA-256 of the encoded frame, in hex.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::controller::{
    program_edge, Attachment, Controller, ControllerError, PathChoice, Requirements, ServiceKind, ServiceRequest,
};
use crate::dataplane::{
    BdaPolicy, DropReason, EgressOutcome, EgressQueues, EncapParams, FdbEntry, IngressOutcome, Origin,
};
use crate::fabric::Fabric;
use crate::frames::encode;
use crate::frames::{Frame, Isid, MacAddress, TagKind, Vid, VlanTag};
use crate::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};
use crate::oam::{Ccm, MaConfig, MaId, MaintenanceAssociation, OamEvent};
use crate::protection::{GroupConfig, GroupId, ProtEvent, ProtRecord, ProtectionGroup, Selector};
use crate::spb::{Role, ServiceAttachment};
use crate::topology::{LinkKey, LinkState};

/// Frames are dropped after this many bridge hops.
pub const HOP_LIMIT: u32 = 64;

pub type FlowId = u64;

/// Stable 64-bit digest of an encoded frame.
pub fn frame_digest(frame: &Frame) -> u64 {
    let h = Sha256::digest(encode(frame));
    u64::from_be_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostConfig {
    pub name: String,
    pub port: PortId,
    pub mac: MacAddress,
    /// Tag pushed on injected frames unless the injection says otherwise.
    pub vid: Option<Vid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dest {
    Host(String),
    Mac(MacAddress),
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub host: String,
    pub dst: Dest,
    pub vid: Option<Vid>,
    pub pcp: u8,
    pub count: u32,
    pub interval: SimTime,
    pub label: Option<String>,
    /// Leading payload bytes; the flow id and padding follow.
    pub payload: Vec<u8>,
}

impl Injection {
    pub fn new(host: &str, dst: Dest) -> Self {
        Injection {
            host: host.to_string(),
            dst,
            vid: None,
            pcp: 0,
            count: 1,
            interval: SimTime::from_millis(1),
            label: None,
            payload: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Inject(Injection),
    SetLink {
        a: BridgeId,
        b: BridgeId,
        up: bool,
    },
    Setup(ServiceRequest),
    Teardown(String),
    Move {
        service: String,
        from: PortId,
        to: PortId,
        path: Option<PathChoice>,
    },
    Sync,
    Fuzz {
        ops: u32,
    },
}

#[derive(Debug, Clone)]
struct InFlight {
    frame: Frame,
    flow: FlowId,
    hop: u32,
    path: Vec<(BridgeId, PortId)>,
}

#[derive(Debug, Clone)]
enum EventKind {
    HostSend {
        host: String,
        frame: Frame,
        flow: FlowId,
    },
    Arrival {
        port: PortId,
        item: InFlight,
        bvid_override: Option<Vid>,
    },
    PortDrain(PortId),
    SpbConverge,
    CcmTick {
        ma: MaId,
        mep: usize,
    },
    DefectCheck {
        ma: MaId,
        mep: usize,
    },
    WtrExpiry(GroupId),
    AgeFdb,
    Action(Box<Action>),
}

#[derive(Debug, Clone)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Inject,
    Ingress,
    Relay,
    Transmit,
    Deliver,
    Drop(DropReason),
    Oam,
    Prot,
    Control,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::Inject => "inject",
            TraceKind::Ingress => "ingress",
            TraceKind::Relay => "relay",
            TraceKind::Transmit => "tx",
            TraceKind::Deliver => "deliver",
            TraceKind::Drop(_) => "drop",
            TraceKind::Oam => "oam",
            TraceKind::Prot => "prot",
            TraceKind::Control => "control",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: SimTime,
    pub kind: TraceKind,
    pub node: String,
    pub port: Option<PortId>,
    pub frame: Option<u64>,
    pub flow: Option<FlowId>,
    pub hop: Option<u32>,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dash = |o: Option<String>| o.unwrap_or_else(|| "-".into());
        write!(
            f,
            "t={} kind={} node={} port={} frame={} flow={} hop={}",
            self.t,
            self.kind,
            self.node,
            dash(self.port.map(|p| p.to_string())),
            dash(self.frame.map(|d| format!("{d:016x}"))),
            dash(self.flow.map(|x| x.to_string())),
            dash(self.hop.map(|x| x.to_string())),
        )?;
        if let TraceKind::Drop(r) = self.kind {
            write!(f, " reason={r}")?;
        }
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Trace output. Lines are kept only when asked for; the running digest
/// always covers every line.
#[derive(Debug, Clone)]
pub struct Trace {
    lines: Option<Vec<String>>,
    hasher: Sha256,
    count: u64,
}

impl Trace {
    fn new(keep: bool) -> Self {
        Trace {
            lines: keep.then(Vec::new),
            hasher: Sha256::new(),
            count: 0,
        }
    }

    fn push(&mut self, rec: TraceRecord) {
        let line = rec.to_string();
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(l) = &mut self.lines {
            l.push(line);
        }
    }

    pub fn lines(&self) -> Option<&[String]> {
        self.lines.as_deref()
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Hex SHA-256 over every line written so far.
    pub fn digest(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Data,
    Oam(MaId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowStats {
    pub kind: FlowKind,
    pub label: Option<String>,
    pub src: PortId,
    /// Customer VID at injection.
    pub vid: Option<Vid>,
    pub injected: SimTime,
    /// 1 + sum of (fanout - 1) over every relay decision.
    pub branches: u64,
    pub delivered: u64,
    pub consumed: u64,
    pub dropped: BTreeMap<DropReason, u64>,
}

impl FlowStats {
    pub fn terminals(&self) -> u64 {
        self.delivered + self.consumed + self.dropped.values().sum::<u64>()
    }
}

/// A frame reaching an access port's wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub flow: FlowId,
    pub t: SimTime,
    pub port: PortId,
    pub host: Option<String>,
    /// Customer VID on the wire.
    pub vid: Option<Vid>,
    /// The host took the frame (address match).
    pub accepted: bool,
    /// Consumed by a MEP instead of reaching a host.
    pub oam: Option<MaId>,
    /// (bridge, ingress port) per hop.
    pub path: Vec<(BridgeId, PortId)>,
}

impl Arrival {
    pub fn bridges(&self) -> Vec<BridgeId> {
        self.path.iter().map(|(b, _)| *b).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub ops: u64,
    pub refused: u64,
    pub accepted: u64,
    /// Outcome disagreed with the ownership rule.
    pub unexpected: u64,
    /// Checks after which some FDB held an entry its owner forbids.
    pub forbidden_entries: u64,
    /// SPB convergences that changed an Ext-MSTI FDB.
    pub spb_touched_ext: u64,
    /// Controller operations that changed an SPB FDB.
    pub controller_touched_spb: u64,
}

#[derive(Debug, Clone)]
pub struct Sim {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    pub fabric: Fabric,
    pub controller: Controller,
    hosts: BTreeMap<String, HostConfig>,
    host_at: BTreeMap<PortId, String>,
    mas: BTreeMap<MaId, MaintenanceAssociation>,
    ma_service: BTreeMap<MaId, (String, SimTime)>,
    next_ma: MaId,
    checks: BTreeMap<(MaId, usize), SimTime>,
    groups: BTreeMap<GroupId, ProtectionGroup>,
    ma_group: BTreeMap<MaId, (GroupId, Selector)>,
    next_group: GroupId,
    port_queues: BTreeMap<PortId, EgressQueues<InFlight>>,
    drain_pending: BTreeSet<PortId>,
    converge_pending: bool,
    age_pending: bool,
    flows: BTreeMap<FlowId, FlowStats>,
    next_flow: FlowId,
    arrivals: Vec<Arrival>,
    service_ports: BTreeMap<String, BTreeSet<(PortId, Vid)>>,
    oam_log: Vec<OamEvent>,
    prot_log: Vec<ProtRecord>,
    errors: Vec<(SimTime, String)>,
    fuzz: Vec<FuzzReport>,
    rng: ChaCha8Rng,
    executed: u64,
    trace: Trace,
}

impl Sim {
    pub fn new(fabric: Fabric, controller: Controller, seed: u64, keep_trace: bool) -> Self {
        Sim {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            fabric,
            controller,
            hosts: BTreeMap::new(),
            host_at: BTreeMap::new(),
            mas: BTreeMap::new(),
            ma_service: BTreeMap::new(),
            next_ma: 1,
            checks: BTreeMap::new(),
            groups: BTreeMap::new(),
            ma_group: BTreeMap::new(),
            next_group: 1,
            port_queues: BTreeMap::new(),
            drain_pending: BTreeSet::new(),
            converge_pending: false,
            age_pending: false,
            flows: BTreeMap::new(),
            next_flow: 1,
            arrivals: Vec::new(),
            service_ports: BTreeMap::new(),
            oam_log: Vec::new(),
            prot_log: Vec::new(),
            errors: Vec::new(),
            fuzz: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            executed: 0,
            trace: Trace::new(keep_trace),
        }
    }

    // ----- accessors ----------------------------------------------------------

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn hosts(&self) -> &BTreeMap<String, HostConfig> {
        &self.hosts
    }

    pub fn host_at(&self, port: PortId) -> Option<&str> {
        self.host_at.get(&port).map(String::as_str)
    }

    pub fn flows(&self) -> &BTreeMap<FlowId, FlowStats> {
        &self.flows
    }

    pub fn arrivals(&self) -> &[Arrival] {
        &self.arrivals
    }

    pub fn mas(&self) -> &BTreeMap<MaId, MaintenanceAssociation> {
        &self.mas
    }

    /// Service name and CCM interval of every MA ever activated.
    pub fn ma_service(&self, ma: MaId) -> Option<(&str, SimTime)> {
        self.ma_service.get(&ma).map(|(s, i)| (s.as_str(), *i))
    }

    pub fn groups(&self) -> &BTreeMap<GroupId, ProtectionGroup> {
        &self.groups
    }

    pub fn oam_events(&self) -> &[OamEvent] {
        &self.oam_log
    }

    pub fn prot_records(&self) -> &[ProtRecord] {
        &self.prot_log
    }

    /// Failed scenario actions, with the time they ran.
    pub fn errors(&self) -> &[(SimTime, String)] {
        &self.errors
    }

    pub fn fuzz_reports(&self) -> &[FuzzReport] {
        &self.fuzz
    }

    /// Every (port, customer VID) a service has ever been attached at.
    pub fn service_ports(&self) -> &BTreeMap<String, BTreeSet<(PortId, Vid)>> {
        &self.service_ports
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    // ----- scheduling ---------------------------------------------------------

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            seq: self.seq,
            kind,
        }));
    }

    pub fn schedule_action(&mut self, at: SimTime, action: Action) {
        self.schedule(at, EventKind::Action(Box::new(action)));
    }

    /// Runs every event due at or before `until`. Returns how many ran.
    pub fn run_until(&mut self, until: SimTime) -> u64 {
        assert!(until >= self.now, "time runs forward");
        let start = self.executed;
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.time > until {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.executed += 1;
            self.dispatch(ev.kind);
        }
        self.now = until;
        self.executed - start
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::HostSend { host, frame, flow } => self.host_send(&host, frame, flow),
            EventKind::Arrival {
                port,
                item,
                bvid_override,
            } => self.arrive(port, item, bvid_override),
            EventKind::PortDrain(port) => self.drain(port),
            EventKind::SpbConverge => self.spb_converge(),
            EventKind::CcmTick { ma, mep } => self.ccm_tick(ma, mep),
            EventKind::DefectCheck { ma, mep } => self.defect_check(ma, mep),
            EventKind::WtrExpiry(g) => self.wtr_expiry(g),
            EventKind::AgeFdb => self.age_fdb(),
            EventKind::Action(a) => self.apply(*a),
        }
    }

    fn record(
        &mut self,
        kind: TraceKind,
        node: String,
        port: Option<PortId>,
        item: Option<(&Frame, FlowId, u32)>,
        detail: String,
    ) {
        let (frame, flow, hop) = match item {
            Some((f, id, hop)) => (Some(frame_digest(f)), Some(id), Some(hop)),
            None => (None, None, None),
        };
        self.trace.push(TraceRecord {
            t: self.now,
            kind,
            node,
            port,
            frame,
            flow,
            hop,
            detail,
        });
    }

    fn control(&mut self, node: &str, detail: String) {
        self.record(TraceKind::Control, node.to_string(), None, None, detail);
    }

    fn error(&mut self, what: String) {
        self.control("sim", format!("error={}", what.replace(' ', "_")));
        self.errors.push((self.now, what));
    }

    fn bridge_node(b: BridgeId) -> String {
        format!("br{b}")
    }

    // ----- hosts and frames ---------------------------------------------------

    pub fn add_host(&mut self, host: HostConfig) -> Result<(), String> {
        if !self.fabric.is_access_port(host.port) {
            return Err(format!(
                "host {} attaches to {}, which is not an access port",
                host.name, host.port
            ));
        }
        if self.host_at.contains_key(&host.port) {
            return Err(format!("access port {} already has a host", host.port));
        }
        if self.hosts.contains_key(&host.name) {
            return Err(format!("duplicate host {}", host.name));
        }
        self.host_at.insert(host.port, host.name.clone());
        self.hosts.insert(host.name.clone(), host);
        Ok(())
    }

    fn new_flow(&mut self, kind: FlowKind, label: Option<String>, src: PortId, vid: Option<Vid>) -> FlowId {
        let id = self.next_flow;
        self.next_flow += 1;
        self.flows.insert(
            id,
            FlowStats {
                kind,
                label,
                src,
                vid,
                injected: self.now,
                branches: 1,
                delivered: 0,
                consumed: 0,
                dropped: BTreeMap::new(),
            },
        );
        id
    }

    fn drop_frame(&mut self, node: String, port: Option<PortId>, item: &InFlight, reason: DropReason) {
        *self
            .flows
            .get_mut(&item.flow)
            .expect("known flow")
            .dropped
            .entry(reason)
            .or_default() += 1;
        self.record(
            TraceKind::Drop(reason),
            node,
            port,
            Some((&item.frame, item.flow, item.hop)),
            String::new(),
        );
    }

    fn inject(&mut self, sc: Injection) -> Result<(), String> {
        let host = self
            .hosts
            .get(&sc.host)
            .ok_or(format!("unknown host {}", sc.host))?
            .clone();
        let dst = match &sc.dst {
            Dest::Host(h) => self.hosts.get(h).ok_or(format!("unknown host {h}"))?.mac,
            Dest::Mac(m) => *m,
            Dest::Broadcast => MacAddress::BROADCAST,
        };
        let vid = sc.vid.or(host.vid);
        for k in 0..sc.count {
            let flow = self.new_flow(FlowKind::Data, sc.label.clone(), host.port, vid);
            let mut payload = sc.payload.clone();
            payload.extend_from_slice(&flow.to_be_bytes());
            payload.resize(payload.len().max(46), 0);
            let mut frame = Frame::new(dst, host.mac, payload);
            if let Some(v) = vid {
                frame = frame
                    .push_tag(VlanTag::new(TagKind::S, v).with_pcp(sc.pcp))
                    .map_err(|e| e.to_string())?;
            }
            let at = self.now + SimTime::from_nanos(sc.interval.as_nanos() * u64::from(k));
            self.flows.get_mut(&flow).expect("new").injected = at;
            self.schedule(
                at,
                EventKind::HostSend {
                    host: host.name.clone(),
                    frame,
                    flow,
                },
            );
        }
        Ok(())
    }

    fn host_send(&mut self, host: &str, frame: Frame, flow: FlowId) {
        let port = self.hosts[host].port;
        self.record(
            TraceKind::Inject,
            format!("host:{host}"),
            Some(port),
            Some((&frame, flow, 0)),
            String::new(),
        );
        let item = InFlight {
            frame,
            flow,
            hop: 0,
            path: Vec::new(),
        };
        self.arrive(port, item, None);
    }

    fn arrive(&mut self, port: PortId, mut item: InFlight, bvid_override: Option<Vid>) {
        let node = Self::bridge_node(port.bridge);
        if item.hop >= HOP_LIMIT {
            self.drop_frame(node, Some(port), &item, DropReason::HopLimit);
            return;
        }
        item.path.push((port.bridge, port));
        let now = self.now;
        let Ok(bridge) = self.fabric.bridge_mut(port.bridge) else {
            self.drop_frame(node, Some(port), &item, DropReason::PortDown);
            return;
        };
        let outcome = bridge.ingress_with(port, item.frame.clone(), now, bvid_override);
        let (frame, vid) = match outcome {
            IngressOutcome::Drop(r) => {
                self.drop_frame(node, Some(port), &item, r);
                return;
            }
            IngressOutcome::Admitted { frame, vid } => (frame, vid),
        };
        let learned = bridge.learn(port, &frame, vid, now);
        let out = bridge.relay(port, &frame, vid);
        let mut egress = Vec::with_capacity(out.len());
        for q in &out {
            egress.push((*q, bridge.egress_process(*q, frame.clone(), vid)));
        }
        item.frame = frame;
        self.record(
            TraceKind::Ingress,
            node.clone(),
            Some(port),
            Some((&item.frame, item.flow, item.hop)),
            format!("vid={vid}"),
        );
        if learned && !self.age_pending {
            self.age_pending = true;
            let at = now + self.fabric.bridge(port.bridge).expect("exists").aging_time;
            self.schedule(at, EventKind::AgeFdb);
        }
        if out.is_empty() {
            self.drop_frame(node, Some(port), &item, DropReason::NoEgress);
            return;
        }
        self.flows.get_mut(&item.flow).expect("known flow").branches += out.len() as u64 - 1;
        let outs: Vec<String> = out.iter().map(ToString::to_string).collect();
        self.record(
            TraceKind::Relay,
            node.clone(),
            Some(port),
            Some((&item.frame, item.flow, item.hop)),
            format!("out={}", outs.join(",")),
        );
        for (q, res) in egress {
            match res {
                EgressOutcome::Drop(r) => self.drop_frame(node.clone(), Some(q), &item, r),
                EgressOutcome::Transmit { frame, queue } => {
                    let branch = InFlight {
                        frame,
                        flow: item.flow,
                        hop: item.hop,
                        path: item.path.clone(),
                    };
                    self.port_queues.entry(q).or_default().enqueue(queue, branch);
                    if self.drain_pending.insert(q) {
                        self.schedule(now, EventKind::PortDrain(q));
                    }
                }
            }
        }
    }

    fn drain(&mut self, port: PortId) {
        self.drain_pending.remove(&port);
        let items = self
            .port_queues
            .get_mut(&port)
            .map(EgressQueues::drain)
            .unwrap_or_default();
        let node = Self::bridge_node(port.bridge);
        for item in items {
            if let Some(link) = self.fabric.phys.link_at(port).cloned() {
                if link.state == LinkState::Down {
                    self.drop_frame(node.clone(), Some(port), &item, DropReason::LinkDown);
                    continue;
                }
                let far = link.key.far_end(port).expect("port is on its link");
                self.record(
                    TraceKind::Transmit,
                    node.clone(),
                    Some(port),
                    Some((&item.frame, item.flow, item.hop)),
                    format!("link={}", link.key),
                );
                let next = InFlight {
                    hop: item.hop + 1,
                    ..item
                };
                self.schedule(
                    self.now + link.delay,
                    EventKind::Arrival {
                        port: far,
                        item: next,
                        bvid_override: None,
                    },
                );
            } else {
                self.edge_out(port, item);
            }
        }
    }

    /// A frame leaving an access port: MEP, host, or nowhere.
    fn edge_out(&mut self, port: PortId, item: InFlight) {
        let host = self.host_at.get(&port).cloned();
        let vid = item.frame.outer_vid();
        if let Some(ccm) = Ccm::parse(&item.frame) {
            self.oam_receive(port, &item, ccm, host);
            return;
        }
        let Some(host) = host else {
            self.drop_frame(Self::bridge_node(port.bridge), Some(port), &item, DropReason::NoEgress);
            return;
        };
        let mac = self.hosts[&host].mac;
        let accepted = item.frame.dst == mac || item.frame.dst.is_group();
        self.arrivals.push(Arrival {
            flow: item.flow,
            t: self.now,
            port,
            host: Some(host.clone()),
            vid,
            accepted,
            oam: None,
            path: item.path.clone(),
        });
        if accepted {
            self.flows.get_mut(&item.flow).expect("known flow").delivered += 1;
            let hops: Vec<String> = item.path.iter().map(|(b, _)| b.to_string()).collect();
            self.record(
                TraceKind::Deliver,
                format!("host:{host}"),
                Some(port),
                Some((&item.frame, item.flow, item.hop)),
                format!("path={}", hops.join("-")),
            );
        } else {
            self.drop_frame(format!("host:{host}"), Some(port), &item, DropReason::HostFiltered);
        }
    }

    // ----- OAM ----------------------------------------------------------------

    /// Starts continuity checks. The first CCM leaves one interval from now.
    pub fn activate_ma(&mut self, config: MaConfig) -> Result<MaId, String> {
        let id = self.next_ma;
        let ma = MaintenanceAssociation::new(id, config, self.now).map_err(|e| e.to_string())?;
        self.next_ma += 1;
        let interval = ma.config.interval;
        let n = ma.meps.len();
        self.ma_service.insert(id, (ma.config.service.clone(), interval));
        self.mas.insert(id, ma);
        for mep in 0..n {
            self.schedule(self.now + interval, EventKind::CcmTick { ma: id, mep });
            self.arm_check(id, mep);
        }
        self.control("oam", format!("activate ma={id}"));
        Ok(id)
    }

    fn deactivate_ma(&mut self, id: MaId) {
        if self.mas.remove(&id).is_some() {
            self.ma_group.remove(&id);
            self.checks.retain(|(m, _), _| *m != id);
            self.control("oam", format!("deactivate ma={id}"));
        }
    }

    fn arm_check(&mut self, ma: MaId, mep: usize) {
        let Some(m) = self.mas.get(&ma) else { return };
        let Some(at) = m.meps[mep].next_deadline(m.config.interval) else {
            return;
        };
        if self.checks.get(&(ma, mep)).is_some_and(|t| *t <= at) {
            return;
        }
        self.checks.insert((ma, mep), at);
        self.schedule(at, EventKind::DefectCheck { ma, mep });
    }

    fn ccm_tick(&mut self, ma: MaId, mep: usize) {
        let Some(m) = self.mas.get_mut(&ma) else { return };
        let interval = m.config.interval;
        let bvid_override = m.config.bvid_override;
        let frame = m.meps[mep].ccm_tick();
        let (port, vid) = (m.meps[mep].port, m.meps[mep].vid);
        let flow = self.new_flow(FlowKind::Oam(ma), None, port, Some(vid));
        self.record(
            TraceKind::Oam,
            Self::bridge_node(port.bridge),
            Some(port),
            Some((&frame, flow, 0)),
            format!("ccm-tx ma={ma} mep={}", mep + 1),
        );
        let item = InFlight {
            frame,
            flow,
            hop: 0,
            path: Vec::new(),
        };
        self.arrive(port, item, bvid_override);
        self.schedule(self.now + interval, EventKind::CcmTick { ma, mep });
    }

    fn oam_receive(&mut self, port: PortId, item: &InFlight, ccm: Ccm, host: Option<String>) {
        let node = Self::bridge_node(port.bridge);
        let vid = item.frame.outer_vid();
        self.flows.get_mut(&item.flow).expect("known flow").consumed += 1;
        self.arrivals.push(Arrival {
            flow: item.flow,
            t: self.now,
            port,
            host,
            vid,
            accepted: false,
            oam: Some(ccm.ma),
            path: item.path.clone(),
        });
        let target = self.mas.iter().find_map(|(id, m)| {
            m.meps
                .iter()
                .position(|e| e.port == port && Some(e.vid) == vid && *id == ccm.ma)
                .map(|i| (*id, i))
        });
        let fallback = || {
            self.mas.iter().find_map(|(id, m)| {
                m.meps
                    .iter()
                    .position(|e| e.port == port && Some(e.vid) == vid)
                    .map(|i| (*id, i))
            })
        };
        let Some((ma, mep)) = target.or_else(fallback) else {
            self.record(
                TraceKind::Oam,
                node,
                Some(port),
                Some((&item.frame, item.flow, item.hop)),
                format!("ccm-discard ma={}", ccm.ma),
            );
            return;
        };
        let now = self.now;
        let m = self.mas.get_mut(&ma).expect("found");
        let res = m.meps[mep].ccm_receive(&ccm, now);
        let defective = m.defective();
        match res {
            Err(e) => {
                self.record(
                    TraceKind::Oam,
                    node,
                    Some(port),
                    Some((&item.frame, item.flow, item.hop)),
                    format!("ccm-mismatch {}", e.to_string().replace(' ', "_")),
                );
            }
            Ok(ev) => {
                self.record(
                    TraceKind::Oam,
                    node,
                    Some(port),
                    Some((&item.frame, item.flow, item.hop)),
                    format!("ccm-rx ma={ma} mep={} from={}", mep + 1, ccm.mep),
                );
                if let Some(ev) = ev {
                    self.oam_event(ev);
                    if !defective {
                        self.ma_healthy(ma);
                    }
                }
                self.arm_check(ma, mep);
            }
        }
    }

    fn defect_check(&mut self, ma: MaId, mep: usize) {
        if self.checks.get(&(ma, mep)) != Some(&self.now) {
            return;
        }
        self.checks.remove(&(ma, mep));
        let now = self.now;
        let Some(m) = self.mas.get_mut(&ma) else { return };
        let was = m.defective();
        let events = m.meps[mep].defect_scan(m.config.interval, now);
        for ev in events {
            self.oam_event(ev);
        }
        if !was && self.mas[&ma].defective() {
            self.ma_failed(ma);
        }
        self.arm_check(ma, mep);
    }

    fn oam_event(&mut self, ev: OamEvent) {
        self.control("oam", ev.to_string().replace(' ', "_"));
        self.oam_log.push(ev);
    }

    fn ma_failed(&mut self, ma: MaId) {
        if let Some((g, sel)) = self.ma_group.get(&ma).copied() {
            let ev = match sel {
                Selector::Working => ProtEvent::SfWorking,
                Selector::Protection => ProtEvent::SfProtection,
            };
            self.prot_event(g, ev);
        }
    }

    fn ma_healthy(&mut self, ma: MaId) {
        if let Some((g, Selector::Working)) = self.ma_group.get(&ma).copied() {
            self.prot_event(g, ProtEvent::ClearWorking);
        }
    }

    // ----- protection ---------------------------------------------------------

    pub fn activate_group(&mut self, config: GroupConfig) -> Result<GroupId, String> {
        let id = self.next_group;
        let group = ProtectionGroup::new(id, config).map_err(|e| e.to_string())?;
        self.next_group += 1;
        for (ma, sel) in [
            (group.config.working.ma, Selector::Working),
            (group.config.protection.ma, Selector::Protection),
        ] {
            if let Some(ma) = ma {
                self.ma_group.insert(ma, (id, sel));
            }
        }
        self.groups.insert(id, group);
        self.control("prot", format!("activate group={id}"));
        Ok(id)
    }

    fn prot_event(&mut self, id: GroupId, ev: ProtEvent) {
        let now = self.now;
        let Some(g) = self.groups.get_mut(&id) else { return };
        let (tr, rec) = g.on_event(ev, now);
        let endpoints = g.config.endpoints;
        let bvid = g.active_bvid();
        let deadline = g.wtr_deadline;
        self.control("prot", rec.to_string().replace(' ', "_"));
        self.prot_log.push(rec);
        if tr.switch_to.is_some() {
            if let Err(e) = self.controller.select_bvid(&mut self.fabric, &endpoints, bvid) {
                self.error(format!("selector switch failed: {e}"));
            } else {
                self.control("prot", format!("selector group={id} bvid={bvid}"));
            }
        }
        if tr.timer == crate::protection::Timer::Start {
            if let Some(at) = deadline {
                self.schedule(at, EventKind::WtrExpiry(id));
            }
        }
    }

    fn wtr_expiry(&mut self, id: GroupId) {
        if self.groups.get(&id).and_then(|g| g.wtr_deadline) == Some(self.now) {
            self.prot_event(id, ProtEvent::WtrExpired);
        }
    }

    // ----- control ------------------------------------------------------------

    fn spb_converge(&mut self) {
        self.converge_pending = false;
        let report = self.fabric.converge();
        self.control(
            "spb",
            format!(
                "converge seq={} written={} removed={}",
                report.seq, report.entries_written, report.entries_removed
            ),
        );
    }

    fn after_control(&mut self) {
        if self.fabric.spb.is_dirty() && !self.converge_pending {
            self.converge_pending = true;
            let at = self.now + self.fabric.spb.delay;
            self.schedule(at, EventKind::SpbConverge);
        }
    }

    /// Converges immediately if anything changed; used while building.
    pub fn converge_now(&mut self) {
        if self.fabric.spb.is_dirty() {
            self.spb_converge();
        }
    }

    fn age_fdb(&mut self) {
        self.age_pending = false;
        let now = self.now;
        let mut removed = 0;
        let mut remaining = false;
        let mut next = SimTime(u64::MAX);
        for b in self.fabric.bridges.values_mut() {
            removed += b.age_fdb(now);
            for fid in b.fids().map(|f| f.id).collect::<Vec<_>>() {
                for e in b.fdb(fid).into_iter().flat_map(|f| f.iter()) {
                    if e.origin == Origin::Learned {
                        remaining = true;
                        next = next.min(e.last_seen + b.aging_time + SimTime::from_nanos(1));
                    }
                }
            }
        }
        if removed > 0 {
            self.control("fdb", format!("aged={removed}"));
        }
        if remaining {
            self.age_pending = true;
            self.schedule(next.max(now + SimTime::from_nanos(1)), EventKind::AgeFdb);
        }
    }

    fn note_attachments(&mut self, req: &ServiceRequest) {
        let set = self.service_ports.entry(req.name.clone()).or_default();
        set.extend(req.attachments.iter().map(|a| (a.port, a.vid)));
    }

    /// Hands a request to the controller and activates the resulting OAM and
    /// protection.
    pub fn setup_service(&mut self, req: ServiceRequest) -> Result<(), ControllerError> {
        self.note_attachments(&req);
        let plan = self.controller.setup_service(&mut self.fabric, req)?;
        let line = self.controller.decision_log().last().cloned().unwrap_or_default();
        self.control("controller", line.replace(' ', ";"));
        self.activate_plan(plan);
        self.after_control();
        Ok(())
    }

    fn activate_plan(&mut self, plan: crate::controller::SetupPlan) {
        let mut ids = Vec::new();
        for cfg in plan.oam {
            match self.activate_ma(cfg) {
                Ok(id) => ids.push(id),
                Err(e) => self.error(format!("oam activation failed: {e}")),
            }
        }
        let mut group = None;
        if let Some(mut cfg) = plan.protection {
            cfg.working.ma = ids.first().copied();
            cfg.protection.ma = ids.get(1).copied();
            match self.activate_group(cfg) {
                Ok(g) => group = Some(g),
                Err(e) => self.error(format!("protection activation failed: {e}")),
            }
        }
        if let Some(b) = self.controller.binding_mut(&plan.service) {
            b.oam = ids;
            b.protection = group;
        }
    }

    fn release_binding(&mut self, oam: &[MaId], group: Option<GroupId>) {
        for ma in oam {
            self.deactivate_ma(*ma);
        }
        if let Some(g) = group {
            self.groups.remove(&g);
        }
    }

    pub fn teardown_service(&mut self, name: &str) -> Result<(), ControllerError> {
        let b = self.controller.teardown_service(&mut self.fabric, name)?;
        self.release_binding(&b.oam, b.protection);
        self.control("controller", format!("teardown;service={name}"));
        self.after_control();
        Ok(())
    }

    pub fn move_attachment(
        &mut self,
        service: &str,
        from: PortId,
        to: PortId,
        path: Option<PathChoice>,
    ) -> Result<(), ControllerError> {
        let Some((old, plan)) = self
            .controller
            .move_attachment(&mut self.fabric, service, from, to, path)?
        else {
            return Ok(());
        };
        self.release_binding(&old.oam, old.protection);
        if let Some(b) = self.controller.binding(service) {
            let req = b.request.clone();
            self.note_attachments(&req);
        }
        self.control("controller", format!("move;service={service};from={from};to={to}"));
        self.activate_plan(plan);
        self.after_control();
        Ok(())
    }

    fn apply(&mut self, action: Action) {
        let res: Result<(), String> = match action {
            Action::Inject(sc) => self.inject(sc),
            Action::SetLink { a, b, up } => self.set_link(a, b, up),
            Action::Setup(req) => self.setup_service(req).map_err(|e| e.to_string()),
            Action::Teardown(name) => self.teardown_service(&name).map_err(|e| e.to_string()),
            Action::Move {
                service,
                from,
                to,
                path,
            } => self
                .move_attachment(&service, from, to, path)
                .map_err(|e| e.to_string()),
            Action::Sync => match self.controller.sync_topology(&self.fabric) {
                Ok(l) => {
                    let seq = l.seq;
                    self.control("controller", format!("sync;seq={seq}"));
                    Ok(())
                }
                Err(e) => Err(e.to_string()),
            },
            Action::Fuzz { ops } => {
                let r = self.fuzz(ops);
                self.control(
                    "fuzz",
                    format!(
                        "ops={} refused={} accepted={} unexpected={} forbidden={} spb_ext={} ctl_spb={}",
                        r.ops,
                        r.refused,
                        r.accepted,
                        r.unexpected,
                        r.forbidden_entries,
                        r.spb_touched_ext,
                        r.controller_touched_spb
                    ),
                );
                self.fuzz.push(r);
                Ok(())
            }
        };
        if let Err(e) = res {
            self.error(e);
        }
    }

    /// Resolves a bridge pair to its lowest link.
    pub fn link_key(&self, a: BridgeId, b: BridgeId) -> Option<LinkKey> {
        self.fabric.phys.links().map(|l| l.key).find(|k| k.joins(a, b))
    }

    pub fn set_link(&mut self, a: BridgeId, b: BridgeId, up: bool) -> Result<(), String> {
        let key = self.link_key(a, b).ok_or(format!("no link between {a} and {b}"))?;
        let state = if up { LinkState::Up } else { LinkState::Down };
        let changed = self.fabric.set_link_state(key, state).map_err(|e| e.to_string())?;
        if changed {
            self.control("topology", format!("link={key} state={state}"));
        }
        self.after_control();
        Ok(())
    }

    // ----- conservation -------------------------------------------------------

    /// Branches still travelling: queued for arrival or waiting in a port queue.
    pub fn in_flight(&self) -> BTreeMap<FlowId, u64> {
        let mut m: BTreeMap<FlowId, u64> = BTreeMap::new();
        for Reverse(ev) in self.queue.iter() {
            match &ev.kind {
                EventKind::Arrival { item, .. } => *m.entry(item.flow).or_default() += 1,
                EventKind::HostSend { flow, .. } => *m.entry(*flow).or_default() += 1,
                _ => {}
            }
        }
        for q in self.port_queues.values() {
            for item in q.iter() {
                *m.entry(item.flow).or_default() += 1;
            }
        }
        m
    }

    /// Flows whose branch count disagrees with terminals plus in-flight copies.
    pub fn conservation_violations(&self) -> Vec<FlowId> {
        let inflight = self.in_flight();
        self.flows
            .iter()
            .filter(|(id, f)| f.branches != f.terminals() + inflight.get(id).copied().unwrap_or(0))
            .map(|(id, _)| *id)
            .collect()
    }

    // ----- ownership stress -----------------------------------------------------

    /// Random writes from all three actors against VLANs of both owners.
    /// Accepted writes are reverted so running traffic is unaffected.
    pub fn fuzz(&mut self, ops: u32) -> FuzzReport {
        let mut r = FuzzReport::default();
        let vids: Vec<(Vid, ControlPlane)> = self
            .fabric
            .msti
            .allocations()
            .filter_map(|(v, _)| self.fabric.msti.owner_of(v).map(|o| (v, o)))
            .collect();
        let bridges: Vec<BridgeId> = self.fabric.bridges.keys().copied().collect();
        let access: Vec<PortId> = self.fabric.access_ports().iter().copied().collect();
        if vids.is_empty() || bridges.is_empty() {
            return r;
        }
        let actors = [Actor::SpbPlane, Actor::SdnController, Actor::Management];
        for i in 0..ops {
            r.ops += 1;
            let (vid, owner) = vids[self.rng.gen_range(0..vids.len())];
            let actor = actors[self.rng.gen_range(0..actors.len())];
            let bid = bridges[self.rng.gen_range(0..bridges.len())];
            let expect_ok = actor.may_write(owner);
            let op = self.rng.gen_range(0..6u8);
            let mac = MacAddress::new(0x0200_00ee_0000 | u64::from(self.rng.gen::<u16>()));
            let saved = self.fabric.bridges[&bid].clone();
            let ports: BTreeSet<PortId> = saved.ports().map(|(p, _)| *p).take(2).collect();
            let ok = match op {
                0 => {
                    let origin = match actor {
                        Actor::SpbPlane => Origin::Spb,
                        Actor::SdnController => Origin::Sdn,
                        Actor::Management => Origin::Static,
                    };
                    let b = self.fabric.bridges.get_mut(&bid).expect("exists");
                    let fid = b.fid_of(vid).expect("allocated").id;
                    b.fdb_write(fid, FdbEntry::new(mac, ports.iter().copied(), origin), actor)
                        .is_ok()
                }
                1 => self
                    .fabric
                    .bridges
                    .get_mut(&bid)
                    .expect("exists")
                    .set_vlan_members(vid, &ports, actor)
                    .is_ok(),
                2 => self
                    .fabric
                    .bridges
                    .get_mut(&bid)
                    .expect("exists")
                    .set_flood_ports(vid, Some(ports.clone()), actor)
                    .is_ok(),
                3 => {
                    let b = self.fabric.bridges.get_mut(&bid).expect("exists");
                    let fid = b.fid_of(vid).expect("allocated").id;
                    b.fdb_remove(fid, mac, actor).is_ok()
                }
                4 => {
                    // SPB can only ever be asked to advertise on its own VLANs
                    let att = ServiceAttachment {
                        bridge: bid,
                        isid: Isid::new(0xee_0000 + i).expect("in range"),
                        bvid: vid,
                        role: Role::Full,
                    };
                    let res = self.fabric.spb.advertise(att, &self.fabric.msti, &self.fabric.phys);
                    if res.is_ok() {
                        self.fabric
                            .spb
                            .withdraw(att, &self.fabric.msti, &self.fabric.phys)
                            .expect("just advertised");
                    }
                    r.refused += u64::from(res.is_err());
                    r.accepted += u64::from(res.is_ok());
                    r.unexpected += u64::from(res.is_ok() != (owner == ControlPlane::Spb));
                    continue;
                }
                _ => {
                    let Some(port) = access.get(self.rng.gen_range(0..access.len().max(1))).copied() else {
                        continue;
                    };
                    let saved_edge = self.fabric.bridges[&port.bridge].clone();
                    let params = EncapParams::new(Isid::new(0xee_0000 + i).expect("in range"), vid, BdaPolicy::Group);
                    let fuzz_vid = Vid::service(4001).expect("service vid");
                    let res = program_edge(&mut self.fabric, port, fuzz_vid, params, actor);
                    self.fabric.bridges.insert(port.bridge, saved_edge);
                    let want = actor != Actor::SpbPlane;
                    r.refused += u64::from(res.is_err());
                    r.accepted += u64::from(res.is_ok());
                    r.unexpected += u64::from(res.is_ok() != want);
                    continue;
                }
            };
            if !self.fabric.ownership_consistent() {
                r.forbidden_entries += 1;
            }
            if ok {
                r.accepted += 1;
                self.fabric.bridges.insert(bid, saved);
            } else {
                r.refused += 1;
            }
            r.unexpected += u64::from(ok != expect_ok);

            if i % 100 == 99 {
                self.fuzz_legit_ops(&mut r, i);
            }
        }
        r
    }

    /// Legitimate work from both planes: neither may disturb the other's FDBs.
    fn fuzz_legit_ops(&mut self, r: &mut FuzzReport, i: u32) {
        let fdbs_of = |f: &Fabric, owner: ControlPlane| -> Vec<String> {
            let vids = f.msti.vids_of(owner);
            f.bridges
                .values()
                .flat_map(|b| {
                    vids.iter()
                        .filter_map(|v| b.fid_of(*v).map(|x| x.id))
                        .flat_map(|fid| b.fdb(fid).into_iter().flat_map(|d| d.iter()))
                        .map(|e| format!("{}:{}:{:?}:{}", b.id, e.mac, e.ports, e.origin))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let before_ext = fdbs_of(&self.fabric, ControlPlane::ExternalAgent);
        self.fabric.spb.topology_changed();
        self.fabric.converge();
        if fdbs_of(&self.fabric, ControlPlane::ExternalAgent) != before_ext {
            r.spb_touched_ext += 1;
        }

        let access: Vec<PortId> = self.fabric.access_ports().iter().copied().collect();
        if access.len() < 2 {
            return;
        }
        let a = access[self.rng.gen_range(0..access.len())];
        let b = access[self.rng.gen_range(0..access.len())];
        if a.bridge == b.bridge {
            return;
        }
        let before_spb = fdbs_of(&self.fabric, ControlPlane::Spb);
        let name = format!("fuzz-{i}");
        let vid = Vid::service(4002).expect("service vid");
        let req = ServiceRequest {
            name: name.clone(),
            kind: ServiceKind::P2P,
            attachments: vec![
                Attachment {
                    port: a,
                    vid,
                    role: Role::Full,
                },
                Attachment {
                    port: b,
                    vid,
                    role: Role::Full,
                },
            ],
            requirements: Requirements {
                shortest_path_ok: false,
                ..Default::default()
            },
            isid: None,
            bvid: None,
        };
        if self.controller.setup_service(&mut self.fabric, req).is_ok() {
            if fdbs_of(&self.fabric, ControlPlane::Spb) != before_spb {
                r.controller_touched_spb += 1;
            }
            let _ = self.controller.teardown_service(&mut self.fabric, &name);
        }
        if !self.fabric.ownership_consistent() {
            r.forbidden_entries += 1;
        }
    }
}
