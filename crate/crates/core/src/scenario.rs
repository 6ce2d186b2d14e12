// SPDX-License-Identifier: Apache-2.0

//! Scenario files: schema, validation, construction, assertions and dumps.
//!
//! A scenario is a JSON document. Times are seconds as numbers; ports are
//! `"<bridge>.<index>"` strings; MAC addresses are colon-separated hex.
//! `docs/scenario-format.md` describes every field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::controller::{
    resolve_path, Attachment, Controller, PathChoice, Pools, ProtectionReq, Requirements, ServiceKind, ServiceRequest,
};
use crate::dataplane::{MeterConfig, PortConfig};
use crate::fabric::{default_bmac, Fabric};
use crate::flowmap::FlowRule;
use crate::frames::{Isid, MacAddress, Vid};
use crate::ids::{BridgeId, PortId, SimTime};
use crate::oam::OamEventKind;
use crate::protection::{ProtState, DEFAULT_WTR};
use crate::simnet::{Action, Dest, FlowKind, Injection, Sim};
use crate::spb::{Role, DEFAULT_CONVERGENCE_DELAY};
use crate::topology::{LinkKey, DEFAULT_LINK_DELAY};

/// Version of the scenario schema this build reads.
pub const SCENARIO_FORMAT_VERSION: u32 = 1;
/// Version of the dump and report text formats this build writes.
pub const DUMP_FORMAT_VERSION: u32 = 1;

pub const BUILTINS: [&str; 5] = [
    "vn1_vn2",
    "vm_migration",
    "protection_switch",
    "hybrid_fuzz",
    "fate_sharing_sweep",
];

/// Source text of a built-in scenario.
pub fn builtin(name: &str) -> Option<&'static str> {
    Some(match name {
        "vn1_vn2" => include_str!("../scenarios/vn1_vn2.json"),
        "vm_migration" => include_str!("../scenarios/vm_migration.json"),
        "protection_switch" => include_str!("../scenarios/protection_switch.json"),
        "hybrid_fuzz" => include_str!("../scenarios/hybrid_fuzz.json"),
        "fate_sharing_sweep" => include_str!("../scenarios/fate_sharing_sweep.json"),
        _ => return None,
    })
}

// ----- schema -----------------------------------------------------------------

fn default_metric() -> u32 {
    1
}

fn default_delay() -> f64 {
    DEFAULT_LINK_DELAY.as_secs_f64()
}

fn default_true() -> bool {
    true
}

fn default_one() -> u32 {
    1
}

fn default_interval() -> f64 {
    0.001
}

fn default_wtr() -> f64 {
    DEFAULT_WTR.as_secs_f64()
}

fn default_min_defects() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub until: f64,
    #[serde(default)]
    pub spb: SpbSection,
    pub bridges: Vec<BridgeDecl>,
    #[serde(default)]
    pub links: Vec<LinkDecl>,
    #[serde(default)]
    pub hosts: Vec<HostDecl>,
    #[serde(default)]
    pub msti: Vec<MstiDecl>,
    #[serde(default)]
    pub pools: PoolDecl,
    #[serde(default)]
    pub ports: Vec<PortDecl>,
    #[serde(default)]
    pub services: Vec<ServiceDecl>,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpbSection {
    pub convergence_delay: f64,
}

impl Default for SpbSection {
    fn default() -> Self {
        SpbSection {
            convergence_delay: DEFAULT_CONVERGENCE_DELAY.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeDecl {
    pub id: u16,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub bmac: Option<MacAddress>,
    #[serde(default)]
    pub access_ports: Vec<u16>,
    #[serde(default)]
    pub aging_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDecl {
    pub a: PortId,
    pub b: PortId,
    #[serde(default = "default_metric")]
    pub metric: u32,
    #[serde(default = "default_delay")]
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostDecl {
    pub name: String,
    pub port: PortId,
    pub mac: MacAddress,
    #[serde(default)]
    pub vid: Option<Vid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MstiDecl {
    pub vid: Vid,
    pub msti: u16,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolDecl {
    #[serde(default)]
    pub isid: Option<[u32; 2]>,
    #[serde(default)]
    pub spb_bvids: Option<Vec<Vid>>,
    #[serde(default)]
    pub ext_bvids: Option<Vec<Vid>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortDecl {
    pub port: PortId,
    #[serde(default)]
    pub pvid: Option<Vid>,
    #[serde(default)]
    pub membership: Vec<Vid>,
    #[serde(default)]
    pub ingress_filtering: Option<bool>,
    #[serde(default)]
    pub egress_filtering: Option<bool>,
    #[serde(default)]
    pub learning: Option<bool>,
    #[serde(default)]
    pub ingress_vid_translation: Vec<[Vid; 2]>,
    #[serde(default)]
    pub egress_vid_translation: Vec<[Vid; 2]>,
    #[serde(default)]
    pub flow_rules: Vec<FlowRule>,
    #[serde(default)]
    pub hash_range: Vec<Vid>,
    #[serde(default)]
    pub meter: Option<MeterConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentDecl {
    pub port: PortId,
    pub vid: Vid,
    #[serde(default = "default_role")]
    pub role: Role,
}

fn default_role() -> Role {
    Role::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionDecl {
    #[serde(default)]
    pub path: Option<Vec<u16>>,
    #[serde(default = "default_true")]
    pub revertive: bool,
    #[serde(default = "default_wtr")]
    pub wtr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ServiceKind,
    pub attachments: Vec<AttachmentDecl>,
    #[serde(default = "default_true")]
    pub shortest_path_ok: bool,
    #[serde(default)]
    pub path: Option<Vec<u16>>,
    #[serde(default)]
    pub tree: Option<Vec<[u16; 2]>>,
    #[serde(default)]
    pub oam_interval: Option<f64>,
    #[serde(default)]
    pub protection: Option<ProtectionDecl>,
    #[serde(default)]
    pub isid: Option<Isid>,
    #[serde(default)]
    pub bvid: Option<Vid>,
    #[serde(default)]
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimelineEntry {
    Inject {
        at: f64,
        host: String,
        /// `broadcast`, a host name, or a MAC address.
        dst: String,
        #[serde(default = "default_one")]
        count: u32,
        #[serde(default = "default_interval")]
        interval: f64,
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        vid: Option<Vid>,
        #[serde(default)]
        pcp: u8,
        #[serde(default)]
        payload: Vec<u8>,
    },
    FailLink {
        at: f64,
        a: u16,
        b: u16,
    },
    RestoreLink {
        at: f64,
        a: u16,
        b: u16,
    },
    MoveAttachment {
        at: f64,
        service: String,
        from: PortId,
        to: PortId,
        #[serde(default)]
        path: Option<Vec<u16>>,
        #[serde(default)]
        tree: Option<Vec<[u16; 2]>>,
    },
    Setup {
        at: f64,
        service: String,
    },
    Teardown {
        at: f64,
        service: String,
    },
    Sync {
        at: f64,
    },
    Fuzz {
        at: f64,
        ops: u32,
    },
}

impl TimelineEntry {
    pub fn at(&self) -> f64 {
        match self {
            TimelineEntry::Inject { at, .. }
            | TimelineEntry::FailLink { at, .. }
            | TimelineEntry::RestoreLink { at, .. }
            | TimelineEntry::MoveAttachment { at, .. }
            | TimelineEntry::Setup { at, .. }
            | TimelineEntry::Teardown { at, .. }
            | TimelineEntry::Sync { at }
            | TimelineEntry::Fuzz { at, .. } => *at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// The set of hosts that accepted frames with `label` is exactly `hosts`.
    /// With `per_frame`, every such frame reached every listed host except
    /// its sender.
    Delivery {
        label: String,
        hosts: Vec<String>,
        #[serde(default)]
        per_frame: bool,
    },
    /// Every frame with `label` was delivered, over exactly this bridge sequence.
    Path {
        label: String,
        bridges: Vec<u16>,
    },
    Count {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        host: Option<String>,
        #[serde(default)]
        after: Option<f64>,
        #[serde(default)]
        before: Option<f64>,
        #[serde(default)]
        min: Option<u64>,
        #[serde(default)]
        max: Option<u64>,
    },
    /// Longest silence between consecutive deliveries at `host`.
    MaxGap {
        label: String,
        host: String,
        #[serde(default)]
        after: Option<f64>,
        #[serde(default)]
        before: Option<f64>,
        max: f64,
    },
    NoCrossDelivery {},
    OwnershipClean {},
    Defects {
        #[serde(default)]
        service: Option<String>,
        #[serde(default = "default_min_defects")]
        min: u64,
    },
    NoDefects {
        #[serde(default)]
        service: Option<String>,
    },
    ProtectionState {
        service: String,
        state: String,
    },
    NoDualDelivery {},
    Conservation {},
    /// Reruns the scenario once per link, failing it at `fail_at`: a
    /// service's MA raises a defect iff the link carried its data frames.
    FateSharing {
        fail_at: f64,
        observe: f64,
    },
}

impl Assertion {
    pub fn kind(&self) -> &'static str {
        match self {
            Assertion::Delivery { .. } => "delivery",
            Assertion::Path { .. } => "path",
            Assertion::Count { .. } => "count",
            Assertion::MaxGap { .. } => "max_gap",
            Assertion::NoCrossDelivery {} => "no_cross_delivery",
            Assertion::OwnershipClean {} => "ownership_clean",
            Assertion::Defects { .. } => "defects",
            Assertion::NoDefects { .. } => "no_defects",
            Assertion::ProtectionState { .. } => "protection_state",
            Assertion::NoDualDelivery {} => "no_dual_delivery",
            Assertion::Conservation {} => "conservation",
            Assertion::FateSharing { .. } => "fate_sharing",
        }
    }
}

// ----- errors -------------------------------------------------------------------

/// A diagnostic naming the offending field, e.g. `links[2].a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

impl ScenarioError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ScenarioError {}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    serde_json::from_str(text)
        .map_err(|e| ScenarioError::new(format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

fn secs(v: f64, path: &str, errs: &mut Vec<ScenarioError>) -> SimTime {
    if !v.is_finite() || v < 0.0 {
        errs.push(ScenarioError::new(
            path,
            format!("time {v} must be a non-negative number of seconds"),
        ));
        return SimTime::ZERO;
    }
    SimTime::from_secs_f64(v)
}

// ----- static checks ------------------------------------------------------------

struct Refs {
    bridges: BTreeSet<u16>,
    access: BTreeSet<PortId>,
    hosts: BTreeSet<String>,
    services: BTreeSet<String>,
    links: BTreeSet<(u16, u16)>,
}

fn check_refs(sc: &Scenario) -> Vec<ScenarioError> {
    let mut errs = Vec::new();
    let mut e = |p: String, m: String| errs.push(ScenarioError::new(p, m));
    if sc.format_version != SCENARIO_FORMAT_VERSION {
        e(
            "format_version".into(),
            format!(
                "unsupported version {}, expected {SCENARIO_FORMAT_VERSION}",
                sc.format_version
            ),
        );
    }
    let mut refs = Refs {
        bridges: BTreeSet::new(),
        access: BTreeSet::new(),
        hosts: BTreeSet::new(),
        services: BTreeSet::new(),
        links: BTreeSet::new(),
    };
    for (i, b) in sc.bridges.iter().enumerate() {
        if b.id == 0 {
            e(format!("bridges[{i}].id"), "bridge ids start at 1".into());
        }
        if !refs.bridges.insert(b.id) {
            e(format!("bridges[{i}].id"), format!("duplicate bridge {}", b.id));
        }
        for p in &b.access_ports {
            refs.access.insert(PortId::new(b.id, *p));
        }
    }
    for (i, l) in sc.links.iter().enumerate() {
        for (side, p) in [("a", l.a), ("b", l.b)] {
            if !refs.bridges.contains(&p.bridge.0) {
                e(format!("links[{i}].{side}"), format!("undeclared bridge {}", p.bridge));
            }
            if refs.access.contains(&p) {
                e(
                    format!("links[{i}].{side}"),
                    format!("{p} is declared as an access port"),
                );
            }
        }
        if l.metric == 0 {
            e(format!("links[{i}].metric"), "metric must be positive".into());
        }
        refs.links
            .insert((l.a.bridge.0.min(l.b.bridge.0), l.a.bridge.0.max(l.b.bridge.0)));
    }
    let mut host_ports = BTreeSet::new();
    for (i, h) in sc.hosts.iter().enumerate() {
        if !refs.access.contains(&h.port) {
            e(
                format!("hosts[{i}].port"),
                format!("{} is not a declared access port", h.port),
            );
        }
        if !host_ports.insert(h.port) {
            e(format!("hosts[{i}].port"), format!("{} already has a host", h.port));
        }
        if !refs.hosts.insert(h.name.clone()) {
            e(format!("hosts[{i}].name"), format!("duplicate host {}", h.name));
        }
    }
    for (i, p) in sc.ports.iter().enumerate() {
        if !refs.access.contains(&p.port) {
            e(
                format!("ports[{i}].port"),
                format!("{} is not a declared access port", p.port),
            );
        }
    }
    let path_refs =
        |path: &Option<Vec<u16>>, tree: &Option<Vec<[u16; 2]>>, at: String, e: &mut dyn FnMut(String, String)| {
            if path.is_some() && tree.is_some() {
                e(at.clone(), "give either a path or a tree".into());
            }
            for b in path.iter().flatten().chain(tree.iter().flatten().flatten()) {
                if !refs.bridges.contains(b) {
                    e(at.clone(), format!("undeclared bridge {b}"));
                }
            }
        };
    for (i, s) in sc.services.iter().enumerate() {
        if !refs.services.insert(s.name.clone()) {
            e(format!("services[{i}].name"), format!("duplicate service {}", s.name));
        }
        for (j, a) in s.attachments.iter().enumerate() {
            if !refs.access.contains(&a.port) {
                e(
                    format!("services[{i}].attachments[{j}].port"),
                    format!("{} is not a declared access port", a.port),
                );
            }
        }
        path_refs(&s.path, &s.tree, format!("services[{i}].path"), &mut e);
        if let Some(p) = &s.protection {
            path_refs(&p.path, &None, format!("services[{i}].protection.path"), &mut e);
        }
    }
    for (i, t) in sc.timeline.iter().enumerate() {
        let at = format!("timeline[{i}]");
        match t {
            TimelineEntry::Inject { host, dst, count, .. } => {
                if !refs.hosts.contains(host) {
                    e(format!("{at}.host"), format!("unknown host {host}"));
                }
                if dst != "broadcast" && !dst.contains(':') && !refs.hosts.contains(dst) {
                    e(format!("{at}.dst"), format!("unknown host {dst}"));
                }
                if dst.contains(':') && dst.parse::<MacAddress>().is_err() {
                    e(format!("{at}.dst"), format!("bad MAC address {dst}"));
                }
                if *count == 0 {
                    e(format!("{at}.count"), "count must be positive".into());
                }
            }
            TimelineEntry::FailLink { a, b, .. } | TimelineEntry::RestoreLink { a, b, .. } => {
                if !refs.links.contains(&((*a).min(*b), (*a).max(*b))) {
                    e(at, format!("no link between {a} and {b}"));
                }
            }
            TimelineEntry::MoveAttachment {
                service,
                from,
                to,
                path,
                tree,
                ..
            } => {
                if !refs.services.contains(service) {
                    e(format!("{at}.service"), format!("unknown service {service}"));
                }
                for (f, p) in [("from", from), ("to", to)] {
                    if !refs.access.contains(p) {
                        e(format!("{at}.{f}"), format!("{p} is not a declared access port"));
                    }
                }
                path_refs(path, tree, format!("{at}.path"), &mut e);
            }
            TimelineEntry::Setup { service, .. } | TimelineEntry::Teardown { service, .. } => {
                if !refs.services.contains(service) {
                    e(format!("{at}.service"), format!("unknown service {service}"));
                }
            }
            TimelineEntry::Sync { .. } | TimelineEntry::Fuzz { .. } => {}
        }
    }
    for (i, a) in sc.assertions.iter().enumerate() {
        let at = format!("assertions[{i}]");
        let mut host = |h: &str, f: &str| {
            if !refs.hosts.contains(h) {
                e(format!("{at}.{f}"), format!("unknown host {h}"));
            }
        };
        match a {
            Assertion::Delivery { hosts, .. } => hosts.iter().for_each(|h| host(h, "hosts")),
            Assertion::Count { host: Some(h), .. } | Assertion::MaxGap { host: h, .. } => host(h, "host"),
            Assertion::Path { bridges, .. } => {
                for b in bridges {
                    if !refs.bridges.contains(b) {
                        e(format!("{at}.bridges"), format!("undeclared bridge {b}"));
                    }
                }
            }
            Assertion::ProtectionState { service, state } => {
                if !refs.services.contains(service) {
                    e(format!("{at}.service"), format!("unknown service {service}"));
                }
                if !ProtState::ALL.iter().any(|s| s.to_string() == *state) {
                    e(format!("{at}.state"), format!("unknown protection state {state}"));
                }
            }
            Assertion::Defects { service: Some(s), .. } | Assertion::NoDefects { service: Some(s) }
                if !refs.services.contains(s) =>
            {
                e(format!("{at}.service"), format!("unknown service {s}"));
            }
            _ => {}
        }
    }
    errs
}

fn path_choice(path: &Option<Vec<u16>>, tree: &Option<Vec<[u16; 2]>>) -> Option<PathChoice> {
    if let Some(p) = path {
        return Some(PathChoice::Path(p.iter().map(|b| BridgeId(*b)).collect()));
    }
    tree.as_ref()
        .map(|t| PathChoice::Tree(t.iter().map(|[a, b]| (BridgeId(*a), BridgeId(*b))).collect()))
}

fn service_request(s: &ServiceDecl, errs: &mut Vec<ScenarioError>, at: &str) -> ServiceRequest {
    ServiceRequest {
        name: s.name.clone(),
        kind: s.kind,
        attachments: s
            .attachments
            .iter()
            .map(|a| Attachment {
                port: a.port,
                vid: a.vid,
                role: a.role,
            })
            .collect(),
        requirements: Requirements {
            shortest_path_ok: s.shortest_path_ok,
            explicit_path: path_choice(&s.path, &s.tree),
            oam_interval: s.oam_interval.map(|v| secs(v, &format!("{at}.oam_interval"), errs)),
            protection: s.protection.as_ref().map(|p| ProtectionReq {
                path: p.path.as_ref().map(|v| v.iter().map(|b| BridgeId(*b)).collect()),
                revertive: p.revertive,
                wtr: secs(p.wtr, &format!("{at}.protection.wtr"), errs),
            }),
        },
        isid: s.isid,
        bvid: s.bvid,
    }
}

// ----- building -----------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub until: Option<f64>,
    pub keep_trace: bool,
}

/// Validates and builds the simulation at time zero, with every timeline
/// action scheduled. `validate` and `run` share this path.
pub fn build(sc: &Scenario, opts: &RunOptions) -> Result<Sim, Vec<ScenarioError>> {
    let mut errs = check_refs(sc);
    if !errs.is_empty() {
        return Err(errs);
    }
    let delay = secs(sc.spb.convergence_delay, "spb.convergence_delay", &mut errs);
    secs(sc.until, "until", &mut errs);
    let mut fabric = Fabric::new(delay);
    let overrides: BTreeMap<PortId, &PortDecl> = sc.ports.iter().map(|p| (p.port, p)).collect();

    for (i, b) in sc.bridges.iter().enumerate() {
        let id = BridgeId(b.id);
        if let Err(e) = fabric.add_bridge(id, b.bmac.unwrap_or_else(|| default_bmac(id))) {
            errs.push(ScenarioError::new(format!("bridges[{i}]"), e.to_string()));
            continue;
        }
        if let Some(t) = b.aging_time {
            let t = secs(t, &format!("bridges[{i}].aging_time"), &mut errs);
            fabric.bridge_mut(id).expect("added").aging_time = t;
        }
        for idx in &b.access_ports {
            let port = PortId::new(b.id, *idx);
            let at = format!("bridges[{i}].access_ports");
            let cfg = match overrides.get(&port) {
                Some(p) => match port_config(p) {
                    Ok(c) => c,
                    Err(e) => {
                        let j = sc.ports.iter().position(|x| x.port == port).expect("present");
                        errs.push(ScenarioError::new(format!("ports[{j}]"), e));
                        continue;
                    }
                },
                None => PortConfig::default(),
            };
            if let Err(e) = fabric.add_access_port(port, cfg) {
                errs.push(ScenarioError::new(at, e.to_string()));
            }
        }
    }
    for (i, l) in sc.links.iter().enumerate() {
        let d = secs(l.delay, &format!("links[{i}].delay"), &mut errs);
        if let Err(e) = fabric.add_link(l.a, l.b, l.metric, d) {
            errs.push(ScenarioError::new(format!("links[{i}]"), e.to_string()));
        }
    }
    for (i, m) in sc.msti.iter().enumerate() {
        if let Err(e) = fabric.allocate_vlan(m.vid, m.msti) {
            errs.push(ScenarioError::new(format!("msti[{i}]"), e.to_string()));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    fabric.converge();

    let mut pools = Pools::default();
    if let Some([lo, hi]) = sc.pools.isid {
        if lo == 0 || lo > hi || hi > Isid::MAX {
            errs.push(ScenarioError::new("pools.isid", format!("bad range {lo}..{hi}")));
        }
        pools.isids = (lo, hi);
    }
    if let Some(v) = &sc.pools.spb_bvids {
        pools.spb_bvids = v.clone();
    }
    if let Some(v) = &sc.pools.ext_bvids {
        pools.ext_bvids = v.clone();
    }
    let seed = opts.seed.unwrap_or(sc.seed);
    let mut sim = Sim::new(fabric, Controller::new(pools), seed, opts.keep_trace);
    for (i, h) in sc.hosts.iter().enumerate() {
        let host = crate::simnet::HostConfig {
            name: h.name.clone(),
            port: h.port,
            mac: h.mac,
            vid: h.vid,
        };
        if let Err(e) = sim.add_host(host) {
            errs.push(ScenarioError::new(format!("hosts[{i}]"), e));
        }
    }

    // explicit paths and trees are checked against the initial topology
    let view = sim.fabric.spb.lsdb().clone();
    let mut requests = BTreeMap::new();
    for (i, s) in sc.services.iter().enumerate() {
        let at = format!("services[{i}]");
        let req = service_request(s, &mut errs, &at);
        if let Err(e) = req.validate() {
            errs.push(ScenarioError::new(at.clone(), e.to_string()));
        }
        if let Some(p) = &req.requirements.explicit_path {
            if let Err(e) = resolve_path(&view, p, &req.attachments) {
                errs.push(ScenarioError::new(format!("{at}.path"), e.to_string()));
            }
        }
        let t = secs(s.at, &format!("{at}.at"), &mut errs);
        requests.insert(s.name.clone(), (i, t, req));
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let mut initial: Vec<&(usize, SimTime, ServiceRequest)> =
        requests.values().filter(|(_, t, _)| *t == SimTime::ZERO).collect();
    initial.sort_by_key(|(i, _, _)| *i);
    for (i, _, req) in initial {
        if let Err(e) = sim.setup_service(req.clone()) {
            errs.push(ScenarioError::new(format!("services[{i}]"), e.to_string()));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    sim.converge_now();
    let mut later: Vec<&(usize, SimTime, ServiceRequest)> =
        requests.values().filter(|(_, t, _)| *t > SimTime::ZERO).collect();
    later.sort_by_key(|(i, _, _)| *i);
    for (_, t, req) in later {
        sim.schedule_action(*t, Action::Setup(req.clone()));
    }

    for (i, entry) in sc.timeline.iter().enumerate() {
        let at = format!("timeline[{i}]");
        let t = secs(entry.at(), &format!("{at}.at"), &mut errs);
        let action = match entry {
            TimelineEntry::Inject {
                host,
                dst,
                count,
                interval,
                label,
                vid,
                pcp,
                payload,
                ..
            } => {
                let dst = if dst == "broadcast" {
                    Dest::Broadcast
                } else if let Ok(m) = dst.parse::<MacAddress>() {
                    Dest::Mac(m)
                } else {
                    Dest::Host(dst.clone())
                };
                if *pcp > 7 {
                    errs.push(ScenarioError::new(format!("{at}.pcp"), "priority is 0..7"));
                }
                Action::Inject(Injection {
                    host: host.clone(),
                    dst,
                    vid: *vid,
                    pcp: *pcp,
                    count: *count,
                    interval: secs(*interval, &format!("{at}.interval"), &mut errs),
                    label: label.clone(),
                    payload: payload.clone(),
                })
            }
            TimelineEntry::FailLink { a, b, .. } => Action::SetLink {
                a: BridgeId(*a),
                b: BridgeId(*b),
                up: false,
            },
            TimelineEntry::RestoreLink { a, b, .. } => Action::SetLink {
                a: BridgeId(*a),
                b: BridgeId(*b),
                up: true,
            },
            TimelineEntry::MoveAttachment {
                service,
                from,
                to,
                path,
                tree,
                ..
            } => Action::Move {
                service: service.clone(),
                from: *from,
                to: *to,
                path: path_choice(path, tree),
            },
            TimelineEntry::Setup { service, .. } => Action::Setup(requests[service].2.clone()),
            TimelineEntry::Teardown { service, .. } => Action::Teardown(service.clone()),
            TimelineEntry::Sync { .. } => Action::Sync,
            TimelineEntry::Fuzz { ops, .. } => Action::Fuzz { ops: *ops },
        };
        sim.schedule_action(t, action);
    }
    if errs.is_empty() {
        Ok(sim)
    } else {
        Err(errs)
    }
}

fn port_config(p: &PortDecl) -> Result<PortConfig, String> {
    let mut c = PortConfig::default();
    if let Some(v) = p.pvid {
        c.pvid = v;
    }
    c.vlan_membership.extend(p.membership.iter().copied());
    if let Some(v) = p.ingress_filtering {
        c.ingress_filtering = v;
    }
    if let Some(v) = p.egress_filtering {
        c.egress_filtering = v;
    }
    if let Some(v) = p.learning {
        c.learning_enabled = v;
    }
    c.ingress_vid_translation = p.ingress_vid_translation.iter().map(|[a, b]| (*a, *b)).collect();
    c.egress_vid_translation = p.egress_vid_translation.iter().map(|[a, b]| (*a, *b)).collect();
    for r in &p.flow_rules {
        c.flow_rules.insert(r.clone()).map_err(|e| e.to_string())?;
    }
    if !p.hash_range.is_empty() {
        c.flow_rules.set_hash_range(p.hash_range.clone());
    }
    c.meter = p.meter;
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

pub fn validate(sc: &Scenario) -> Result<(), Vec<ScenarioError>> {
    build(sc, &RunOptions::default()).map(|_| ())
}

// ----- running and assertions ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    pub index: usize,
    pub kind: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for AssertionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.index,
            self.kind,
            self.detail
        )
    }
}

pub struct RunOutcome {
    pub name: String,
    pub seed: u64,
    pub until: SimTime,
    pub events: u64,
    pub sim: Sim,
    pub results: Vec<AssertionResult>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn report(&self) -> Vec<String> {
        let mut lines = vec![format!(
            "scenario={} seed={} until={} events={} trace_lines={} trace_sha256={}",
            self.name,
            self.seed,
            self.until,
            self.events,
            self.sim.trace().len(),
            self.sim.trace().digest()
        )];
        lines.extend(self.results.iter().map(ToString::to_string));
        let failed = self.results.iter().filter(|r| !r.passed).count();
        lines.push(format!(
            "result={} passed={} failed={}",
            if failed == 0 { "PASS" } else { "FAIL" },
            self.results.len() - failed,
            failed
        ));
        lines
    }
}

pub fn run(sc: &Scenario, opts: &RunOptions) -> Result<RunOutcome, Vec<ScenarioError>> {
    let mut sim = build(sc, opts)?;
    let until = opts.until.unwrap_or(sc.until);
    let mut errs = Vec::new();
    let until = secs(until, "until", &mut errs);
    if !errs.is_empty() {
        return Err(errs);
    }
    let events = sim.run_until(until);
    let mut results = vec![AssertionResult {
        index: 0,
        kind: "actions",
        passed: sim.errors().is_empty(),
        detail: if sim.errors().is_empty() {
            "every timeline action succeeded".into()
        } else {
            let e: Vec<String> = sim.errors().iter().map(|(t, m)| format!("t={t} {m}")).collect();
            e.join("; ")
        },
    }];
    for (i, a) in sc.assertions.iter().enumerate() {
        let (passed, detail) = evaluate(a, sc, opts, &sim);
        results.push(AssertionResult {
            index: i + 1,
            kind: a.kind(),
            passed,
            detail,
        });
    }
    Ok(RunOutcome {
        name: sc.name.clone(),
        seed: opts.seed.unwrap_or(sc.seed),
        until,
        events,
        sim,
        results,
    })
}

fn set_str<T: fmt::Display>(s: &BTreeSet<T>) -> String {
    let v: Vec<String> = s.iter().map(ToString::to_string).collect();
    format!("{{{}}}", v.join(","))
}

fn in_window(t: SimTime, after: Option<f64>, before: Option<f64>) -> bool {
    after.is_none_or(|a| t >= SimTime::from_secs_f64(a)) && before.is_none_or(|b| t < SimTime::from_secs_f64(b))
}

fn label_of(sim: &Sim, flow: u64) -> Option<&str> {
    sim.flows().get(&flow).and_then(|f| f.label.as_deref())
}

/// Links crossed by accepted frames labelled `label`, with the largest
/// one-way delay seen.
pub fn observed_data_path(sim: &Sim, label: &str) -> (BTreeSet<LinkKey>, SimTime) {
    let mut links = BTreeSet::new();
    let mut worst = SimTime::ZERO;
    for a in sim.arrivals() {
        if !a.accepted || label_of(sim, a.flow) != Some(label) {
            continue;
        }
        for (_, port) in &a.path {
            if let Some(l) = sim.fabric.phys.link_at(*port) {
                links.insert(l.key);
            }
        }
        worst = worst.max(a.t.saturating_sub(sim.flows()[&a.flow].injected));
    }
    (links, worst)
}

fn evaluate(a: &Assertion, sc: &Scenario, opts: &RunOptions, sim: &Sim) -> (bool, String) {
    match a {
        Assertion::Delivery {
            label,
            hosts,
            per_frame,
        } => {
            let expected: BTreeSet<&str> = hosts.iter().map(String::as_str).collect();
            let observed: BTreeSet<&str> = sim
                .arrivals()
                .iter()
                .filter(|x| x.accepted && label_of(sim, x.flow) == Some(label))
                .filter_map(|x| x.host.as_deref())
                .collect();
            let mut ok = expected == observed;
            let mut detail = format!(
                "label={label} expected={} observed={}",
                set_str(&expected),
                set_str(&observed)
            );
            if *per_frame {
                let mut got: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
                for x in sim.arrivals().iter().filter(|x| x.accepted) {
                    if let Some(h) = &x.host {
                        got.entry(x.flow).or_default().insert(h);
                    }
                }
                let mut short = 0;
                let mut frames = 0;
                for (id, f) in sim.flows() {
                    if f.label.as_deref() != Some(label) {
                        continue;
                    }
                    frames += 1;
                    let sender = sim.host_at(f.src);
                    let want: BTreeSet<&str> = expected.iter().copied().filter(|h| Some(*h) != sender).collect();
                    if got.get(id).cloned().unwrap_or_default() != want {
                        short += 1;
                    }
                }
                ok &= short == 0 && frames > 0;
                detail.push_str(&format!(" frames={frames} incomplete={short}"));
            }
            (ok, detail)
        }
        Assertion::Path { label, bridges } => {
            let want: Vec<BridgeId> = bridges.iter().map(|b| BridgeId(*b)).collect();
            let mut frames = 0;
            let mut undelivered = 0;
            let mut wrong = BTreeSet::new();
            for (id, f) in sim.flows() {
                if f.label.as_deref() != Some(label) {
                    continue;
                }
                frames += 1;
                if f.delivered == 0 {
                    undelivered += 1;
                }
                for x in sim.arrivals().iter().filter(|x| x.flow == *id && x.accepted) {
                    if x.bridges() != want {
                        let s: Vec<String> = x.bridges().iter().map(ToString::to_string).collect();
                        wrong.insert(s.join("-"));
                    }
                }
            }
            let w: Vec<String> = want.iter().map(ToString::to_string).collect();
            (
                frames > 0 && undelivered == 0 && wrong.is_empty(),
                format!(
                    "label={label} expected={} frames={frames} undelivered={undelivered} other_paths={}",
                    w.join("-"),
                    set_str(&wrong)
                ),
            )
        }
        Assertion::Count {
            label,
            host,
            after,
            before,
            min,
            max,
        } => {
            let n = sim
                .arrivals()
                .iter()
                .filter(|x| x.accepted && in_window(x.t, *after, *before))
                .filter(|x| label.is_none() || label_of(sim, x.flow) == label.as_deref())
                .filter(|x| host.is_none() || x.host == *host)
                .count() as u64;
            let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
            (
                ok,
                format!(
                    "label={} host={} observed={n} min={} max={}",
                    label.as_deref().unwrap_or("*"),
                    host.as_deref().unwrap_or("*"),
                    min.map_or("-".into(), |m| m.to_string()),
                    max.map_or("-".into(), |m| m.to_string())
                ),
            )
        }
        Assertion::MaxGap {
            label,
            host,
            after,
            before,
            max,
        } => {
            let times: Vec<SimTime> = sim
                .arrivals()
                .iter()
                .filter(|x| x.accepted && x.host.as_deref() == Some(host) && label_of(sim, x.flow) == Some(label))
                .filter(|x| in_window(x.t, *after, *before))
                .map(|x| x.t)
                .collect();
            let gap = times
                .windows(2)
                .map(|w| w[1].saturating_sub(w[0]))
                .max()
                .unwrap_or(SimTime::ZERO);
            (
                times.len() >= 2 && gap <= SimTime::from_secs_f64(*max),
                format!(
                    "label={label} host={host} deliveries={} max_gap={gap} limit={max}",
                    times.len()
                ),
            )
        }
        Assertion::NoCrossDelivery {} => {
            let ports = sim.service_ports();
            let mut leaks = 0u64;
            let mut examples = BTreeSet::new();
            for x in sim.arrivals() {
                let f = &sim.flows()[&x.flow];
                if f.kind != FlowKind::Data {
                    continue;
                }
                let (Some(sv), Some(dv)) = (f.vid, x.vid) else {
                    leaks += 1;
                    continue;
                };
                let shared = ports
                    .values()
                    .any(|set| set.contains(&(f.src, sv)) && set.contains(&(x.port, dv)));
                if !shared {
                    leaks += 1;
                    examples.insert(format!("{}->{}", f.src, x.port));
                }
            }
            let frames = sim.flows().values().filter(|f| f.kind == FlowKind::Data).count();
            (
                leaks == 0,
                format!(
                    "frames={frames} cross_service_arrivals={leaks} examples={}",
                    set_str(&examples)
                ),
            )
        }
        Assertion::OwnershipClean {} => {
            let consistent = sim.fabric.ownership_consistent();
            let fuzz_bad: u64 = sim
                .fuzz_reports()
                .iter()
                .map(|r| r.unexpected + r.forbidden_entries + r.spb_touched_ext + r.controller_touched_spb)
                .sum();
            let ops: u64 = sim.fuzz_reports().iter().map(|r| r.ops).sum();
            let refused: u64 = sim.fuzz_reports().iter().map(|r| r.refused).sum();
            (
                consistent && fuzz_bad == 0,
                format!(
                    "fdb_consistent={consistent} fuzz_ops={ops} refused={refused} violations_recorded={} anomalies={fuzz_bad}",
                    sim.fabric.ownership_violations()
                ),
            )
        }
        Assertion::Defects { service, min } => {
            let n = raised(sim, service.as_deref(), None).len() as u64;
            (
                n >= *min,
                format!("service={} raised={n} min={min}", service.as_deref().unwrap_or("*")),
            )
        }
        Assertion::NoDefects { service } => {
            let n = raised(sim, service.as_deref(), None).len();
            (
                n == 0,
                format!("service={} raised={n}", service.as_deref().unwrap_or("*")),
            )
        }
        Assertion::ProtectionState { service, state } => {
            let g = sim
                .controller
                .binding(service)
                .and_then(|b| b.protection)
                .and_then(|g| sim.groups().get(&g));
            match g {
                Some(g) => (
                    g.state.to_string() == *state,
                    format!("service={service} expected={state} observed={}", g.state),
                ),
                None => (false, format!("service={service} has no protection group")),
            }
        }
        Assertion::NoDualDelivery {} => {
            let mut seen: BTreeMap<(u64, &str), u32> = BTreeMap::new();
            for x in sim.arrivals().iter().filter(|x| x.accepted) {
                if let Some(h) = &x.host {
                    *seen.entry((x.flow, h)).or_default() += 1;
                }
            }
            let dual = seen.values().filter(|n| **n > 1).count();
            (dual == 0, format!("deliveries={} duplicated={dual}", seen.len()))
        }
        Assertion::Conservation {} => {
            let bad = sim.conservation_violations();
            (
                bad.is_empty(),
                format!("flows={} unbalanced={}", sim.flows().len(), bad.len()),
            )
        }
        Assertion::FateSharing { fail_at, observe } => fate_sharing(sc, opts, sim, *fail_at, *observe),
    }
}

/// DefectRaised events for `service` (any when `None`) inside `window`.
fn raised(sim: &Sim, service: Option<&str>, window: Option<(SimTime, SimTime)>) -> Vec<(String, SimTime)> {
    sim.oam_events()
        .iter()
        .filter(|e| e.kind == OamEventKind::DefectRaised)
        .filter(|e| window.is_none_or(|(a, b)| e.t > a && e.t <= b))
        .filter_map(|e| {
            let (s, _) = sim.ma_service(e.ma)?;
            (service.is_none_or(|x| x == s)).then(|| (s.to_string(), e.t))
        })
        .collect()
}

/// Outcome of one link-failure run of a sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepCase {
    pub link: LinkKey,
    pub expected: BTreeSet<String>,
    pub raised: BTreeSet<String>,
    /// First defect per service, relative to the failure.
    pub latency: BTreeMap<String, SimTime>,
}

/// Fails every link in turn at `fail_at` and records which services'
/// MAs raise a defect within `observe`.
pub fn sweep(
    sc: &Scenario,
    opts: &RunOptions,
    data_paths: &BTreeMap<String, BTreeSet<LinkKey>>,
    fail_at: SimTime,
    observe: SimTime,
) -> Result<Vec<SweepCase>, Vec<ScenarioError>> {
    let probe = build(sc, opts)?;
    let keys: Vec<LinkKey> = probe.fabric.phys.links().map(|l| l.key).collect();
    let mut cases = Vec::new();
    for key in keys {
        let mut sim = build(
            sc,
            &RunOptions {
                keep_trace: false,
                ..opts.clone()
            },
        )?;
        sim.schedule_action(
            fail_at,
            Action::SetLink {
                a: key.a().bridge,
                b: key.b().bridge,
                up: false,
            },
        );
        sim.run_until(fail_at + observe);
        let hits = raised(&sim, None, Some((fail_at, fail_at + observe)));
        let mut latency = BTreeMap::new();
        for (s, t) in &hits {
            latency.entry(s.clone()).or_insert(t.saturating_sub(fail_at));
        }
        cases.push(SweepCase {
            link: key,
            expected: data_paths
                .iter()
                .filter(|(_, links)| links.contains(&key))
                .map(|(s, _)| s.clone())
                .collect(),
            raised: latency.keys().cloned().collect(),
            latency,
        });
    }
    Ok(cases)
}

fn fate_sharing(sc: &Scenario, opts: &RunOptions, baseline: &Sim, fail_at: f64, observe: f64) -> (bool, String) {
    let fail_at = SimTime::from_secs_f64(fail_at);
    let observe = SimTime::from_secs_f64(observe);
    let services: BTreeSet<String> = baseline
        .controller
        .bindings()
        .values()
        .filter(|b| !b.oam.is_empty())
        .map(|b| b.request.name.clone())
        .collect();
    let mut paths = BTreeMap::new();
    let mut bound = BTreeMap::new();
    for s in &services {
        let (links, delay) = observed_data_path(baseline, s);
        let interval = baseline
            .controller
            .binding(s)
            .and_then(|b| b.request.requirements.oam_interval);
        bound.insert(
            s.clone(),
            SimTime::from_nanos(interval.map_or(0, |i| i.as_nanos()) * crate::oam::LOSS_THRESHOLD) + delay,
        );
        paths.insert(s.clone(), links);
    }
    let early = raised(baseline, None, Some((SimTime::ZERO, fail_at)));
    let cases = match sweep(sc, opts, &paths, fail_at, observe) {
        Ok(c) => c,
        Err(e) => return (false, format!("rerun failed: {}", e[0])),
    };
    let mut wrong = Vec::new();
    let mut slow = Vec::new();
    for c in &cases {
        if c.raised != c.expected {
            wrong.push(format!(
                "{}:expected={}:raised={}",
                c.link,
                set_str(&c.expected),
                set_str(&c.raised)
            ));
        }
        for (s, l) in &c.latency {
            if bound.get(s).is_some_and(|b| l > b) {
                slow.push(format!("{}:{s}:{l}", c.link));
            }
        }
    }
    (
        wrong.is_empty() && slow.is_empty() && early.is_empty() && !services.is_empty(),
        format!(
            "links={} services={} mismatches={} over_latency={} baseline_defects={}{}",
            cases.len(),
            services.len(),
            wrong.len(),
            slow.len(),
            early.len(),
            if wrong.is_empty() && slow.is_empty() {
                String::new()
            } else {
                format!(" detail={}", [wrong, slow].concat().join(";"))
            }
        ),
    )
}

// ----- dumps --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Fdb,
    Topology,
    Lsdb,
    Bindings,
}

impl std::str::FromStr for DumpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fdb" => Ok(DumpKind::Fdb),
            "topology" => Ok(DumpKind::Topology),
            "lsdb" => Ok(DumpKind::Lsdb),
            "bindings" => Ok(DumpKind::Bindings),
            _ => Err(format!("unknown dump {s:?}; expected fdb, topology, lsdb or bindings")),
        }
    }
}

impl fmt::Display for DumpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DumpKind::Fdb => "fdb",
            DumpKind::Topology => "topology",
            DumpKind::Lsdb => "lsdb",
            DumpKind::Bindings => "bindings",
        })
    }
}

/// State of a running simulation in the sorted text format of `kind`.
pub fn dump_sim(sim: &Sim, kind: DumpKind) -> Vec<String> {
    let mut lines = vec![format!("# format={DUMP_FORMAT_VERSION} dump={kind} t={}", sim.now())];
    match kind {
        DumpKind::Fdb => lines.extend(sim.fabric.fdb_dump(sim.now())),
        DumpKind::Topology => {
            lines.extend(sim.fabric.phys.dump());
            for (vid, msti) in sim.fabric.msti.allocations() {
                let owner = sim.fabric.msti.owner_of(vid).expect("allocated");
                lines.push(format!("vlan {vid} msti=0x{msti:03X} owner={owner}"));
            }
        }
        DumpKind::Lsdb => lines.extend(sim.fabric.spb.lsdb().dump()),
        DumpKind::Bindings => lines.extend(sim.controller.bindings_dump()),
    }
    lines
}

/// Runs to `at` and dumps.
pub fn dump(sc: &Scenario, at: f64, kind: DumpKind) -> Result<Vec<String>, Vec<ScenarioError>> {
    let mut errs = Vec::new();
    let at = secs(at, "--at", &mut errs);
    if !errs.is_empty() {
        return Err(errs);
    }
    let mut sim = build(sc, &RunOptions::default())?;
    sim.run_until(at);
    Ok(dump_sim(&sim, kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "format_version": 1,
            "until": 0.1,
            "bridges": [
                {"id": 1, "access_ports": [10]},
                {"id": 2, "access_ports": [10]}
            ],
            "links": [{"a": "1.1", "b": "2.1"}],
            "hosts": [
                {"name": "a", "port": "1.10", "mac": "00:00:00:00:00:0a", "vid": 11},
                {"name": "b", "port": "2.10", "mac": "00:00:00:00:00:0b", "vid": 11}
            ],
            "services": [{
                "name": "s", "type": "P2P",
                "attachments": [{"port": "1.10", "vid": 11}, {"port": "2.10", "vid": 11}]
            }],
            "timeline": [{"action": "inject", "at": 0.01, "host": "a", "dst": "b", "label": "s"}],
            "assertions": [{"kind": "delivery", "label": "s", "hosts": ["b"]}]
        })
    }

    fn sc(v: serde_json::Value) -> Scenario {
        parse(&v.to_string()).unwrap()
    }

    #[test]
    fn minimal_scenario_passes() {
        let out = run(&sc(minimal()), &RunOptions::default()).unwrap();
        assert!(out.passed(), "{:?}", out.report());
    }

    #[test]
    fn undeclared_bridge_names_the_field() {
        let mut v = minimal();
        v["links"][0]["b"] = "9.1".into();
        let errs = validate(&sc(v)).unwrap_err();
        assert_eq!(errs[0].path, "links[0].b");
        assert!(errs[0].message.contains("undeclared bridge 9"));
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let err = parse("{\n  \"format_version\": 1,\n  \"until\": \"soon\"\n}").unwrap_err();
        assert!(err.path.starts_with("line 3"), "{err}");
        let err = parse(r#"{"format_version": 1, "until": 1, "bridges": [], "colour": 1}"#).unwrap_err();
        assert!(err.message.contains("colour"), "{err}");
    }

    #[test]
    fn cyclic_tree_is_refused() {
        let mut v = minimal();
        v["bridges"] = serde_json::json!([
            {"id": 1, "access_ports": [10]}, {"id": 2, "access_ports": [10]}, {"id": 3, "access_ports": [10]}
        ]);
        v["links"] = serde_json::json!([
            {"a": "1.2", "b": "2.1"}, {"a": "2.3", "b": "3.2"}, {"a": "3.1", "b": "1.3"}
        ]);
        v["services"] = serde_json::json!([{
            "name": "t", "type": "MP2MP", "tree": [[1, 2], [2, 3], [3, 1]],
            "attachments": [{"port": "1.10", "vid": 11}, {"port": "2.10", "vid": 11}, {"port": "3.10", "vid": 11}]
        }]);
        v["assertions"] = serde_json::json!([]);
        let errs = validate(&sc(v)).unwrap_err();
        assert!(errs[0].message.contains("cycle"), "{errs:?}");
    }

    #[test]
    fn duplicate_flow_priority_is_refused() {
        let mut v = minimal();
        let rule =
            serde_json::json!({"priority": 5, "match": {"selector": 80}, "action": {"kind": "map_to_bvid", "bvid": 3}});
        v["ports"] = serde_json::json!([{"port": "1.10", "flow_rules": [rule.clone(), rule]}]);
        let errs = validate(&sc(v)).unwrap_err();
        assert_eq!(errs[0].path, "ports[0]");
        assert!(errs[0].message.contains("priority 5"));
    }

    #[test]
    fn impossible_assertion_shows_sets() {
        let mut v = minimal();
        v["assertions"] = serde_json::json!([{"kind": "delivery", "label": "s", "hosts": ["a", "b"]}]);
        let out = run(&sc(v), &RunOptions::default()).unwrap();
        assert!(!out.passed());
        let line = out.results[1].to_string();
        assert!(line.contains("expected={a,b} observed={b}"), "{line}");
    }

    #[test]
    fn builtins_parse_and_validate() {
        for name in BUILTINS {
            let s = parse(builtin(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            validate(&s).unwrap_or_else(|e| panic!("{name}: {e:?}"));
        }
    }

    #[test]
    fn lsdb_dump_matches_declared_topology() {
        let s = sc(minimal());
        let lines = dump(&s, 0.05, DumpKind::Lsdb).unwrap();
        assert!(lines.iter().any(|l| l.as_str() == "link 1.1 2.1 metric=1"), "{lines:?}");
        assert_eq!(lines.iter().filter(|l| l.starts_with("bridge ")).count(), 2);
    }
}
