// SPDX-License-Identifier: Apache-2.0

//! The external agent: an in-process SDN controller.
//!
//! Services that are fine with shortest paths are handed to SPB; the
//! controller then only touches the edge ports. Services that need path
//! control (or protection) get their own Ext-MSTI B-VID and the controller
//! programs every bridge along the path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::dataplane::{BdaPolicy, DataplaneError, EncapParams, FdbEntry, Origin};
use crate::fabric::{Fabric, FabricError};
use crate::frames::{backbone_group_mac, Isid, MacAddress, Vid};
use crate::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};
use crate::oam::{MaConfig, MaId, MaScope, MepConfig};
use crate::protection::{check_disjoint, GroupConfig, GroupId, PathInfo, ProtectionError};
use crate::spb::{compute_spt, Lsdb, Role, ServiceAttachment, SpbError};
use crate::topology::{validate_active_tree, ActiveTree, LinkKey, TopologyError, TreeCheck, EXT_MSTI, SPBM_MSTI};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("no SPB bridge is available")]
    NoSpbAvailable,
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("resources exhausted: {0}")]
    ResourceExhausted(String),
    #[error("ownership violation: {0}")]
    OwnershipViolation(String),
    #[error("unknown port {0}")]
    UnknownPort(PortId),
    #[error("install failed at bridge {bridge}: {cause}")]
    InstallFailed { bridge: BridgeId, cause: String },
    #[error("explicit tree contains a cycle through {0:?}")]
    CycleRefused(Vec<LinkKey>),
    #[error("unknown binding {0}")]
    UnknownBinding(String),
    #[error("duplicate service {0}")]
    DuplicateService(String),
    #[error("moving an explicit-path service requires a new path")]
    PathRequired,
    #[error("{0} is not an attachment of the service")]
    UnknownAttachment(PortId),
    #[error(transparent)]
    Protection(#[from] ProtectionError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

impl From<DataplaneError> for ControllerError {
    fn from(e: DataplaneError) -> Self {
        match e {
            DataplaneError::OwnershipViolation { .. } => ControllerError::OwnershipViolation(e.to_string()),
            DataplaneError::UnknownPort(p) => ControllerError::UnknownPort(p),
            other => ControllerError::Fabric(other.into()),
        }
    }
}

impl From<TopologyError> for ControllerError {
    fn from(e: TopologyError) -> Self {
        ControllerError::Fabric(e.into())
    }
}

impl From<SpbError> for ControllerError {
    fn from(e: SpbError) -> Self {
        match e {
            SpbError::OwnershipViolation(_) => ControllerError::OwnershipViolation(e.to_string()),
            other => ControllerError::Fabric(other.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum ServiceKind {
    P2P,
    MP2MP,
    RootedMP,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::P2P => "P2P",
            ServiceKind::MP2MP => "MP2MP",
            ServiceKind::RootedMP => "RootedMP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attachment {
    pub port: PortId,
    /// Customer scope, carried as an S-VID.
    pub vid: Vid,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathChoice {
    /// Bridge sequence from one endpoint to the other.
    Path(Vec<BridgeId>),
    /// Undirected tree edges between bridges.
    Tree(Vec<(BridgeId, BridgeId)>),
}

impl fmt::Display for PathChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathChoice::Path(p) => {
                let s: Vec<String> = p.iter().map(ToString::to_string).collect();
                f.write_str(&s.join("-"))
            }
            PathChoice::Tree(edges) => {
                let s: Vec<String> = edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionReq {
    /// Protection path; computed as a link-disjoint shortest path if absent.
    pub path: Option<Vec<BridgeId>>,
    pub revertive: bool,
    pub wtr: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Requirements {
    pub shortest_path_ok: bool,
    pub explicit_path: Option<PathChoice>,
    pub oam_interval: Option<SimTime>,
    pub protection: Option<ProtectionReq>,
}

impl Default for Requirements {
    fn default() -> Self {
        Requirements {
            shortest_path_ok: true,
            explicit_path: None,
            oam_interval: None,
            protection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequest {
    pub name: String,
    pub kind: ServiceKind,
    pub attachments: Vec<Attachment>,
    pub requirements: Requirements,
    /// Pins the I-SID instead of drawing from the pool.
    pub isid: Option<Isid>,
    /// Pins the B-VID instead of drawing from the pool.
    pub bvid: Option<Vid>,
}

impl ServiceRequest {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidRequest(format!("{}: {m}", self.name)));
        if self.attachments.is_empty() {
            return bad("no attachments");
        }
        if self.kind == ServiceKind::P2P && self.attachments.len() != 2 {
            return bad("a point-to-point service has exactly two attachments");
        }
        let ports: BTreeSet<PortId> = self.attachments.iter().map(|a| a.port).collect();
        if ports.len() != self.attachments.len() {
            return bad("duplicate attachment port");
        }
        if self.kind == ServiceKind::RootedMP && !self.attachments.iter().any(|a| a.role == Role::Root) {
            return bad("rooted multipoint needs a root attachment");
        }
        if self.kind != ServiceKind::RootedMP && self.attachments.iter().any(|a| a.role != Role::Full) {
            return bad("roots and leaves only exist in rooted multipoint services");
        }
        if let Some(p) = &self.requirements.protection {
            if self.kind != ServiceKind::P2P {
                return bad("protection requires a point-to-point service");
            }
            if self.requirements.oam_interval.is_none() {
                return bad("protection requires continuity checks");
            }
            if p.wtr == SimTime::ZERO && p.revertive {
                return bad("wait-to-restore must be positive");
            }
        }
        match (&self.requirements.explicit_path, self.kind) {
            (Some(PathChoice::Tree(_)), ServiceKind::P2P) => bad("point-to-point services take a path, not a tree"),
            (Some(PathChoice::Path(_)), k) if k != ServiceKind::P2P => bad("multipoint services take a tree"),
            _ => Ok(()),
        }
    }

    /// Explicit path, protection or refusal of shortest paths hand the
    /// service to the controller.
    pub fn wants_sdn(&self) -> bool {
        let r = &self.requirements;
        r.explicit_path.is_some() || r.protection.is_some() || !r.shortest_path_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Control {
    Spb,
    Sdn,
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Control::Spb => "Spb",
            Control::Sdn => "Sdn",
        })
    }
}

/// A path or tree resolved against the controller's view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    /// Path order for paths, discovery order from the first attachment for trees.
    pub bridges: Vec<BridgeId>,
    pub links: Vec<LinkKey>,
    pub is_tree: bool,
}

impl Resolved {
    fn describe(&self) -> String {
        if self.is_tree {
            let s: Vec<String> = self
                .links
                .iter()
                .map(|k| format!("{}-{}", k.a().bridge, k.b().bridge))
                .collect();
            s.join(",")
        } else {
            let s: Vec<String> = self.bridges.iter().map(ToString::to_string).collect();
            s.join("-")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstalledPath {
    pub bvid: Vid,
    pub path: Resolved,
    pub entries: Vec<(BridgeId, u16, FdbEntry)>,
    pub members: Vec<(BridgeId, BTreeSet<PortId>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceBinding {
    pub request: ServiceRequest,
    pub isid: Isid,
    pub bvid: Vid,
    pub control: Control,
    /// Working path first, then the protection path.
    pub paths: Vec<InstalledPath>,
    pub oam: Vec<MaId>,
    pub protection: Option<GroupId>,
}

impl ServiceBinding {
    pub fn installed_entries(&self) -> impl Iterator<Item = &(BridgeId, u16, FdbEntry)> {
        self.paths.iter().flat_map(|p| p.entries.iter())
    }

    pub fn dump(&self) -> String {
        let atts: Vec<String> = self
            .request
            .attachments
            .iter()
            .map(|a| format!("{}:{}", a.port, a.vid))
            .collect();
        let path = self.paths.first().map_or("-".into(), |p| p.path.describe());
        let mut line = format!(
            "service={} type={} control={} isid={} bvid={} attachments={} path={}",
            self.request.name,
            self.request.kind,
            self.control,
            self.isid,
            self.bvid,
            atts.join(","),
            path
        );
        if let Some(p) = self.paths.get(1) {
            line.push_str(&format!(
                " protection_bvid={} protection_path={}",
                p.bvid,
                p.path.describe()
            ));
        }
        let mas: Vec<String> = self.oam.iter().map(ToString::to_string).collect();
        line.push_str(&format!(
            " oam={} group={}",
            if mas.is_empty() { "-".into() } else { mas.join(",") },
            self.protection.map_or("-".into(), |g| g.to_string())
        ));
        line
    }
}

/// What the simulation must activate after a successful setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupPlan {
    pub service: String,
    pub oam: Vec<MaConfig>,
    pub protection: Option<GroupConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pools {
    pub isids: (u32, u32),
    pub spb_bvids: Vec<Vid>,
    pub ext_bvids: Vec<Vid>,
}

impl Default for Pools {
    fn default() -> Self {
        let v = |x| Vid::service(x).expect("service vid");
        Pools {
            isids: (1, 0xff_ffff),
            spb_bvids: vec![v(1)],
            ext_bvids: (2..=100).map(v).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Controller {
    pub pools: Pools,
    bindings: BTreeMap<String, ServiceBinding>,
    view: Option<Lsdb>,
    log: Vec<String>,
    fail_install_at: Option<usize>,
}

/// Installs or replaces the edge association of `vid` on an access port.
pub fn program_edge(
    fabric: &mut Fabric,
    port: PortId,
    vid: Vid,
    params: EncapParams,
    actor: Actor,
) -> Result<(), ControllerError> {
    check_edge(fabric, port, params.bvid, actor)?;
    let cfg = fabric.bridge(port.bridge)?.port(port).expect("access port exists");
    if cfg.encap_rules.get(&vid) == Some(&params) && cfg.decap_rule && cfg.vlan_membership.contains(&vid) {
        return Ok(());
    }
    fabric.bridge_mut(port.bridge)?.update_port(port, actor, |c| {
        c.vlan_membership.insert(vid);
        c.encap_rules.insert(vid, params);
        c.decap_rule = true;
    })?;
    Ok(())
}

/// Removes the edge association of `vid` from an access port.
pub fn unprogram_edge(fabric: &mut Fabric, port: PortId, vid: Vid, actor: Actor) -> Result<(), ControllerError> {
    if !fabric.is_access_port(port) {
        return Err(ControllerError::UnknownPort(port));
    }
    let cfg = fabric.bridge(port.bridge)?.port(port).expect("access port exists");
    if !cfg.encap_rules.contains_key(&vid) {
        return Ok(());
    }
    fabric.bridge_mut(port.bridge)?.update_port(port, actor, |c| {
        c.vlan_membership.remove(&vid);
        c.encap_rules.remove(&vid);
        c.decap_rule = !c.encap_rules.is_empty();
    })?;
    Ok(())
}

fn check_edge(fabric: &Fabric, port: PortId, bvid: Vid, actor: Actor) -> Result<(), ControllerError> {
    if !fabric.is_access_port(port) {
        return Err(ControllerError::UnknownPort(port));
    }
    let owner = fabric.msti.owner_of(bvid).ok_or(DataplaneError::UnknownVid(bvid))?;
    // edge associations are port configuration; SPB never programs them
    if actor == Actor::SpbPlane {
        return Err(ControllerError::OwnershipViolation(format!(
            "{actor} may not program edge port {port} for bvid {bvid} owned by {owner}"
        )));
    }
    Ok(())
}

/// Resolves a requested path against a link-state view.
pub fn resolve_path(view: &Lsdb, sc: &PathChoice, attachments: &[Attachment]) -> Result<Resolved, ControllerError> {
    let link = |x: BridgeId, y: BridgeId| -> Result<LinkKey, ControllerError> {
        view.links
            .iter()
            .filter(|l| l.key.joins(x, y))
            .min_by_key(|l| (l.metric, l.key))
            .map(|l| l.key)
            .ok_or_else(|| ControllerError::InvalidPath(format!("bridges {x} and {y} are not adjacent")))
    };
    let att_bridges: Vec<BridgeId> = attachments.iter().map(|a| a.port.bridge).collect();
    match sc {
        PathChoice::Path(bridges) => {
            if bridges.is_empty() {
                return Err(ControllerError::InvalidPath("empty path".into()));
            }
            let mut seen = BTreeSet::new();
            for b in bridges {
                if !view.bridges.contains_key(b) {
                    return Err(ControllerError::InvalidPath(format!("unknown bridge {b}")));
                }
                if !seen.insert(*b) {
                    return Err(ControllerError::InvalidPath(format!("bridge {b} visited twice")));
                }
            }
            let mut bridges = bridges.clone();
            let (first, last) = (bridges[0], *bridges.last().expect("non-empty"));
            match att_bridges.as_slice() {
                [a, z] if (*a, *z) == (first, last) => {}
                [a, z] if (*a, *z) == (last, first) => bridges.reverse(),
                _ => {
                    return Err(ControllerError::InvalidPath(format!(
                        "path must run between the attachment bridges {att_bridges:?}"
                    )))
                }
            }
            let links = bridges
                .windows(2)
                .map(|w| link(w[0], w[1]))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Resolved {
                bridges,
                links,
                is_tree: false,
            })
        }
        PathChoice::Tree(edges) => {
            let mut keys = BTreeSet::new();
            for (x, y) in edges {
                if x == y {
                    return Err(ControllerError::InvalidPath(format!("self loop at {x}")));
                }
                if !keys.insert(link(*x, *y)?) {
                    return Err(ControllerError::CycleRefused(vec![link(*x, *y)?]));
                }
            }
            let mut phys = crate::topology::PhysicalTopology::new();
            for (id, mac) in &view.bridges {
                phys.add_bridge(*id, *mac)?;
            }
            for l in &view.links {
                phys.add_link(l.key.a(), l.key.b(), l.metric, SimTime::ZERO)?;
            }
            let members: BTreeSet<BridgeId> = att_bridges.iter().copied().collect();
            let tree = ActiveTree {
                scope: Vid::service(1).expect("service vid"),
                edges: keys.clone(),
                root: att_bridges.first().copied(),
                members,
            };
            match validate_active_tree(&tree, &phys) {
                TreeCheck::Valid => {}
                TreeCheck::CycleFound(c) => return Err(ControllerError::CycleRefused(c)),
                TreeCheck::Disconnected(b) => {
                    return Err(ControllerError::InvalidPath(format!("tree does not reach {b:?}")))
                }
            }
            Ok(tree_order(att_bridges[0], &keys))
        }
    }
}

/// Breadth-first order of a tree's bridges and links from `root`.
fn tree_order(root: BridgeId, keys: &BTreeSet<LinkKey>) -> Resolved {
    let mut bridges = vec![root];
    let mut links = Vec::new();
    let mut seen = BTreeSet::from([root]);
    let mut queue = VecDeque::from([root]);
    while let Some(x) = queue.pop_front() {
        for k in keys {
            let other = if k.a().bridge == x {
                k.b().bridge
            } else if k.b().bridge == x {
                k.a().bridge
            } else {
                continue;
            };
            if seen.insert(other) {
                bridges.push(other);
                links.push(*k);
                queue.push_back(other);
            }
        }
    }
    Resolved {
        bridges,
        links,
        is_tree: true,
    }
}

fn port_on(key: LinkKey, bridge: BridgeId) -> PortId {
    if key.a().bridge == bridge {
        key.a()
    } else {
        key.b()
    }
}

impl Controller {
    pub fn new(pools: Pools) -> Self {
        Controller {
            pools,
            ..Default::default()
        }
    }

    pub fn bindings(&self) -> &BTreeMap<String, ServiceBinding> {
        &self.bindings
    }

    pub fn binding(&self, name: &str) -> Option<&ServiceBinding> {
        self.bindings.get(name)
    }

    pub fn binding_mut(&mut self, name: &str) -> Option<&mut ServiceBinding> {
        self.bindings.get_mut(name)
    }

    pub fn decision_log(&self) -> &[String] {
        &self.log
    }

    pub fn view(&self) -> Option<&Lsdb> {
        self.view.as_ref()
    }

    /// The next path installation fails before programming its `nth`
    /// bridge (0-based).
    pub fn inject_install_fault(&mut self, nth: usize) {
        self.fail_install_at = Some(nth);
    }

    /// Retrieves the link-state database from the lowest-numbered SPB bridge.
    pub fn sync_topology(&mut self, fabric: &Fabric) -> Result<&Lsdb, ControllerError> {
        let first = fabric
            .spb
            .lsdb()
            .bridges
            .keys()
            .next()
            .copied()
            .ok_or(ControllerError::NoSpbAvailable)?;
        self.view = Some(fabric.spb.export_lsdb(first)?);
        Ok(self.view.as_ref().expect("just set"))
    }

    fn alloc_isid(&self, pinned: Option<Isid>) -> Result<Isid, ControllerError> {
        let used: BTreeSet<Isid> = self.bindings.values().map(|b| b.isid).collect();
        if let Some(i) = pinned {
            if used.contains(&i) {
                return Err(ControllerError::InvalidRequest(format!("isid {i} already in use")));
            }
            return Ok(i);
        }
        (self.pools.isids.0..=self.pools.isids.1)
            .filter_map(|v| Isid::new(v).ok())
            .find(|i| !used.contains(i))
            .ok_or_else(|| ControllerError::ResourceExhausted("no free I-SID".into()))
    }

    fn alloc_ext_bvid(&self, fabric: &Fabric, pinned: Option<Vid>, avoid: &[Vid]) -> Result<Vid, ControllerError> {
        let free = |v: &Vid| {
            !avoid.contains(v) && !fabric.msti.in_use(*v) && fabric.msti.owner_of(*v) != Some(ControlPlane::Spb)
        };
        if let Some(v) = pinned {
            if fabric.msti.owner_of(v) == Some(ControlPlane::Spb) {
                return Err(ControllerError::OwnershipViolation(format!(
                    "bvid {v} is controlled by SPB"
                )));
            }
            return Ok(v);
        }
        self.pools
            .ext_bvids
            .iter()
            .copied()
            .find(free)
            .ok_or_else(|| ControllerError::ResourceExhausted("no free Ext-MSTI B-VID".into()))
    }

    fn choose_spb_bvid(&self, fabric: &Fabric, pinned: Option<Vid>) -> Result<Vid, ControllerError> {
        let usable = |v: &Vid| match fabric.msti.owner_of(*v) {
            Some(ControlPlane::Spb) => true,
            Some(ControlPlane::ExternalAgent) => !fabric.msti.in_use(*v),
            None => true,
        };
        if let Some(v) = pinned {
            if !usable(&v) {
                return Err(ControllerError::OwnershipViolation(format!(
                    "bvid {v} is controlled by the external agent"
                )));
            }
            return Ok(v);
        }
        self.pools
            .spb_bvids
            .iter()
            .copied()
            .find(usable)
            .ok_or_else(|| ControllerError::ResourceExhausted("no SPBM B-VID".into()))
    }

    /// Selects the control plane, programs the edges and, for explicit
    /// paths, every bridge on the path. All-or-nothing.
    pub fn setup_service(&mut self, fabric: &mut Fabric, req: ServiceRequest) -> Result<SetupPlan, ControllerError> {
        req.validate()?;
        if self.bindings.contains_key(&req.name) {
            return Err(ControllerError::DuplicateService(req.name.clone()));
        }
        for a in &req.attachments {
            if !fabric.is_access_port(a.port) {
                return Err(ControllerError::UnknownPort(a.port));
            }
        }
        self.sync_topology(fabric)?;
        let snapshot = fabric.clone();
        let result = if req.wants_sdn() {
            self.setup_sdn(fabric, req)
        } else {
            self.setup_spb(fabric, req)
        };
        if result.is_err() {
            *fabric = snapshot;
        }
        result
    }

    fn setup_spb(&mut self, fabric: &mut Fabric, req: ServiceRequest) -> Result<SetupPlan, ControllerError> {
        let bvid = self.choose_spb_bvid(fabric, req.bvid)?;
        let isid = self.alloc_isid(req.isid)?;
        fabric.allocate_vlan(bvid, SPBM_MSTI)?;
        fabric.msti.acquire(bvid)?;
        self.program_service_edges(fabric, &req, isid, bvid, None)?;
        for a in &req.attachments {
            fabric.spb.advertise(
                ServiceAttachment {
                    bridge: a.port.bridge,
                    isid,
                    bvid,
                    role: a.role,
                },
                &fabric.msti,
                &fabric.phys,
            )?;
        }
        self.log.push(format!(
            "service={} control=Spb isid={isid} bvid={bvid} path=-",
            req.name
        ));
        let oam = req
            .requirements
            .oam_interval
            .map(|interval| vec![ma_config(&req, MaScope::Service { isid, bvid }, interval, None)])
            .unwrap_or_default();
        let name = req.name.clone();
        self.bindings.insert(
            name.clone(),
            ServiceBinding {
                request: req,
                isid,
                bvid,
                control: Control::Spb,
                paths: Vec::new(),
                oam: Vec::new(),
                protection: None,
            },
        );
        Ok(SetupPlan {
            service: name,
            oam,
            protection: None,
        })
    }

    fn setup_sdn(&mut self, fabric: &mut Fabric, req: ServiceRequest) -> Result<SetupPlan, ControllerError> {
        let view = self.view.clone().ok_or(ControllerError::NoSpbAvailable)?;
        let working = match &req.requirements.explicit_path {
            Some(sc) => resolve_path(&view, sc, &req.attachments)?,
            None => shortest(&view, &req.attachments, &BTreeSet::new())?,
        };
        let protection_path = match &req.requirements.protection {
            None => None,
            Some(p) => {
                let resolved = match &p.path {
                    Some(bridges) => resolve_path(&view, &PathChoice::Path(bridges.clone()), &req.attachments)?,
                    None => {
                        let avoid: BTreeSet<LinkKey> = working.links.iter().copied().collect();
                        shortest(&view, &req.attachments, &avoid).map_err(|_| {
                            ControllerError::Protection(ProtectionError::PathsNotDisjoint(working.links.clone()))
                        })?
                    }
                };
                check_disjoint(&working.links, &resolved.links)?;
                Some(resolved)
            }
        };

        let isid = self.alloc_isid(req.isid)?;
        let bvid = self.alloc_ext_bvid(fabric, req.bvid, &[])?;
        fabric.allocate_vlan(bvid, EXT_MSTI)?;
        fabric.msti.acquire(bvid)?;
        let mut paths = vec![self.install_path(fabric, &req, isid, bvid, &working)?];
        if let Some(pp) = &protection_path {
            let pbvid = self.alloc_ext_bvid(fabric, None, &[bvid])?;
            fabric.allocate_vlan(pbvid, EXT_MSTI)?;
            fabric.msti.acquire(pbvid)?;
            paths.push(self.install_path(fabric, &req, isid, pbvid, pp)?);
        }
        let rx_extra = paths.get(1).map(|p| p.bvid);
        self.program_service_edges(fabric, &req, isid, bvid, rx_extra)?;

        let mut line = format!(
            "service={} control=Sdn isid={isid} bvid={bvid} path={}",
            req.name,
            working.describe()
        );
        if let Some(p) = paths.get(1) {
            line.push_str(&format!(
                " protection_bvid={} protection_path={}",
                p.bvid,
                p.path.describe()
            ));
        }
        self.log.push(line);

        let mut oam = Vec::new();
        let mut group = None;
        if let Some(interval) = req.requirements.oam_interval {
            match (&req.requirements.protection, paths.get(1)) {
                (Some(p), Some(prot)) => {
                    oam.push(ma_config(&req, MaScope::Service { isid, bvid }, interval, Some(bvid)));
                    oam.push(ma_config(
                        &req,
                        MaScope::Service { isid, bvid: prot.bvid },
                        interval,
                        Some(prot.bvid),
                    ));
                    let a = &req.attachments;
                    group = Some(GroupConfig {
                        service: req.name.clone(),
                        endpoints: [(a[0].port, a[0].vid), (a[1].port, a[1].vid)],
                        working: PathInfo {
                            bridges: paths[0].path.bridges.clone(),
                            links: paths[0].path.links.clone(),
                            bvid,
                            ma: None,
                        },
                        protection: PathInfo {
                            bridges: prot.path.bridges.clone(),
                            links: prot.path.links.clone(),
                            bvid: prot.bvid,
                            ma: None,
                        },
                        revertive: p.revertive,
                        wtr: p.wtr,
                    });
                }
                _ => oam.push(ma_config(&req, MaScope::Service { isid, bvid }, interval, None)),
            }
        }
        let name = req.name.clone();
        self.bindings.insert(
            name.clone(),
            ServiceBinding {
                request: req,
                isid,
                bvid,
                control: Control::Sdn,
                paths,
                oam: Vec::new(),
                protection: None,
            },
        );
        Ok(SetupPlan {
            service: name,
            oam,
            protection: group,
        })
    }

    fn program_service_edges(
        &mut self,
        fabric: &mut Fabric,
        req: &ServiceRequest,
        isid: Isid,
        bvid: Vid,
        rx_extra: Option<Vid>,
    ) -> Result<(), ControllerError> {
        for (i, a) in req.attachments.iter().enumerate() {
            let bda = if req.kind == ServiceKind::P2P {
                let other = req.attachments[1 - i].port.bridge;
                BdaPolicy::Unicast(fabric.bridge(other)?.bmac)
            } else {
                BdaPolicy::Group
            };
            let mut params = EncapParams::new(isid, bvid, bda);
            params.rx_bvids.extend(rx_extra);
            program_edge(fabric, a.port, a.vid, params, Actor::SdnController)?;
        }
        Ok(())
    }

    /// Programs forwarding entries and VLAN membership along `path`, bridge
    /// by bridge. Any failure restores every bridge to its prior state.
    pub fn install_path(
        &mut self,
        fabric: &mut Fabric,
        req: &ServiceRequest,
        isid: Isid,
        bvid: Vid,
        path: &Resolved,
    ) -> Result<InstalledPath, ControllerError> {
        if fabric.msti.owner_of(bvid) != Some(ControlPlane::ExternalAgent) {
            return Err(ControllerError::OwnershipViolation(format!(
                "explicit paths need an Ext-MSTI bvid, {bvid} is not"
            )));
        }
        // Per bridge: entries to install and the ports the path touches.
        type Touch = (BTreeMap<MacAddress, BTreeSet<PortId>>, BTreeSet<PortId>);
        let mut per_bridge: BTreeMap<BridgeId, Touch> = BTreeMap::new();
        for b in &path.bridges {
            per_bridge.entry(*b).or_default();
        }
        for k in &path.links {
            for p in [k.a(), k.b()] {
                per_bridge.entry(p.bridge).or_default().1.insert(p);
            }
        }
        if path.is_tree {
            let group = backbone_group_mac(0, isid);
            for (entries, ports) in per_bridge.values_mut() {
                entries.insert(group, ports.clone());
            }
        } else {
            let n = path.bridges.len();
            let first = fabric.bridge(path.bridges[0])?.bmac;
            let last = fabric.bridge(path.bridges[n - 1])?.bmac;
            for i in 0..n {
                let x = path.bridges[i];
                let slot = &mut per_bridge.get_mut(&x).expect("on path").0;
                if i + 1 < n {
                    slot.entry(last).or_default().insert(port_on(path.links[i], x));
                }
                if i > 0 {
                    slot.entry(first).or_default().insert(port_on(path.links[i - 1], x));
                }
            }
        }

        let snapshot = fabric.bridges.clone();
        let fault = self.fail_install_at.take();
        let mut installed = InstalledPath {
            bvid,
            path: path.clone(),
            entries: Vec::new(),
            members: Vec::new(),
        };
        for (k, b) in path.bridges.iter().enumerate() {
            let (entries, ports) = &per_bridge[b];
            let step = |fabric: &mut Fabric, installed: &mut InstalledPath| -> Result<(), ControllerError> {
                if fault == Some(k) {
                    return Err(ControllerError::InstallFailed {
                        bridge: *b,
                        cause: "injected fault".into(),
                    });
                }
                let bridge = fabric.bridge_mut(*b)?;
                let fid = bridge.fid_of(bvid).ok_or(DataplaneError::UnknownVid(bvid))?.id;
                for (mac, out) in entries {
                    let entry = FdbEntry::new(*mac, out.iter().copied(), Origin::Sdn);
                    bridge.fdb_write(fid, entry.clone(), Actor::SdnController)?;
                    installed.entries.push((*b, fid, entry));
                }
                let mut members = bridge.members(bvid);
                members.extend(ports.iter().copied());
                bridge.set_vlan_members(bvid, &members, Actor::SdnController)?;
                installed.members.push((*b, ports.clone()));
                Ok(())
            };
            if let Err(e) = step(fabric, &mut installed) {
                fabric.bridges = snapshot;
                let cause = match e {
                    ControllerError::InstallFailed { .. } => return Err(e),
                    other => other.to_string(),
                };
                return Err(ControllerError::InstallFailed { bridge: *b, cause });
            }
        }
        let _ = req;
        Ok(installed)
    }

    fn remove_path(fabric: &mut Fabric, path: &InstalledPath) -> Result<(), ControllerError> {
        for (b, fid, entry) in &path.entries {
            fabric
                .bridge_mut(*b)?
                .fdb_remove(*fid, entry.mac, Actor::SdnController)?;
        }
        for (b, ports) in &path.members {
            let bridge = fabric.bridge_mut(*b)?;
            let members: BTreeSet<PortId> = bridge.members(path.bvid).difference(ports).copied().collect();
            bridge.set_vlan_members(path.bvid, &members, Actor::SdnController)?;
        }
        fabric.msti.release(path.bvid);
        Ok(())
    }

    /// Removes edge associations, installed entries and SPB advertisements.
    pub fn teardown_service(&mut self, fabric: &mut Fabric, name: &str) -> Result<ServiceBinding, ControllerError> {
        let binding = self
            .bindings
            .get(name)
            .cloned()
            .ok_or_else(|| ControllerError::UnknownBinding(name.to_string()))?;
        let snapshot = fabric.clone();
        let result = (|| {
            for a in &binding.request.attachments {
                unprogram_edge(fabric, a.port, a.vid, Actor::SdnController)?;
            }
            match binding.control {
                Control::Sdn => {
                    for p in &binding.paths {
                        Self::remove_path(fabric, p)?;
                    }
                }
                Control::Spb => {
                    for a in &binding.request.attachments {
                        fabric.spb.withdraw(
                            ServiceAttachment {
                                bridge: a.port.bridge,
                                isid: binding.isid,
                                bvid: binding.bvid,
                                role: a.role,
                            },
                            &fabric.msti,
                            &fabric.phys,
                        )?;
                    }
                    fabric.msti.release(binding.bvid);
                }
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                self.bindings.remove(name);
                self.log.push(format!("teardown service={name}"));
                Ok(binding)
            }
            Err(e) => {
                *fabric = snapshot;
                Err(e)
            }
        }
    }

    /// Moves one attachment point. Explicit-path services need a new path.
    /// Returns `None` when `from == to`.
    pub fn move_attachment(
        &mut self,
        fabric: &mut Fabric,
        name: &str,
        from: PortId,
        to: PortId,
        new_path: Option<PathChoice>,
    ) -> Result<Option<(ServiceBinding, SetupPlan)>, ControllerError> {
        let binding = self
            .bindings
            .get(name)
            .cloned()
            .ok_or_else(|| ControllerError::UnknownBinding(name.to_string()))?;
        let idx = binding
            .request
            .attachments
            .iter()
            .position(|a| a.port == from)
            .ok_or(ControllerError::UnknownAttachment(from))?;
        if from == to {
            return Ok(None);
        }
        if !fabric.is_access_port(to) {
            return Err(ControllerError::UnknownPort(to));
        }
        if binding.control == Control::Sdn && new_path.is_none() {
            return Err(ControllerError::PathRequired);
        }
        let mut req = binding.request.clone();
        req.attachments[idx].port = to;
        req.isid = Some(binding.isid);
        req.bvid = Some(binding.bvid);
        if binding.control == Control::Sdn {
            req.requirements.explicit_path = new_path;
        }
        let snapshot = (fabric.clone(), self.bindings.clone(), self.log.len());
        let old = self.teardown_service(fabric, name)?;
        match self.setup_service(fabric, req) {
            Ok(plan) => {
                self.log.push(format!("move service={name} from={from} to={to}"));
                Ok(Some((old, plan)))
            }
            Err(e) => {
                *fabric = snapshot.0;
                self.bindings = snapshot.1;
                self.log.truncate(snapshot.2);
                Err(e)
            }
        }
    }

    /// Points the edge association at both ends of a protected service to
    /// `bvid`, as one step.
    pub fn select_bvid(
        &mut self,
        fabric: &mut Fabric,
        endpoints: &[(PortId, Vid)],
        bvid: Vid,
    ) -> Result<(), ControllerError> {
        for (port, vid) in endpoints {
            let cfg = fabric
                .bridge(port.bridge)?
                .port(*port)
                .ok_or(ControllerError::UnknownPort(*port))?;
            let Some(rule) = cfg.encap_rules.get(vid) else {
                return Err(ControllerError::UnknownAttachment(*port));
            };
            if rule.bvid == bvid {
                continue;
            }
            let mut params = rule.clone();
            params.rx_bvids.insert(params.bvid);
            params.bvid = bvid;
            params.rx_bvids.remove(&bvid);
            program_edge(fabric, *port, *vid, params, Actor::SdnController)?;
        }
        Ok(())
    }

    pub fn bindings_dump(&self) -> Vec<String> {
        self.bindings.values().map(ServiceBinding::dump).collect()
    }
}

fn ma_config(req: &ServiceRequest, scope: MaScope, interval: SimTime, bvid_override: Option<Vid>) -> MaConfig {
    MaConfig {
        service: req.name.clone(),
        scope,
        interval,
        meps: req
            .attachments
            .iter()
            .enumerate()
            .map(|(i, a)| MepConfig {
                mep_id: i as u16 + 1,
                port: a.port,
                vid: a.vid,
            })
            .collect(),
        bvid_override,
    }
}

/// Shortest path (two attachments) or shortest-path tree from the first
/// attachment, avoiding `avoid`.
fn shortest(view: &Lsdb, attachments: &[Attachment], avoid: &BTreeSet<LinkKey>) -> Result<Resolved, ControllerError> {
    let mut v = view.clone();
    v.links.retain(|l| !avoid.contains(&l.key));
    let root = attachments[0].port.bridge;
    let spt = compute_spt(&v, root).map_err(|e| ControllerError::InvalidPath(e.to_string()))?;
    let unreachable = |b: BridgeId| ControllerError::InvalidPath(format!("bridge {b} is unreachable"));
    if attachments.len() == 2 {
        let to = attachments[1].port.bridge;
        return Ok(Resolved {
            bridges: spt.path_to(to).ok_or_else(|| unreachable(to))?,
            links: spt.links_to(to).ok_or_else(|| unreachable(to))?,
            is_tree: false,
        });
    }
    let mut keys = BTreeSet::new();
    for a in &attachments[1..] {
        keys.extend(spt.links_to(a.port.bridge).ok_or_else(|| unreachable(a.port.bridge))?);
    }
    Ok(tree_order(root, &keys))
}
