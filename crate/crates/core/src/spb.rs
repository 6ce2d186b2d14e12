// SPDX-License-Identifier: Apache-2.0

//! Link-state control plane with service auto-discovery.
//!
//! Flooding of link-state PDUs is abstracted away: after a configurable
//! delay the database becomes a consistent copy of the Up physical graph
//! plus every advertised service attachment, and all SPB-owned forwarding
//! tables are recomputed from it.
//!
//! Path selection is deterministic. Candidate paths are ordered by
//! `(cost, hop count, sorted bridge ids, bridge sequence)`. The first three
//! keys do not depend on direction, so whenever they single out one path the
//! path between two bridges is the same in both directions. The last key
//! only separates paths that visit the same bridge set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataplane::{BridgeState, FdbEntry, Origin};
use crate::frames::{backbone_group_mac, Isid, MacAddress, Vid};
use crate::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};
use crate::topology::{LinkKey, MstiTable, PhysicalTopology};

pub const DEFAULT_CONVERGENCE_DELAY: SimTime = SimTime::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpbError {
    #[error("unknown bridge {0}")]
    UnknownBridge(BridgeId),
    #[error("ownership violation: bvid {0} is not controlled by SPB")]
    OwnershipViolation(Vid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Full,
    Root,
    Leaf,
}

impl Role {
    /// Whether traffic from an attachment with this role reaches `to`.
    pub fn reaches(self, to: Role) -> bool {
        !(self == Role::Leaf && to == Role::Leaf)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Full => "Full",
            Role::Root => "Root",
            Role::Leaf => "Leaf",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceAttachment {
    pub bridge: BridgeId,
    pub isid: Isid,
    pub bvid: Vid,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LsdbLink {
    pub key: LinkKey,
    pub metric: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lsdb {
    pub seq: u64,
    pub bridges: BTreeMap<BridgeId, MacAddress>,
    pub links: BTreeSet<LsdbLink>,
    pub attachments: BTreeSet<ServiceAttachment>,
}

impl Lsdb {
    /// Neighbours over the best link to each adjacent bridge.
    fn adjacency(&self) -> BTreeMap<BridgeId, BTreeMap<BridgeId, LsdbLink>> {
        let mut adj: BTreeMap<BridgeId, BTreeMap<BridgeId, LsdbLink>> = BTreeMap::new();
        for l in &self.links {
            let (x, y) = (l.key.a().bridge, l.key.b().bridge);
            for (u, v) in [(x, y), (y, x)] {
                let slot = adj.entry(u).or_default();
                match slot.get(&v) {
                    Some(old) if (old.metric, old.key) <= (l.metric, l.key) => {}
                    _ => {
                        slot.insert(v, *l);
                    }
                }
            }
        }
        adj
    }

    /// `seq=<n>` header, then bridge, link and attach lines, each sorted.
    pub fn dump(&self) -> Vec<String> {
        let mut out = vec![format!("seq={}", self.seq)];
        for (id, mac) in &self.bridges {
            out.push(format!("bridge {id} bmac={mac}"));
        }
        let mut links: Vec<String> = self
            .links
            .iter()
            .map(|l| format!("link {} {} metric={}", l.key.a(), l.key.b(), l.metric))
            .collect();
        links.sort();
        out.extend(links);
        for a in &self.attachments {
            out.push(format!(
                "attach {} isid={} bvid={} role={}",
                a.bridge, a.isid, a.bvid, a.role
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SptResult {
    pub root: BridgeId,
    pub parent: BTreeMap<BridgeId, (BridgeId, LinkKey)>,
    pub cost: BTreeMap<BridgeId, u64>,
}

impl SptResult {
    /// Bridge sequence from the root to `to`, or `None` if unreachable.
    pub fn path_to(&self, to: BridgeId) -> Option<Vec<BridgeId>> {
        if !self.cost.contains_key(&to) {
            return None;
        }
        let mut path = vec![to];
        let mut cur = to;
        while let Some((p, _)) = self.parent.get(&cur) {
            path.push(*p);
            cur = *p;
        }
        path.reverse();
        Some(path)
    }

    /// Links from the root to `to`, in path order.
    pub fn links_to(&self, to: BridgeId) -> Option<Vec<LinkKey>> {
        if !self.cost.contains_key(&to) {
            return None;
        }
        let mut links = Vec::new();
        let mut cur = to;
        while let Some((p, k)) = self.parent.get(&cur) {
            links.push(*k);
            cur = *p;
        }
        links.reverse();
        Some(links)
    }

    pub fn edges(&self) -> BTreeSet<LinkKey> {
        self.parent.values().map(|(_, k)| *k).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Label {
    cost: u64,
    hops: usize,
    sorted: Vec<BridgeId>,
    seq: Vec<BridgeId>,
}

impl Label {
    fn extend(&self, v: BridgeId, metric: u32) -> Label {
        let mut sorted = self.sorted.clone();
        let pos = sorted.partition_point(|b| *b < v);
        sorted.insert(pos, v);
        let mut seq = self.seq.clone();
        seq.push(v);
        Label {
            cost: self.cost + u64::from(metric),
            hops: self.hops + 1,
            sorted,
            seq,
        }
    }

    fn cmp(&self, other: &Label) -> Ordering {
        (self.cost, self.hops, &self.sorted, &self.seq).cmp(&(other.cost, other.hops, &other.sorted, &other.seq))
    }
}

/// Deterministic shortest path tree from `root`.
pub fn compute_spt(lsdb: &Lsdb, root: BridgeId) -> Result<SptResult, SpbError> {
    if !lsdb.bridges.contains_key(&root) {
        return Err(SpbError::UnknownBridge(root));
    }
    let adj = lsdb.adjacency();
    let mut best: BTreeMap<BridgeId, (Label, Option<(BridgeId, LinkKey)>)> = BTreeMap::new();
    best.insert(
        root,
        (
            Label {
                cost: 0,
                hops: 0,
                sorted: vec![root],
                seq: vec![root],
            },
            None,
        ),
    );
    let mut done: BTreeSet<BridgeId> = BTreeSet::new();
    loop {
        let next = best
            .iter()
            .filter(|(b, _)| !done.contains(*b))
            .min_by(|a, b| a.1 .0.cmp(&b.1 .0))
            .map(|(b, _)| *b);
        let Some(u) = next else { break };
        done.insert(u);
        let label = best[&u].0.clone();
        for (v, link) in adj.get(&u).into_iter().flatten() {
            if done.contains(v) || !lsdb.bridges.contains_key(v) {
                continue;
            }
            let cand = label.extend(*v, link.metric);
            let better = best.get(v).is_none_or(|(cur, _)| cand.cmp(cur) == Ordering::Less);
            if better {
                best.insert(*v, (cand, Some((u, link.key))));
            }
        }
    }
    let mut parent = BTreeMap::new();
    let mut cost = BTreeMap::new();
    for (b, (label, p)) in best {
        cost.insert(b, label.cost);
        if let Some(p) = p {
            parent.insert(b, p);
        }
    }
    Ok(SptResult { root, parent, cost })
}

/// What SPB wants one bridge's tables to look like.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BridgeProgram {
    pub entries: BTreeMap<Vid, BTreeMap<MacAddress, BTreeSet<PortId>>>,
    pub members: BTreeMap<Vid, BTreeSet<PortId>>,
    pub flood_ports: BTreeMap<Vid, BTreeSet<PortId>>,
}

/// Forwarding state for every bridge, derived from a converged database.
pub fn compute_programs(lsdb: &Lsdb) -> BTreeMap<BridgeId, BridgeProgram> {
    let mut programs: BTreeMap<BridgeId, BridgeProgram> = BTreeMap::new();
    let mut spts: BTreeMap<BridgeId, SptResult> = BTreeMap::new();
    let mut spt = |b: BridgeId| -> Option<SptResult> {
        if !lsdb.bridges.contains_key(&b) {
            return None;
        }
        Some(
            spts.entry(b)
                .or_insert_with(|| compute_spt(lsdb, b).expect("bridge is in lsdb"))
                .clone(),
        )
    };

    // per bvid, per isid: bridge -> role
    let mut services: BTreeMap<Vid, BTreeMap<Isid, BTreeMap<BridgeId, Role>>> = BTreeMap::new();
    for a in &lsdb.attachments {
        services
            .entry(a.bvid)
            .or_default()
            .entry(a.isid)
            .or_default()
            .insert(a.bridge, a.role);
    }

    let flood_root = lsdb.bridges.keys().next().copied();
    for (bvid, isids) in &services {
        if let Some(tree) = flood_root.and_then(&mut spt) {
            for key in tree.edges() {
                for p in [key.a(), key.b()] {
                    programs
                        .entry(p.bridge)
                        .or_default()
                        .flood_ports
                        .entry(*bvid)
                        .or_default()
                        .insert(p);
                }
            }
        }
        for (isid, atts) in isids {
            if atts.len() < 2 {
                continue;
            }
            for (&s, &rs) in atts {
                let Some(src_tree) = spt(s) else { continue };
                let group = backbone_group_mac(s.0, *isid);
                for (&t, &rt) in atts {
                    if s == t || !rs.reaches(rt) {
                        continue;
                    }
                    // multicast along the source tree
                    let Some(path) = src_tree.path_to(t) else { continue };
                    let links = src_tree.links_to(t).expect("reachable");
                    for x in &path {
                        programs
                            .entry(*x)
                            .or_default()
                            .entries
                            .entry(*bvid)
                            .or_default()
                            .entry(group)
                            .or_default();
                    }
                    for (i, key) in links.iter().enumerate() {
                        let out = end_at(*key, path[i]);
                        let prog = programs.entry(path[i]).or_default();
                        prog.entries
                            .get_mut(bvid)
                            .expect("created")
                            .get_mut(&group)
                            .expect("created")
                            .insert(out);
                        add_members(&mut programs, *bvid, *key);
                    }
                    // unicast toward t along t's own tree
                    let Some(dst_tree) = spt(t) else { continue };
                    let Some(mut hops) = dst_tree.path_to(s) else { continue };
                    let mut hop_links = dst_tree.links_to(s).expect("reachable");
                    hops.reverse();
                    hop_links.reverse();
                    let bmac_t = lsdb.bridges[&t];
                    for (i, key) in hop_links.iter().enumerate() {
                        let out = end_at(*key, hops[i]);
                        programs
                            .entry(hops[i])
                            .or_default()
                            .entries
                            .entry(*bvid)
                            .or_default()
                            .entry(bmac_t)
                            .or_default()
                            .insert(out);
                        add_members(&mut programs, *bvid, *key);
                    }
                }
            }
        }
    }
    programs
}

fn end_at(key: LinkKey, bridge: BridgeId) -> PortId {
    if key.a().bridge == bridge {
        key.a()
    } else {
        key.b()
    }
}

fn add_members(programs: &mut BTreeMap<BridgeId, BridgeProgram>, bvid: Vid, key: LinkKey) {
    for p in [key.a(), key.b()] {
        programs
            .entry(p.bridge)
            .or_default()
            .members
            .entry(bvid)
            .or_default()
            .insert(p);
    }
}

/// SPB-origin entries for one bridge.
pub fn populate_fdb(lsdb: &Lsdb, bridge: BridgeId) -> Vec<(Vid, FdbEntry)> {
    let programs = compute_programs(lsdb);
    let Some(prog) = programs.get(&bridge) else {
        return Vec::new();
    };
    prog.entries
        .iter()
        .flat_map(|(vid, macs)| {
            macs.iter()
                .map(|(mac, ports)| (*vid, FdbEntry::new(*mac, ports.iter().copied(), Origin::Spb)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConvergeReport {
    pub seq: u64,
    pub entries_written: usize,
    pub entries_removed: usize,
}

/// The distributed control plane of the whole network.
#[derive(Debug, Clone)]
pub struct SpbPlane {
    lsdb: Lsdb,
    attachments: BTreeSet<ServiceAttachment>,
    dirty: bool,
    pub delay: SimTime,
    violations: u64,
}

impl Default for SpbPlane {
    fn default() -> Self {
        SpbPlane {
            lsdb: Lsdb::default(),
            attachments: BTreeSet::new(),
            dirty: false,
            delay: DEFAULT_CONVERGENCE_DELAY,
            violations: 0,
        }
    }
}

impl SpbPlane {
    pub fn new(delay: SimTime) -> Self {
        SpbPlane {
            delay,
            ..Default::default()
        }
    }

    pub fn lsdb(&self) -> &Lsdb {
        &self.lsdb
    }

    /// A change waits for the next convergence.
    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn topology_changed(&mut self) {
        self.dirty = true;
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn attachments(&self) -> &BTreeSet<ServiceAttachment> {
        &self.attachments
    }

    fn check(&mut self, att: &ServiceAttachment, msti: &MstiTable, phys: &PhysicalTopology) -> Result<(), SpbError> {
        if phys.bmac(att.bridge).is_none() {
            return Err(SpbError::UnknownBridge(att.bridge));
        }
        if msti.owner_of(att.bvid) != Some(ControlPlane::Spb) {
            self.violations += 1;
            return Err(SpbError::OwnershipViolation(att.bvid));
        }
        Ok(())
    }

    /// Adds or replaces the attachment of `(bridge, isid, bvid)`.
    pub fn advertise(
        &mut self,
        att: ServiceAttachment,
        msti: &MstiTable,
        phys: &PhysicalTopology,
    ) -> Result<(), SpbError> {
        self.check(&att, msti, phys)?;
        let before = self.attachments.len();
        self.attachments
            .retain(|a| (a.bridge, a.isid, a.bvid) != (att.bridge, att.isid, att.bvid));
        let replaced = self.attachments.len() != before;
        self.attachments.insert(att);
        if !replaced || !self.lsdb.attachments.contains(&att) {
            self.dirty = true;
        }
        Ok(())
    }

    pub fn withdraw(
        &mut self,
        att: ServiceAttachment,
        msti: &MstiTable,
        phys: &PhysicalTopology,
    ) -> Result<(), SpbError> {
        self.check(&att, msti, phys)?;
        let before = self.attachments.len();
        self.attachments
            .retain(|a| (a.bridge, a.isid, a.bvid) != (att.bridge, att.isid, att.bvid));
        if self.attachments.len() != before {
            self.dirty = true;
        }
        Ok(())
    }

    /// Immutable snapshot as seen from `bridge`.
    pub fn export_lsdb(&self, bridge: BridgeId) -> Result<Lsdb, SpbError> {
        if !self.lsdb.bridges.contains_key(&bridge) {
            return Err(SpbError::UnknownBridge(bridge));
        }
        Ok(self.lsdb.clone())
    }

    /// Rebuilds the database from the Up physical graph and the current
    /// attachments, then reprograms every SPB-owned VLAN on every bridge.
    pub fn converge(
        &mut self,
        phys: &PhysicalTopology,
        msti: &MstiTable,
        bridges: &mut BTreeMap<BridgeId, BridgeState>,
    ) -> ConvergeReport {
        // attachments on vids that moved away from SPB are dropped
        self.attachments
            .retain(|a| msti.owner_of(a.bvid) == Some(ControlPlane::Spb));
        let lsdb = Lsdb {
            seq: self.lsdb.seq + 1,
            bridges: phys.bridges().clone(),
            links: phys
                .up_links()
                .map(|l| LsdbLink {
                    key: l.key,
                    metric: l.metric,
                })
                .collect(),
            attachments: self.attachments.clone(),
        };
        self.lsdb = lsdb;
        self.dirty = false;

        let programs = compute_programs(&self.lsdb);
        let empty = BridgeProgram::default();
        let mut report = ConvergeReport {
            seq: self.lsdb.seq,
            ..Default::default()
        };
        for vid in msti.vids_of(ControlPlane::Spb) {
            for (id, bridge) in bridges.iter_mut() {
                let prog = programs.get(id).unwrap_or(&empty);
                let Some(fid) = bridge.fid_of(vid).map(|f| f.id) else {
                    continue;
                };
                let want = prog.entries.get(&vid).cloned().unwrap_or_default();
                let stale: Vec<MacAddress> = bridge
                    .fdb(fid)
                    .map(|f| {
                        f.iter()
                            .filter(|e| e.origin == Origin::Spb && want.get(&e.mac) != Some(&e.ports))
                            .map(|e| e.mac)
                            .collect()
                    })
                    .unwrap_or_default();
                for mac in stale {
                    bridge.fdb_remove(fid, mac, Actor::SpbPlane).expect("spb owns this fid");
                    report.entries_removed += 1;
                }
                for (mac, ports) in want {
                    let current = bridge.fdb(fid).and_then(|f| f.get(&mac));
                    if current.is_some_and(|e| e.origin != Origin::Spb || e.ports == ports) {
                        continue;
                    }
                    bridge
                        .fdb_write(fid, FdbEntry::new(mac, ports, Origin::Spb), Actor::SpbPlane)
                        .expect("spb owns this fid");
                    report.entries_written += 1;
                }
                let members = prog.members.get(&vid).cloned().unwrap_or_default();
                if bridge.members(vid) != members {
                    bridge
                        .set_vlan_members(vid, &members, Actor::SpbPlane)
                        .expect("spb owns this vid");
                }
                let flood = prog.flood_ports.get(&vid).cloned();
                if bridge.vlan(vid).map(|v| &v.flood_ports) != Some(&flood) {
                    bridge
                        .set_flood_ports(vid, flood, Actor::SpbPlane)
                        .expect("spb owns this vid");
                }
            }
        }
        report
    }
}
