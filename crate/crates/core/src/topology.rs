// SPDX-License-Identifier: Apache-2.0

//! Physical graph, VLAN to MSTI allocation and active-tree validation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::frames::{MacAddress, Vid};
use crate::ids::{BridgeId, ControlPlane, PortId, SimTime};

pub type MstiId = u16;

/// MSTI reserved for external agents.
pub const EXT_MSTI: MstiId = 0xFFE;
/// The single MSTI controlled by shortest path bridging.
pub const SPBM_MSTI: MstiId = 0xFFC;

pub const DEFAULT_LINK_DELAY: SimTime = SimTime::from_millis(1);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("unknown link {0}")]
    UnknownLink(LinkKey),
    #[error("unknown bridge {0}")]
    UnknownBridge(BridgeId),
    #[error("duplicate bridge {0}")]
    DuplicateBridge(BridgeId),
    #[error("link {0} is invalid: {1}")]
    InvalidLink(LinkKey, String),
    #[error("port {0} is already in use")]
    PortInUse(PortId),
    #[error("vid {0} carries live services")]
    VlanInUse(Vid),
    #[error("unknown msti {0:#x}")]
    UnknownMsti(MstiId),
    #[error("vid {0} is not allocated")]
    UnknownVid(Vid),
}

/// Undirected link identity: the two end ports, lower first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkKey(PortId, PortId);

impl LinkKey {
    pub fn new(a: PortId, b: PortId) -> Self {
        if a <= b {
            LinkKey(a, b)
        } else {
            LinkKey(b, a)
        }
    }

    pub fn a(self) -> PortId {
        self.0
    }

    pub fn b(self) -> PortId {
        self.1
    }

    /// The end opposite to `port`, if `port` is an end of this link.
    pub fn far_end(self, port: PortId) -> Option<PortId> {
        if port == self.0 {
            Some(self.1)
        } else if port == self.1 {
            Some(self.0)
        } else {
            None
        }
    }

    pub fn joins(self, x: BridgeId, y: BridgeId) -> bool {
        (self.0.bridge == x && self.1.bridge == y) || (self.0.bridge == y && self.1.bridge == x)
    }
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkState {
    Up,
    Down,
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkState::Up => f.write_str("Up"),
            LinkState::Down => f.write_str("Down"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub key: LinkKey,
    pub metric: u32,
    pub state: LinkState,
    pub delay: SimTime,
}

#[derive(Debug, Clone, Default)]
pub struct PhysicalTopology {
    bridges: BTreeMap<BridgeId, MacAddress>,
    links: BTreeMap<LinkKey, Link>,
    port_link: BTreeMap<PortId, LinkKey>,
}

impl PhysicalTopology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_bridge(&mut self, id: BridgeId, bmac: MacAddress) -> Result<(), TopologyError> {
        if self.bridges.insert(id, bmac).is_some() {
            return Err(TopologyError::DuplicateBridge(id));
        }
        Ok(())
    }

    pub fn add_link(&mut self, a: PortId, b: PortId, metric: u32, delay: SimTime) -> Result<LinkKey, TopologyError> {
        let key = LinkKey::new(a, b);
        if a.bridge == b.bridge {
            return Err(TopologyError::InvalidLink(key, "ends on the same bridge".into()));
        }
        if metric == 0 {
            return Err(TopologyError::InvalidLink(key, "metric must be at least 1".into()));
        }
        for p in [a, b] {
            if !self.bridges.contains_key(&p.bridge) {
                return Err(TopologyError::UnknownBridge(p.bridge));
            }
            if self.port_link.contains_key(&p) {
                return Err(TopologyError::PortInUse(p));
            }
        }
        self.port_link.insert(a, key);
        self.port_link.insert(b, key);
        self.links.insert(
            key,
            Link {
                key,
                metric,
                state: LinkState::Up,
                delay,
            },
        );
        Ok(key)
    }

    pub fn bridges(&self) -> &BTreeMap<BridgeId, MacAddress> {
        &self.bridges
    }

    pub fn bmac(&self, id: BridgeId) -> Option<MacAddress> {
        self.bridges.get(&id).copied()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn link(&self, key: LinkKey) -> Option<&Link> {
        self.links.get(&key)
    }

    pub fn link_at(&self, port: PortId) -> Option<&Link> {
        self.port_link.get(&port).and_then(|k| self.links.get(k))
    }

    pub fn is_link_port(&self, port: PortId) -> bool {
        self.port_link.contains_key(&port)
    }

    pub fn up_links(&self) -> impl Iterator<Item = &Link> {
        self.links.values().filter(|l| l.state == LinkState::Up)
    }

    /// Best Up link between two bridges: lowest metric, then lowest key.
    pub fn link_between(&self, x: BridgeId, y: BridgeId) -> Option<&Link> {
        self.up_links()
            .filter(|l| l.key.joins(x, y))
            .min_by_key(|l| (l.metric, l.key))
    }

    /// Returns whether the state changed.
    pub fn set_link_state(&mut self, key: LinkKey, state: LinkState) -> Result<bool, TopologyError> {
        let link = self.links.get_mut(&key).ok_or(TopologyError::UnknownLink(key))?;
        let changed = link.state != state;
        link.state = state;
        Ok(changed)
    }

    /// `link <a> <b> metric=<m> state=<s>`, sorted.
    pub fn dump(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .links
            .values()
            .map(|l| format!("link {} {} metric={} state={}", l.key.0, l.key.1, l.metric, l.state))
            .collect();
        lines.sort();
        lines
    }
}

/// VID to MSTI allocation, MSTI ownership and live-service reference counts.
#[derive(Debug, Clone)]
pub struct MstiTable {
    vid_to_msti: BTreeMap<Vid, MstiId>,
    msti_owner: BTreeMap<MstiId, ControlPlane>,
    live: BTreeMap<Vid, u32>,
}

impl Default for MstiTable {
    fn default() -> Self {
        MstiTable {
            vid_to_msti: BTreeMap::new(),
            msti_owner: [(SPBM_MSTI, ControlPlane::Spb), (EXT_MSTI, ControlPlane::ExternalAgent)].into(),
            live: BTreeMap::new(),
        }
    }
}

impl MstiTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self, vid: Vid, msti: MstiId) -> Result<ControlPlane, TopologyError> {
        let owner = *self.msti_owner.get(&msti).ok_or(TopologyError::UnknownMsti(msti))?;
        if self.vid_to_msti.get(&vid) == Some(&msti) {
            return Ok(owner);
        }
        if self.in_use(vid) {
            return Err(TopologyError::VlanInUse(vid));
        }
        self.vid_to_msti.insert(vid, msti);
        Ok(owner)
    }

    pub fn msti_of(&self, vid: Vid) -> Option<MstiId> {
        self.vid_to_msti.get(&vid).copied()
    }

    pub fn owner_of(&self, vid: Vid) -> Option<ControlPlane> {
        self.msti_of(vid).and_then(|m| self.msti_owner.get(&m).copied())
    }

    pub fn vids_of(&self, owner: ControlPlane) -> Vec<Vid> {
        self.vid_to_msti
            .iter()
            .filter(|(_, m)| self.msti_owner.get(m) == Some(&owner))
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn allocations(&self) -> impl Iterator<Item = (Vid, MstiId)> + '_ {
        self.vid_to_msti.iter().map(|(v, m)| (*v, *m))
    }

    pub fn acquire(&mut self, vid: Vid) -> Result<(), TopologyError> {
        if !self.vid_to_msti.contains_key(&vid) {
            return Err(TopologyError::UnknownVid(vid));
        }
        *self.live.entry(vid).or_default() += 1;
        Ok(())
    }

    pub fn release(&mut self, vid: Vid) {
        if let Some(n) = self.live.get_mut(&vid) {
            *n -= 1;
            if *n == 0 {
                self.live.remove(&vid);
            }
        }
    }

    pub fn in_use(&self, vid: Vid) -> bool {
        self.live.contains_key(&vid)
    }
}

/// A loop-free edge set for one VLAN scope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveTree {
    pub scope: Vid,
    pub edges: BTreeSet<LinkKey>,
    pub root: Option<BridgeId>,
    /// Bridges carrying the scope's VLAN; they must be connected by `edges`.
    pub members: BTreeSet<BridgeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeCheck {
    Valid,
    /// A witness cycle.
    CycleFound(Vec<LinkKey>),
    /// Members not reachable from the first member over Up tree edges.
    Disconnected(BTreeSet<BridgeId>),
}

/// Pure check of a candidate active tree against the physical topology.
/// Edges that are not Up physical links carry no connectivity.
pub fn validate_active_tree(tree: &ActiveTree, phys: &PhysicalTopology) -> TreeCheck {
    let mut adj: BTreeMap<BridgeId, Vec<(BridgeId, LinkKey)>> = BTreeMap::new();
    for key in &tree.edges {
        let (x, y) = (key.0.bridge, key.1.bridge);
        if let Some(path) = forest_path(&adj, x, y) {
            let mut cycle = path;
            cycle.push(*key);
            return TreeCheck::CycleFound(cycle);
        }
        adj.entry(x).or_default().push((y, *key));
        adj.entry(y).or_default().push((x, *key));
    }

    let Some(start) = tree.root.or_else(|| tree.members.first().copied()) else {
        return TreeCheck::Valid;
    };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        for (y, key) in adj.get(&x).into_iter().flatten() {
            let up = phys.link(*key).is_some_and(|l| l.state == LinkState::Up);
            if up && seen.insert(*y) {
                queue.push_back(*y);
            }
        }
    }
    let missing: BTreeSet<BridgeId> = tree.members.difference(&seen).copied().collect();
    if missing.is_empty() {
        TreeCheck::Valid
    } else {
        TreeCheck::Disconnected(missing)
    }
}

/// Path of edges between `x` and `y` in a forest, if they are connected.
fn forest_path(adj: &BTreeMap<BridgeId, Vec<(BridgeId, LinkKey)>>, x: BridgeId, y: BridgeId) -> Option<Vec<LinkKey>> {
    if x == y {
        return Some(Vec::new());
    }
    let mut prev: BTreeMap<BridgeId, (BridgeId, LinkKey)> = BTreeMap::new();
    let mut queue = VecDeque::from([x]);
    let mut seen = BTreeSet::from([x]);
    while let Some(u) = queue.pop_front() {
        for (v, key) in adj.get(&u).into_iter().flatten() {
            if seen.insert(*v) {
                prev.insert(*v, (u, *key));
                if *v == y {
                    let mut path = Vec::new();
                    let mut cur = y;
                    while let Some((p, k)) = prev.get(&cur) {
                        path.push(*k);
                        cur = *p;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(*v);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vid(v: u16) -> Vid {
        Vid::service(v).unwrap()
    }

    /// Ring 1-2-3-4-1; port n on bridge b faces bridge n.
    fn ring() -> (PhysicalTopology, Vec<LinkKey>) {
        let mut t = PhysicalTopology::new();
        for b in 1..=4 {
            t.add_bridge(BridgeId(b), MacAddress::new(u64::from(b))).unwrap();
        }
        let keys = [(1, 2), (2, 3), (3, 4), (4, 1)]
            .iter()
            .map(|&(x, y)| {
                t.add_link(PortId::new(x, y), PortId::new(y, x), 1, DEFAULT_LINK_DELAY)
                    .unwrap()
            })
            .collect();
        (t, keys)
    }

    fn tree(edges: &[LinkKey], members: &[u16]) -> ActiveTree {
        ActiveTree {
            scope: vid(1),
            edges: edges.iter().copied().collect(),
            root: None,
            members: members.iter().map(|b| BridgeId(*b)).collect(),
        }
    }

    #[test]
    fn ring_spanning_tree_is_valid() {
        let (t, k) = ring();
        assert_eq!(
            validate_active_tree(&tree(&k[..3], &[1, 2, 3, 4]), &t),
            TreeCheck::Valid
        );
    }

    #[test]
    fn full_ring_has_cycle() {
        let (t, k) = ring();
        match validate_active_tree(&tree(&k, &[1, 2, 3, 4]), &t) {
            TreeCheck::CycleFound(c) => {
                assert_eq!(c.len(), 4);
                let set: BTreeSet<_> = c.into_iter().collect();
                assert_eq!(set, k.iter().copied().collect());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_member_is_disconnected() {
        let (t, k) = ring();
        assert_eq!(
            validate_active_tree(&tree(&k[..2], &[1, 2, 3, 4]), &t),
            TreeCheck::Disconnected([BridgeId(4)].into())
        );
    }

    #[test]
    fn down_edge_disconnects() {
        let (mut t, k) = ring();
        t.set_link_state(k[1], LinkState::Down).unwrap();
        assert_eq!(
            validate_active_tree(&tree(&k[..3], &[1, 2, 3, 4]), &t),
            TreeCheck::Disconnected([BridgeId(3), BridgeId(4)].into())
        );
    }

    #[test]
    fn link_state_changes() {
        let (mut t, k) = ring();
        assert_eq!(t.set_link_state(k[0], LinkState::Down), Ok(true));
        assert_eq!(t.set_link_state(k[0], LinkState::Down), Ok(false));
        let bogus = LinkKey::new(PortId::new(1, 9), PortId::new(3, 9));
        assert_eq!(
            t.set_link_state(bogus, LinkState::Down),
            Err(TopologyError::UnknownLink(bogus))
        );
        assert!(t.link_between(BridgeId(1), BridgeId(2)).is_none());
        assert!(t.link_between(BridgeId(2), BridgeId(3)).is_some());
    }

    #[test]
    fn invalid_links() {
        let (mut t, _) = ring();
        assert!(matches!(
            t.add_link(PortId::new(1, 7), PortId::new(1, 8), 1, DEFAULT_LINK_DELAY),
            Err(TopologyError::InvalidLink(..))
        ));
        assert!(matches!(
            t.add_link(PortId::new(1, 7), PortId::new(2, 8), 0, DEFAULT_LINK_DELAY),
            Err(TopologyError::InvalidLink(..))
        ));
        assert_eq!(
            t.add_link(PortId::new(1, 2), PortId::new(3, 8), 1, DEFAULT_LINK_DELAY),
            Err(TopologyError::PortInUse(PortId::new(1, 2)))
        );
    }

    #[test]
    fn dump_is_sorted() {
        let (t, _) = ring();
        let d = t.dump();
        assert_eq!(d[0], "link 1.2 2.1 metric=1 state=Up");
        let mut sorted = d.clone();
        sorted.sort();
        assert_eq!(d, sorted);
    }

    #[test]
    fn msti_allocation() {
        let mut m = MstiTable::new();
        assert_eq!(m.allocate(vid(2), EXT_MSTI), Ok(ControlPlane::ExternalAgent));
        assert_eq!(m.allocate(vid(1), SPBM_MSTI), Ok(ControlPlane::Spb));
        assert_eq!(m.allocate(vid(3), 7), Err(TopologyError::UnknownMsti(7)));
        m.acquire(vid(1)).unwrap();
        assert_eq!(m.allocate(vid(1), EXT_MSTI), Err(TopologyError::VlanInUse(vid(1))));
        // same allocation of a live vid is a no-op
        assert_eq!(m.allocate(vid(1), SPBM_MSTI), Ok(ControlPlane::Spb));
        m.release(vid(1));
        assert_eq!(m.allocate(vid(1), EXT_MSTI), Ok(ControlPlane::ExternalAgent));
        assert_eq!(m.vids_of(ControlPlane::ExternalAgent), vec![vid(1), vid(2)]);
        assert_eq!(m.acquire(vid(9)), Err(TopologyError::UnknownVid(vid(9))));
    }
}
