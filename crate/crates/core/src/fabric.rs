// SPDX-License-Identifier: Apache-2.0

//! The network state shared by both control planes: bridges, the physical
//! graph, VLAN allocation and the SPB instance.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataplane::{BridgeState, DataplaneError, PortConfig};
use crate::frames::{MacAddress, Vid};
use crate::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};
use crate::spb::{ConvergeReport, SpbError, SpbPlane};
use crate::topology::{LinkKey, LinkState, MstiId, MstiTable, PhysicalTopology, TopologyError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error(transparent)]
    Spb(#[from] SpbError),
    #[error("unknown bridge {0}")]
    UnknownBridge(BridgeId),
}

/// Default backbone address of a bridge: locally administered, id in the
/// low bits.
pub fn default_bmac(id: BridgeId) -> MacAddress {
    MacAddress::new(0x0200_0000_0000 | u64::from(id.0))
}

#[derive(Debug, Clone, Default)]
pub struct Fabric {
    pub bridges: BTreeMap<BridgeId, BridgeState>,
    pub phys: PhysicalTopology,
    pub msti: MstiTable,
    pub spb: SpbPlane,
    access_ports: BTreeSet<PortId>,
}

impl Fabric {
    pub fn new(convergence_delay: SimTime) -> Self {
        Fabric {
            spb: SpbPlane::new(convergence_delay),
            ..Default::default()
        }
    }

    pub fn add_bridge(&mut self, id: BridgeId, bmac: MacAddress) -> Result<(), FabricError> {
        self.phys.add_bridge(id, bmac)?;
        let mut bridge = BridgeState::new(id, bmac);
        // new bridges see every existing allocation
        for (vid, _) in self.msti.allocations() {
            bridge.assign_vlan(vid, self.msti.owner_of(vid).expect("allocated"));
        }
        self.bridges.insert(id, bridge);
        self.spb.topology_changed();
        Ok(())
    }

    /// Backbone links do not learn: SPB learns addresses from its database.
    pub fn add_link(&mut self, a: PortId, b: PortId, metric: u32, delay: SimTime) -> Result<LinkKey, FabricError> {
        let key = self.phys.add_link(a, b, metric, delay)?;
        for p in [a, b] {
            let cfg = PortConfig {
                learning_enabled: false,
                ..PortConfig::default()
            };
            self.bridge_mut(p.bridge)?.add_port(p.index, cfg)?;
        }
        self.spb.topology_changed();
        Ok(key)
    }

    /// A customer-facing port.
    pub fn add_access_port(&mut self, port: PortId, config: PortConfig) -> Result<(), FabricError> {
        if self.phys.is_link_port(port) || self.access_ports.contains(&port) {
            return Err(TopologyError::PortInUse(port).into());
        }
        self.bridge_mut(port.bridge)?.add_port(port.index, config)?;
        self.access_ports.insert(port);
        Ok(())
    }

    pub fn is_access_port(&self, port: PortId) -> bool {
        self.access_ports.contains(&port)
    }

    pub fn access_ports(&self) -> &BTreeSet<PortId> {
        &self.access_ports
    }

    pub fn bridge(&self, id: BridgeId) -> Result<&BridgeState, FabricError> {
        self.bridges.get(&id).ok_or(FabricError::UnknownBridge(id))
    }

    pub fn bridge_mut(&mut self, id: BridgeId) -> Result<&mut BridgeState, FabricError> {
        self.bridges.get_mut(&id).ok_or(FabricError::UnknownBridge(id))
    }

    /// Selects the control plane of `vid` and sets the owner of its FID in
    /// every bridge.
    pub fn allocate_vlan(&mut self, vid: Vid, msti: MstiId) -> Result<ControlPlane, FabricError> {
        let before = self.msti.owner_of(vid);
        let owner = self.msti.allocate(vid, msti)?;
        if before != Some(owner) {
            for b in self.bridges.values_mut() {
                b.assign_vlan(vid, owner);
            }
            if owner == ControlPlane::Spb || before == Some(ControlPlane::Spb) {
                self.spb.topology_changed();
            }
        }
        Ok(owner)
    }

    pub fn set_vlan_membership(
        &mut self,
        bridge: BridgeId,
        vid: Vid,
        ports: &BTreeSet<PortId>,
        actor: Actor,
    ) -> Result<(), FabricError> {
        if self.msti.owner_of(vid).is_none() {
            return Err(DataplaneError::UnknownVid(vid).into());
        }
        self.bridge_mut(bridge)?.set_vlan_members(vid, ports, actor)?;
        Ok(())
    }

    /// Returns whether the state changed; a change notifies SPB.
    pub fn set_link_state(&mut self, key: LinkKey, state: LinkState) -> Result<bool, FabricError> {
        let changed = self.phys.set_link_state(key, state)?;
        if changed {
            self.spb.topology_changed();
        }
        Ok(changed)
    }

    pub fn converge(&mut self) -> ConvergeReport {
        self.spb.converge(&self.phys, &self.msti, &mut self.bridges)
    }

    /// FDB dump of every bridge, each line prefixed with `bridge=<id>`.
    pub fn fdb_dump(&self, now: SimTime) -> Vec<String> {
        self.bridges
            .iter()
            .flat_map(|(id, b)| b.fdb_dump(now).into_iter().map(move |l| format!("bridge={id} {l}")))
            .collect()
    }

    pub fn config_dump(&self) -> Vec<String> {
        self.bridges.values().flat_map(BridgeState::config_dump).collect()
    }

    /// Every FDB entry agrees with its FID owner and every FID owner agrees
    /// with the MSTI table.
    pub fn ownership_consistent(&self) -> bool {
        self.bridges
            .values()
            .all(|b| b.ownership_consistent() && b.vlans().all(|(vid, _)| b.owner_of(*vid) == self.msti.owner_of(*vid)))
    }

    pub fn ownership_violations(&self) -> u64 {
        self.bridges
            .values()
            .map(BridgeState::ownership_violations)
            .sum::<u64>()
            + self.spb.violations()
    }
}
