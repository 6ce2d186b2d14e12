// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use bridgesim::controller::{Attachment, Requirements, ServiceKind, ServiceRequest};
use bridgesim::dataplane::{FdbEntry, Origin};
use bridgesim::frames::{decode, encode, encoded_len, Frame, ITag, Isid, MacAddress, TagKind, Vid, VlanTag};
use bridgesim::ids::{Actor, BridgeId, ControlPlane, PortId, SimTime};
use bridgesim::oam::LOSS_THRESHOLD;
use bridgesim::protection::ProtState;
use bridgesim::scenario::{
    build, builtin, dump_sim, parse, run, sweep, DumpKind, RunOptions, Scenario, TimelineEntry, BUILTINS,
};
use bridgesim::spb::{compute_spt, Lsdb, LsdbLink, Role};
use bridgesim::topology::{LinkKey, SPBM_MSTI};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn report(n: u32, name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(d) => format!("PASS criterion {n:>2} {name}: {d}\n"),
        Err(d) => format!("FAIL criterion {n:>2} {name}: {d}\n"),
    };
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    if let Err(d) = outcome {
        panic!("criterion {n} {name}: {d}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn load_builtin(name: &str) -> Scenario {
    parse(builtin(name).unwrap()).unwrap()
}

fn opts(trace: bool) -> RunOptions {
    RunOptions {
        keep_trace: trace,
        ..Default::default()
    }
}

fn vid(v: u16) -> Vid {
    Vid::service(v).unwrap()
}

// ----- brute-force path oracle ---------------------------------------------------

type PathKey = (u64, usize, Vec<u16>, Vec<u16>);

/// Every simple path from `from` to `to`, ranked by (cost, hops, sorted
/// bridge set, bridge sequence); returns the minimum.
fn best_path(edges: &[(u16, u16, u32)], from: u16, to: u16) -> Option<(Vec<u16>, PathKey)> {
    let mut best: Option<(Vec<u16>, PathKey)> = None;
    fn walk(
        edges: &[(u16, u16, u32)],
        to: u16,
        path: &mut Vec<u16>,
        cost: u64,
        best: &mut Option<(Vec<u16>, PathKey)>,
    ) {
        let last = *path.last().unwrap();
        if last == to {
            let mut sorted = path.clone();
            sorted.sort_unstable();
            let key = (cost, path.len() - 1, sorted, path.clone());
            if best.as_ref().is_none_or(|(_, k)| key < *k) {
                *best = Some((path.clone(), key));
            }
            return;
        }
        for &(a, b, m) in edges {
            let next = if a == last {
                b
            } else if b == last {
                a
            } else {
                continue;
            };
            if !path.contains(&next) {
                path.push(next);
                walk(edges, to, path, cost + u64::from(m), best);
                path.pop();
            }
        }
    }
    walk(edges, to, &mut vec![from], 0, &mut best);
    best
}

fn edges_of(sc: &Scenario) -> Vec<(u16, u16, u32)> {
    sc.links
        .iter()
        .map(|l| (l.a.bridge.0, l.b.bridge.0, l.metric))
        .collect()
}

fn link_delay_of(sc: &Scenario, x: u16, y: u16) -> SimTime {
    let l = sc
        .links
        .iter()
        .find(|l| (l.a.bridge.0, l.b.bridge.0) == (x, y) || (l.a.bridge.0, l.b.bridge.0) == (y, x))
        .expect("declared link");
    SimTime::from_secs_f64(l.delay)
}

fn link_key_of(sc: &Scenario, x: u16, y: u16) -> LinkKey {
    let l = sc
        .links
        .iter()
        .find(|l| (l.a.bridge.0, l.b.bridge.0) == (x, y) || (l.a.bridge.0, l.b.bridge.0) == (y, x))
        .expect("declared link");
    LinkKey::new(l.a, l.b)
}

fn path_links(sc: &Scenario, path: &[u16]) -> BTreeSet<LinkKey> {
    path.windows(2).map(|w| link_key_of(sc, w[0], w[1])).collect()
}

fn path_delay(sc: &Scenario, path: &[u16]) -> SimTime {
    path.windows(2)
        .fold(SimTime::ZERO, |acc, w| acc + link_delay_of(sc, w[0], w[1]))
}

fn ids(path: &[BridgeId]) -> Vec<u16> {
    path.iter().map(|b| b.0).collect()
}

// ----- 1 ------------------------------------------------------------------------

fn vn1_only() -> Result<String, String> {
    let mut sc = load_builtin("vn1_vn2");
    sc.services.clear();
    sc.timeline.clear();
    sc.assertions.clear();
    sc.hosts.retain(|h| h.vid == Some(vid(11)));
    // a VLAN-11 host on EB4, which is not part of the service
    sc.hosts.push(
        serde_json::from_value(json!({
            "name": "outsider", "port": "4.100", "mac": "00:00:00:00:00:44", "vid": 11
        }))
        .unwrap(),
    );
    let members: BTreeMap<&str, u16> = [("h1", 1), ("h2", 2), ("h3", 3)].into();
    let mut sim = build(&sc, &opts(false)).map_err(|e| format!("{e:?}"))?;

    let snapshot = |sim: &bridgesim::simnet::Sim| -> BTreeMap<u16, Vec<String>> {
        sim.fabric
            .bridges
            .iter()
            .map(|(id, b)| {
                let mut lines = b.config_dump();
                lines.extend(b.fdb_dump(SimTime::ZERO));
                (id.0, lines)
            })
            .collect()
    };
    let before = snapshot(&sim);
    sim.setup_service(ServiceRequest {
        name: "vn1".into(),
        kind: ServiceKind::MP2MP,
        attachments: (1..=3)
            .map(|b| Attachment {
                port: PortId::new(b, 100),
                vid: vid(11),
                role: Role::Full,
            })
            .collect(),
        requirements: Requirements::default(),
        isid: Some(Isid::new(1).unwrap()),
        bvid: Some(vid(1)),
    })
    .map_err(|e| e.to_string())?;
    let after = snapshot(&sim);
    let mut touched = BTreeSet::new();
    let mut changed_lines = 0;
    for (b, lines) in &after {
        let old: BTreeSet<&String> = before[b].iter().collect();
        let new: BTreeSet<&String> = lines.iter().collect();
        for l in old.symmetric_difference(&new) {
            touched.insert(*b);
            changed_lines += 1;
            ensure!(
                l.starts_with(&format!("port {b}.100 ")),
                "controller changed something other than the edge port on bridge {b}: {l}"
            );
        }
    }
    ensure!(
        touched == BTreeSet::from([1, 2, 3]),
        "controller touched bridges {touched:?}, expected exactly EB1..EB3"
    );
    let binding = sim.controller.binding("vn1").ok_or("no binding")?;
    ensure!(
        binding.isid.value() == 1 && binding.bvid == vid(1),
        "bound to isid {} bvid {}",
        binding.isid,
        binding.bvid
    );
    ensure!(
        sim.fabric.msti.msti_of(vid(1)) == Some(SPBM_MSTI),
        "B-VID 1 is not on the SPBM MSTI"
    );

    let hosts = ["h1", "h2", "h3", "outsider"];
    let mut t = 0.3;
    for src in hosts {
        for dst in hosts {
            if src != dst {
                let mut inj = bridgesim::simnet::Injection::new(src, bridgesim::simnet::Dest::Host(dst.into()));
                inj.count = 5;
                inj.interval = SimTime::from_millis(2);
                inj.label = Some(format!("{src}>{dst}"));
                sim.schedule_action(SimTime::from_secs_f64(t), bridgesim::simnet::Action::Inject(inj));
                t += 0.02;
            }
        }
    }
    sim.run_until(SimTime::from_secs(1));
    ensure!(sim.errors().is_empty(), "actions failed: {:?}", sim.errors());

    let edges = edges_of(&sc);
    let mut checked = 0;
    let mut got: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for a in sim.arrivals().iter().filter(|a| a.accepted) {
        let host = a.host.as_deref().ok_or("accepted without host")?;
        got.entry(a.flow).or_default().push(host);
        let f = &sim.flows()[&a.flow];
        let src = sim.host_at(f.src).unwrap();
        let (Some(&sb), Some(&db)) = (members.get(src), members.get(host)) else {
            return Err(format!("frame from {src} reached {host}"));
        };
        let (oracle, _) = best_path(&edges, sb, db).ok_or("no path")?;
        ensure!(
            ids(&a.bridges()) == oracle,
            "{src}->{host} took {:?}, shortest is {oracle:?}",
            ids(&a.bridges())
        );
        checked += 1;
    }
    for (id, f) in sim.flows() {
        let label = f.label.as_deref().unwrap_or("");
        let (src, dst) = label.split_once('>').ok_or("unlabelled flow")?;
        let want: Vec<&str> = if members.contains_key(src) && members.contains_key(dst) {
            vec![dst]
        } else {
            vec![]
        };
        let have = got.get(id).cloned().unwrap_or_default();
        ensure!(have == want, "flow {label} delivered to {have:?}, expected {want:?}");
    }
    let core_writes: u64 = (5..=8)
        .map(|b| sim.fabric.bridges[&BridgeId(b)].writes_by(Actor::SdnController))
        .sum();
    ensure!(core_writes == 0, "controller wrote {core_writes} times to core bridges");
    Ok(format!(
        "edge ports changed={changed_lines} bridges touched={touched:?} core controller writes=0 \
         arrivals on oracle shortest paths={checked} flows={}",
        sim.flows().len()
    ))
}

#[test]
fn criterion_01_vn1_spb_edge_only() {
    report(1, "VN1 over SPB, edge-only programming", vn1_only());
}

// ----- 2 ------------------------------------------------------------------------

fn vn2_explicit() -> Result<String, String> {
    let sc = load_builtin("vn1_vn2");
    let vn2 = sc.services.iter().find(|s| s.name == "vn2").unwrap();
    let programmed = vn2.path.clone().unwrap();
    let (shortest, key) = best_path(&edges_of(&sc), 3, 4).unwrap();
    let explicit_cost: u64 = programmed
        .windows(2)
        .map(|w| {
            sc.links
                .iter()
                .find(|l| {
                    let p = (l.a.bridge.0, l.b.bridge.0);
                    p == (w[0], w[1]) || p == (w[1], w[0])
                })
                .map(|l| u64::from(l.metric))
                .unwrap()
        })
        .sum();
    ensure!(
        explicit_cost > key.0 && programmed != shortest,
        "explicit path {programmed:?} (cost {explicit_cost}) does not deviate from shortest {shortest:?} (cost {})",
        key.0
    );
    let out = run(&sc, &opts(true)).map_err(|e| format!("{e:?}"))?;
    let sim = &out.sim;
    let ctl_bvid = sim.controller.binding("vn2").unwrap().bvid;
    ensure!(
        sim.fabric.msti.owner_of(ctl_bvid) == Some(ControlPlane::ExternalAgent),
        "vn2 bvid {ctl_bvid} not on the Ext MSTI"
    );

    // per-hop: ingress records of each vn2 flow, in trace order
    let flows: BTreeMap<u64, &str> = sim
        .flows()
        .iter()
        .filter_map(|(id, f)| f.label.as_deref().filter(|l| l.starts_with("vn2")).map(|l| (*id, l)))
        .collect();
    let mut hops: BTreeMap<u64, Vec<u16>> = BTreeMap::new();
    let mut other: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for line in sim.trace().lines().unwrap() {
        let field = |k: &str| line.split(' ').find_map(|w| w.strip_prefix(k));
        let Some(flow) = field("flow=").and_then(|f| f.parse::<u64>().ok()) else {
            continue;
        };
        if !flows.contains_key(&flow) {
            continue;
        }
        match field("kind=") {
            Some("ingress") => {
                let node = field("node=br").unwrap().parse().unwrap();
                hops.entry(flow).or_default().push(node);
            }
            Some("drop") => other.entry(flow).or_default().push(line.clone()),
            _ => {}
        }
    }
    let mut reversed = programmed.clone();
    reversed.reverse();
    let mut delivered = 0;
    for (id, label) in &flows {
        let want = if *label == "vn2" { &programmed } else { &reversed };
        ensure!(
            hops.get(id) == Some(want),
            "flow {id} ({label}) hopped {:?}, programmed {want:?}",
            hops.get(id)
        );
        ensure!(!other.contains_key(id), "flow {id} dropped: {:?}", other[id]);
        ensure!(
            sim.flows()[id].delivered == 1,
            "flow {id} delivered {} times",
            sim.flows()[id].delivered
        );
        delivered += 1;
    }
    ensure!(delivered > 0, "no vn2 frames");
    Ok(format!(
        "shortest={shortest:?} cost={} explicit={programmed:?} cost={explicit_cost}; {delivered}/{} frames delivered, every hop matches",
        key.0,
        flows.len()
    ))
}

#[test]
fn criterion_02_vn2_explicit_path() {
    report(2, "VN2 explicit path on Ext MSTI", vn2_explicit());
}

// ----- 3 ------------------------------------------------------------------------

fn hybrid_separation() -> Result<String, String> {
    let sc = load_builtin("hybrid_fuzz");
    let out = run(&sc, &opts(false)).map_err(|e| format!("{e:?}"))?;
    let sim = &out.sim;
    let ops: u64 = sim.fuzz_reports().iter().map(|r| r.ops).sum();
    ensure!(ops >= 1000, "only {ops} fuzz operations");
    for r in sim.fuzz_reports() {
        ensure!(
            r.unexpected == 0 && r.forbidden_entries == 0 && r.spb_touched_ext == 0 && r.controller_touched_spb == 0,
            "fuzz report {r:?}"
        );
    }
    let refused: u64 = sim.fuzz_reports().iter().map(|r| r.refused).sum();
    ensure!(refused > 0, "no cross-plane write was attempted");

    // independent check on a copy of the final fabric: the oracle for every
    // write is "allowed iff the actor's plane owns the VID"
    let mut fabric = sim.fabric.clone();
    let vids: Vec<(Vid, ControlPlane)> = fabric
        .msti
        .allocations()
        .map(|(v, _)| (v, fabric.msti.owner_of(v).unwrap()))
        .collect();
    ensure!(
        vids.iter().any(|(_, o)| *o == ControlPlane::Spb)
            && vids.iter().any(|(_, o)| *o == ControlPlane::ExternalAgent),
        "both planes need VLANs: {vids:?}"
    );
    let bridges: Vec<BridgeId> = fabric.bridges.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut refused_here, mut allowed_here) = (0, 0);
    for i in 0..1000u64 {
        let b = *bridges.choose(&mut rng).unwrap();
        let (v, owner) = *vids.choose(&mut rng).unwrap();
        let actor = if rng.gen_bool(0.5) {
            Actor::SpbPlane
        } else {
            Actor::SdnController
        };
        let plane = if actor == Actor::SpbPlane {
            ControlPlane::Spb
        } else {
            ControlPlane::ExternalAgent
        };
        let bridge = fabric.bridges.get_mut(&b).unwrap();
        let fid = bridge.fid_of(v).unwrap().id;
        let port = *bridge.ports().next().unwrap().0;
        let res = match rng.gen_range(0..3) {
            0 => {
                let origin = if actor == Actor::SpbPlane {
                    Origin::Spb
                } else {
                    Origin::Sdn
                };
                bridge.fdb_write(
                    fid,
                    FdbEntry::new(MacAddress::new(0x0a00_0000_0000 | i), [port], origin),
                    actor,
                )
            }
            1 => bridge.set_vlan_members(v, &BTreeSet::from([port]), actor),
            _ => bridge
                .fdb_remove(fid, MacAddress::new(0x0a00_0000_0000 | rng.gen_range(0..i + 1)), actor)
                .map(|_| ()),
        };
        match (plane == owner, res) {
            (true, Ok(())) => allowed_here += 1,
            (false, Err(bridgesim::dataplane::DataplaneError::OwnershipViolation { .. })) => refused_here += 1,
            (want, got) => {
                return Err(format!(
                    "op {i}: {actor:?} on {owner} vid {v}: allowed={want} got {got:?}"
                ))
            }
        }
    }
    // no FDB line anywhere contradicts its FID owner
    let mut lines = 0;
    for f in [&sim.fabric, &fabric] {
        for bridge in f.bridges.values() {
            for fid in bridge.fids() {
                for line in bridge.fdb_dump(SimTime::ZERO) {
                    if !line.starts_with(&format!("fid={} ", fid.id)) {
                        continue;
                    }
                    lines += 1;
                    let origin = line.split(' ').find_map(|w| w.strip_prefix("origin=")).unwrap();
                    let ok = match fid.owner {
                        ControlPlane::Spb => matches!(origin, "Spb" | "Learned" | "Static"),
                        ControlPlane::ExternalAgent => matches!(origin, "Sdn" | "Static"),
                    };
                    ensure!(
                        ok,
                        "forbidden entry on {}: {line} in a {}-owned FID",
                        bridge.id,
                        fid.owner
                    );
                }
            }
        }
    }
    Ok(format!(
        "scenario ops={ops} refused={refused}; direct ops=1000 allowed={allowed_here} refused={refused_here}; \
         fdb lines scanned={lines}, forbidden=0"
    ))
}

#[test]
fn criterion_03_hybrid_separation() {
    report(3, "hybrid separation under fuzzing", hybrid_separation());
}

// ----- 4 ------------------------------------------------------------------------

fn random_graph(rng: &mut ChaCha8Rng) -> Vec<(u16, u16, u32)> {
    let n = rng.gen_range(2..=8u16);
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for child in 2..=n {
        let parent = rng.gen_range(1..child);
        seen.insert((parent, child));
        edges.push((parent, child, rng.gen_range(1..=4)));
    }
    for _ in 0..rng.gen_range(0..=2 * n) {
        let (x, y) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
        if x != y && seen.insert((x.min(y), x.max(y))) {
            edges.push((x.min(y), x.max(y), rng.gen_range(1..=4)));
        }
    }
    edges
}

fn lsdb_of(edges: &[(u16, u16, u32)]) -> Lsdb {
    let mut db = Lsdb::default();
    for &(x, y, m) in edges {
        for b in [x, y] {
            db.bridges
                .insert(BridgeId(b), MacAddress::new(0x0200_0000_0000 | u64::from(b)));
        }
        db.links.insert(LsdbLink {
            key: LinkKey::new(PortId::new(x, y), PortId::new(y, x)),
            metric: m,
        });
    }
    db
}

fn spt_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut graphs, mut pairs, mut ties) = (0, 0, 0);
    for _ in 0..150 {
        let edges = random_graph(&mut rng);
        let db = lsdb_of(&edges);
        graphs += 1;
        for &root in db.bridges.keys() {
            let spt = compute_spt(&db, root).map_err(|e| e.to_string())?;
            ensure!(spt == compute_spt(&db, root).unwrap(), "repeat run differs");
            ensure!(spt == compute_spt(&db.clone(), root).unwrap(), "clone run differs");
            for &to in db.bridges.keys() {
                let (path, key) = best_path(&edges, root.0, to.0).ok_or("disconnected")?;
                ensure!(
                    spt.cost[&to] == key.0,
                    "cost {root}->{to}: {} vs oracle {}",
                    spt.cost[&to],
                    key.0
                );
                let got = ids(&spt.path_to(to).unwrap());
                ensure!(
                    got == path,
                    "path {root}->{to}: {got:?} vs oracle {path:?} on {edges:?}"
                );
                pairs += 1;
                if count_cost_ties(&edges, root.0, to.0, key.0) > 1 {
                    ties += 1;
                }
            }
        }
    }
    ensure!(graphs >= 100, "only {graphs} graphs");
    Ok(format!("graphs={graphs} (<=8 nodes) pairs={pairs} pairs with equal-cost alternatives={ties}; all equal to exhaustive enumeration"))
}

fn count_cost_ties(edges: &[(u16, u16, u32)], from: u16, to: u16, cost: u64) -> usize {
    fn walk(edges: &[(u16, u16, u32)], to: u16, path: &mut Vec<u16>, c: u64, want: u64, n: &mut usize) {
        let last = *path.last().unwrap();
        if last == to {
            *n += usize::from(c == want);
            return;
        }
        for &(a, b, m) in edges {
            let next = if a == last {
                b
            } else if b == last {
                a
            } else {
                continue;
            };
            if !path.contains(&next) && c + u64::from(m) <= want {
                path.push(next);
                walk(edges, to, path, c + u64::from(m), want, n);
                path.pop();
            }
        }
    }
    let mut n = 0;
    walk(edges, to, &mut vec![from], 0, cost, &mut n);
    n
}

#[test]
fn criterion_04_spt_oracle_equivalence() {
    report(4, "SPT equals exhaustive enumeration", spt_oracle());
}

// ----- 5 ------------------------------------------------------------------------

/// A random multi-service scenario on the builtin topology, with the
/// service of every attachment port.
fn isolation_scenario(seed: u64) -> (Scenario, BTreeMap<PortId, String>) {
    let base = load_builtin("vn1_vn2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = serde_json::to_value(&base).unwrap();
    let ports: Vec<u16> = (100..=119).collect();
    for b in v["bridges"].as_array_mut().unwrap() {
        if b["id"].as_u64().unwrap() <= 4 {
            b["access_ports"] = json!(ports);
        }
    }
    let mut free: BTreeMap<u16, Vec<u16>> = (1..=4).map(|b| (b, ports.clone())).collect();
    let mut owner = BTreeMap::new();
    let mut services = Vec::new();
    let mut hosts = Vec::new();
    let explicit: [[u16; 6]; 2] = [[3, 7, 6, 5, 8, 4], [1, 5, 8, 7, 6, 2]];
    for s in 0..24 {
        let name = format!("svc{s:02}");
        let sdn = s % 2 == 1;
        let mut ebs: Vec<u16> = vec![1, 2, 3, 4];
        ebs.shuffle(&mut rng);
        let n = if sdn { 2 } else { rng.gen_range(2..=4) };
        let mut attachments = Vec::new();
        let cvid = *[10u16, 11, 12].choose(&mut rng).unwrap();
        for &eb in &ebs[..n] {
            let idx = free.get_mut(&eb).unwrap().pop().unwrap();
            let port = PortId::new(eb, idx);
            owner.insert(port, name.clone());
            attachments.push(json!({"port": port.to_string(), "vid": cvid}));
            hosts.push(json!({
                "name": format!("{name}_{eb}"),
                "port": port.to_string(),
                "mac": MacAddress::new(0x0000_5000_0000 | (s << 8) as u64 | u64::from(eb)).to_string(),
                "vid": cvid
            }));
        }
        let mut svc = json!({"name": name, "type": if sdn { "P2P" } else { "MP2MP" }, "attachments": attachments});
        if sdn {
            svc["shortest_path_ok"] = json!(false);
            let (a, b) = (ebs[0], ebs[1]);
            if let Some(p) = explicit
                .iter()
                .find(|p| (p[0], p[5]) == (a, b) || (p[0], p[5]) == (b, a))
            {
                let mut p = p.to_vec();
                if p[0] != a {
                    p.reverse();
                }
                svc["path"] = json!(p);
            }
        }
        services.push(svc);
    }
    let names: Vec<String> = hosts.iter().map(|h| h["name"].as_str().unwrap().to_string()).collect();
    let mut timeline = Vec::new();
    for (i, h) in names.iter().enumerate() {
        for k in 0..4 {
            let dst = if k == 0 {
                "broadcast".to_string()
            } else {
                names.choose(&mut rng).unwrap().clone()
            };
            let dst = if dst == *h { "broadcast".to_string() } else { dst };
            timeline.push(json!({
                "action": "inject", "at": 0.2 + 0.0005 * i as f64 + 0.17 * k as f64,
                "host": h, "dst": dst, "count": 40, "interval": 0.004, "label": format!("{h}>{dst}")
            }));
        }
    }
    v["hosts"] = json!(hosts);
    v["services"] = json!(services);
    v["timeline"] = json!(timeline);
    v["assertions"] = json!([]);
    v["until"] = json!(1.2);
    (serde_json::from_value(v).unwrap(), owner)
}

fn isolation() -> Result<String, String> {
    let (mut frames, mut services, mut unicast_ok, mut spb, mut sdn) = (0u64, 0, 0u64, 0, 0);
    for seed in [51, 52] {
        let (sc, owner) = isolation_scenario(seed);
        let out = run(&sc, &opts(false)).map_err(|e| format!("{e:?}"))?;
        let sim = &out.sim;
        ensure!(sim.errors().is_empty(), "actions failed: {:?}", sim.errors());
        services += sim.controller.bindings().len();
        for b in sim.controller.bindings().values() {
            match b.control {
                bridgesim::controller::Control::Spb => spb += 1,
                bridgesim::controller::Control::Sdn => sdn += 1,
            }
        }
        let mut delivered: BTreeMap<u64, Vec<PortId>> = BTreeMap::new();
        for a in sim.arrivals().iter().filter(|a| a.accepted) {
            let f = &sim.flows()[&a.flow];
            ensure!(
                owner.get(&f.src) == owner.get(&a.port),
                "frame {} from {} ({:?}) delivered at {} ({:?})",
                a.flow,
                f.src,
                owner.get(&f.src),
                a.port,
                owner.get(&a.port)
            );
            ensure!(a.port != f.src, "frame {} reflected to its sender", a.flow);
            delivered.entry(a.flow).or_default().push(a.port);
        }
        for (id, f) in sim.flows() {
            frames += 1;
            let label = f.label.as_deref().unwrap();
            let dst = label.split_once('>').unwrap().1;
            if dst == "broadcast" {
                continue;
            }
            let dport = sim.hosts()[dst].port;
            let same = owner.get(&dport) == owner.get(&f.src);
            let got = delivered.get(id).cloned().unwrap_or_default();
            if same {
                ensure!(got == vec![dport], "in-service unicast {label} delivered at {got:?}");
                unicast_ok += 1;
            } else {
                ensure!(got.is_empty(), "cross-service unicast {label} delivered at {got:?}");
            }
        }
        ensure!(
            sim.conservation_violations().is_empty(),
            "frame accounting is unbalanced"
        );
    }
    ensure!(frames >= 10_000, "only {frames} frames");
    ensure!(
        services >= 40 && spb > 0 && sdn > 0,
        "services={services} spb={spb} sdn={sdn}"
    );
    Ok(format!(
        "scenarios=2 services={services} (spb={spb} sdn={sdn}) frames={frames} cross-service deliveries=0 \
         in-service unicasts delivered={unicast_ok}"
    ))
}

#[test]
fn criterion_05_isolation() {
    report(5, "service isolation", isolation());
}

// ----- 6 ------------------------------------------------------------------------

struct Monitored {
    paths: Vec<Vec<u16>>,
    interval: SimTime,
}

fn fate_case(sc: &Scenario, monitored: &BTreeMap<String, Monitored>, fail_at: f64) -> Result<(usize, SimTime), String> {
    let mut expected_paths = BTreeMap::new();
    let mut bound = BTreeMap::new();
    for (name, m) in monitored {
        let links: BTreeSet<LinkKey> = m.paths.iter().flat_map(|p| path_links(sc, p)).collect();
        let delay = m.paths.iter().map(|p| path_delay(sc, p)).max().unwrap();
        expected_paths.insert(name.clone(), links);
        bound.insert(
            name.clone(),
            SimTime::from_nanos(m.interval.as_nanos() * LOSS_THRESHOLD) + delay,
        );
    }
    let cases = sweep(
        sc,
        &opts(false),
        &expected_paths,
        SimTime::from_secs_f64(fail_at),
        SimTime::from_secs_f64(0.2),
    )
    .map_err(|e| format!("{e:?}"))?;
    ensure!(
        cases.len() == sc.links.len(),
        "swept {} of {} links",
        cases.len(),
        sc.links.len()
    );
    let mut worst = SimTime::ZERO;
    for c in &cases {
        ensure!(
            c.raised == c.expected,
            "link {}: defects on {:?}, data paths crossing it {:?}",
            c.link,
            c.raised,
            c.expected
        );
        for (s, l) in &c.latency {
            ensure!(l <= &bound[s], "link {}: {s} latency {l} exceeds {}", c.link, bound[s]);
            worst = worst.max(*l);
        }
    }
    Ok((cases.len(), worst))
}

fn fate_sharing() -> Result<String, String> {
    let sc = load_builtin("fate_sharing_sweep");
    let edges = edges_of(&sc);
    let mut monitored = BTreeMap::new();
    for s in &sc.services {
        let ends: Vec<u16> = s.attachments.iter().map(|a| a.port.bridge.0).collect();
        let path = match &s.path {
            Some(p) => p.clone(),
            None => best_path(&edges, ends[0], ends[1]).unwrap().0,
        };
        monitored.insert(
            s.name.clone(),
            Monitored {
                paths: vec![path],
                interval: SimTime::from_secs_f64(s.oam_interval.unwrap()),
            },
        );
    }
    let (n1, w1) = fate_case(&sc, &monitored, 0.5003)?;

    let mut prot = load_builtin("protection_switch");
    prot.timeline
        .retain(|t| !matches!(t, TimelineEntry::FailLink { .. } | TimelineEntry::RestoreLink { .. }));
    let s = &prot.services[0];
    let monitored = BTreeMap::from([(
        s.name.clone(),
        Monitored {
            paths: vec![
                s.path.clone().unwrap(),
                s.protection.as_ref().unwrap().path.clone().unwrap(),
            ],
            interval: SimTime::from_secs_f64(s.oam_interval.unwrap()),
        },
    )]);
    let (n2, w2) = fate_case(&prot, &monitored, 0.7003)?;
    Ok(format!(
        "fate_sharing_sweep: {n1} single-link failures, worst latency {w1}; protection_switch: {n2} failures, \
         worst latency {w2}; false positives=0 false negatives=0"
    ))
}

#[test]
fn criterion_06_fate_sharing() {
    report(6, "OAM fate sharing", fate_sharing());
}

// ----- 7 ------------------------------------------------------------------------

fn protection() -> Result<String, String> {
    let sc = load_builtin("protection_switch");
    let svc = &sc.services[0];
    let working = svc.path.clone().unwrap();
    let backup = svc.protection.as_ref().unwrap().path.clone().unwrap();
    let interval = SimTime::from_secs_f64(svc.oam_interval.unwrap());
    let wtr = SimTime::from_secs_f64(svc.protection.as_ref().unwrap().wtr);
    let (mut t_fail, mut t_restore) = (None, None);
    let mut inject_interval = SimTime::ZERO;
    for t in &sc.timeline {
        match t {
            TimelineEntry::FailLink { at, .. } => t_fail = Some(SimTime::from_secs_f64(*at)),
            TimelineEntry::RestoreLink { at, .. } => t_restore = Some(SimTime::from_secs_f64(*at)),
            TimelineEntry::Inject {
                label: Some(l),
                interval,
                count,
                ..
            } if l == "prot" && *count > 1 => inject_interval = SimTime::from_secs_f64(*interval),
            _ => {}
        }
    }
    let (t_fail, t_restore) = (t_fail.unwrap(), t_restore.unwrap());
    let out = run(&sc, &opts(false)).map_err(|e| format!("{e:?}"))?;
    let sim = &out.sim;

    let bound = SimTime::from_nanos(interval.as_nanos() * LOSS_THRESHOLD) + path_delay(&sc, &backup) + inject_interval;
    let mut arrivals: Vec<(SimTime, SimTime, Vec<u16>)> = sim
        .arrivals()
        .iter()
        .filter(|a| a.accepted && sim.flows()[&a.flow].label.as_deref() == Some("prot"))
        .map(|a| (sim.flows()[&a.flow].injected, a.t, ids(&a.bridges())))
        .collect();
    arrivals.sort();
    let resume = arrivals
        .iter()
        .find(|(_, t, p)| *t > t_fail && *p == backup)
        .map(|(_, t, _)| *t)
        .ok_or("traffic never resumed on the protection path")?;
    let outage = resume.saturating_sub(t_fail);
    ensure!(outage <= bound, "resumed {outage} after failure, bound {bound}");

    let recs = sim.prot_records();
    let find = |to: ProtState| recs.iter().find(|r| r.to == to && r.from != to).map(|r| r.t);
    let t_switch = find(ProtState::ProtectionActive).ok_or("never switched")?;
    let t_wtr_start = find(ProtState::WaitToRestore).ok_or("never entered WTR")?;
    let t_revert = recs
        .iter()
        .find(|r| r.from == ProtState::WaitToRestore && r.to == ProtState::WorkingActive)
        .map(|r| r.t)
        .ok_or("never reverted")?;
    ensure!(
        t_switch > t_fail && t_wtr_start > t_restore,
        "switch {t_switch} restore-detect {t_wtr_start}"
    );
    ensure!(
        t_revert == t_wtr_start + wtr,
        "reverted at {t_revert}, WTR started {t_wtr_start}"
    );

    // frames injected while a selector was set travel that selector's path;
    // an injection at the very instant of a swap may be ordered either side
    for (inj, t, p) in &arrivals {
        let want = if *inj > t_switch && *inj < t_revert {
            &backup
        } else if *inj < t_fail || *inj > t_revert {
            &working
        } else {
            continue;
        };
        ensure!(
            p == want,
            "frame injected {inj} arrived {t} via {p:?}, expected {want:?}"
        );
    }
    let mut per_flow: BTreeMap<u64, u32> = BTreeMap::new();
    for a in sim.arrivals().iter().filter(|a| a.accepted) {
        *per_flow.entry(a.flow).or_default() += 1;
    }
    let dual = per_flow.values().filter(|n| **n > 1).count();
    ensure!(dual == 0, "{dual} frames delivered twice");
    Ok(format!(
        "failure {t_fail} -> switch {t_switch} -> first protected delivery {resume} (outage {outage} <= {bound}); \
         restore {t_restore} -> WTR {t_wtr_start} -> revert {t_revert} (wtr {wtr}); dual deliveries=0"
    ))
}

#[test]
fn criterion_07_protection_switchover() {
    report(7, "1:1 protection switchover and revert", protection());
}

// ----- 8 ------------------------------------------------------------------------

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let mac = |rng: &mut ChaCha8Rng| MacAddress::new(rng.gen::<u64>() & 0xffff_ffff_ffff);
    let tag = |rng: &mut ChaCha8Rng, kind| VlanTag {
        kind,
        pcp: rng.gen_range(0..8),
        dei: rng.gen(),
        vid: Vid::new(rng.gen_range(0..=4095)).unwrap(),
    };
    let mut tags = Vec::new();
    if rng.gen_bool(0.5) {
        tags.push(tag(rng, TagKind::S));
    }
    if rng.gen_bool(0.5) {
        tags.push(tag(rng, TagKind::C));
    }
    let len = rng.gen_range(0..80);
    let inner = Frame {
        dst: mac(rng),
        src: mac(rng),
        tags,
        encapsulated: None,
        payload: (0..len).map(|_| rng.gen()).collect(),
    };
    if rng.gen_bool(0.5) {
        let itag = ITag {
            pcp: rng.gen_range(0..8),
            dei: rng.gen(),
            isid: Isid::new(rng.gen_range(0..1 << 24)).unwrap(),
        };
        let (bd, bs, bt) = (mac(rng), mac(rng), tag(rng, TagKind::B));
        inner.encapsulate_pbb(bd, bs, bt, itag).unwrap()
    } else {
        inner
    }
}

fn full_stack(b: u16, isid: u32, s: u16, c: u16) -> Frame {
    Frame::new(MacAddress::new(0xb), MacAddress::new(0xa), vec![1, 2, 3])
        .push_tag(VlanTag::c(c))
        .unwrap()
        .push_tag(VlanTag::s(s))
        .unwrap()
        .encapsulate_pbb(
            MacAddress::new(0xbb),
            MacAddress::new(0xaa),
            VlanTag::b(b),
            ITag::new(Isid::new(isid).unwrap()),
        )
        .unwrap()
}

fn codec() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let mut encapsulated = 0;
    for i in 0..n {
        let f = random_frame(&mut rng);
        encapsulated += usize::from(f.is_encapsulated());
        let bytes = encode(&f);
        ensure!(bytes.len() == encoded_len(&f), "frame {i}: length mismatch");
        let back = decode(&bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure!(back == f, "frame {i}: round trip mismatch");
    }

    // each of the 12+12+12+24 identifier bits is independently carried
    let zero = full_stack(0, 0, 0, 0);
    let widths = [12u32, 24, 12, 12];
    let oracle: u32 = widths.iter().sum();
    let mut encodings = BTreeSet::from([encode(&zero)]);
    let mut carried = 0;
    for (field, width) in widths.iter().enumerate() {
        for bit in 0..*width {
            let mut v = [0u32; 4];
            v[field] = 1 << bit;
            let f = full_stack(v[0] as u16, v[1], v[2] as u16, v[3] as u16);
            let bytes = encode(&f);
            let back = decode(&bytes).map_err(|e| e.to_string())?;
            let d = back.clone().decapsulate_pbb().unwrap();
            let got = [
                u32::from(d.btag.vid.value()),
                d.itag.isid.value(),
                u32::from(d.inner.tags[0].vid.value()),
                u32::from(d.inner.tags[1].vid.value()),
            ];
            ensure!(got == v, "field {field} bit {bit} read back as {got:?}");
            encodings.insert(bytes);
            carried += 1;
        }
    }
    ensure!(encodings.len() == 61, "only {} distinct encodings", encodings.len());
    ensure!(
        zero.virtualization_id_bits() == oracle && oracle == 60 && carried == 60,
        "reported {} bits, oracle {oracle}, carried {carried}",
        zero.virtualization_id_bits()
    );
    Ok(format!(
        "round trips={n} (encapsulated={encapsulated}) mismatches=0; id bits reported={} carried={carried} (12+12+12+24)",
        zero.virtualization_id_bits()
    ))
}

#[test]
fn criterion_08_codec() {
    report(8, "codec round trip and identifier space", codec());
}

// ----- 9 ------------------------------------------------------------------------

fn migration() -> Result<String, String> {
    let sc = load_builtin("vm_migration");
    let (mut t_move, mut from, mut to) = (None, None, None);
    for t in &sc.timeline {
        if let TimelineEntry::MoveAttachment { at, from: f, to: d, .. } = t {
            t_move = Some(*at);
            from = Some(f.bridge.0);
            to = Some(d.bridge.0);
        }
    }
    let (old_eb, new_eb) = (from.unwrap(), to.unwrap());
    let settled = SimTime::from_secs_f64(t_move.unwrap() + sc.spb.convergence_delay);
    let out = run(&sc, &opts(true)).map_err(|e| format!("{e:?}"))?;
    let sim = &out.sim;
    ensure!(sim.errors().is_empty(), "actions failed: {:?}", sim.errors());
    let late: BTreeSet<u64> = sim
        .flows()
        .iter()
        .filter(|(_, f)| f.label.as_deref() == Some("to_vm") && f.injected >= settled)
        .map(|(id, _)| *id)
        .collect();
    ensure!(!late.is_empty(), "no traffic after reconvergence");
    let old_node = format!("node=br{old_eb} ");
    for line in sim.trace().lines().unwrap() {
        let flow = line
            .split(' ')
            .find_map(|w| w.strip_prefix("flow="))
            .and_then(|f| f.parse::<u64>().ok());
        if flow.is_some_and(|f| late.contains(&f)) {
            ensure!(!line.contains(&old_node), "old edge saw service traffic: {line}");
        }
    }
    let mut at_new = 0;
    for id in &late {
        let a: Vec<_> = sim.arrivals().iter().filter(|a| a.flow == *id && a.accepted).collect();
        ensure!(
            a.len() == 1 && a[0].port.bridge.0 == new_eb,
            "frame {id} delivered at {:?}",
            a.iter().map(|x| x.port).collect::<Vec<_>>()
        );
        at_new += 1;
    }
    Ok(format!(
        "moved EB{old_eb}->EB{new_eb} at {}; after reconvergence ({settled}) frames={} at new EB={at_new} trace records at old EB=0",
        t_move.unwrap(),
        late.len()
    ))
}

#[test]
fn criterion_09_vm_migration() {
    report(9, "VM migration", migration());
}

// ----- 10 -----------------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let kinds = [DumpKind::Fdb, DumpKind::Topology, DumpKind::Lsdb, DumpKind::Bindings];
    let mut lines = 0;
    for name in BUILTINS {
        let sc = load_builtin(name);
        type Snapshot = (Vec<String>, String, Vec<Vec<String>>);
        let once = || -> Result<Snapshot, String> {
            let out = run(&sc, &opts(true)).map_err(|e| format!("{e:?}"))?;
            let dumps = kinds.iter().map(|k| dump_sim(&out.sim, *k)).collect();
            Ok((
                out.sim.trace().lines().unwrap().to_vec(),
                out.sim.trace().digest(),
                dumps,
            ))
        };
        let (a, b) = (once()?, once()?);
        ensure!(a.0 == b.0 && a.1 == b.1, "{name}: traces differ");
        ensure!(a.2 == b.2, "{name}: dumps differ");
        lines += a.0.len();
    }
    Ok(format!(
        "{} builtins run twice, {lines} trace lines and 4 dumps each byte-identical",
        BUILTINS.len()
    ))
}

#[test]
fn criterion_10_determinism() {
    report(10, "deterministic replay", determinism());
}
