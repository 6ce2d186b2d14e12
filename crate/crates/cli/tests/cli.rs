// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::process::{Command, Output};

fn bridgesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgesim"))
        .args(args)
        .env_remove("BRIDGESIM_FORMAT_VERSION")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const SMALL: &str = r#"{
  "format_version": 1,
  "until": 0.2,
  "bridges": [{"id": 1, "access_ports": [10]}, {"id": 2, "access_ports": [10]}],
  "links": [{"a": "1.2", "b": "2.1"}],
  "hosts": [
    {"name": "a", "port": "1.10", "mac": "00:00:00:00:00:0a", "vid": 11},
    {"name": "b", "port": "2.10", "mac": "00:00:00:00:00:0b", "vid": 11}
  ],
  "services": [{"name": "s", "type": "P2P",
    "attachments": [{"port": "1.10", "vid": 11}, {"port": "2.10", "vid": 11}]}],
  "timeline": [{"action": "inject", "at": 0.15, "host": "a", "dst": "b", "label": "s", "count": 3}],
  "assertions": [{"kind": "delivery", "label": "s", "hosts": ["b"]}]
}"#;

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn vn1_vn2_builtin_exits_zero() {
    let o = bridgesim(&["run", "builtin:vn1_vn2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("result=PASS"));
}

#[test]
fn undeclared_bridge_exits_two_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(&dir, "bad.json", &SMALL.replace(r#""b": "2.1""#, r#""b": "7.1""#));
    let o = bridgesim(&["run", &f]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("links[0].b: undeclared bridge 7"), "{}", stderr(&o));
}

#[test]
fn impossible_assertion_exits_one_with_sets() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        &dir,
        "x.json",
        &SMALL.replace(r#""hosts": ["b"]"#, r#""hosts": ["a", "b"]"#),
    );
    let o = bridgesim(&["run", &f]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stdout(&o).contains("FAIL [1] delivery: label=s expected={a,b} observed={b}"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn validate_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(&dir, "ok.json", SMALL);
    assert_eq!(bridgesim(&["validate", &ok]).status.code(), Some(0));

    let cyclic = SMALL
        .replace(
            r#"{"id": 2, "access_ports": [10]}]"#,
            r#"{"id": 2, "access_ports": [10]}, {"id": 3, "access_ports": [10]}]"#,
        )
        .replace(
            r#"[{"a": "1.2", "b": "2.1"}]"#,
            r#"[{"a": "1.2", "b": "2.1"}, {"a": "2.3", "b": "3.2"}, {"a": "3.1", "b": "1.3"}]"#,
        )
        .replace(r#""type": "P2P","#, r#""type": "MP2MP", "tree": [[1,2],[2,3],[3,1]],"#);
    let f = write(&dir, "cyc.json", &cyclic);
    let o = bridgesim(&["validate", &f]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cycle"), "{}", stderr(&o));

    let rule = r#"{"priority": 4, "match": {"selector": 80}, "action": {"kind": "map_to_bvid", "bvid": 3}}"#;
    let dup = SMALL.replace(
        r#""services""#,
        &format!(r#""ports": [{{"port": "1.10", "flow_rules": [{rule}, {rule}]}}], "services""#),
    );
    let f = write(&dir, "dup.json", &dup);
    assert_eq!(bridgesim(&["validate", &f]).status.code(), Some(2));
}

#[test]
fn validate_and_run_agree() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(&dir, "bad.json", &SMALL.replace(r#""dst": "b""#, r#""dst": "nobody""#));
    assert_eq!(bridgesim(&["validate", &bad]).status.code(), Some(2));
    assert_eq!(bridgesim(&["run", &bad]).status.code(), Some(2));
}

#[test]
fn dumps_are_sorted_and_versioned() {
    let o = bridgesim(&["dump", "builtin:vn1_vn2", "--at", "0.5", "bindings"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# format=1 dump=bindings"));
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[1].contains("service=vn1") && lines[1].contains("control=Spb"));
    assert!(lines[2].contains("service=vn2") && lines[2].contains("control=Sdn"));

    let o = bridgesim(&["dump", "builtin:vn1_vn2", "--at", "0.5", "lsdb"]);
    let links = stdout(&o).lines().filter(|l| l.starts_with("link ")).count();
    assert_eq!(links, 10);

    let o = bridgesim(&["dump", "builtin:vn1_vn2", "--at", "0.5", "routes"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fdb_dump_keeps_planes_apart() {
    let o = bridgesim(&["dump", "builtin:vn1_vn2", "--at", "0.9", "fdb"]);
    let text = stdout(&o);
    let mut owners = std::collections::BTreeMap::<String, std::collections::BTreeSet<String>>::new();
    for l in text.lines().skip(1) {
        let field = |k: &str| l.split_whitespace().find_map(|w| w.strip_prefix(k)).map(str::to_string);
        if let (Some(f), Some(o)) = (field("fid="), field("origin=")) {
            owners.entry(f).or_default().insert(o);
        }
    }
    assert!(!owners.is_empty(), "{text}");
    assert!(owners.values().all(|o| o.len() == 1), "{owners:?}");
}

#[test]
fn trace_file_and_seed_flags() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("t1.log");
    let t2 = dir.path().join("t2.log");
    for t in [&t1, &t2] {
        let o = bridgesim(&["run", "builtin:vn1_vn2", "--seed", "3", "--trace", t.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    let a = fs::read(&t1).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(&t2).unwrap());
}

#[test]
fn jobs_keep_output_order() {
    let serial = bridgesim(&["run", "builtin:vn1_vn2", "builtin:vm_migration", "builtin:hybrid_fuzz"]);
    let parallel = bridgesim(&[
        "run",
        "--jobs",
        "3",
        "builtin:vn1_vn2",
        "builtin:vm_migration",
        "builtin:hybrid_fuzz",
    ]);
    assert_eq!(serial.status.code(), Some(0));
    assert_eq!(stdout(&serial), stdout(&parallel));
}

#[test]
fn format_pin_is_checked() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_bridgesim"))
            .args(["dump", "builtin:vn1_vn2", "--at", "0", "topology"])
            .env("BRIDGESIM_FORMAT_VERSION", v)
            .output()
            .unwrap()
    };
    assert_eq!(run("1").status.code(), Some(0));
    assert_eq!(run("2").status.code(), Some(2));
}
