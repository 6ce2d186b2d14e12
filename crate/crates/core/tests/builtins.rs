// SPDX-License-Identifier: Apache-2.0

use bridgesim::scenario::{builtin, parse, run, RunOptions, BUILTINS};

#[test]
fn every_builtin_passes() {
    let mut failed = Vec::new();
    for name in BUILTINS {
        let sc = parse(builtin(name).unwrap()).unwrap();
        let out = run(&sc, &RunOptions::default()).unwrap();
        for line in out.report() {
            println!("{line}");
        }
        if !out.passed() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failing builtins: {failed:?}");
}
