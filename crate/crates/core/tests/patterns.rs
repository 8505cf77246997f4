use std::collections::BTreeSet;

use num_bigint::BigUint;
use reuse_cfg::corpus::{generate, Pattern, PatternSpec};
use reuse_cfg::metrics::{count_paths, polymorphic_jump_targets, trace_coverage};
use reuse_cfg::{build_cfg, Config, Mode};

#[test]
fn every_pattern_matches_its_ground_truth() {
    let mut failures = Vec::new();
    for pattern in Pattern::ALL {
        for depth in 1..=4 {
            let truth = generate(PatternSpec::new(pattern, 11, depth)).unwrap();
            let sens = build_cfg(&truth.bytecode, &Config::default()).unwrap();
            let insens = build_cfg(&truth.bytecode, &Config::with_mode(Mode::ReuseInsensitive)).unwrap();
            let sp = count_paths(&sens).unwrap().path_count;
            let ip = count_paths(&insens).unwrap().path_count;
            let poly = polymorphic_jump_targets(&sens).len();
            let cov = trace_coverage(&sens, &truth.traces);
            let reused: BTreeSet<usize> = sens.reused_offsets();
            let line = format!(
                "{pattern} d={depth}: sens {sp}/{} insens {ip}/{} poly {poly} cover {}/{} reused {:?} vs {:?}",
                truth.expected_sensitive_paths,
                truth.expected_insensitive_paths,
                cov.covered,
                cov.total,
                reused,
                truth.reused_offsets
            );
            let ok = sp == BigUint::from(truth.expected_sensitive_paths)
                && ip == BigUint::from(truth.expected_insensitive_paths)
                && poly == 0
                && cov.covered == cov.total
                && reused == truth.reused_offsets;
            if !ok {
                failures.push(line);
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
