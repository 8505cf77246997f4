use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use reuse_cfg::corpus::assemble_text;
use reuse_cfg::detectors::{detect_reentrancy, detect_tx_origin, Finding, Role};
use reuse_cfg::{build_cfg, Cfg, Config, Mode};

struct Case {
    name: String,
    code: Vec<u8>,
    labels: BTreeMap<String, usize>,
    expect: usize,
}

fn cases(kind: &str) -> Vec<Case> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/detectors").join(kind);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let src = fs::read_to_string(&p).unwrap();
            let expect = src
                .lines()
                .find_map(|l| l.strip_prefix("// expect:"))
                .and_then(|n| n.trim().parse().ok())
                .unwrap_or_else(|| panic!("{} lacks an expect header", p.display()));
            let (code, labels) = assemble_text(&src).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            Case { name: p.file_stem().unwrap().to_string_lossy().into_owned(), code, labels, expect }
        })
        .collect()
}

/// Counts (true positives, false positives, false negatives) and lists failing fixtures.
fn score(kind: &str, detect: fn(&Cfg) -> Vec<Finding>) -> (usize, usize, usize, Vec<String>) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut failures = Vec::new();
    let all = cases(kind);
    let positives = all.iter().filter(|c| c.expect > 0).count();
    assert!(positives >= 10 && all.len() - positives >= 10, "{kind}: suite too small");
    for case in all {
        let cfg = build_cfg(&case.code, &Config::default()).unwrap();
        let findings = detect(&cfg);
        let site_hit = case.labels.get("site").is_none_or(|&s| findings.iter().any(|f| f.site_offset == s));
        if case.expect > 0 {
            if findings.len() == case.expect && site_hit {
                tp += 1;
            } else {
                fn_ += 1;
                failures.push(format!("{}: {findings:?}", case.name));
            }
        } else if !findings.is_empty() {
            fp += 1;
            failures.push(format!("{}: {findings:?}", case.name));
        }
    }
    (tp, fp, fn_, failures)
}

#[test]
fn tx_origin_suite_is_exact() {
    let (tp, fp, fn_, failures) = score("tx_origin", detect_tx_origin);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    assert!(tp >= 10 && fp == 0 && fn_ == 0);
}

#[test]
fn reentrancy_suite_is_exact() {
    let (tp, fp, fn_, failures) = score("reentrancy", detect_reentrancy);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    assert!(tp >= 10 && fp == 0 && fn_ == 0);
}

fn by_label(case: &Case, findings: &[Finding]) -> Vec<Vec<(Role, String)>> {
    let names: BTreeMap<usize, &str> = case.labels.iter().map(|(k, &v)| (v, k.as_str())).collect();
    findings
        .iter()
        .map(|f| {
            f.evidence.iter().map(|e| (e.role, names.get(&e.offset).copied().unwrap_or("?").to_string())).collect()
        })
        .collect()
}

fn case(kind: &str, name: &str) -> Case {
    cases(kind).into_iter().find(|c| c.name == name).unwrap()
}

#[test]
fn reused_getter_matches_inlined_getter() {
    let reused = case("reentrancy", "pos_02_dao_reused_getter");
    let inlined = case("reentrancy", "pos_03_dao_inlined_getter");
    let run = |c: &Case| detect_reentrancy(&build_cfg(&c.code, &Config::default()).unwrap());
    let (a, b) = (run(&reused), run(&inlined));
    assert_eq!(a.len(), 1);
    let expected = vec![vec![
        (Role::Load, "load".to_string()),
        (Role::Check, "check".to_string()),
        (Role::Call, "site".to_string()),
        (Role::Store, "store".to_string()),
    ]];
    assert_eq!(by_label(&reused, &a), expected);
    assert_eq!(by_label(&inlined, &b), expected);
}

#[test]
fn merged_reuse_misleads_the_reentrancy_detector() {
    let insensitive = Config::with_mode(Mode::ReuseInsensitive);
    let dao = case("reentrancy", "pos_02_dao_reused_getter");
    assert!(detect_reentrancy(&build_cfg(&dao.code, &insensitive).unwrap()).is_empty());
    let shared = case("reentrancy", "neg_11_shared_send_helper");
    assert!(!detect_reentrancy(&build_cfg(&shared.code, &insensitive).unwrap()).is_empty());
}
