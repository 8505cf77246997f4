//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reuse_cfg::bytecode::disassemble;
use reuse_cfg::cfg::{to_json, CloneReason};
use reuse_cfg::corpus::fixtures::{nested_return, two_call_helper};
use reuse_cfg::corpus::interp::eval;
use reuse_cfg::corpus::{assemble_text, compose_to_size, generate, interpret, Pattern, PatternSpec};
use reuse_cfg::detectors::{detect_reentrancy, detect_tx_origin, Finding, Role};
use reuse_cfg::emulator::fold;
use reuse_cfg::metrics::{count_paths, polymorphic_jump_targets, trace_coverage};
use reuse_cfg::{build_cfg, BlockId, Cfg, CfgError, Config, Mode, Opcode};
use ruint::aliases::U256;
use serde_json::Value;

type Outcome = Result<String, String>;

/// Name, bytecode, labels and expected finding count of a detector fixture.
type DetectorCase = (String, Vec<u8>, BTreeMap<String, usize>, usize);

type Criterion = (&'static str, fn() -> Outcome);

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DEPTHS: [usize; 4] = [1, 2, 3, 4];

fn specs() -> Vec<PatternSpec> {
    Pattern::ALL
        .iter()
        .flat_map(|&p| DEPTHS.iter().flat_map(move |&d| SEEDS.iter().map(move |&s| PatternSpec::new(p, s, d))))
        .collect()
}

/// Entry-to-exit paths of each shape once every reused block is split by return context.
fn sensitive_paths(pattern: Pattern, depth: usize) -> u64 {
    let d = depth as u64;
    match pattern {
        Pattern::BasicFakeJoin => d + 1,
        Pattern::BasicFakeLoop => 1,
        Pattern::FakeJoinSequence => d + 2,
        Pattern::NestedFakeLoops => 1,
        Pattern::FakeJoinWithReal => 1 + 2 * d,
        Pattern::FakeLoopWithRealLoop => d + 2,
        Pattern::FakeJoinMultiExit => 2 * (d + 1),
        Pattern::FakeLoopWithTransfers => 4 * d,
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pattern_suite() -> Outcome {
    let start = Instant::now();
    let all = specs();
    for spec in &all {
        let truth = generate(*spec).map_err(|e| format!("{spec:?}: {e}"))?;
        let cfg = build_cfg(&truth.bytecode, &Config::default()).map_err(|e| format!("{spec:?}: {e}"))?;
        let poly = polymorphic_jump_targets(&cfg);
        ensure(poly.is_empty(), || format!("{spec:?}: polymorphic targets {poly:?}"))?;
        let traces = interpret(&truth.bytecode, 16).map_err(|e| format!("{spec:?}: {e}"))?;
        ensure(!traces.is_empty(), || format!("{spec:?}: no oracle traces"))?;
        let cov = trace_coverage(&cfg, &traces);
        ensure(cov.covered == cov.total, || format!("{spec:?}: coverage {}/{}", cov.covered, cov.total))?;
        let paths = count_paths(&cfg).map_err(|e| e.to_string())?.path_count;
        let expected = BigUint::from(sensitive_paths(spec.pattern, spec.nesting_depth));
        ensure(paths == expected, || format!("{spec:?}: {paths} paths, expected {expected}"))?;
        ensure(BigUint::from(truth.expected_sensitive_paths) == paths, || format!("{spec:?}: manifest disagrees"))?;
    }
    let fjs = generate(PatternSpec::new(Pattern::FakeJoinSequence, 1, 1)).unwrap();
    let counts: Vec<BigUint> = [Mode::ReuseSensitive, Mode::ReuseInsensitive]
        .iter()
        .map(|&m| count_paths(&build_cfg(&fjs.bytecode, &Config::with_mode(m)).unwrap()).unwrap().path_count)
        .collect();
    ensure(counts == [BigUint::from(3u32), BigUint::from(9u32)], || format!("fake join sequence: {counts:?}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{} fixtures exact, sequence shape 3 vs 9, {elapsed:.2?}", all.len()))
}

fn reuse_agreement() -> Outcome {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for spec in specs() {
        let truth = generate(spec).unwrap();
        let cfg = build_cfg(&truth.bytecode, &Config::default()).unwrap();
        let cloned: BTreeSet<usize> = cfg
            .blocks
            .keys()
            .filter(|id| id.clone >= 1 && cfg.clone_reasons.get(id) != Some(&CloneReason::EndBlock))
            .map(|id| id.offset)
            .collect();
        tp += cloned.intersection(&truth.reused_offsets).count();
        fp += cloned.difference(&truth.reused_offsets).count();
        fn_ += truth.reused_offsets.difference(&cloned).count();
    }
    ensure(fp == 0 && fn_ == 0 && tp > 0, || format!("tp {tp} fp {fp} fn {fn_}"))?;
    Ok(format!("precision 1.0, recall 1.0 over {tp} reused offsets"))
}

fn two_call_example() -> Outcome {
    let f = two_call_helper();
    let cfg = build_cfg(&f.bytecode, &Config::default()).map_err(|e| e.to_string())?;
    let paths = count_paths(&cfg).unwrap().path_count;
    ensure(!independent_has_cycle(&cfg), || "sensitive graph has a cycle".into())?;
    ensure(paths == BigUint::from(4u32), || format!("{paths} paths"))?;
    let merged = build_cfg(&f.bytecode, &Config::with_mode(Mode::ReuseInsensitive)).map_err(|e| e.to_string())?;
    ensure(independent_has_cycle(&merged), || "insensitive graph is acyclic".into())?;
    Ok("acyclic with 4 paths; merged graph has a cycle".into())
}

/// Kahn's algorithm over nodes reachable from the entry.
fn independent_has_cycle(cfg: &Cfg) -> bool {
    let mut reach = BTreeSet::from([cfg.entry]);
    let mut work = vec![cfg.entry];
    while let Some(n) = work.pop() {
        for e in cfg.edges.iter().filter(|e| e.from == n) {
            if reach.insert(e.to) {
                work.push(e.to);
            }
        }
    }
    let edges: Vec<(BlockId, BlockId)> =
        cfg.edges.iter().filter(|e| reach.contains(&e.from)).map(|e| (e.from, e.to)).collect();
    let mut indeg: BTreeMap<BlockId, usize> = reach.iter().map(|&n| (n, 0)).collect();
    for (_, to) in &edges {
        *indeg.get_mut(to).unwrap() += 1;
    }
    let mut ready: Vec<BlockId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for (_, to) in edges.iter().filter(|(f, _)| *f == n) {
            let d = indeg.get_mut(to).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(*to);
            }
        }
    }
    seen < reach.len()
}

fn nested_return_example() -> Outcome {
    let f = nested_return();
    let cfg = build_cfg(&f.bytecode, &Config::default()).map_err(|e| e.to_string())?;
    let doc: Value = serde_json::from_str(&to_json(&cfg, false)).map_err(|e| e.to_string())?;
    let id = |label: &str, clone: usize| format!("{:#x}_{clone}", f.at(label));
    let x_nodes: Vec<String> = doc["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|b| b["offset"].as_u64() == Some(f.at("x") as u64))
        .map(|b| b["id"].as_str().unwrap().to_string())
        .collect();
    ensure(x_nodes == [id("x", 0), id("x", 1)], || format!("x nodes {x_nodes:?}"))?;
    let succ = |from: String| -> Vec<String> {
        doc["edges"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|e| e["from"].as_str() == Some(from.as_str()))
            .map(|e| e["to"].as_str().unwrap().to_string())
            .collect()
    };
    ensure(succ(id("a", 0)) == [id("x", 0)], || format!("a -> {:?}", succ(id("a", 0))))?;
    ensure(succ(id("b", 0)) == [id("x", 1)], || format!("b -> {:?}", succ(id("b", 0))))?;
    ensure(succ(id("e", 0)) == [id("x", 1)], || format!("e -> {:?}", succ(id("e", 0))))?;
    ensure(succ(id("x", 0)) == [id("c", 0)], || format!("x -> {:?}", succ(id("x", 0))))?;
    ensure(succ(id("x", 1)) == [id("d", 0)], || format!("x' -> {:?}", succ(id("x", 1))))?;
    Ok("one clone of x; a -> x, b -> x', e -> x'".into())
}

const FOLDED: [Opcode; 17] = [
    Opcode::ADD,
    Opcode::MUL,
    Opcode::SUB,
    Opcode::DIV,
    Opcode::MOD,
    Opcode::EXP,
    Opcode::AND,
    Opcode::OR,
    Opcode::XOR,
    Opcode::NOT,
    Opcode::SHL,
    Opcode::SHR,
    Opcode::BYTE,
    Opcode::LT,
    Opcode::GT,
    Opcode::EQ,
    Opcode::ISZERO,
];

/// Mixes full-width, small and boundary words.
fn word(rng: &mut ChaCha8Rng) -> U256 {
    match rng.gen_range(0..4) {
        0 => U256::from(rng.gen_range(0u64..300)),
        1 => U256::MAX - U256::from(rng.gen_range(0u64..4)),
        _ => U256::from_be_bytes(rng.gen::<[u8; 32]>()),
    }
}

/// Width of the inline payload for each opcode byte.
fn payload_table() -> [usize; 256] {
    let mut t = [0; 256];
    for (i, w) in t.iter_mut().enumerate().skip(0x60).take(32) {
        *w = i - 0x5f;
    }
    t
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in FOLDED {
        for _ in 0..10_000 {
            let args: Vec<U256> = (0..op.pops()).map(|_| word(&mut rng)).collect();
            let big: Vec<BigUint> = args.iter().map(|a| BigUint::from_bytes_be(&a.to_be_bytes::<32>())).collect();
            let expected = eval(op, &big).ok_or_else(|| format!("{} not evaluated", op.name()))?;
            let got = fold(op, &args).ok_or_else(|| format!("{} not folded", op.name()))?;
            ensure(BigUint::from_bytes_be(&got.to_be_bytes::<32>()) == expected, || format!("{} {args:?}", op.name()))?;
        }
    }
    let table = payload_table();
    for case in 0..10_000 {
        let len = rng.gen_range(0..256);
        let code: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let mut expected = Vec::new();
        let mut pc = 0;
        while pc < code.len() {
            let width = table[usize::from(code[pc])];
            expected.push((pc, code[pc], (1 + width).min(code.len() - pc)));
            pc += 1 + width;
        }
        let got: Vec<(usize, u8, usize)> =
            disassemble(&code).instructions.iter().map(|i| (i.offset, i.opcode.0, i.length)).collect();
        ensure(got == expected, || format!("decoder mismatch on case {case}: {}", hex::encode(&code)))?;
    }
    Ok(format!("{} folded opcodes x 10000 tuples; 10000 byte strings decoded identically", FOLDED.len()))
}

fn detector_cases(kind: &str) -> Vec<DetectorCase> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/detectors").join(kind);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let src = fs::read_to_string(&p).unwrap();
            let expect = src.lines().find_map(|l| l.strip_prefix("// expect:")).unwrap().trim().parse().unwrap();
            let (code, labels) = assemble_text(&src).unwrap();
            (p.file_stem().unwrap().to_string_lossy().into_owned(), code, labels, expect)
        })
        .collect()
}

fn score(kind: &str, detect: fn(&Cfg) -> Vec<Finding>) -> Result<String, String> {
    let cases = detector_cases(kind);
    let (mut tp, mut fp, mut fn_, mut pos, mut neg) = (0, 0, 0, 0, 0);
    for (name, code, labels, expect) in &cases {
        let findings = detect(&build_cfg(code, &Config::default()).map_err(|e| format!("{name}: {e}"))?);
        let site_ok = labels.get("site").is_none_or(|&s| findings.iter().any(|f| f.site_offset == s));
        if *expect > 0 {
            pos += 1;
            if findings.len() == *expect && site_ok {
                tp += 1;
            } else {
                fn_ += 1;
            }
        } else {
            neg += 1;
            if !findings.is_empty() {
                fp += 1;
            }
        }
    }
    ensure(pos >= 10 && neg >= 10 && fp == 0 && fn_ == 0, || {
        format!("{kind}: tp {tp} fp {fp} fn {fn_} ({pos}+/{neg}-)")
    })?;
    Ok(format!("{kind} {pos}+/{neg}- exact"))
}

/// Whether some path leads from a node containing `from` to a node containing `to`.
fn reaches(cfg: &Cfg, from: usize, to: usize) -> bool {
    let holds = |id: &BlockId, off: usize| cfg.blocks[id].instructions.iter().any(|i| i.offset == off);
    let mut work: Vec<BlockId> = cfg.blocks.keys().filter(|id| holds(id, from)).copied().collect();
    let mut seen: BTreeSet<BlockId> = work.iter().copied().collect();
    while let Some(n) = work.pop() {
        if holds(&n, to) {
            return true;
        }
        for e in cfg.successors(n) {
            if seen.insert(e.to) {
                work.push(e.to);
            }
        }
    }
    false
}

fn detectors() -> Outcome {
    let a = score("tx_origin", detect_tx_origin)?;
    let b = score("reentrancy", detect_reentrancy)?;
    let (_, code, labels, _) = detector_cases("reentrancy")
        .into_iter()
        .find(|c| c.0 == "pos_02_dao_reused_getter")
        .ok_or("missing dao fixture")?;
    let cfg = build_cfg(&code, &Config::default()).map_err(|e| e.to_string())?;
    ensure(!cfg.reused_offsets().is_empty(), || "dao fixture has no reused block".into())?;
    let findings = detect_reentrancy(&cfg);
    ensure(findings.len() == 1, || format!("dao: {findings:?}"))?;
    let at = |role: Role| findings[0].evidence.iter().find(|e| e.role == role).map(|e| e.offset);
    let (check, call, store) = (at(Role::Check).unwrap(), at(Role::Call).unwrap(), at(Role::Store).unwrap());
    ensure(check < call && call < store, || format!("offsets {check:#x} {call:#x} {store:#x}"))?;
    ensure(reaches(&cfg, check, call) && reaches(&cfg, call, store), || "evidence not in path order".into())?;
    ensure((check, call, store) == (labels["check"], labels["site"], labels["store"]), || {
        "evidence labels differ".into()
    })?;
    Ok(format!("{a}; {b}; reused-check fixture: one finding, check < call < store"))
}

fn performance() -> Outcome {
    let code = compose_to_size(7, 24_000).map_err(|e| e.to_string())?.bytecode;
    ensure(code.len() == 24_000, || format!("composed {} bytes", code.len()))?;
    let start = Instant::now();
    let cfg = build_cfg(&code, &Config::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("build_cfg took {elapsed:?}"))?;
    ensure(polymorphic_jump_targets(&cfg).is_empty(), || "polymorphic targets in composed contract".into())?;
    for spec in specs() {
        let truth = generate(spec).unwrap();
        if let Err(e @ CfgError::CloneExplosion(_)) = build_cfg(&truth.bytecode, &Config::default()) {
            return Err(format!("{spec:?}: {e}"));
        }
    }
    Ok(format!("24000 bytes, {} nodes in {elapsed:.2?}; no clone-budget abort", cfg.blocks.len()))
}

/// Random bytes biased towards jump-related opcodes so the emulator resolves jumps.
fn fuzz_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(1..400);
    let mut code = Vec::with_capacity(len);
    while code.len() < len {
        match rng.gen_range(0..10) {
            0 => code.push(0x5b),
            1 => code.push(if rng.gen() { 0x56 } else { 0x57 }),
            2 => {
                code.push(0x60);
                code.push(rng.gen_range(0..len) as u8);
            }
            3 => code.extend_from_slice(&[0x61, 0, rng.gen_range(0..len) as u8]),
            _ => code.push(rng.gen()),
        }
    }
    code
}

fn determinism() -> Outcome {
    let mut inputs: Vec<Vec<u8>> = specs().into_iter().map(|s| generate(s).unwrap().bytecode).collect();
    inputs.push(two_call_helper().bytecode);
    inputs.push(nested_return().bytecode);
    inputs.extend(["tx_origin", "reentrancy"].iter().flat_map(|k| detector_cases(k)).map(|c| c.1));
    for code in &inputs {
        for mode in [Mode::ReuseSensitive, Mode::ReuseInsensitive] {
            let config = Config::with_mode(mode);
            let first = to_json(&build_cfg(code, &config).map_err(|e| e.to_string())?, true);
            let second = to_json(&build_cfg(code, &config).map_err(|e| e.to_string())?, true);
            ensure(first == second, || format!("nondeterministic output for {}", hex::encode(code)))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let start = Instant::now();
    let mut slowest = Duration::ZERO;
    let mut errors = 0;
    for _ in 0..1000 {
        let code = fuzz_input(&mut rng);
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| {
            [Mode::ReuseSensitive, Mode::ReuseInsensitive].map(|m| build_cfg(&code, &Config::with_mode(m)).is_err())
        }))
        .map_err(|_| format!("panic on {}", hex::encode(&code)))?;
        errors += result.iter().filter(|e| **e).count();
        slowest = slowest.max(t.elapsed());
    }
    ensure(slowest < Duration::from_secs(10), || format!("slowest fuzz input took {slowest:?}"))?;
    Ok(format!(
        "{} inputs byte-identical; 1000 fuzz inputs in {:.2?}, {errors} budget errors, no panics",
        inputs.len(),
        start.elapsed()
    ))
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 8] = [
        ("pattern suite", pattern_suite),
        ("reuse identification", reuse_agreement),
        ("two-call helper", two_call_example),
        ("nested return", nested_return_example),
        ("oracle equivalence", oracles),
        ("detectors", detectors),
        ("performance", performance),
        ("determinism and termination", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
