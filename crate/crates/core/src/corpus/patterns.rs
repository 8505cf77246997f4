//! Generators for the eight code-reuse patterns.
//!
//! Every pattern uses the same building blocks: PUSH2 labels, conditions read
//! with CALLDATALOAD, and a JUMPI dispatcher chain selecting one of several
//! routes. A "call" pushes a return label and then the callee label, so the
//! callee finds its return address pre-pushed. Seeds only vary filler
//! instructions; the block layout of a pattern at a given depth is fixed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::Trace;
use crate::opcode::Opcode;

use super::asm::{Asm, AsmError};
use super::interp::{interpret, InterpError};

/// Deployed-code size limit of the EVM.
pub const CODE_SIZE_CAP: usize = 24_576;

/// Stack filler that can never be a jump destination, being past the size limit.
const PAD: u16 = 0xffff;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Several callers share one block that returns to a pre-pushed address.
    BasicFakeJoin,
    /// One caller chain re-enters a shared block, which looks like a loop.
    BasicFakeLoop,
    /// Nested shared functions, each reused at several call sites.
    FakeJoinSequence,
    /// A shared function called twice whose body calls a shared inner block twice.
    NestedFakeLoops,
    /// A shared block entered both from a plain caller and from real branch joins.
    FakeJoinWithReal,
    /// A shared block that contains a genuine loop.
    FakeLoopWithRealLoop,
    /// A shared block that branches into two exits, both returning to the caller.
    FakeJoinMultiExit,
    /// A shared branching cluster called twice in a row from each route.
    FakeLoopWithTransfers,
}

impl Pattern {
    pub const ALL: [Pattern; 8] = [
        Pattern::BasicFakeJoin,
        Pattern::BasicFakeLoop,
        Pattern::FakeJoinSequence,
        Pattern::NestedFakeLoops,
        Pattern::FakeJoinWithReal,
        Pattern::FakeLoopWithRealLoop,
        Pattern::FakeJoinMultiExit,
        Pattern::FakeLoopWithTransfers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::BasicFakeJoin => "basic_fake_join",
            Pattern::BasicFakeLoop => "basic_fake_loop",
            Pattern::FakeJoinSequence => "fake_join_sequence",
            Pattern::NestedFakeLoops => "nested_fake_loops",
            Pattern::FakeJoinWithReal => "fake_join_with_real",
            Pattern::FakeLoopWithRealLoop => "fake_loop_with_real_loop",
            Pattern::FakeJoinMultiExit => "fake_join_multi_exit",
            Pattern::FakeLoopWithTransfers => "fake_loop_with_transfers",
        }
    }

    /// Closed-form (reuse-sensitive, reuse-insensitive) path counts at `depth`.
    pub fn expected_paths(self, depth: usize) -> (u64, u64) {
        let d = depth as u64;
        match self {
            Pattern::BasicFakeJoin => (d + 1, (d + 1) * (d + 1)),
            Pattern::BasicFakeLoop => (1, d + 1),
            Pattern::FakeJoinSequence => (d + 2, (d + 2) * (d + 2)),
            Pattern::NestedFakeLoops => (1, d + 2),
            Pattern::FakeJoinWithReal => (1 + 2 * d, (1 + 2 * d) * (d + 1)),
            Pattern::FakeLoopWithRealLoop => (d + 2, d + 2),
            Pattern::FakeJoinMultiExit => (2 * (d + 1), 2 * (d + 1) * (d + 1)),
            Pattern::FakeLoopWithTransfers => (4 * d, 4 * d * d),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown pattern {0:?}")]
pub struct UnknownPattern(String);

impl FromStr for Pattern {
    type Err = UnknownPattern;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        Pattern::ALL
            .into_iter()
            .find(|p| p.name().replace('_', "") == norm)
            .ok_or_else(|| UnknownPattern(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub seed: u64,
    pub nesting_depth: usize,
}

impl PatternSpec {
    pub fn new(pattern: Pattern, seed: u64, nesting_depth: usize) -> Self {
        PatternSpec { pattern, seed, nesting_depth }
    }
}

/// A generated contract with the facts a correct analysis must reproduce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroundTruth {
    pub specs: Vec<PatternSpec>,
    #[serde(serialize_with = "serialize_hex")]
    pub bytecode: Vec<u8>,
    /// Offsets of blocks deliberately shared between unrelated paths.
    pub reused_offsets: BTreeSet<usize>,
    pub expected_sensitive_paths: u64,
    pub expected_insensitive_paths: u64,
    pub traces: Vec<Trace>,
}

fn serialize_hex<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("0x{}", hex::encode(b)))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenError {
    #[error("nesting depth must be at least 1")]
    ZeroDepth,
    #[error("generated code of {size} bytes exceeds the {cap}-byte limit")]
    TooLarge { size: usize, cap: usize },
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

struct Emitter<'a> {
    asm: &'a mut Asm,
    rng: ChaCha8Rng,
    prefix: String,
    reused: Vec<String>,
}

impl Emitter<'_> {
    fn l(&self, name: impl fmt::Display) -> String {
        format!("{}{}", self.prefix, name)
    }

    fn label(&mut self, name: impl fmt::Display) {
        let l = self.l(name);
        self.asm.label(&l);
    }

    fn push(&mut self, name: impl fmt::Display) {
        let l = self.l(name);
        self.asm.push_label(&l);
    }

    fn reused(&mut self, name: impl fmt::Display) {
        let l = self.l(name);
        self.reused.push(l);
    }

    fn op(&mut self, op: Opcode) {
        self.asm.op(op);
    }

    /// Zero to two stack-neutral instruction groups.
    fn filler(&mut self) {
        for _ in 0..self.rng.gen_range(0..=2) {
            let a: u8 = self.rng.gen();
            match self.rng.gen_range(0..3) {
                0 => {
                    self.asm.push(a).op(Opcode::POP);
                }
                1 => {
                    let b: u8 = self.rng.gen();
                    self.asm.push(a).push(b).ops(&[Opcode::XOR, Opcode::POP]);
                }
                _ => {
                    let b: u16 = self.rng.gen();
                    self.asm.push(b).push(a).ops(&[Opcode::ADD, Opcode::POP]);
                }
            }
        }
    }

    fn cond(&mut self, slot: usize) {
        self.asm.push(slot as u64).op(Opcode::CALLDATALOAD);
    }

    /// Pushes `ret`, then jumps to `callee`.
    fn call(&mut self, ret: impl fmt::Display, callee: impl fmt::Display) {
        self.push(ret);
        self.push(callee);
        self.op(Opcode::JUMP);
    }

    /// A JUMPI chain selecting one of `routes`; the last route is the fall-through default.
    fn dispatch(&mut self, routes: &[String]) {
        let (last, rest) = routes.split_last().expect("at least one route");
        for (i, r) in rest.iter().enumerate() {
            self.cond(i);
            self.push(r);
            self.op(Opcode::JUMPI);
        }
        self.push(last);
        self.op(Opcode::JUMP);
    }

    /// A block that returns to the address on top of the stack.
    fn returning(&mut self, name: impl fmt::Display) {
        self.label(name);
        self.filler();
        self.op(Opcode::JUMP);
    }

    fn stop(&mut self, name: impl fmt::Display) {
        self.label(name);
        self.filler();
        self.op(Opcode::STOP);
    }

    fn emit(&mut self, pattern: Pattern, d: usize) {
        self.label("entry");
        match pattern {
            Pattern::BasicFakeJoin => {
                let routes: Vec<String> = (0..=d).map(|i| format!("a{i}")).collect();
                self.dispatch(&routes);
                for i in 0..=d {
                    self.label(format!("a{i}"));
                    self.filler();
                    self.call(format!("c{i}"), "x");
                }
                self.returning("x");
                self.reused("x");
                for i in 0..=d {
                    self.stop(format!("c{i}"));
                }
            }
            Pattern::BasicFakeLoop => {
                self.filler();
                self.call("b1", "x");
                self.returning("x");
                self.reused("x");
                for j in 1..=d {
                    self.label(format!("b{j}"));
                    self.filler();
                    let next = if j == d { "c".to_string() } else { format!("b{}", j + 1) };
                    self.call(next, "x");
                }
                self.stop("c");
            }
            Pattern::FakeJoinSequence => {
                // Function f0 is x; f_j (block b_j) calls f_{j-1} and returns through d_j.
                // f_j for j < d has one external caller, f_d has two.
                let mut callees: Vec<usize> = (0..d).collect();
                callees.extend([d, d]);
                let routes: Vec<String> = (0..callees.len()).map(|i| format!("caller{i}")).collect();
                self.dispatch(&routes);
                for (i, &j) in callees.iter().enumerate() {
                    self.label(format!("caller{i}"));
                    self.filler();
                    // Keeps every entry into f_j at the same stack depth as the nested chain.
                    for _ in j..d {
                        self.asm.push(PAD);
                    }
                    let f = if j == 0 { "x".to_string() } else { format!("b{j}") };
                    self.call(format!("ret{i}"), f);
                    self.stop(format!("ret{i}"));
                }
                self.returning("x");
                self.reused("x");
                for j in 1..=d {
                    self.label(format!("b{j}"));
                    self.filler();
                    let inner = if j == 1 { "x".to_string() } else { format!("b{}", j - 1) };
                    self.call(format!("d{j}"), inner);
                    self.returning(format!("d{j}"));
                    self.reused(format!("b{j}"));
                    self.reused(format!("d{j}"));
                }
            }
            Pattern::NestedFakeLoops => {
                // f0 is b; f_j (block a_j) calls f_{j-1} returning to c_j, which
                // calls f_{j-1} again returning to e_j, which returns. The entry calls f_d twice.
                let top = format!("a{d}");
                self.filler();
                self.call("m1", &top);
                self.label("m1");
                self.filler();
                self.call("m2", &top);
                self.stop("m2");
                self.returning("b");
                self.reused("b");
                for j in 1..=d {
                    let inner = if j == 1 { "b".to_string() } else { format!("a{}", j - 1) };
                    self.label(format!("a{j}"));
                    self.filler();
                    self.call(format!("c{j}"), &inner);
                    self.label(format!("c{j}"));
                    self.filler();
                    self.call(format!("e{j}"), &inner);
                    self.returning(format!("e{j}"));
                    for n in ["a", "c", "e"] {
                        self.reused(format!("{n}{j}"));
                    }
                }
            }
            Pattern::FakeJoinWithReal => {
                let mut routes = vec!["a".to_string()];
                routes.extend((1..=d).map(|j| format!("g{j}")));
                self.dispatch(&routes);
                self.label("a");
                self.filler();
                self.call("c", "x");
                self.stop("c");
                for j in 1..=d {
                    self.label(format!("g{j}"));
                    self.cond(j);
                    self.push(format!("b{j}"));
                    self.op(Opcode::JUMPI);
                    self.filler();
                    self.call(format!("d{j}"), "x");
                    self.label(format!("b{j}"));
                    self.filler();
                    self.call(format!("d{j}"), "x");
                    self.stop(format!("d{j}"));
                }
                self.returning("x");
                self.reused("x");
            }
            Pattern::FakeLoopWithRealLoop => {
                // Loop head a exits to the pre-pushed return address; its body b jumps back.
                self.filler();
                self.call("r1", "a");
                self.label("a");
                self.filler();
                self.cond(0);
                self.op(Opcode::dup(2));
                self.op(Opcode::JUMPI);
                self.asm.mark(&self.l("b"));
                self.filler();
                self.push("a");
                self.op(Opcode::JUMP);
                self.reused("a");
                self.reused("b");
                for i in 1..=d + 1 {
                    self.label(format!("r{i}"));
                    self.op(Opcode::POP);
                    self.filler();
                    if i == d + 1 {
                        self.op(Opcode::STOP);
                    } else {
                        self.call(format!("r{}", i + 1), "a");
                    }
                }
            }
            Pattern::FakeJoinMultiExit => {
                let routes: Vec<String> = (0..=d).map(|i| format!("p{i}")).collect();
                self.dispatch(&routes);
                for i in 0..=d {
                    self.label(format!("p{i}"));
                    self.filler();
                    self.call(format!("r{i}"), "x");
                    self.stop(format!("r{i}"));
                }
                self.label("x");
                self.filler();
                self.cond(0);
                self.push("z");
                self.op(Opcode::JUMPI);
                self.asm.mark(&self.l("y"));
                self.filler();
                self.op(Opcode::JUMP);
                self.returning("z");
                for n in ["x", "y", "z"] {
                    self.reused(n);
                }
            }
            Pattern::FakeLoopWithTransfers => {
                // Each route calls the cluster {a, x, y, z} twice in sequence.
                let routes: Vec<String> = (1..=d).map(|i| format!("m{i}")).collect();
                self.dispatch(&routes);
                for i in 1..=d {
                    self.label(format!("m{i}"));
                    self.filler();
                    self.call(format!("n{i}"), "a");
                    self.label(format!("n{i}"));
                    self.filler();
                    self.call(format!("p{i}"), "a");
                    self.stop(format!("p{i}"));
                }
                self.label("a");
                self.filler();
                self.cond(0);
                self.push("y");
                self.op(Opcode::JUMPI);
                self.asm.mark(&self.l("x"));
                self.filler();
                self.push("z");
                self.op(Opcode::JUMP);
                self.label("y");
                self.filler();
                self.push("z");
                self.op(Opcode::JUMP);
                self.returning("z");
                for n in ["a", "x", "y", "z"] {
                    self.reused(n);
                }
            }
        }
    }
}

fn check_size(size: usize) -> Result<(), GenError> {
    if size > CODE_SIZE_CAP {
        return Err(GenError::TooLarge { size, cap: CODE_SIZE_CAP });
    }
    Ok(())
}

/// Generates one pattern instance and enumerates its traces with the interpreter.
pub fn generate(spec: PatternSpec) -> Result<GroundTruth, GenError> {
    generate_with_bound(spec, 16)
}

pub fn generate_with_bound(spec: PatternSpec, branch_bound: usize) -> Result<GroundTruth, GenError> {
    let mut truth = compose(&[spec])?;
    truth.traces = interpret(&truth.bytecode, branch_bound)?;
    Ok(truth)
}

/// Lays out several pattern instances behind one dispatcher. Path counts add up
/// across instances. Traces are left empty.
pub fn compose(specs: &[PatternSpec]) -> Result<GroundTruth, GenError> {
    if specs.iter().any(|s| s.nesting_depth == 0) {
        return Err(GenError::ZeroDepth);
    }
    // Every depth level adds at least one byte, so this rejects absurd depths before building.
    check_size(specs.iter().map(|s| s.nesting_depth).sum())?;
    let mut asm = Asm::new();
    let mut reused_labels = Vec::new();
    if specs.len() > 1 {
        let routes: Vec<String> = (0..specs.len()).map(|i| format!("i{i}_entry")).collect();
        let mut top =
            Emitter { asm: &mut asm, rng: ChaCha8Rng::seed_from_u64(0), prefix: String::new(), reused: vec![] };
        top.dispatch(&routes);
    }
    let (mut sensitive, mut insensitive) = (0, 0);
    for (i, spec) in specs.iter().enumerate() {
        let prefix = if specs.len() > 1 { format!("i{i}_") } else { String::new() };
        let mut e = Emitter { asm: &mut asm, rng: ChaCha8Rng::seed_from_u64(spec.seed), prefix, reused: Vec::new() };
        e.emit(spec.pattern, spec.nesting_depth);
        reused_labels.extend(e.reused);
        let (s, n) = spec.pattern.expected_paths(spec.nesting_depth);
        sensitive += s;
        insensitive += n;
        check_size(asm.len())?;
    }
    let bytecode = asm.build()?;
    let reused_offsets = reused_labels.iter().map(|l| asm.offset_of(l).expect("reused label defined")).collect();
    Ok(GroundTruth {
        specs: specs.to_vec(),
        bytecode,
        reused_offsets,
        expected_sensitive_paths: sensitive,
        expected_insensitive_paths: insensitive,
        traces: Vec::new(),
    })
}

/// A composition of pattern instances at depth 4, padded with trailing data to exactly `size` bytes.
pub fn compose_to_size(seed: u64, size: usize) -> Result<GroundTruth, GenError> {
    check_size(size)?;
    let mut specs: Vec<PatternSpec> = Vec::new();
    let mut best = None;
    loop {
        let pattern = Pattern::ALL[specs.len() % Pattern::ALL.len()];
        specs.push(PatternSpec::new(pattern, seed.wrapping_add(specs.len() as u64), 4));
        match compose(&specs) {
            Ok(t) if t.bytecode.len() <= size => best = Some(t),
            Ok(_) | Err(GenError::TooLarge { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    let mut truth = best.ok_or(GenError::TooLarge { size: 0, cap: size })?;
    truth.bytecode.resize(size, Opcode::INVALID.0);
    Ok(truth)
}
