//! Vulnerability detectors over a recovered graph and its three-address code:
//! tx.origin used for authorization, and reentrancy through a
//! check, call, store ordering on one path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::bytecode::BlockId;
use crate::cfg::Cfg;
use crate::emulator::{TacLine, ValueId, ValueKind};
use crate::metrics::remove_back_edges;
use crate::opcode::Opcode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    TxOrigin,
    Reentrancy,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingKind::TxOrigin => "tx_origin",
            FindingKind::Reentrancy => "reentrancy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Origin,
    Caller,
    Comparison,
    Load,
    Check,
    Call,
    Store,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Origin => "origin",
            Role::Caller => "caller",
            Role::Comparison => "comparison",
            Role::Load => "load",
            Role::Check => "check",
            Role::Call => "call",
            Role::Store => "store",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Evidence {
    pub role: Role,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// Offset of the violating instruction.
    pub site_offset: usize,
    pub evidence: Vec<Evidence>,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {:#x}", self.kind.as_str(), self.site_offset)?;
        for (i, e) in self.evidence.iter().enumerate() {
            f.write_str(if i == 0 { ": " } else { ", " })?;
            write!(f, "{} {:#x}", e.role.as_str(), e.offset)?;
        }
        Ok(())
    }
}

/// Operators an address may pass through on its way into an authorization check.
const COMPARISON_CHAIN: [Opcode; 5] = [Opcode::EQ, Opcode::ISZERO, Opcode::AND, Opcode::OR, Opcode::NOT];

/// Values `v` derives from, following φ members and the operands of the allowed definitions.
fn derivation(cfg: &Cfg, v: ValueId, through: &dyn Fn(Opcode) -> bool) -> BTreeSet<ValueId> {
    let mut seen = BTreeSet::new();
    let mut pending = vec![v];
    while let Some(v) = pending.pop() {
        if !seen.insert(v) {
            continue;
        }
        let value = cfg.values.get(v);
        if let ValueKind::Phi(members) = &value.kind {
            pending.extend(members.iter().copied());
        }
        if let Some(def) = &value.def {
            if through(def.opcode) {
                pending.extend(def.args.iter().copied());
            }
        }
    }
    seen
}

fn defined_by(cfg: &Cfg, values: &BTreeSet<ValueId>, op: Opcode) -> BTreeSet<usize> {
    values.iter().filter_map(|&v| cfg.values.get(v).def.as_ref()).filter(|d| d.opcode == op).map(|d| d.offset).collect()
}

fn lines(cfg: &Cfg) -> impl Iterator<Item = &TacLine> {
    cfg.tac.values().flatten()
}

fn jumpi_condition(line: &TacLine) -> Option<ValueId> {
    (line.opcode == Opcode::JUMPI).then(|| line.args.get(1).copied()).flatten()
}

/// Reports ORIGIN-derived values that decide a branch or are compared with CALLER.
pub fn detect_tx_origin(cfg: &Cfg) -> Vec<Finding> {
    let chain = |op: Opcode| COMPARISON_CHAIN.contains(&op);
    let mut findings = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for line in lines(cfg) {
        let Some(cond) = jumpi_condition(line) else { continue };
        let derived = derivation(cfg, cond, &chain);
        let origins = defined_by(cfg, &derived, Opcode::ORIGIN);
        if origins.is_empty() {
            continue;
        }
        let mut evidence: Vec<Evidence> =
            origins.into_iter().map(|offset| Evidence { role: Role::Origin, offset }).collect();
        evidence.push(Evidence { role: Role::Check, offset: line.offset });
        findings.insert(Finding { kind: FindingKind::TxOrigin, site_offset: line.offset, evidence });
        reported.extend(derived);
    }
    for line in lines(cfg) {
        let (Opcode::EQ, Some(result)) = (line.opcode, line.result) else { continue };
        if reported.contains(&result) || line.args.len() != 2 {
            continue;
        }
        let sides: Vec<BTreeSet<ValueId>> = line.args.iter().map(|&a| derivation(cfg, a, &chain)).collect();
        let pairs = [(&sides[0], &sides[1]), (&sides[1], &sides[0])];
        for (a, b) in pairs {
            let origins = defined_by(cfg, a, Opcode::ORIGIN);
            let callers = defined_by(cfg, b, Opcode::CALLER);
            if origins.is_empty() || callers.is_empty() {
                continue;
            }
            let mut evidence: Vec<Evidence> =
                origins.into_iter().map(|offset| Evidence { role: Role::Origin, offset }).collect();
            evidence.extend(callers.into_iter().map(|offset| Evidence { role: Role::Caller, offset }));
            evidence.push(Evidence { role: Role::Comparison, offset: line.offset });
            findings.insert(Finding { kind: FindingKind::TxOrigin, site_offset: line.offset, evidence });
            break;
        }
    }
    findings.into_iter().collect()
}

const KEY_DEPTH: usize = 32;

/// Canonical form of a storage key; `None` when the key is not fully known.
/// Two keys match iff their forms are equal.
fn key_shape(cfg: &Cfg, v: ValueId, depth: usize) -> Option<String> {
    if depth > KEY_DEPTH {
        return None;
    }
    let value = cfg.values.get(v);
    match (&value.kind, &value.def) {
        (ValueKind::Const(c), _) => Some(format!("{c:#x}")),
        (ValueKind::Sym, Some(def)) => {
            let args: Option<Vec<String>> = def.args.iter().map(|&a| key_shape(cfg, a, depth + 1)).collect();
            Some(format!("{}({})", def.opcode, args?.join(",")))
        }
        _ => None,
    }
}

struct Check {
    jumpi: usize,
    /// (SLOAD offset, key shape) of the loads deciding the branch.
    loads: Vec<(usize, String)>,
}

/// Reports a storage load that decides a branch, followed on some path by an
/// external call and then a store to the same key.
pub fn detect_reentrancy(cfg: &Cfg) -> Vec<Finding> {
    let dag = remove_back_edges(cfg.entry, &cfg.adjacency());
    let mut descendants: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for &n in &dag.post_order {
        let mut set = BTreeSet::new();
        for s in dag.successors.get(&n).into_iter().flatten() {
            set.insert(*s);
            set.extend(descendants[s].iter().copied());
        }
        descendants.insert(n, set);
    }
    let tac = |n: &BlockId| cfg.tac.get(n).map(Vec::as_slice).unwrap_or_default();

    let mut findings = BTreeSet::new();
    for &n in &dag.post_order {
        for check in checks(cfg, tac(&n)) {
            for n2 in &descendants[&n] {
                let calls = tac(n2).iter().enumerate().filter(|(_, l)| l.opcode.is_reentrant_call());
                for (i, call) in calls {
                    let later = tac(n2)[i + 1..].iter().chain(descendants[n2].iter().flat_map(|m| tac(m).iter()));
                    for store in later.filter(|l| l.opcode == Opcode::SSTORE) {
                        let Some(key) = store.args.first().and_then(|&k| key_shape(cfg, k, 0)) else { continue };
                        for (load, _) in check.loads.iter().filter(|(_, k)| *k == key) {
                            findings.insert(Finding {
                                kind: FindingKind::Reentrancy,
                                site_offset: call.offset,
                                evidence: vec![
                                    Evidence { role: Role::Load, offset: *load },
                                    Evidence { role: Role::Check, offset: check.jumpi },
                                    Evidence { role: Role::Call, offset: call.offset },
                                    Evidence { role: Role::Store, offset: store.offset },
                                ],
                            });
                        }
                    }
                }
            }
        }
    }
    findings.into_iter().collect()
}

fn checks(cfg: &Cfg, tac: &[TacLine]) -> Vec<Check> {
    let mut out = Vec::new();
    for line in tac {
        let Some(cond) = jumpi_condition(line) else { continue };
        let derived = derivation(cfg, cond, &|_| true);
        let mut loads: Vec<(usize, String)> = derived
            .iter()
            .filter_map(|&v| cfg.values.get(v).def.as_ref())
            .filter(|d| d.opcode == Opcode::SLOAD)
            .filter_map(|d| Some((d.offset, key_shape(cfg, *d.args.first()?, 0)?)))
            .collect();
        loads.sort();
        loads.dedup();
        if !loads.is_empty() {
            out.push(Check { jumpi: line.offset, loads });
        }
    }
    out
}

/// Both detectors, findings sorted.
pub fn detect_all(cfg: &Cfg) -> Vec<Finding> {
    let mut all = detect_tx_origin(cfg);
    all.extend(detect_reentrancy(cfg));
    all.sort();
    all
}
