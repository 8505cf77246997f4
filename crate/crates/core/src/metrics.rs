//! Precision measures over recovered graphs: path counts, polymorphic jump
//! targets and execution-trace coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::bytecode::BlockId;
use crate::cfg::{Cfg, EdgeKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("entry block {0} is absent from the graph")]
    MissingEntry(BlockId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PathReport {
    #[serde(serialize_with = "serialize_biguint")]
    pub path_count: BigUint,
    pub back_edges_removed: usize,
}

fn serialize_biguint<S: serde::Serializer>(n: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(n)
}

/// Counts entry-to-sink paths after removing DFS back edges, so each loop body is traversed once.
pub fn count_paths(cfg: &Cfg) -> Result<PathReport, MetricsError> {
    if !cfg.blocks.contains_key(&cfg.entry) {
        return Err(MetricsError::MissingEntry(cfg.entry));
    }
    Ok(count_paths_in(cfg.entry, &cfg.adjacency()))
}

/// A graph with its depth-first back edges removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Acyclic<N> {
    pub successors: BTreeMap<N, Vec<N>>,
    /// Nodes reachable from the entry, each after all of its successors.
    pub post_order: Vec<N>,
    pub back_edges_removed: usize,
}

/// Depth-first search from `entry` visiting successors in ascending order,
/// which fixes which edges are classified as back edges.
pub fn remove_back_edges<N: Ord + Copy>(entry: N, adjacency: &BTreeMap<N, Vec<N>>) -> Acyclic<N> {
    let succs = |n: N| -> Vec<N> {
        let mut v = adjacency.get(&n).cloned().unwrap_or_default();
        v.sort();
        v.dedup();
        v
    };
    let mut on_stack = BTreeSet::from([entry]);
    let mut done = BTreeSet::new();
    let mut out = Acyclic { successors: BTreeMap::new(), post_order: Vec::new(), back_edges_removed: 0 };
    let mut stack: Vec<(N, Vec<N>, usize)> = vec![(entry, succs(entry), 0)];
    while let Some(top) = stack.last_mut() {
        let node = top.0;
        let next = top.1.get(top.2).copied();
        top.2 += 1;
        match next {
            Some(next) if on_stack.contains(&next) => out.back_edges_removed += 1,
            Some(next) => {
                out.successors.entry(node).or_default().push(next);
                if !done.contains(&next) {
                    on_stack.insert(next);
                    stack.push((next, succs(next), 0));
                }
            }
            None => {
                on_stack.remove(&node);
                done.insert(node);
                out.post_order.push(node);
                stack.pop();
            }
        }
    }
    out
}

/// Path counting over an explicit adjacency list.
pub fn count_paths_in<N: Ord + Copy>(entry: N, adjacency: &BTreeMap<N, Vec<N>>) -> PathReport {
    let dag = remove_back_edges(entry, adjacency);
    let mut paths: BTreeMap<N, BigUint> = BTreeMap::new();
    for &node in &dag.post_order {
        let count = match dag.successors.get(&node) {
            Some(ss) => ss.iter().map(|s| &paths[s]).fold(BigUint::zero(), |acc, p| acc + p),
            None => BigUint::one(),
        };
        paths.insert(node, count);
    }
    PathReport { path_count: paths.remove(&entry).unwrap_or_default(), back_edges_removed: dag.back_edges_removed }
}

/// Blocks whose jump edges (fall-through excluded) reach more than one node.
pub fn polymorphic_jump_targets(cfg: &Cfg) -> Vec<(BlockId, BTreeSet<BlockId>)> {
    let mut targets: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
    for e in cfg.edges.iter().filter(|e| e.kind == EdgeKind::Jump) {
        targets.entry(e.from).or_default().insert(e.to);
    }
    targets.into_iter().filter(|(_, t)| t.len() > 1).collect()
}

/// Block start offsets visited by one execution, beginning at 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trace {
    pub offsets: Vec<usize>,
}

impl Trace {
    pub fn new(offsets: Vec<usize>) -> Self {
        Trace { offsets }
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, o) in self.offsets.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{o:x}")?;
        }
        Ok(())
    }
}

impl Serialize for Trace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: malformed offset {token:?}")]
pub struct TraceParseError {
    pub line: usize,
    pub token: String,
}

impl FromStr for Trace {
    type Err = TraceParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut offsets = Vec::new();
        for token in s.split(',').map(str::trim) {
            let digits = token.strip_prefix("0x").unwrap_or(token);
            let off =
                usize::from_str_radix(digits, 16).map_err(|_| TraceParseError { line: 1, token: token.to_string() })?;
            offsets.push(off);
        }
        Ok(Trace { offsets })
    }
}

/// Parses a trace file: one trace per line, comma-separated hex offsets. Blank lines are skipped.
pub fn parse_traces(text: &str) -> Result<Vec<Trace>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.parse().map_err(|e: TraceParseError| TraceParseError { line: i + 1, ..e }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Uncovered {
    pub trace: Trace,
    /// Index of the first offset no walk could reach.
    pub failed_at: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
    pub uncovered: Vec<Uncovered>,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.covered as f64 / self.total as f64
        }
    }
}

/// Checks whether each trace is the offset projection of some walk from the entry.
///
/// A trace need not end at a halting block: it is covered when every consecutive
/// pair of offsets is matched by an edge along one walk.
pub fn trace_coverage(cfg: &Cfg, traces: &[Trace]) -> Coverage {
    let adjacency = cfg.adjacency();
    let mut report = Coverage { total: traces.len(), ..Coverage::default() };
    for trace in traces {
        match walk(cfg.entry, &adjacency, &trace.offsets) {
            None => report.covered += 1,
            Some(failed_at) => report.uncovered.push(Uncovered { trace: trace.clone(), failed_at }),
        }
    }
    report
}

fn walk(entry: BlockId, adjacency: &BTreeMap<BlockId, Vec<BlockId>>, offsets: &[usize]) -> Option<usize> {
    let Some(&first) = offsets.first() else { return Some(0) };
    if first != entry.offset {
        return Some(0);
    }
    let mut frontier = BTreeSet::from([entry]);
    for (i, &off) in offsets.iter().enumerate().skip(1) {
        frontier = frontier
            .iter()
            .flat_map(|n| adjacency.get(n).into_iter().flatten())
            .filter(|s| s.offset == off)
            .copied()
            .collect();
        if frontier.is_empty() {
            return Some(i);
        }
    }
    None
}
