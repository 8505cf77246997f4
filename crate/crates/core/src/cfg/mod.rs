//! Reuse-sensitive control-flow graph recovery.
//!
//! A worklist traversal emulates each block with the entry stack inherited from
//! its predecessor. Jump operands that were pushed by a predecessor (rather than
//! inside the jumping block) are tainted into the block's reuse context; when a
//! later predecessor arrives with different values at those positions the
//! successor is cloned, so every CFG node sees exactly one reuse context.

mod export;
mod recover;

pub use export::{export, to_dot, to_json, to_text};
pub use recover::{build_cfg, Recovery};

use std::collections::{BTreeMap, BTreeSet};

use ruint::aliases::U256;
use serde::Serialize;
use thiserror::Error;

use crate::bytecode::{BasicBlock, BlockId};
use crate::config::{InvalidConfig, Mode};
use crate::diag::Diagnostic;
use crate::emulator::{Snapshot, TacLine, ValueTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Jump,
    FallThrough,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Jump => "jump",
            EdgeKind::FallThrough => "fallthrough",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: BlockId,
    pub to: BlockId,
    pub kind: EdgeKind,
}

/// Pre-pushed jump operands of one block clone: stack index (counted from the
/// top of the entry stack) to the constant found there.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReuseContext {
    pub entries: BTreeMap<usize, U256>,
}

impl ReuseContext {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<U256> {
        self.entries.get(&index).copied()
    }
}

/// Why a node exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneReason {
    Original,
    /// Reached under a reuse context that matched no existing clone.
    Reuse,
    /// A halting block given one node per predecessor.
    EndBlock,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CfgError {
    #[error("empty bytecode")]
    Empty,
    #[error("clone explosion at offset {0:#x}")]
    CloneExplosion(usize),
    #[error("total block budget of {0} exhausted")]
    BlockBudget(usize),
    #[error("analysis step budget of {0} exhausted")]
    StepBudget(usize),
    #[error(transparent)]
    Config(#[from] InvalidConfig),
}

/// A recovered control-flow graph. Immutable once built.
#[derive(Clone, Debug)]
pub struct Cfg {
    pub mode: Mode,
    pub entry: BlockId,
    pub blocks: BTreeMap<BlockId, BasicBlock>,
    pub edges: BTreeSet<Edge>,
    pub snapshots: BTreeMap<BlockId, Vec<Snapshot>>,
    pub reuse_contexts: BTreeMap<BlockId, ReuseContext>,
    pub clone_reasons: BTreeMap<BlockId, CloneReason>,
    /// Three-address code from the last emulation of each reached node.
    pub tac: BTreeMap<BlockId, Vec<TacLine>>,
    pub values: ValueTable,
    pub diagnostics: Vec<Diagnostic>,
}

impl Cfg {
    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.get(&id)
    }

    pub fn successors(&self, id: BlockId) -> impl Iterator<Item = &Edge> + '_ {
        let lo = Edge { from: id, to: BlockId::new(0, 0), kind: EdgeKind::Jump };
        self.edges.range(lo..).take_while(move |e| e.from == id)
    }

    pub fn predecessors(&self, id: BlockId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.to == id)
    }

    /// Out-edges keyed by source, in edge order.
    pub fn adjacency(&self) -> BTreeMap<BlockId, Vec<BlockId>> {
        let mut adj: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.from).or_default().push(e.to);
        }
        adj
    }

    /// Offsets with at least one clone created for a reuse context
    /// (end-block clones excluded).
    pub fn reused_offsets(&self) -> BTreeSet<usize> {
        self.clone_reasons.iter().filter(|(_, r)| **r == CloneReason::Reuse).map(|(id, _)| id.offset).collect()
    }

    pub fn clones_of(&self, offset: usize) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.range(BlockId::new(offset, 0)..=BlockId::new(offset, usize::MAX)).map(|(id, _)| *id)
    }

    /// Whether the graph reachable from the entry contains a cycle.
    pub fn has_cycle(&self) -> bool {
        let adj = self.adjacency();
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<BlockId, Mark> = BTreeMap::new();
        let mut stack = vec![(self.entry, 0usize)];
        marks.insert(self.entry, Mark::Open);
        while let Some((node, i)) = stack.pop() {
            let succs = adj.get(&node).map(Vec::as_slice).unwrap_or(&[]);
            if let Some(&next) = succs.get(i) {
                stack.push((node, i + 1));
                match marks.get(&next) {
                    Some(Mark::Open) => return true,
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(next, Mark::Open);
                        stack.push((next, 0));
                    }
                }
            } else {
                marks.insert(node, Mark::Done);
            }
        }
        false
    }

    pub fn render_tac(&self, id: BlockId) -> String {
        self.tac.get(&id).map(|t| crate::emulator::render_tac(t, &self.values)).unwrap_or_default()
    }
}
