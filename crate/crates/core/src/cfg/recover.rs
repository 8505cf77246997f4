use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use ruint::aliases::U256;

use crate::bytecode::{disassemble, identify_blocks, BasicBlock, BlockId};
use crate::config::{Config, Mode};
use crate::diag::Diagnostic;
use crate::emulator::{
    emulate_block, prepare_stack, widen, BlockEmulation, JumpTarget, Snapshot, StackState, ValueId, ValueKind,
    ValueTable,
};

use super::{Cfg, CfgError, CloneReason, Edge, EdgeKind, ReuseContext};

/// Recovers the CFG of `code` under `config`.
pub fn build_cfg(code: &[u8], config: &Config) -> Result<Cfg, CfgError> {
    let mut session = Recovery::new(code, config.clone())?;
    session.run()?;
    Ok(session.finish())
}

/// A pending transfer of control from `pred` into `current`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct WorkItem {
    pred: Option<BlockId>,
    current: BlockId,
    kind: EdgeKind,
}

#[derive(Debug)]
struct Node {
    block: BasicBlock,
    reason: CloneReason,
    s_start: Option<StackState>,
    emulation: Option<BlockEmulation>,
    snapshots: Vec<Snapshot>,
    context: ReuseContext,
    visits: usize,
    reemulations: usize,
    /// φ membership of the entry stack at the last emulation; φs grow in place.
    phi_members: usize,
    /// Successor currently selected for each outgoing edge kind.
    chosen: BTreeMap<EdgeKind, BlockId>,
}

impl Node {
    fn new(block: BasicBlock, reason: CloneReason, s_start: Option<StackState>) -> Self {
        Node {
            block,
            reason,
            s_start,
            emulation: None,
            snapshots: Vec::new(),
            context: ReuseContext::default(),
            visits: 0,
            reemulations: 0,
            phi_members: 0,
            chosen: BTreeMap::new(),
        }
    }
}

type Taint = (BlockId, usize, U256);

/// One CFG recovery session. Owns the value table and all graph state.
#[derive(Debug)]
pub struct Recovery {
    config: Config,
    code_len: usize,
    originals: BTreeMap<usize, BasicBlock>,
    nodes: BTreeMap<BlockId, Node>,
    incoming: BTreeMap<BlockId, BTreeSet<(BlockId, EdgeKind)>>,
    edges: BTreeSet<Edge>,
    values: ValueTable,
    worklist: Vec<WorkItem>,
    diagnostics: Vec<Diagnostic>,
    seen: HashSet<Diagnostic>,
    emulations: usize,
}

impl Recovery {
    pub fn new(code: &[u8], config: Config) -> Result<Self, CfgError> {
        config.validate()?;
        if code.is_empty() {
            return Err(CfgError::Empty);
        }
        let dis = disassemble(code);
        let originals: BTreeMap<usize, BasicBlock> =
            identify_blocks(&dis.instructions).into_iter().map(|b| (b.start_offset, b)).collect();
        let mut session = Recovery {
            config,
            code_len: code.len(),
            originals,
            nodes: BTreeMap::new(),
            incoming: BTreeMap::new(),
            edges: BTreeSet::new(),
            values: ValueTable::new(),
            worklist: Vec::new(),
            diagnostics: Vec::new(),
            seen: HashSet::new(),
            emulations: 0,
        };
        for d in dis.diagnostics {
            session.diag(d);
        }
        let entry = session.create(0, CloneReason::Original, None)?;
        session.worklist.push(WorkItem { pred: None, current: entry, kind: EdgeKind::Jump });
        Ok(session)
    }

    fn sensitive(&self) -> bool {
        self.config.mode == Mode::ReuseSensitive
    }

    fn diag(&mut self, d: Diagnostic) {
        if self.seen.insert(d.clone()) {
            self.diagnostics.push(d);
        }
    }

    /// Drains the worklist.
    pub fn run(&mut self) -> Result<(), CfgError> {
        let cap = self.config.reemulation_cap;
        let backstop = self.config.total_block_budget.saturating_mul(cap + 2);
        let mut steps = 0usize;
        while let Some(item) = self.worklist.pop() {
            steps += 1;
            if steps > backstop {
                return Err(CfgError::StepBudget(backstop));
            }
            self.step(item)?;
        }
        Ok(())
    }

    fn clones(&self, offset: usize) -> Vec<BlockId> {
        self.nodes.range(BlockId::new(offset, 0)..=BlockId::new(offset, usize::MAX)).map(|(id, _)| *id).collect()
    }

    fn create(&mut self, offset: usize, reason: CloneReason, s_start: Option<StackState>) -> Result<BlockId, CfgError> {
        let index = self.clones(offset).len();
        if index >= self.config.clone_budget_per_offset {
            return Err(CfgError::CloneExplosion(offset));
        }
        if self.nodes.len() >= self.config.total_block_budget {
            return Err(CfgError::BlockBudget(self.config.total_block_budget));
        }
        let id = BlockId::new(offset, index);
        let block = self.originals[&offset].with_id(id);
        self.nodes.insert(id, Node::new(block, reason, s_start));
        Ok(id)
    }

    fn s_end(&self, id: BlockId) -> StackState {
        self.nodes[&id].emulation.as_ref().map(|e| e.s_end.clone()).unwrap_or_default()
    }

    fn is_end_offset(&self, offset: usize) -> bool {
        self.originals[&offset].is_end()
    }

    /// Whether `s_end` carries the candidate's reuse context.
    fn matches(&mut self, candidate: BlockId, s_end: &StackState) -> bool {
        let context: Vec<(usize, U256)> =
            self.nodes[&candidate].context.entries.iter().map(|(&i, &v)| (i, v)).collect();
        for (index, value) in context {
            let Some(id) = s_end.from_top(index) else { return false };
            match self.values.kind(id) {
                ValueKind::Const(c) if *c == value => {}
                ValueKind::Phi(_) => {
                    self.diag(Diagnostic::warning(
                        format!("pre-pushed operand at stack index {index} has several values"),
                        candidate.offset,
                    ));
                    return false;
                }
                _ => return false,
            }
        }
        true
    }

    /// Taints the entry-stack positions the jump operand `operand` of `block` derives from.
    pub fn update_reuse_context(&mut self, block: BlockId, operand: ValueId) {
        let node = &self.nodes[&block];
        let (Some(emu), Some(s_start)) = (&node.emulation, &node.s_start) else { return };
        let Some(succ) = emu.successors.iter().find(|s| s.operand == Some(operand)) else { return };
        if !matches!(succ.target, JumpTarget::Const(_)) {
            let at = node.block.instructions.last().map(|i| i.offset);
            self.diag(Diagnostic::warning("pre-pushed jump operand is not constant", at));
            return;
        }
        let seeds: Vec<Taint> = succ
            .operand_sources
            .iter()
            .filter_map(|&b| {
                let c = self.values.as_const(s_start.entries[b])?;
                Some((block, s_start.len() - 1 - b, c))
            })
            .collect();
        self.taint(seeds);
    }

    /// Shares tainted indices between the clones at `offset`.
    pub fn transfer_taint(&mut self, offset: usize) {
        let seeds = self.transfer_candidates(offset);
        self.taint(seeds);
    }

    fn transfer_candidates(&mut self, offset: usize) -> Vec<Taint> {
        let clones = self.clones(offset);
        let mut out = Vec::new();
        let mut skipped = Vec::new();
        for &src in &clones {
            for &dst in &clones {
                if src == dst {
                    continue;
                }
                let dst_node = &self.nodes[&dst];
                let Some(dst_start) = &dst_node.s_start else { continue };
                for (&index, &value) in &self.nodes[&src].context.entries {
                    let Some(id) = dst_start.from_top(index) else {
                        skipped.push(index);
                        continue;
                    };
                    let theirs = match dst_node.context.get(index) {
                        Some(v) => v,
                        None => match self.values.as_const(id) {
                            Some(c) => {
                                out.push((dst, index, c));
                                c
                            }
                            None => break,
                        },
                    };
                    if theirs != value {
                        break;
                    }
                }
            }
        }
        for index in skipped {
            self.diag(Diagnostic::info(format!("reuse context index {index} beyond a shallower clone"), offset));
        }
        out
    }

    /// Entries implied in `pred` by taint (`index`, `value`) on its successor.
    fn back_taints(&self, pred: BlockId, index: usize, value: U256) -> Vec<Taint> {
        let node = &self.nodes[&pred];
        let (Some(emu), Some(s_start)) = (&node.emulation, &node.s_start) else { return Vec::new() };
        let Some(id) = emu.s_end.from_top(index) else { return Vec::new() };
        if self.values.as_const(id) != Some(value) {
            return Vec::new();
        }
        let slot = emu.s_end.len() - 1 - index;
        emu.end_sources[slot]
            .iter()
            .filter_map(|&b| {
                let c = self.values.as_const(s_start.entries[b])?;
                Some((pred, s_start.len() - 1 - b, c))
            })
            .collect()
    }

    /// Adds taints, pushes them back into predecessors and across clones until nothing changes.
    fn taint(&mut self, seeds: Vec<Taint>) {
        let mut queue: VecDeque<Taint> = seeds.into();
        let mut dirty = BTreeSet::new();
        loop {
            while let Some((id, index, value)) = queue.pop_front() {
                let node = self.nodes.get_mut(&id).expect("tainted node exists");
                if node.context.entries.contains_key(&index) {
                    continue;
                }
                node.context.entries.insert(index, value);
                dirty.insert(id.offset);
                let preds: Vec<BlockId> = self.incoming.get(&id).into_iter().flatten().map(|(p, _)| *p).collect();
                for p in preds {
                    queue.extend(self.back_taints(p, index, value));
                }
            }
            let Some(offset) = dirty.pop_first() else { break };
            queue.extend(self.transfer_candidates(offset));
        }
    }

    /// Picks the clone at `target` whose reuse context matches `b_c`'s exit stack, cloning on mismatch.
    pub fn reuse_handler(&mut self, b_c: BlockId, target: usize) -> Result<BlockId, CfgError> {
        let s_end = self.s_end(b_c);
        let candidates = self.clones(target);
        if candidates.is_empty() {
            return self.create(target, CloneReason::Original, None);
        }
        for cand in candidates {
            if self.matches(cand, &s_end) {
                return Ok(cand);
            }
        }
        let id = self.create(target, CloneReason::Reuse, Some(s_end))?;
        self.transfer_taint(target);
        Ok(id)
    }

    /// Gives every halting block one node per predecessor.
    pub fn handle_end_block(&mut self, b_c: BlockId, end_offset: usize) -> Result<BlockId, CfgError> {
        let candidates = self.clones(end_offset);
        if candidates.is_empty() {
            return self.create(end_offset, CloneReason::Original, None);
        }
        let has_pred = |r: &Self, c: &BlockId, p: Option<BlockId>| {
            let inc = r.incoming.get(c);
            match p {
                Some(p) => inc.is_some_and(|s| s.iter().any(|(q, _)| *q == p)),
                None => inc.is_some_and(|s| !s.is_empty()),
            }
        };
        if let Some(c) = candidates.iter().find(|c| has_pred(self, c, Some(b_c))) {
            return Ok(*c);
        }
        if let Some(c) = candidates.iter().find(|c| !has_pred(self, c, None)) {
            return Ok(*c);
        }
        self.create(end_offset, CloneReason::EndBlock, None)
    }

    fn select(&mut self, b_c: BlockId, target: usize) -> Result<BlockId, CfgError> {
        if self.is_end_offset(target) {
            self.handle_end_block(b_c, target)
        } else {
            self.reuse_handler(b_c, target)
        }
    }

    fn add_edge(&mut self, from: BlockId, to: BlockId, kind: EdgeKind) {
        if !self.edges.insert(Edge { from, to, kind }) {
            return;
        }
        self.incoming.entry(to).or_default().insert((from, kind));
        if self.sensitive() {
            let context: Vec<(usize, U256)> = self.nodes[&to].context.entries.iter().map(|(&i, &v)| (i, v)).collect();
            let seeds = context.into_iter().flat_map(|(i, v)| self.back_taints(from, i, v)).collect();
            self.taint(seeds);
        }
    }

    fn remove_edge(&mut self, from: BlockId, to: BlockId, kind: EdgeKind) {
        self.edges.remove(&Edge { from, to, kind });
        if let Some(inc) = self.incoming.get_mut(&to) {
            inc.remove(&(from, kind));
        }
    }

    fn phi_members(&self, stack: &StackState) -> usize {
        stack
            .entries
            .iter()
            .filter(|&&v| matches!(self.values.kind(v), ValueKind::Phi(_)))
            .map(|&v| self.values.flatten(v).len())
            .sum()
    }

    fn connect(&mut self, from: BlockId, to: BlockId, kind: EdgeKind) {
        self.add_edge(from, to, kind);
        if self.sensitive() {
            self.nodes.get_mut(&from).unwrap().chosen.insert(kind, to);
        }
        self.worklist.push(WorkItem { pred: Some(from), current: to, kind });
    }

    fn unchoose(&mut self, from: BlockId, kind: EdgeKind) {
        if let Some(old) = self.nodes.get_mut(&from).unwrap().chosen.remove(&kind) {
            self.remove_edge(from, old, kind);
        }
    }

    fn step(&mut self, item: WorkItem) -> Result<(), CfgError> {
        let id = item.current;
        let pred_end = match item.pred {
            None => StackState::empty(),
            Some(p) => {
                if !self.edges.contains(&Edge { from: p, to: id, kind: item.kind }) {
                    return Ok(());
                }
                let s_end = self.s_end(p);
                if self.sensitive() && !self.is_end_offset(id.offset) && !self.matches(id, &s_end) {
                    self.unchoose(p, item.kind);
                    let s = self.reuse_handler(p, id.offset)?;
                    self.connect(p, s, item.kind);
                    return Ok(());
                }
                s_end
            }
        };

        let node = &self.nodes[&id];
        let merged = prepare_stack(&mut self.values, id, &pred_end, node.s_start.as_ref());
        for d in merged.diagnostics {
            self.diag(d);
        }
        let node = &self.nodes[&id];
        let first = node.visits == 0;
        let phi_members = self.phi_members(&merged.stack);
        if !first && !merged.changed && phi_members == node.phi_members {
            return Ok(());
        }
        let mut s_start = merged.stack;
        if !first {
            let reemulations = node.reemulations + 1;
            if reemulations > self.config.reemulation_cap {
                let old = node.s_start.clone().unwrap_or_default();
                let positions: Vec<usize> = (0..s_start.len())
                    .filter(|&b| {
                        old.from_top(s_start.len() - 1 - b) != Some(s_start.entries[b])
                            || matches!(self.values.kind(s_start.entries[b]), ValueKind::Phi(_))
                    })
                    .collect();
                widen(&mut self.values, &mut s_start, positions);
                self.diag(Diagnostic::info("re-emulation cap reached, widening entry stack", id.offset));
            }
            self.nodes.get_mut(&id).unwrap().reemulations = reemulations;
        }

        let emu = emulate_block(&self.nodes[&id].block, &s_start, &mut self.values);
        for d in &emu.diagnostics {
            self.diag(d.clone());
        }
        let snapshot = Snapshot { s_start: s_start.clone(), s_end: emu.s_end.clone(), visit_ordinal: self.emulations };
        self.emulations += 1;
        let successors = emu.successors.clone();
        let jump_at = emu.tac.last().map_or(id.offset, |l| l.offset);
        let node = self.nodes.get_mut(&id).unwrap();
        node.snapshots.push(snapshot);
        node.s_start = Some(s_start);
        node.emulation = Some(emu);
        node.visits += 1;
        node.phi_members = phi_members;

        if self.sensitive() {
            for succ in &successors {
                if succ.kind == EdgeKind::Jump && !succ.operand_sources.is_empty() {
                    if let (JumpTarget::Const(_), Some(op)) = (&succ.target, succ.operand) {
                        self.update_reuse_context(id, op);
                    }
                }
            }
        }

        for succ in successors.iter().rev() {
            let targets = match &succ.target {
                JumpTarget::Const(c) => vec![*c],
                JumpTarget::Phi(cs) if !self.sensitive() => cs.clone(),
                JumpTarget::Phi(cs) => {
                    self.diag(Diagnostic::warning(
                        format!("unresolved jump at offset {jump_at}: operand has {} possible values", cs.len()),
                        jump_at,
                    ));
                    self.unchoose(id, succ.kind);
                    continue;
                }
                JumpTarget::Unknown => {
                    self.diag(Diagnostic::warning(format!("unresolved jump at offset {jump_at}"), jump_at));
                    self.unchoose(id, succ.kind);
                    continue;
                }
            };
            for c in targets {
                let Some(offset) = self.valid_target(c, succ.kind) else {
                    self.diag(Diagnostic::warning(format!("invalid jump target {c:#x}"), jump_at));
                    if self.sensitive() {
                        self.unchoose(id, succ.kind);
                    }
                    continue;
                };
                let next = if !self.sensitive() {
                    match self.clones(offset).first() {
                        Some(&n) => n,
                        None => self.create(offset, CloneReason::Original, None)?,
                    }
                } else {
                    match self.kept(id, succ.kind, offset) {
                        Some(old) => old,
                        None => {
                            self.unchoose(id, succ.kind);
                            self.select(id, offset)?
                        }
                    }
                };
                self.connect(id, next, succ.kind);
            }
        }
        Ok(())
    }

    /// The previously selected successor, if it is still the right one after re-emulation.
    fn kept(&mut self, id: BlockId, kind: EdgeKind, offset: usize) -> Option<BlockId> {
        let old = *self.nodes[&id].chosen.get(&kind)?;
        if old.offset != offset {
            return None;
        }
        if self.is_end_offset(offset) {
            return Some(old);
        }
        let s_end = self.s_end(id);
        self.matches(old, &s_end).then_some(old)
    }

    fn valid_target(&self, c: U256, kind: EdgeKind) -> Option<usize> {
        if c >= U256::from(self.code_len) {
            return None;
        }
        let offset = c.to::<usize>();
        let block = self.originals.get(&offset)?;
        (kind == EdgeKind::FallThrough || block.starts_with_jumpdest()).then_some(offset)
    }

    /// Prunes nodes unreachable from the entry and marks never-entered blocks as data.
    pub fn finish(self) -> Cfg {
        let entry = BlockId::original(0);
        let mut adjacency: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
        for e in &self.edges {
            adjacency.entry(e.from).or_default().push(e.to);
        }
        let mut reachable = BTreeSet::from([entry]);
        let mut queue = vec![entry];
        while let Some(n) = queue.pop() {
            for &s in adjacency.get(&n).into_iter().flatten() {
                if reachable.insert(s) {
                    queue.push(s);
                }
            }
        }

        let entered: BTreeSet<usize> =
            self.nodes.iter().filter(|(_, n)| n.visits > 0).map(|(id, _)| id.offset).collect();
        let mut cfg = Cfg {
            mode: self.config.mode,
            entry,
            blocks: BTreeMap::new(),
            edges: self
                .edges
                .into_iter()
                .filter(|e| reachable.contains(&e.from) && reachable.contains(&e.to))
                .collect(),
            snapshots: BTreeMap::new(),
            reuse_contexts: BTreeMap::new(),
            clone_reasons: BTreeMap::new(),
            tac: BTreeMap::new(),
            values: self.values,
            diagnostics: self.diagnostics,
        };
        for (id, node) in self.nodes {
            if !reachable.contains(&id) {
                continue;
            }
            cfg.blocks.insert(id, node.block);
            cfg.snapshots.insert(id, node.snapshots);
            cfg.reuse_contexts.insert(id, node.context);
            cfg.clone_reasons.insert(id, node.reason);
            if let Some(emu) = node.emulation {
                cfg.tac.insert(id, emu.tac);
            }
        }
        for (offset, block) in self.originals {
            if cfg.clones_of(offset).next().is_none() {
                let mut block = block;
                block.is_data = !entered.contains(&offset);
                cfg.blocks.insert(block.id, block);
            }
        }
        cfg
    }
}
