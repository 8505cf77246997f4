use std::fmt;

use crate::bytecode::BlockId;
use crate::diag::Diagnostic;

use super::value::{Unknown, ValueId, ValueKind, ValueTable};

pub const STACK_LIMIT: usize = 1024;

/// Emulated stack; index 0 is the bottom.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StackState {
    pub entries: Vec<ValueId>,
}

impl StackState {
    pub fn new(entries: Vec<ValueId>) -> Self {
        StackState { entries }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry `depth` positions below the top (0 = top).
    pub fn from_top(&self, depth: usize) -> Option<ValueId> {
        self.entries.len().checked_sub(depth + 1).map(|i| self.entries[i])
    }

    pub fn top_to_bottom(&self, bottom_index: usize) -> usize {
        self.entries.len() - 1 - bottom_index
    }
}

impl fmt::Display for StackState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

/// Stack states around one emulation of a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub s_start: StackState,
    pub s_end: StackState,
    pub visit_ordinal: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Merged {
    pub stack: StackState,
    pub changed: bool,
    pub diagnostics: Vec<Diagnostic>,
}

/// Merges a predecessor's exit stack into a block's entry stack.
///
/// Positions that disagree become the φ owned by (`owner`, position), which only
/// ever gains members. `changed` reports any replaced entry or grown φ.
pub fn prepare_stack(
    table: &mut ValueTable,
    owner: BlockId,
    pred_s_end: &StackState,
    existing: Option<&StackState>,
) -> Merged {
    let Some(existing) = existing else {
        return Merged { stack: pred_s_end.clone(), changed: true, diagnostics: Vec::new() };
    };
    let mut diagnostics = Vec::new();
    let mut changed = false;
    let depth = existing.len().min(pred_s_end.len());
    if existing.len() != pred_s_end.len() {
        diagnostics.push(Diagnostic::warning(
            format!("irregular stack depth at join ({} vs {})", existing.len(), pred_s_end.len()),
            owner.offset,
        ));
        changed |= existing.len() != depth;
    }
    let old = &existing.entries[existing.len() - depth..];
    let new = &pred_s_end.entries[pred_s_end.len() - depth..];
    let mut out = Vec::with_capacity(depth);
    for (pos, (&e, &v)) in old.iter().zip(new).enumerate() {
        if table.same(e, v) || matches!(table.kind(e), ValueKind::Unknown(_)) {
            out.push(e);
            continue;
        }
        if matches!(table.kind(v), ValueKind::Unknown(_)) {
            out.push(v);
            changed = true;
            continue;
        }
        let incoming = table.flatten(v);
        if table.owned_phi(owner, pos) == Some(e) {
            changed |= table.extend_phi(e, &incoming);
            out.push(e);
            continue;
        }
        let mut alts = table.flatten(e);
        alts.extend(incoming);
        let phi = table.new_phi(owner, pos, &alts);
        changed |= phi != e;
        out.push(phi);
    }
    Merged { stack: StackState::new(out), changed, diagnostics }
}

/// Replaces the given positions with [`Unknown::Widened`].
pub fn widen(table: &mut ValueTable, stack: &mut StackState, positions: impl IntoIterator<Item = usize>) {
    for pos in positions {
        if let Some(slot) = stack.entries.get_mut(pos) {
            if !matches!(table.kind(*slot), ValueKind::Unknown(_)) {
                *slot = table.fresh(ValueKind::Unknown(Unknown::Widened), None);
            }
        }
    }
}
