//! SSA values produced by stack emulation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ruint::aliases::U256;

use crate::bytecode::BlockId;
use crate::opcode::Opcode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueId(pub u32);

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Why a value could not be modelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unknown {
    Underflow,
    Widened,
}

impl Unknown {
    pub fn as_str(self) -> &'static str {
        match self {
            Unknown::Underflow => "underflow",
            Unknown::Widened => "widened",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueKind {
    /// A 256-bit constant, either pushed literally or folded from constant operands.
    Const(U256),
    /// Result of an instruction that is not folded; operands live in [`Value::def`].
    Sym,
    /// Alternatives merged at a join, positional per stack depth.
    Phi(BTreeSet<ValueId>),
    Unknown(Unknown),
}

/// The instruction that defined a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Def {
    pub opcode: Opcode,
    pub offset: usize,
    /// Operands, top of stack first.
    pub args: Vec<ValueId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Value {
    pub kind: ValueKind,
    pub def: Option<Def>,
}

impl Value {
    pub fn as_const(&self) -> Option<U256> {
        match self.kind {
            ValueKind::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn mnemonic(&self) -> Option<Opcode> {
        self.def.as_ref().map(|d| d.opcode)
    }
}

/// Append-only arena of values owned by one recovery session.
///
/// Values defined at the same instruction site with identical operands are
/// reused across re-emulations, and each (block, stack position) owns at most
/// one φ whose member set only grows.
#[derive(Clone, Debug, Default)]
pub struct ValueTable {
    values: Vec<Value>,
    memo: HashMap<(BlockId, usize), ValueId>,
    phis: HashMap<(BlockId, usize), ValueId>,
}

impl ValueTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ValueId) -> &Value {
        &self.values[id.0 as usize]
    }

    pub fn kind(&self, id: ValueId) -> &ValueKind {
        &self.values[id.0 as usize].kind
    }

    pub fn as_const(&self, id: ValueId) -> Option<U256> {
        self.get(id).as_const()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ValueId, &Value)> {
        self.values.iter().enumerate().map(|(i, v)| (ValueId(i as u32), v))
    }

    /// Creates a fresh value with no site memoization.
    pub fn fresh(&mut self, kind: ValueKind, def: Option<Def>) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        self.values.push(Value { kind, def });
        id
    }

    pub fn constant(&mut self, c: U256) -> ValueId {
        self.fresh(ValueKind::Const(c), None)
    }

    /// Returns the value previously defined at `site` if it is identical, else a fresh one.
    pub fn at_site(&mut self, site: (BlockId, usize), kind: ValueKind, def: Option<Def>) -> ValueId {
        if let Some(&id) = self.memo.get(&site) {
            let v = &self.values[id.0 as usize];
            if v.kind == kind && v.def == def {
                return id;
            }
        }
        let id = self.fresh(kind, def);
        self.memo.insert(site, id);
        id
    }

    /// Members of `id` if it is a φ, else `id` itself.
    pub fn flatten(&self, id: ValueId) -> Vec<ValueId> {
        match self.kind(id) {
            ValueKind::Phi(members) => members.iter().copied().collect(),
            _ => vec![id],
        }
    }

    /// Value equality as used by stack merging: same id or equal constants.
    pub fn same(&self, a: ValueId, b: ValueId) -> bool {
        a == b || matches!((self.as_const(a), self.as_const(b)), (Some(x), Some(y)) if x == y)
    }

    pub(crate) fn owned_phi(&self, owner: BlockId, pos: usize) -> Option<ValueId> {
        self.phis.get(&(owner, pos)).copied()
    }

    /// Adds `incoming` (flattened) to `phi`; returns whether the set grew.
    pub(crate) fn extend_phi(&mut self, phi: ValueId, incoming: &[ValueId]) -> bool {
        let mut to_add = Vec::new();
        if let ValueKind::Phi(members) = self.kind(phi) {
            for &m in incoming {
                if m == phi || members.contains(&m) || to_add.contains(&m) {
                    continue;
                }
                if let Some(c) = self.as_const(m) {
                    let dup = members.iter().chain(&to_add).any(|&x| self.as_const(x) == Some(c));
                    if dup {
                        continue;
                    }
                }
                to_add.push(m);
            }
        }
        if to_add.is_empty() {
            return false;
        }
        if let ValueKind::Phi(members) = &mut self.values[phi.0 as usize].kind {
            members.extend(to_add);
        }
        true
    }

    /// Creates the φ owned by (`owner`, `pos`) from the given alternatives.
    pub(crate) fn new_phi(&mut self, owner: BlockId, pos: usize, alternatives: &[ValueId]) -> ValueId {
        let id = match self.phis.get(&(owner, pos)) {
            Some(&id) => {
                self.values[id.0 as usize].kind = ValueKind::Phi(BTreeSet::new());
                id
            }
            None => {
                let id = self.fresh(ValueKind::Phi(BTreeSet::new()), None);
                self.phis.insert((owner, pos), id);
                id
            }
        };
        self.extend_phi(id, alternatives);
        id
    }

    /// Constant members of a φ whose members are all constant.
    pub fn phi_constants(&self, id: ValueId) -> Option<Vec<U256>> {
        let ValueKind::Phi(members) = self.kind(id) else { return None };
        let mut out = Vec::with_capacity(members.len());
        for &m in members {
            out.push(self.as_const(m)?);
        }
        out.sort();
        out.dedup();
        Some(out)
    }

    /// Renders an operand: constants as `0x..`, everything else as `vN`.
    pub fn render(&self, id: ValueId) -> String {
        match self.as_const(id) {
            Some(c) => format!("{c:#x}"),
            None => id.to_string(),
        }
    }
}

/// All values on the def-use chain of `v`, stopping at pushed constants,
/// environment reads and unknowns. φ values expand to every member; folded
/// constants expand to the operands they were computed from.
pub fn trace_origin(v: ValueId, table: &ValueTable) -> BTreeSet<ValueId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![v];
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        let value = table.get(id);
        match &value.kind {
            ValueKind::Phi(members) => stack.extend(members.iter().copied()),
            ValueKind::Unknown(_) => {}
            ValueKind::Const(_) | ValueKind::Sym => {
                if let Some(def) = &value.def {
                    stack.extend(def.args.iter().copied());
                }
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(t: &mut ValueTable, op: Opcode, args: Vec<ValueId>) -> ValueId {
        t.fresh(ValueKind::Sym, Some(Def { opcode: op, offset: 0, args }))
    }

    #[test]
    fn const_is_its_own_origin() {
        let mut t = ValueTable::new();
        let c = t.constant(U256::from(0x10));
        assert_eq!(trace_origin(c, &t), BTreeSet::from([c]));
    }

    #[test]
    fn and_traces_both_operands() {
        let mut t = ValueTable::new();
        let mask = t.constant(U256::from(0xffff));
        let b = sym(&mut t, Opcode::CALLDATALOAD, vec![]);
        let v = sym(&mut t, Opcode::AND, vec![mask, b]);
        assert_eq!(trace_origin(v, &t), BTreeSet::from([v, mask, b]));
    }

    /// Hand-built five-node graph: v = φ{a, b}, a = ADD(c, d). The expected
    /// set comes from walking every edge of that graph by hand.
    #[test]
    fn phi_expands_members() {
        let mut t = ValueTable::new();
        let c = t.constant(U256::from(1));
        let d = sym(&mut t, Opcode::CALLER, vec![]);
        let a = sym(&mut t, Opcode::ADD, vec![c, d]);
        let b = sym(&mut t, Opcode::CALLVALUE, vec![]);
        let v = t.new_phi(BlockId::original(0), 0, &[a, b]);
        assert_eq!(trace_origin(v, &t), BTreeSet::from([v, a, b, c, d]));
    }

    #[test]
    fn site_memo_reuses_identical_definitions() {
        let mut t = ValueTable::new();
        let site = (BlockId::original(4), 2);
        let x = t.at_site(site, ValueKind::Const(U256::from(7)), None);
        let y = t.at_site(site, ValueKind::Const(U256::from(7)), None);
        let z = t.at_site(site, ValueKind::Const(U256::from(8)), None);
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn phi_dedups_equal_constants() {
        let mut t = ValueTable::new();
        let a = t.constant(U256::from(5));
        let b = t.constant(U256::from(7));
        let a2 = t.constant(U256::from(5));
        let p = t.new_phi(BlockId::original(0), 0, &[a, b]);
        assert!(!t.extend_phi(p, &[a2]));
        assert_eq!(t.phi_constants(p), Some(vec![U256::from(5), U256::from(7)]));
    }
}
