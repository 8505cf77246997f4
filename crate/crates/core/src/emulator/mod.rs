//! Symbolic stack emulation in SSA form.

mod stack;
mod value;

pub use stack::{prepare_stack, widen, Merged, Snapshot, StackState, STACK_LIMIT};
pub use value::{trace_origin, Def, Unknown, Value, ValueId, ValueKind, ValueTable};

use std::fmt;

use ruint::aliases::U256;

use crate::bytecode::{BasicBlock, Terminator};
use crate::cfg::EdgeKind;
use crate::diag::Diagnostic;
use crate::opcode::Opcode;

/// Opcodes folded to constants when every operand is constant.
pub const FOLDED: [Opcode; 17] = [
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

fn bool_word(b: bool) -> U256 {
    if b {
        U256::from(1)
    } else {
        U256::ZERO
    }
}

/// Constant-folds `op` over operands given top of stack first.
pub fn fold(op: Opcode, args: &[U256]) -> Option<U256> {
    let a = *args.first()?;
    let b = args.get(1).copied().unwrap_or_default();
    Some(match op {
        Opcode::ADD => a.wrapping_add(b),
        Opcode::MUL => a.wrapping_mul(b),
        Opcode::SUB => a.wrapping_sub(b),
        Opcode::DIV => a.checked_div(b).unwrap_or_default(),
        Opcode::MOD => a.checked_rem(b).unwrap_or_default(),
        Opcode::EXP => a.wrapping_pow(b),
        Opcode::AND => a & b,
        Opcode::OR => a | b,
        Opcode::XOR => a ^ b,
        Opcode::NOT => !a,
        Opcode::SHL => shift(a).map_or(U256::ZERO, |s| b << s),
        Opcode::SHR => shift(a).map_or(U256::ZERO, |s| b >> s),
        Opcode::BYTE => shift(a).filter(|&i| i < 32).map_or(U256::ZERO, |i| U256::from(b.byte(31 - i))),
        Opcode::LT => bool_word(a < b),
        Opcode::GT => bool_word(a > b),
        Opcode::EQ => bool_word(a == b),
        Opcode::ISZERO => bool_word(a.is_zero()),
        _ => return None,
    })
}

fn shift(a: U256) -> Option<usize> {
    (a < U256::from(256)).then(|| a.to::<usize>())
}

/// Resolution of a jump operand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JumpTarget {
    Const(U256),
    /// A φ whose members are all constants.
    Phi(Vec<U256>),
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Successor {
    pub kind: EdgeKind,
    pub target: JumpTarget,
    /// The popped jump operand; `None` for fall-through.
    pub operand: Option<ValueId>,
    /// Entry-stack positions (bottom-indexed) the operand derives from.
    pub operand_sources: Vec<usize>,
}

/// One line of three-address code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TacLine {
    pub offset: usize,
    pub opcode: Opcode,
    pub args: Vec<ValueId>,
    pub result: Option<ValueId>,
    pub push_data: Option<U256>,
}

impl TacLine {
    pub fn render(&self, table: &ValueTable) -> String {
        let mut args: Vec<String> = self.args.iter().map(|&a| table.render(a)).collect();
        if let Some(p) = self.push_data {
            args.push(format!("{p:#x}"));
        }
        let call = format!("{}({})", self.opcode, args.join(", "));
        match self.result {
            Some(r) => format!("{r} = {call}"),
            None => call,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockEmulation {
    pub s_end: StackState,
    /// For each `s_end` slot, the entry-stack positions it derives from.
    pub end_sources: Vec<Vec<usize>>,
    pub successors: Vec<Successor>,
    pub tac: Vec<TacLine>,
    pub diagnostics: Vec<Diagnostic>,
}

impl BlockEmulation {
    pub fn successor_offsets(&self) -> Vec<Option<usize>> {
        self.successors
            .iter()
            .map(|s| match s.target {
                JumpTarget::Const(c) if c < U256::from(usize::MAX) => Some(c.to::<usize>()),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for JumpTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JumpTarget::Const(c) => write!(f, "{c:#x}"),
            JumpTarget::Phi(cs) => {
                let parts: Vec<String> = cs.iter().map(|c| format!("{c:#x}")).collect();
                write!(f, "phi{{{}}}", parts.join(", "))
            }
            JumpTarget::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Clone)]
struct Slot {
    id: ValueId,
    sources: Vec<usize>,
}

fn union(slots: &[Slot]) -> Vec<usize> {
    let mut out: Vec<usize> = slots.iter().flat_map(|s| s.sources.iter().copied()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Emulates one block from `s_start`, producing its exit stack, successors and TAC.
///
/// Stack underflow yields `Unknown(underflow)` operands; overflow past 1024
/// entries is reported and emulation continues.
pub fn emulate_block(block: &BasicBlock, s_start: &StackState, table: &mut ValueTable) -> BlockEmulation {
    let site = block.id;
    let mut stack: Vec<Slot> =
        s_start.entries.iter().enumerate().map(|(i, &id)| Slot { id, sources: vec![i] }).collect();
    let mut tac = Vec::with_capacity(block.instructions.len());
    let mut diagnostics = Vec::new();
    let mut successors = Vec::new();
    let mut overflowed = false;

    for (idx, ins) in block.instructions.iter().enumerate() {
        let op = ins.opcode;
        let underflow = |table: &mut ValueTable, diagnostics: &mut Vec<Diagnostic>, k: usize| {
            diagnostics.push(Diagnostic::warning(format!("stack underflow at {op}"), ins.offset));
            let id = table.at_site((site, idx * 64 + 1 + k), ValueKind::Unknown(Unknown::Underflow), None);
            Slot { id, sources: Vec::new() }
        };
        let pop = |stack: &mut Vec<Slot>, table: &mut ValueTable, diagnostics: &mut Vec<Diagnostic>, k: usize| {
            stack.pop().unwrap_or_else(|| underflow(table, diagnostics, k))
        };
        let needed = op.dup_depth().or(op.swap_depth().map(|n| n + 1)).unwrap_or(0);
        for k in stack.len()..needed {
            let s = underflow(table, &mut diagnostics, k);
            stack.insert(0, s);
        }

        if let Some(n) = op.dup_depth() {
            let copied = stack[stack.len() - n].clone();
            tac.push(TacLine { offset: ins.offset, opcode: op, args: vec![copied.id], result: None, push_data: None });
            stack.push(copied);
        } else if let Some(n) = op.swap_depth() {
            let top = stack.len() - 1;
            stack.swap(top, top - n);
            let args = vec![stack[top].id, stack[top - n].id];
            tac.push(TacLine { offset: ins.offset, opcode: op, args, result: None, push_data: None });
        } else if op.is_push() {
            let c = ins.push_data.unwrap_or_default();
            let def = Def { opcode: op, offset: ins.offset, args: Vec::new() };
            let id = table.at_site((site, idx * 64), ValueKind::Const(c), Some(def));
            tac.push(TacLine {
                offset: ins.offset,
                opcode: op,
                args: Vec::new(),
                result: Some(id),
                push_data: ins.push_data,
            });
            stack.push(Slot { id, sources: Vec::new() });
        } else {
            let operands: Vec<Slot> = (0..op.pops()).map(|k| pop(&mut stack, table, &mut diagnostics, k)).collect();
            let args: Vec<ValueId> = operands.iter().map(|s| s.id).collect();
            match op {
                Opcode::JUMP | Opcode::JUMPI => {
                    let target = resolve(table, args[0]);
                    successors.push(Successor {
                        kind: EdgeKind::Jump,
                        target,
                        operand: Some(args[0]),
                        operand_sources: operands[0].sources.clone(),
                    });
                }
                _ => {}
            }
            let result = if op.pushes() == 1 {
                let consts: Option<Vec<U256>> = args.iter().map(|&a| table.as_const(a)).collect();
                let folded = match op {
                    Opcode::PC => Some(U256::from(ins.offset)),
                    _ => consts.and_then(|cs| if FOLDED.contains(&op) { fold(op, &cs) } else { None }),
                };
                let kind = folded.map_or(ValueKind::Sym, ValueKind::Const);
                let def = Def { opcode: op, offset: ins.offset, args: args.clone() };
                let id = table.at_site((site, idx * 64), kind, Some(def));
                stack.push(Slot { id, sources: union(&operands) });
                Some(id)
            } else {
                None
            };
            tac.push(TacLine { offset: ins.offset, opcode: op, args, result, push_data: None });
        }
        if stack.len() > STACK_LIMIT && !overflowed {
            overflowed = true;
            diagnostics.push(Diagnostic::warning("stack overflow beyond 1024 entries", ins.offset));
        }
    }

    if matches!(block.terminator, Terminator::JumpI | Terminator::FallThrough) {
        if let Some(ft) = block.fallthrough {
            successors.push(Successor {
                kind: EdgeKind::FallThrough,
                target: JumpTarget::Const(U256::from(ft)),
                operand: None,
                operand_sources: Vec::new(),
            });
        }
    }

    BlockEmulation {
        s_end: StackState::new(stack.iter().map(|s| s.id).collect()),
        end_sources: stack.into_iter().map(|s| s.sources).collect(),
        successors,
        tac,
        diagnostics,
    }
}

fn resolve(table: &ValueTable, v: ValueId) -> JumpTarget {
    if let Some(c) = table.as_const(v) {
        return JumpTarget::Const(c);
    }
    match table.phi_constants(v) {
        Some(cs) => JumpTarget::Phi(cs),
        None => JumpTarget::Unknown,
    }
}

/// Renders TAC lines, one per instruction.
pub fn render_tac(lines: &[TacLine], table: &ValueTable) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&format!("{:04x}: {}\n", l.offset, l.render(table)));
    }
    s
}
