//! Small hand-written programs with known graph shapes.

use std::collections::BTreeMap;

use crate::opcode::Opcode;

use super::asm::Asm;

#[derive(Clone, Debug)]
pub struct Fixture {
    pub bytecode: Vec<u8>,
    pub labels: BTreeMap<String, usize>,
}

impl Fixture {
    fn from_asm(asm: &Asm) -> Self {
        Fixture { bytecode: asm.build().expect("fixture labels resolve"), labels: asm.labels().clone() }
    }

    /// Offset of a label; panics on unknown names.
    pub fn at(&self, label: &str) -> usize {
        self.labels[label]
    }
}

/// A helper `s` adds 2 to `x` and is called from two places, each returning
/// to a different continuation.
///
/// ```text
/// l1: x = calldata; if x >= 1 goto l3
/// l2: call s, return to l3
/// l3: if x <= 5 goto end
/// l4: call s, return to end
/// ```
///
/// With reuse handled the graph has four entry-to-exit paths and no cycle. A
/// graph merging both calls of `s` contains the cycle l3, l4, s, l3.
pub fn two_call_helper() -> Fixture {
    let mut a = Asm::new();
    a.mark("l1")
        .push(0u64)
        .op(Opcode::CALLDATALOAD)
        .push(1u64)
        .op(Opcode::dup(2))
        .op(Opcode::LT)
        .op(Opcode::ISZERO)
        .push_label("l3")
        .op(Opcode::JUMPI);
    a.mark("l2").push_label("l3").push_label("s").op(Opcode::JUMP);
    a.label("s").op(Opcode::swap(1)).push(2u64).op(Opcode::ADD).op(Opcode::swap(1)).op(Opcode::JUMP);
    a.label("l3").push(5u64).op(Opcode::dup(2)).op(Opcode::GT).op(Opcode::ISZERO).push_label("end").op(Opcode::JUMPI);
    a.mark("l4").push_label("end").push_label("s").op(Opcode::JUMP);
    a.label("end").op(Opcode::STOP);
    Fixture::from_asm(&a)
}

/// A block `x` returns to an address one slot below its argument. Block `a`
/// calls it returning to `c`. Both arms of the branch in `c` (`e` and `b`)
/// call it again returning to `d`, pushing an extra argument so the stack at
/// the second entry is deeper than at the first.
///
/// A correct graph holds two copies of `x`: one reached from `a` that goes to
/// `c`, and one shared by `e` and `b` that goes to `d`.
pub fn nested_return() -> Fixture {
    let mut a = Asm::new();
    a.mark("a").push(0x42u64).push_label("c").push(7u64).push_label("x").op(Opcode::JUMP);
    a.label("x").push(2u64).op(Opcode::ADD).op(Opcode::swap(1)).op(Opcode::JUMP);
    a.label("c").push(1u64).op(Opcode::CALLDATALOAD).push_label("b").op(Opcode::JUMPI);
    a.mark("e").push_label("d").push(9u64).push_label("x").op(Opcode::JUMP);
    a.label("b").push_label("d").push(11u64).push_label("x").op(Opcode::JUMP);
    a.label("d").op(Opcode::STOP);
    Fixture::from_asm(&a)
}
