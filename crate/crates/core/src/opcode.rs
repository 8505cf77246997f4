//! EVM opcode table: mnemonics, stack effects and control-flow classes.

use std::fmt;

/// A single EVM opcode byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Opcode(pub u8);

#[derive(Clone, Copy, Debug)]
struct Info {
    name: &'static str,
    pops: u8,
    pushes: u8,
}

const fn op(name: &'static str, pops: u8, pushes: u8) -> Option<Info> {
    Some(Info { name, pops, pushes })
}

#[rustfmt::skip]
const TABLE: [Option<Info>; 256] = {
    let mut t: [Option<Info>; 256] = [None; 256];
    t[0x00] = op("STOP", 0, 0);
    t[0x01] = op("ADD", 2, 1);
    t[0x02] = op("MUL", 2, 1);
    t[0x03] = op("SUB", 2, 1);
    t[0x04] = op("DIV", 2, 1);
    t[0x05] = op("SDIV", 2, 1);
    t[0x06] = op("MOD", 2, 1);
    t[0x07] = op("SMOD", 2, 1);
    t[0x08] = op("ADDMOD", 3, 1);
    t[0x09] = op("MULMOD", 3, 1);
    t[0x0a] = op("EXP", 2, 1);
    t[0x0b] = op("SIGNEXTEND", 2, 1);
    t[0x10] = op("LT", 2, 1);
    t[0x11] = op("GT", 2, 1);
    t[0x12] = op("SLT", 2, 1);
    t[0x13] = op("SGT", 2, 1);
    t[0x14] = op("EQ", 2, 1);
    t[0x15] = op("ISZERO", 1, 1);
    t[0x16] = op("AND", 2, 1);
    t[0x17] = op("OR", 2, 1);
    t[0x18] = op("XOR", 2, 1);
    t[0x19] = op("NOT", 1, 1);
    t[0x1a] = op("BYTE", 2, 1);
    t[0x1b] = op("SHL", 2, 1);
    t[0x1c] = op("SHR", 2, 1);
    t[0x1d] = op("SAR", 2, 1);
    t[0x20] = op("SHA3", 2, 1);
    t[0x30] = op("ADDRESS", 0, 1);
    t[0x31] = op("BALANCE", 1, 1);
    t[0x32] = op("ORIGIN", 0, 1);
    t[0x33] = op("CALLER", 0, 1);
    t[0x34] = op("CALLVALUE", 0, 1);
    t[0x35] = op("CALLDATALOAD", 1, 1);
    t[0x36] = op("CALLDATASIZE", 0, 1);
    t[0x37] = op("CALLDATACOPY", 3, 0);
    t[0x38] = op("CODESIZE", 0, 1);
    t[0x39] = op("CODECOPY", 3, 0);
    t[0x3a] = op("GASPRICE", 0, 1);
    t[0x3b] = op("EXTCODESIZE", 1, 1);
    t[0x3c] = op("EXTCODECOPY", 4, 0);
    t[0x3d] = op("RETURNDATASIZE", 0, 1);
    t[0x3e] = op("RETURNDATACOPY", 3, 0);
    t[0x3f] = op("EXTCODEHASH", 1, 1);
    t[0x40] = op("BLOCKHASH", 1, 1);
    t[0x41] = op("COINBASE", 0, 1);
    t[0x42] = op("TIMESTAMP", 0, 1);
    t[0x43] = op("NUMBER", 0, 1);
    t[0x44] = op("PREVRANDAO", 0, 1);
    t[0x45] = op("GASLIMIT", 0, 1);
    t[0x46] = op("CHAINID", 0, 1);
    t[0x47] = op("SELFBALANCE", 0, 1);
    t[0x48] = op("BASEFEE", 0, 1);
    t[0x49] = op("BLOBHASH", 1, 1);
    t[0x4a] = op("BLOBBASEFEE", 0, 1);
    t[0x50] = op("POP", 1, 0);
    t[0x51] = op("MLOAD", 1, 1);
    t[0x52] = op("MSTORE", 2, 0);
    t[0x53] = op("MSTORE8", 2, 0);
    t[0x54] = op("SLOAD", 1, 1);
    t[0x55] = op("SSTORE", 2, 0);
    t[0x56] = op("JUMP", 1, 0);
    t[0x57] = op("JUMPI", 2, 0);
    t[0x58] = op("PC", 0, 1);
    t[0x59] = op("MSIZE", 0, 1);
    t[0x5a] = op("GAS", 0, 1);
    t[0x5b] = op("JUMPDEST", 0, 0);
    t[0x5c] = op("TLOAD", 1, 1);
    t[0x5d] = op("TSTORE", 2, 0);
    t[0x5e] = op("MCOPY", 3, 0);
    t[0x5f] = op("PUSH0", 0, 1);
    const PUSH: [&str; 32] = [
        "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8",
        "PUSH9", "PUSH10", "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16",
        "PUSH17", "PUSH18", "PUSH19", "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24",
        "PUSH25", "PUSH26", "PUSH27", "PUSH28", "PUSH29", "PUSH30", "PUSH31", "PUSH32",
    ];
    const DUP: [&str; 16] = [
        "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8",
        "DUP9", "DUP10", "DUP11", "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
    ];
    const SWAP: [&str; 16] = [
        "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8",
        "SWAP9", "SWAP10", "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
    ];
    let mut i = 0;
    while i < 32 {
        t[0x60 + i] = op(PUSH[i], 0, 1);
        i += 1;
    }
    let mut i = 0;
    while i < 16 {
        t[0x80 + i] = op(DUP[i], i as u8 + 1, i as u8 + 2);
        t[0x90 + i] = op(SWAP[i], i as u8 + 2, i as u8 + 2);
        i += 1;
    }
    t[0xa0] = op("LOG0", 2, 0);
    t[0xa1] = op("LOG1", 3, 0);
    t[0xa2] = op("LOG2", 4, 0);
    t[0xa3] = op("LOG3", 5, 0);
    t[0xa4] = op("LOG4", 6, 0);
    t[0xf0] = op("CREATE", 3, 1);
    t[0xf1] = op("CALL", 7, 1);
    t[0xf2] = op("CALLCODE", 7, 1);
    t[0xf3] = op("RETURN", 2, 0);
    t[0xf4] = op("DELEGATECALL", 6, 1);
    t[0xf5] = op("CREATE2", 4, 1);
    t[0xfa] = op("STATICCALL", 6, 1);
    t[0xfd] = op("REVERT", 2, 0);
    t[0xfe] = op("INVALID", 0, 0);
    t[0xff] = op("SELFDESTRUCT", 1, 0);
    t
};

impl Opcode {
    pub const STOP: Opcode = Opcode(0x00);
    pub const ADD: Opcode = Opcode(0x01);
    pub const MUL: Opcode = Opcode(0x02);
    pub const SUB: Opcode = Opcode(0x03);
    pub const DIV: Opcode = Opcode(0x04);
    pub const SDIV: Opcode = Opcode(0x05);
    pub const MOD: Opcode = Opcode(0x06);
    pub const SMOD: Opcode = Opcode(0x07);
    pub const EXP: Opcode = Opcode(0x0a);
    pub const LT: Opcode = Opcode(0x10);
    pub const GT: Opcode = Opcode(0x11);
    pub const SLT: Opcode = Opcode(0x12);
    pub const SGT: Opcode = Opcode(0x13);
    pub const EQ: Opcode = Opcode(0x14);
    pub const ISZERO: Opcode = Opcode(0x15);
    pub const AND: Opcode = Opcode(0x16);
    pub const OR: Opcode = Opcode(0x17);
    pub const XOR: Opcode = Opcode(0x18);
    pub const NOT: Opcode = Opcode(0x19);
    pub const BYTE: Opcode = Opcode(0x1a);
    pub const SHL: Opcode = Opcode(0x1b);
    pub const SHR: Opcode = Opcode(0x1c);
    pub const SAR: Opcode = Opcode(0x1d);
    pub const SHA3: Opcode = Opcode(0x20);
    pub const ORIGIN: Opcode = Opcode(0x32);
    pub const CALLER: Opcode = Opcode(0x33);
    pub const CALLVALUE: Opcode = Opcode(0x34);
    pub const CALLDATALOAD: Opcode = Opcode(0x35);
    pub const POP: Opcode = Opcode(0x50);
    pub const MLOAD: Opcode = Opcode(0x51);
    pub const MSTORE: Opcode = Opcode(0x52);
    pub const SLOAD: Opcode = Opcode(0x54);
    pub const SSTORE: Opcode = Opcode(0x55);
    pub const JUMP: Opcode = Opcode(0x56);
    pub const JUMPI: Opcode = Opcode(0x57);
    pub const PC: Opcode = Opcode(0x58);
    pub const JUMPDEST: Opcode = Opcode(0x5b);
    pub const PUSH0: Opcode = Opcode(0x5f);
    pub const PUSH1: Opcode = Opcode(0x60);
    pub const PUSH2: Opcode = Opcode(0x61);
    pub const PUSH20: Opcode = Opcode(0x73);
    pub const PUSH32: Opcode = Opcode(0x7f);
    pub const DUP1: Opcode = Opcode(0x80);
    pub const SWAP1: Opcode = Opcode(0x90);
    pub const LOG0: Opcode = Opcode(0xa0);
    pub const CALL: Opcode = Opcode(0xf1);
    pub const CALLCODE: Opcode = Opcode(0xf2);
    pub const RETURN: Opcode = Opcode(0xf3);
    pub const DELEGATECALL: Opcode = Opcode(0xf4);
    pub const STATICCALL: Opcode = Opcode(0xfa);
    pub const REVERT: Opcode = Opcode(0xfd);
    pub const INVALID: Opcode = Opcode(0xfe);
    pub const SELFDESTRUCT: Opcode = Opcode(0xff);

    /// `PUSHn` with `n` payload bytes (`n` in 1..=32).
    pub fn push(n: usize) -> Opcode {
        assert!((1..=32).contains(&n), "PUSH width out of range: {n}");
        Opcode(0x5f + n as u8)
    }

    /// `DUPn`, `n` in 1..=16.
    pub fn dup(n: usize) -> Opcode {
        assert!((1..=16).contains(&n), "DUP depth out of range: {n}");
        Opcode(0x7f + n as u8)
    }

    /// `SWAPn`, `n` in 1..=16.
    pub fn swap(n: usize) -> Opcode {
        assert!((1..=16).contains(&n), "SWAP depth out of range: {n}");
        Opcode(0x8f + n as u8)
    }

    /// Whether the byte is assigned in the opcode table.
    pub fn is_defined(self) -> bool {
        TABLE[self.0 as usize].is_some()
    }

    /// Mnemonic; unassigned bytes print as `INVALID_0x..`.
    pub fn name(self) -> std::borrow::Cow<'static, str> {
        match TABLE[self.0 as usize] {
            Some(info) => info.name.into(),
            None => format!("INVALID_0x{:02x}", self.0).into(),
        }
    }

    /// Number of payload bytes following the opcode (0 for everything but PUSH1..PUSH32).
    pub fn push_width(self) -> usize {
        if (0x60..=0x7f).contains(&self.0) {
            (self.0 - 0x5f) as usize
        } else {
            0
        }
    }

    pub fn is_push(self) -> bool {
        (0x5f..=0x7f).contains(&self.0)
    }

    /// Stack items consumed. Unassigned opcodes halt and consume nothing.
    pub fn pops(self) -> usize {
        TABLE[self.0 as usize].map_or(0, |i| i.pops as usize)
    }

    /// Stack items produced.
    pub fn pushes(self) -> usize {
        TABLE[self.0 as usize].map_or(0, |i| i.pushes as usize)
    }

    /// For `DUPn` returns `n`.
    pub fn dup_depth(self) -> Option<usize> {
        (0x80..=0x8f).contains(&self.0).then(|| (self.0 - 0x7f) as usize)
    }

    /// For `SWAPn` returns `n`.
    pub fn swap_depth(self) -> Option<usize> {
        (0x90..=0x9f).contains(&self.0).then(|| (self.0 - 0x8f) as usize)
    }

    /// Halting opcodes: STOP, RETURN, REVERT, SELFDESTRUCT, INVALID and any unassigned byte.
    pub fn halts(self) -> bool {
        matches!(self, Opcode::STOP | Opcode::RETURN | Opcode::REVERT | Opcode::SELFDESTRUCT | Opcode::INVALID)
            || !self.is_defined()
    }

    /// Opcodes that end a basic block.
    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::JUMP | Opcode::JUMPI) || self.halts()
    }

    /// CALL-family opcodes able to re-enter with state writes.
    pub fn is_reentrant_call(self) -> bool {
        matches!(self, Opcode::CALL | Opcode::CALLCODE | Opcode::DELEGATECALL)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
