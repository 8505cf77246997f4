//! Linear-sweep disassembly and basic-block partitioning.
//!
//! Every byte of the input is kept: PUSH payloads are consumed as data, unassigned
//! opcodes decode as one-byte invalid instructions, and trailing metadata ends up in
//! blocks that CFG recovery later flags as data when it never reaches them.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use ruint::aliases::U256;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::opcode::Opcode;

/// A decoded instruction at a byte offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub offset: usize,
    pub opcode: Opcode,
    /// Big-endian payload of PUSH1..PUSH32, zero-padded when the code ends early.
    pub push_data: Option<U256>,
    /// Bytes consumed from the input. Equals `1 + push width` unless the payload was truncated.
    pub length: usize,
}

impl Instruction {
    pub fn next_offset(&self) -> usize {
        self.offset + self.length
    }

    pub fn is_truncated(&self) -> bool {
        self.length < 1 + self.opcode.push_width()
    }

    /// Appends the bytes this instruction was decoded from.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.opcode.0);
        if let Some(data) = self.push_data {
            let width = self.opcode.push_width();
            let be = data.to_be_bytes::<32>();
            out.extend_from_slice(&be[32 - width..32 - width + (self.length - 1)]);
        }
    }

    /// Payload rendered with its full source width, e.g. `0x0001` for PUSH2 1.
    pub fn payload_hex(&self) -> Option<String> {
        let data = self.push_data?;
        let width = self.opcode.push_width();
        let be = data.to_be_bytes::<32>();
        Some(format!("0x{}", hex::encode(&be[32 - width..])))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.payload_hex() {
            Some(p) => write!(f, "{} {}", self.opcode, p),
            None => write!(f, "{}", self.opcode),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Disassembly {
    pub instructions: Vec<Instruction>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Linear sweep from offset 0. PUSH payloads are skipped, never decoded as opcodes.
pub fn disassemble(code: &[u8]) -> Disassembly {
    let mut out = Disassembly { instructions: Vec::with_capacity(code.len()), diagnostics: Vec::new() };
    let mut pc = 0;
    while pc < code.len() {
        let opcode = Opcode(code[pc]);
        let width = opcode.push_width();
        let (push_data, length) = if width == 0 {
            (None, 1)
        } else {
            let avail = (code.len() - pc - 1).min(width);
            let mut buf = [0u8; 32];
            buf[32 - width..32 - width + avail].copy_from_slice(&code[pc + 1..pc + 1 + avail]);
            if avail < width {
                out.diagnostics.push(Diagnostic::warning(
                    format!("truncated {} payload: {avail} of {width} bytes present, zero-padded", opcode),
                    pc,
                ));
            }
            (Some(U256::from_be_bytes(buf)), 1 + avail)
        };
        out.instructions.push(Instruction { offset: pc, opcode, push_data, length });
        pc += length;
    }
    out
}

/// Re-serializes an instruction stream; inverse of [`disassemble`].
pub fn assemble(instructions: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::with_capacity(instructions.len() * 2);
    for ins in instructions {
        ins.encode_into(&mut out);
    }
    out
}

/// `offset: MNEMONIC [0xpayload]` per line, offsets in lowercase hex.
pub fn listing(instructions: &[Instruction]) -> String {
    let mut s = String::new();
    for ins in instructions {
        let _ = writeln!(s, "{:04x}: {}", ins.offset, ins);
    }
    s
}

/// How control leaves a basic block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Terminator {
    Jump,
    JumpI,
    Stop,
    Return,
    Revert,
    Invalid,
    SelfDestruct,
    FallThrough,
}

impl Terminator {
    fn of(op: Opcode) -> Option<Terminator> {
        Some(match op {
            Opcode::JUMP => Terminator::Jump,
            Opcode::JUMPI => Terminator::JumpI,
            Opcode::STOP => Terminator::Stop,
            Opcode::RETURN => Terminator::Return,
            Opcode::REVERT => Terminator::Revert,
            Opcode::SELFDESTRUCT => Terminator::SelfDestruct,
            op if op.halts() => Terminator::Invalid,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Terminator::Jump => "jump",
            Terminator::JumpI => "jumpi",
            Terminator::Stop => "stop",
            Terminator::Return => "return",
            Terminator::Revert => "revert",
            Terminator::Invalid => "invalid",
            Terminator::SelfDestruct => "selfdestruct",
            Terminator::FallThrough => "fallthrough",
        }
    }

    /// Ends the transaction.
    pub fn halts(self) -> bool {
        matches!(
            self,
            Terminator::Stop | Terminator::Return | Terminator::Revert | Terminator::Invalid | Terminator::SelfDestruct
        )
    }
}

/// A CFG node identity: block start offset plus clone index (0 = original).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub offset: usize,
    pub clone: usize,
}

impl BlockId {
    pub const fn new(offset: usize, clone: usize) -> Self {
        BlockId { offset, clone }
    }

    pub const fn original(offset: usize) -> Self {
        BlockId { offset, clone: 0 }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}_{}", self.offset, self.clone)
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed block id {0:?}, expected 0x<hex offset>_<clone index>")]
pub struct ParseBlockIdError(String);

impl FromStr for BlockId {
    type Err = ParseBlockIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseBlockIdError(s.to_string());
        let rest = s.strip_prefix("0x").ok_or_else(err)?;
        let (off, clone) = rest.split_once('_').ok_or_else(err)?;
        Ok(BlockId {
            offset: usize::from_str_radix(off, 16).map_err(|_| err())?,
            clone: clone.parse().map_err(|_| err())?,
        })
    }
}

/// A straight-line instruction sequence.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub id: BlockId,
    pub start_offset: usize,
    pub instructions: Arc<[Instruction]>,
    pub terminator: Terminator,
    /// Offset control reaches when the block falls through: set for JUMPI and
    /// FallThrough blocks that are followed by more code.
    pub fallthrough: Option<usize>,
    /// Never entered during CFG recovery.
    pub is_data: bool,
}

impl BasicBlock {
    pub fn end_offset(&self) -> usize {
        self.instructions.last().map_or(self.start_offset, Instruction::next_offset)
    }

    pub fn starts_with_jumpdest(&self) -> bool {
        self.instructions.first().is_some_and(|i| i.opcode == Opcode::JUMPDEST)
    }

    /// Blocks that end the transaction, including the final block running off the code end.
    pub fn is_end(&self) -> bool {
        self.terminator.halts() || (self.terminator == Terminator::FallThrough && self.fallthrough.is_none())
    }

    /// Same code under a different CFG identity.
    pub fn with_id(&self, id: BlockId) -> BasicBlock {
        BasicBlock { id, ..self.clone() }
    }
}

/// Splits before every JUMPDEST and after every terminator.
pub fn identify_blocks(instructions: &[Instruction]) -> Vec<BasicBlock> {
    let code_len = instructions.last().map_or(0, Instruction::next_offset);
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < instructions.len() {
        let mut end = start;
        let mut terminator = Terminator::FallThrough;
        loop {
            let ins = &instructions[end];
            end += 1;
            if let Some(t) = Terminator::of(ins.opcode) {
                terminator = t;
                break;
            }
            if end == instructions.len() || instructions[end].opcode == Opcode::JUMPDEST {
                break;
            }
        }
        let slice = &instructions[start..end];
        let next = slice.last().unwrap().next_offset();
        let fallthrough = match terminator {
            Terminator::JumpI | Terminator::FallThrough if next < code_len => Some(next),
            _ => None,
        };
        let offset = slice[0].offset;
        blocks.push(BasicBlock {
            id: BlockId::original(offset),
            start_offset: offset,
            instructions: slice.into(),
            terminator,
            fallthrough,
            is_data: false,
        });
        start = end;
    }
    blocks
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HexError {
    #[error("empty bytecode")]
    Empty,
    #[error("malformed hex: {0}")]
    Malformed(String),
}

/// Parses hex text: optional `0x` prefix, case-insensitive, whitespace ignored.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, HexError> {
    let cleaned: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let body = cleaned.strip_prefix("0x").or_else(|| cleaned.strip_prefix("0X")).unwrap_or(&cleaned);
    if body.is_empty() {
        return Err(HexError::Empty);
    }
    hex::decode(body).map_err(|e| HexError::Malformed(e.to_string()))
}

/// True when every byte is a hex digit, `x`/`X` or whitespace.
pub fn looks_like_hex(bytes: &[u8]) -> bool {
    !bytes.is_empty()
        && bytes.iter().all(|b| b.is_ascii_hexdigit() || matches!(b, b'x' | b'X') || b.is_ascii_whitespace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops(code: &[u8]) -> Vec<(usize, String)> {
        disassemble(code).instructions.iter().map(|i| (i.offset, i.to_string())).collect()
    }

    #[test]
    fn single_push() {
        assert_eq!(ops(&[0x60, 0x01]), vec![(0, "PUSH1 0x01".to_string())]);
    }

    #[test]
    fn push_payload_is_not_decoded() {
        assert_eq!(ops(&[0x60, 0x56, 0x5b]), vec![(0, "PUSH1 0x56".into()), (2, "JUMPDEST".into())]);
    }

    #[test]
    fn truncated_push_is_padded_and_flagged() {
        let d = disassemble(&[0x00, 0x62, 0xab]);
        assert_eq!(d.instructions.len(), 2);
        let p = &d.instructions[1];
        assert_eq!(p.length, 2);
        assert!(p.is_truncated());
        assert_eq!(p.push_data, Some(U256::from(0xab0000u64)));
        assert_eq!(d.diagnostics.len(), 1);
        assert_eq!(assemble(&d.instructions), vec![0x00, 0x62, 0xab]);
    }

    #[test]
    fn unknown_opcode_is_one_byte_invalid() {
        let d = disassemble(&[0x0c, 0x00]);
        assert_eq!(d.instructions[0].length, 1);
        assert_eq!(d.instructions[0].to_string(), "INVALID_0x0c");
    }

    #[test]
    fn blocks_split_on_jumpdest_and_terminators() {
        // JUMPDEST; PUSH1 0x08; JUMP; JUMPDEST; STOP
        let d = disassemble(&[0x5b, 0x60, 0x08, 0x56, 0x5b, 0x00]);
        let blocks = identify_blocks(&d.instructions);
        let starts: Vec<_> = blocks.iter().map(|b| b.start_offset).collect();
        assert_eq!(starts, vec![0, 4]);
        assert_eq!(blocks[0].terminator, Terminator::Jump);
        assert_eq!(blocks[1].terminator, Terminator::Stop);
    }

    #[test]
    fn jumpi_records_fallthrough() {
        // PUSH1 0x06; JUMPI; STOP; JUMPDEST; STOP
        let d = disassemble(&[0x60, 0x06, 0x57, 0x00, 0x5b, 0x00]);
        let blocks = identify_blocks(&d.instructions);
        assert_eq!(blocks[0].terminator, Terminator::JumpI);
        assert_eq!(blocks[0].fallthrough, Some(3));
        assert_eq!(blocks[1].start_offset, 3);
    }

    #[test]
    fn trailing_bytes_are_kept() {
        // STOP followed by a metadata-like tail
        let code = [0x00, 0xa2, 0x64, 0x69, 0x70, 0x66, 0x73, 0x58];
        let d = disassemble(&code);
        let blocks = identify_blocks(&d.instructions);
        let covered: usize = blocks.iter().map(|b| b.end_offset() - b.start_offset).sum();
        assert_eq!(covered, code.len());
    }

    #[test]
    fn fallthrough_into_jumpdest() {
        let d = disassemble(&[0x60, 0x01, 0x5b, 0x00]);
        let blocks = identify_blocks(&d.instructions);
        assert_eq!(blocks[0].terminator, Terminator::FallThrough);
        assert_eq!(blocks[0].fallthrough, Some(2));
    }

    #[test]
    fn block_id_round_trip() {
        let id = BlockId::new(0x1a2, 3);
        assert_eq!(id.to_string(), "0x1a2_3");
        assert_eq!("0x1a2_3".parse::<BlockId>(), Ok(id));
        assert!("1a2_3".parse::<BlockId>().is_err());
    }

    #[test]
    fn hex_parsing() {
        assert_eq!(parse_hex("0x60 01\n"), Ok(vec![0x60, 0x01]));
        assert_eq!(parse_hex("6A"), Ok(vec![0x6a]));
        assert_eq!(parse_hex("0x"), Err(HexError::Empty));
        assert!(parse_hex("0x6").is_err());
        assert!(looks_like_hex(b"0x6001\n"));
        assert!(!looks_like_hex(&[0x60, 0x01]));
    }
}
