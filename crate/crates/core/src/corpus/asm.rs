//! A small label-resolving assembler for writing fixtures.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use ruint::aliases::U256;
use thiserror::Error;

use crate::opcode::Opcode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("undefined label {0:?}")]
    UndefinedLabel(String),
    #[error("label {0:?} defined twice")]
    DuplicateLabel(String),
    #[error("label {0:?} at offset {1:#x} does not fit the push width")]
    LabelOutOfRange(String, usize),
    #[error("unknown mnemonic {0:?}")]
    UnknownMnemonic(String),
    #[error("bad operand {0:?}")]
    BadOperand(String),
    #[error("{0} expects an operand")]
    MissingOperand(String),
}

/// Builds bytecode with forward and backward label references.
#[derive(Clone, Debug, Default)]
pub struct Asm {
    code: Vec<u8>,
    labels: BTreeMap<String, usize>,
    fixups: Vec<(usize, usize, String)>,
    duplicate: Option<String>,
}

impl Asm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn op(&mut self, op: Opcode) -> &mut Self {
        self.code.push(op.0);
        self
    }

    pub fn ops(&mut self, ops: &[Opcode]) -> &mut Self {
        for &op in ops {
            self.op(op);
        }
        self
    }

    /// Pushes `value` with the given payload width.
    pub fn push_n(&mut self, width: usize, value: U256) -> &mut Self {
        self.code.push(Opcode::push(width).0);
        let be = value.to_be_bytes::<32>();
        self.code.extend_from_slice(&be[32 - width..]);
        self
    }

    /// Pushes `value` with the smallest PUSH1..PUSH8 that holds it.
    pub fn push(&mut self, value: impl Into<u64>) -> &mut Self {
        self.push_word(U256::from(value.into()))
    }

    /// Pushes `value` with the smallest PUSH1..PUSH32 that holds it.
    pub fn push_word(&mut self, value: U256) -> &mut Self {
        let width = value.byte_len().max(1);
        self.push_n(width, value)
    }

    /// PUSH2 of a label's offset.
    pub fn push_label(&mut self, name: &str) -> &mut Self {
        self.push_label_n(2, name)
    }

    pub fn push_label_n(&mut self, width: usize, name: &str) -> &mut Self {
        self.code.push(Opcode::push(width).0);
        self.fixups.push((self.code.len(), width, name.to_string()));
        self.code.extend(std::iter::repeat_n(0, width));
        self
    }

    /// Defines `name` here without emitting anything.
    pub fn mark(&mut self, name: &str) -> &mut Self {
        if self.labels.insert(name.to_string(), self.code.len()).is_some() && self.duplicate.is_none() {
            self.duplicate = Some(name.to_string());
        }
        self
    }

    /// Defines `name` here and emits a JUMPDEST.
    pub fn label(&mut self, name: &str) -> &mut Self {
        self.mark(name).op(Opcode::JUMPDEST)
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.code.extend_from_slice(bytes);
        self
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    pub fn offset_of(&self, name: &str) -> Option<usize> {
        self.labels.get(name).copied()
    }

    /// Resolves label references and returns the code.
    pub fn build(&self) -> Result<Vec<u8>, AsmError> {
        if let Some(d) = &self.duplicate {
            return Err(AsmError::DuplicateLabel(d.clone()));
        }
        let mut code = self.code.clone();
        for (at, width, name) in &self.fixups {
            let off = *self.labels.get(name).ok_or_else(|| AsmError::UndefinedLabel(name.clone()))?;
            if *width < 8 && off >> (8 * width) != 0 {
                return Err(AsmError::LabelOutOfRange(name.clone(), off));
            }
            let be = (off as u64).to_be_bytes();
            for i in 0..*width {
                code[at + width - 1 - i] = if i < 8 { be[7 - i] } else { 0 };
            }
        }
        Ok(code)
    }
}

fn mnemonics() -> &'static HashMap<String, Opcode> {
    static TABLE: OnceLock<HashMap<String, Opcode>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=255u8).map(Opcode).filter(|op| op.is_defined()).map(|op| (op.name().into_owned(), op)).collect()
    })
}

fn parse_value(token: &str) -> Result<U256, AsmError> {
    let bad = || AsmError::BadOperand(token.to_string());
    match token.strip_prefix("0x") {
        Some(hex) => U256::from_str_radix(hex, 16).map_err(|_| bad()),
        None => U256::from_str_radix(token, 10).map_err(|_| bad()),
    }
}

/// Assembles whitespace-separated text.
///
/// * `name:` defines a label, `@name` pushes it with PUSH2.
/// * `PUSHn v` pushes with an explicit width, `PUSH v` with the smallest one;
///   `v` is decimal, `0x` hex, or `@label`.
/// * `DATA 0x..` emits raw bytes. `//` starts a comment.
pub fn assemble_text(src: &str) -> Result<(Vec<u8>, BTreeMap<String, usize>), AsmError> {
    let mut asm = Asm::new();
    let mut tokens = src.lines().flat_map(|l| l.split("//").next().unwrap_or("").split_whitespace());
    while let Some(tok) = tokens.next() {
        if let Some(name) = tok.strip_suffix(':') {
            asm.mark(name);
        } else if let Some(name) = tok.strip_prefix('@') {
            asm.push_label(name);
        } else if tok.eq_ignore_ascii_case("DATA") {
            let arg = tokens.next().ok_or_else(|| AsmError::MissingOperand(tok.to_string()))?;
            let hex = arg.strip_prefix("0x").unwrap_or(arg);
            let bytes = hex::decode(hex).map_err(|_| AsmError::BadOperand(arg.to_string()))?;
            asm.raw(&bytes);
        } else {
            let upper = tok.to_ascii_uppercase();
            let width = match upper.strip_prefix("PUSH") {
                Some("") => Some(None),
                Some(n) => match n.parse::<usize>() {
                    Ok(w) if (1..=32).contains(&w) => Some(Some(w)),
                    Ok(0) => None,
                    _ => return Err(AsmError::UnknownMnemonic(tok.to_string())),
                },
                None => None,
            };
            match width {
                Some(w) => {
                    let arg = tokens.next().ok_or_else(|| AsmError::MissingOperand(tok.to_string()))?;
                    match (arg.strip_prefix('@'), w) {
                        (Some(name), w) => asm.push_label_n(w.unwrap_or(2), name),
                        (None, Some(w)) => asm.push_n(w, parse_value(arg)?),
                        (None, None) => asm.push_word(parse_value(arg)?),
                    };
                }
                None => {
                    let op = mnemonics().get(&upper).ok_or_else(|| AsmError::UnknownMnemonic(tok.to_string()))?;
                    asm.op(*op);
                }
            }
        }
    }
    let code = asm.build()?;
    Ok((code, asm.labels().clone()))
}
