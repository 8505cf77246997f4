//! Concrete EVM interpreter used as a ground-truth oracle.
//!
//! Words are arbitrary-precision integers reduced modulo 2^256, independent of
//! the emulator's fixed-width arithmetic. Every JUMPI forks into both arms.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::metrics::Trace;
use crate::opcode::Opcode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpError {
    #[error("unsupported opcode {opcode} at offset {offset:#x}")]
    Unsupported { opcode: String, offset: usize },
    #[error("execution exceeded {0} steps")]
    StepLimit(usize),
}

/// How an execution ended.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Halt {
    Stop,
    Return,
    Revert,
    Invalid,
    SelfDestruct,
    /// Invalid jump or stack underflow; treated like a revert.
    Fault(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub trace: Trace,
    pub halt: Halt,
    /// Final stack, bottom first.
    pub stack: Vec<BigUint>,
}

#[derive(Clone, Debug)]
pub struct InterpConfig {
    /// JUMPI decisions explored per run; forks needing more are dropped.
    pub branch_bound: usize,
    pub step_limit: usize,
    /// Value returned by CALLDATALOAD, CALLER, ORIGIN and CALLVALUE.
    pub environment: BigUint,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig { branch_bound: 16, step_limit: 1_000_000, environment: BigUint::zero() }
    }
}

fn modulus() -> &'static BigUint {
    static M: OnceLock<BigUint> = OnceLock::new();
    M.get_or_init(|| BigUint::one() << 256u32)
}

fn word(b: bool) -> BigUint {
    if b {
        BigUint::one()
    } else {
        BigUint::zero()
    }
}

/// Concrete result of a pure arithmetic or comparison opcode; operands top of stack first.
pub fn eval(op: Opcode, args: &[BigUint]) -> Option<BigUint> {
    let m = modulus();
    let a = args.first()?;
    let zero = BigUint::zero();
    let b = args.get(1).unwrap_or(&zero);
    let small = |x: &BigUint| x.to_u32().filter(|&v| v < 256);
    Some(match op {
        Opcode::ADD => (a + b) % m,
        Opcode::MUL => (a * b) % m,
        Opcode::SUB => (a + m - b) % m,
        Opcode::DIV => {
            if b.is_zero() {
                BigUint::zero()
            } else {
                a / b
            }
        }
        Opcode::MOD => {
            if b.is_zero() {
                BigUint::zero()
            } else {
                a % b
            }
        }
        Opcode::EXP => a.modpow(b, m),
        Opcode::AND => a & b,
        Opcode::OR => a | b,
        Opcode::XOR => a ^ b,
        Opcode::NOT => m - BigUint::one() - a,
        Opcode::SHL => small(a).map_or_else(BigUint::zero, |s| (b << s) % m),
        Opcode::SHR => small(a).map_or_else(BigUint::zero, |s| b >> s),
        Opcode::BYTE => match a.to_u32().filter(|&i| i < 32) {
            Some(i) => (b >> (8 * (31 - i))) & BigUint::from(0xffu32),
            None => BigUint::zero(),
        },
        Opcode::LT => word(a < b),
        Opcode::GT => word(a > b),
        Opcode::EQ => word(a == b),
        Opcode::ISZERO => word(a.is_zero()),
        _ => return None,
    })
}

/// Offsets of JUMPDEST instructions, skipping PUSH payloads.
fn jumpdests(code: &[u8]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut pc = 0;
    while pc < code.len() {
        let b = code[pc];
        if b == 0x5b {
            out.insert(pc);
        }
        pc += 1 + if (0x60..=0x7f).contains(&b) { (b - 0x5f) as usize } else { 0 };
    }
    out
}

#[derive(Clone)]
struct State {
    pc: usize,
    stack: Vec<BigUint>,
    trace: Vec<usize>,
    decisions: usize,
    /// The next executed instruction starts a new block.
    block_start: bool,
    /// Set on a forked arm that faults before executing anything.
    fault: Option<String>,
}

enum Step {
    Continue,
    Halt(Halt),
    Drop,
}

/// Runs `code` from offset 0 with an empty stack, forking at every JUMPI.
pub fn execute(code: &[u8], config: &InterpConfig) -> Result<Vec<Execution>, InterpError> {
    let dests = jumpdests(code);
    let mut out = Vec::new();
    let mut pending =
        vec![State { pc: 0, stack: Vec::new(), trace: Vec::new(), decisions: 0, block_start: true, fault: None }];
    while let Some(mut st) = pending.pop() {
        if let Some(msg) = st.fault.take() {
            out.push(Execution { trace: Trace::new(st.trace), halt: Halt::Fault(msg), stack: st.stack });
            continue;
        }
        let mut steps = 0usize;
        loop {
            steps += 1;
            if steps > config.step_limit {
                return Err(InterpError::StepLimit(config.step_limit));
            }
            match step(code, &dests, config, &mut st, &mut pending)? {
                Step::Continue => {}
                Step::Drop => break,
                Step::Halt(halt) => {
                    out.push(Execution { trace: Trace::new(st.trace), halt, stack: st.stack });
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn step(
    code: &[u8],
    dests: &BTreeSet<usize>,
    config: &InterpConfig,
    st: &mut State,
    pending: &mut Vec<State>,
) -> Result<Step, InterpError> {
    // Running past the end behaves like STOP.
    let byte = code.get(st.pc).copied().unwrap_or(0x00);
    let op = Opcode(byte);
    let starts = st.block_start || (op == Opcode::JUMPDEST && st.trace.last() != Some(&st.pc));
    if starts && st.pc < code.len() {
        st.trace.push(st.pc);
    }
    st.block_start = false;
    let at = st.pc;
    let fault = |msg: &str| Ok(Step::Halt(Halt::Fault(format!("{msg} at offset {at:#x}"))));

    if let Some(width) = (0x60..=0x7f).contains(&byte).then(|| (byte - 0x5f) as usize) {
        let mut v = BigUint::zero();
        for i in 0..width {
            v = (v << 8u32) + code.get(at + 1 + i).copied().unwrap_or(0);
        }
        st.stack.push(v);
        st.pc += 1 + width;
        return Ok(Step::Continue);
    }
    if let Some(n) = op.dup_depth() {
        if st.stack.len() < n {
            return fault("stack underflow");
        }
        st.stack.push(st.stack[st.stack.len() - n].clone());
        st.pc += 1;
        return Ok(Step::Continue);
    }
    if let Some(n) = op.swap_depth() {
        if st.stack.len() < n + 1 {
            return fault("stack underflow");
        }
        let top = st.stack.len() - 1;
        st.stack.swap(top, top - n);
        st.pc += 1;
        return Ok(Step::Continue);
    }

    let pops = match op {
        Opcode::STOP | Opcode::JUMPDEST | Opcode::PC | Opcode::PUSH0 | Opcode::INVALID => 0,
        Opcode::CALLDATALOAD | Opcode::POP | Opcode::JUMP | Opcode::SELFDESTRUCT => 1,
        Opcode::CALLER | Opcode::ORIGIN | Opcode::CALLVALUE => 0,
        Opcode::JUMPI | Opcode::RETURN | Opcode::REVERT => 2,
        _ if eval(op, &[BigUint::zero(), BigUint::zero()]).is_some() => op.pops(),
        _ if !op.is_defined() => 0,
        _ => return Err(InterpError::Unsupported { opcode: op.name().into_owned(), offset: at }),
    };
    if st.stack.len() < pops {
        return fault("stack underflow");
    }
    let args: Vec<BigUint> = (0..pops).map(|_| st.stack.pop().unwrap()).collect();
    st.pc += 1;
    let jump_to = |st: &mut State, target: &BigUint| -> Option<()> {
        let t = target.to_usize().filter(|t| dests.contains(t))?;
        st.pc = t;
        st.block_start = true;
        Some(())
    };
    match op {
        Opcode::STOP => return Ok(Step::Halt(Halt::Stop)),
        Opcode::RETURN => return Ok(Step::Halt(Halt::Return)),
        Opcode::REVERT => return Ok(Step::Halt(Halt::Revert)),
        Opcode::SELFDESTRUCT => return Ok(Step::Halt(Halt::SelfDestruct)),
        Opcode::INVALID => return Ok(Step::Halt(Halt::Invalid)),
        _ if !op.is_defined() => return Ok(Step::Halt(Halt::Invalid)),
        Opcode::JUMPDEST | Opcode::POP => {}
        Opcode::PUSH0 => st.stack.push(BigUint::zero()),
        Opcode::PC => st.stack.push(BigUint::from(at)),
        Opcode::CALLDATALOAD | Opcode::CALLER | Opcode::ORIGIN | Opcode::CALLVALUE => {
            st.stack.push(config.environment.clone())
        }
        Opcode::JUMP => {
            if jump_to(st, &args[0]).is_none() {
                return fault("invalid jump target");
            }
        }
        Opcode::JUMPI => {
            if st.decisions >= config.branch_bound {
                return Ok(Step::Drop);
            }
            st.decisions += 1;
            let mut taken = st.clone();
            st.block_start = true;
            if jump_to(&mut taken, &args[0]).is_none() {
                taken.fault = Some(format!("invalid jump target at offset {at:#x}"));
            }
            pending.push(taken);
        }
        _ => st.stack.push(eval(op, &args).expect("evaluable opcode")),
    }
    Ok(Step::Continue)
}

/// Distinct block-offset traces of every explored run, in sorted order.
pub fn interpret(code: &[u8], branch_bound: usize) -> Result<Vec<Trace>, InterpError> {
    let config = InterpConfig { branch_bound, ..InterpConfig::default() };
    let traces: BTreeSet<Trace> = execute(code, &config)?.into_iter().map(|e| e.trace).collect();
    Ok(traces.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::{disassemble, identify_blocks};
    use crate::emulator::{emulate_block, fold, StackState, ValueTable, FOLDED};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ruint::aliases::U256;

    fn big(x: U256) -> BigUint {
        BigUint::from_bytes_be(&x.to_be_bytes::<32>())
    }

    #[test]
    fn jump_over_invalid() {
        let code = [0x60, 0x04, 0x56, 0xfe, 0x5b, 0x00];
        assert_eq!(interpret(&code, 16).unwrap(), vec![Trace::new(vec![0, 4])]);
    }

    #[test]
    fn jumpi_forks_within_the_bound() {
        // PUSH1 0 CALLDATALOAD PUSH1 8 JUMPI STOP INVALID JUMPDEST STOP
        let code = [0x60, 0x00, 0x35, 0x60, 0x08, 0x57, 0x00, 0xfe, 0x5b, 0x00];
        let traces = interpret(&code, 1).unwrap();
        assert_eq!(traces, vec![Trace::new(vec![0, 6]), Trace::new(vec![0, 8])]);
        assert!(interpret(&code, 0).unwrap().is_empty());
    }

    #[test]
    fn faults_end_the_run() {
        let runs = execute(&[0x60, 0x03, 0x56, 0x00], &InterpConfig::default()).unwrap();
        assert!(matches!(runs[0].halt, Halt::Fault(_)));
        let runs = execute(&[0x01], &InterpConfig::default()).unwrap();
        assert!(matches!(runs[0].halt, Halt::Fault(_)));
    }

    #[test]
    fn unsupported_opcode_is_an_error() {
        let err = execute(&[0x60, 0x00, 0x54, 0x00], &InterpConfig::default()).unwrap_err();
        assert!(matches!(err, InterpError::Unsupported { offset: 2, .. }));
    }

    fn word(rng: &mut ChaCha8Rng) -> U256 {
        match rng.gen_range(0..6) {
            0 => U256::ZERO,
            1 => U256::MAX,
            2 => U256::from(rng.gen_range(0u64..300)),
            3 => U256::MAX - U256::from(rng.gen_range(0u64..300)),
            _ => U256::from_limbs(rng.gen()),
        }
    }

    #[test]
    fn folding_agrees_with_the_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let op = FOLDED[rng.gen_range(0..FOLDED.len())];
            let args: Vec<U256> = (0..op.pops()).map(|_| word(&mut rng)).collect();
            let expected = eval(op, &args.iter().copied().map(big).collect::<Vec<_>>()).unwrap();
            assert_eq!(big(fold(op, &args).unwrap()), expected, "{} {args:?}", op.name());
        }
    }

    /// Straight-line code over constants, ending in STOP, that never underflows.
    fn pure_program(rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut code = Vec::new();
        let mut height = 0usize;
        for _ in 0..rng.gen_range(1..40) {
            let choice = rng.gen_range(0..10);
            if height == 0 || choice < 3 {
                let w = word(rng);
                let width = w.byte_len().max(1);
                code.push(Opcode::push(width).0);
                code.extend_from_slice(&w.to_be_bytes::<32>()[32 - width..]);
                height += 1;
            } else if choice < 4 {
                code.push(Opcode::dup(rng.gen_range(1..=height.min(16))).0);
                height += 1;
            } else if choice < 5 && height >= 2 {
                code.push(Opcode::swap(rng.gen_range(1..height.min(17))).0);
            } else if choice < 6 {
                code.push(Opcode::POP.0);
                height -= 1;
            } else {
                let op = FOLDED[rng.gen_range(0..FOLDED.len())];
                if op.pops() > height {
                    continue;
                }
                code.push(op.0);
                height = height - op.pops() + 1;
            }
        }
        code.push(Opcode::STOP.0);
        code
    }

    #[test]
    fn emulated_exit_stack_matches_concrete_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let code = pure_program(&mut rng);
            let runs = execute(&code, &InterpConfig::default()).unwrap();
            assert_eq!(runs.len(), 1);
            assert_eq!(runs[0].halt, Halt::Stop);
            let blocks = identify_blocks(&disassemble(&code).instructions);
            let mut table = ValueTable::new();
            let emu = emulate_block(&blocks[0], &StackState::empty(), &mut table);
            let emulated: Vec<BigUint> =
                emu.s_end.entries.iter().map(|&v| big(table.as_const(v).expect("constant"))).collect();
            assert_eq!(emulated, runs[0].stack, "{}", hex::encode(&code));
        }
    }
}
