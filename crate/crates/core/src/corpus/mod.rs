//! Labelled fixtures: an assembler, pattern generators with known path counts,
//! hand-written example programs, and a concrete interpreter used as an oracle.

pub mod asm;
pub mod fixtures;
pub mod interp;
pub mod patterns;

pub use asm::{assemble_text, Asm, AsmError};
pub use fixtures::Fixture;
pub use interp::{execute, interpret, Execution, Halt, InterpConfig, InterpError};
pub use patterns::{
    compose, compose_to_size, generate, generate_with_bound, GenError, GroundTruth, Pattern, PatternSpec, CODE_SIZE_CAP,
};
