//! Reuse-sensitive control-flow graph recovery for EVM bytecode.
//!
//! Pipeline: [`bytecode`] decodes and partitions code, [`emulator`] runs blocks
//! symbolically in SSA form, [`cfg`] builds the graph and clones reused blocks,
//! [`metrics`] and [`detectors`] consume the graph, and [`corpus`] produces
//! labelled fixtures together with a concrete interpreter used as an oracle.

pub mod bytecode;
pub mod cfg;
pub mod config;
pub mod corpus;
pub mod detectors;
pub mod diag;
pub mod emulator;
pub mod metrics;
pub mod opcode;

pub use bytecode::{BasicBlock, BlockId, Instruction, Terminator};
pub use cfg::{build_cfg, Cfg, CfgError, Edge, EdgeKind};
pub use config::{Config, Mode, OutputFormat};
pub use diag::{Diagnostic, Severity};
pub use opcode::Opcode;
