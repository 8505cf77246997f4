use std::fmt::Write as _;

use serde::Serialize;

use crate::bytecode::{BlockId, Instruction};
use crate::diag::Diagnostic;

use crate::config::OutputFormat;

use super::{Cfg, CloneReason, EdgeKind};

#[derive(Serialize)]
struct JsonInstruction {
    offset: usize,
    mnemonic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    push_data: Option<String>,
}

impl From<&Instruction> for JsonInstruction {
    fn from(ins: &Instruction) -> Self {
        JsonInstruction { offset: ins.offset, mnemonic: ins.opcode.name().into_owned(), push_data: ins.payload_hex() }
    }
}

#[derive(Serialize)]
struct JsonBlock {
    id: BlockId,
    offset: usize,
    clone: usize,
    instructions: Vec<JsonInstruction>,
    terminator: &'static str,
    is_data: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    tac: Option<Vec<String>>,
}

#[derive(Serialize)]
struct JsonEdge {
    from: BlockId,
    to: BlockId,
    kind: EdgeKind,
}

#[derive(Serialize)]
struct JsonCfg<'a> {
    entry: BlockId,
    blocks: Vec<JsonBlock>,
    edges: Vec<JsonEdge>,
    diagnostics: &'a [Diagnostic],
}

fn tac_lines(cfg: &Cfg, id: BlockId) -> Vec<String> {
    cfg.tac.get(&id).map(|lines| lines.iter().map(|l| l.render(&cfg.values)).collect()).unwrap_or_default()
}

/// Serializes the graph as pretty-printed JSON with blocks and edges in id order.
pub fn to_json(cfg: &Cfg, emit_tac: bool) -> String {
    let doc = JsonCfg {
        entry: cfg.entry,
        blocks: cfg
            .blocks
            .iter()
            .map(|(&id, b)| JsonBlock {
                id,
                offset: id.offset,
                clone: id.clone,
                instructions: b.instructions.iter().map(JsonInstruction::from).collect(),
                terminator: b.terminator.as_str(),
                is_data: b.is_data,
                tac: emit_tac.then(|| tac_lines(cfg, id)),
            })
            .collect(),
        edges: cfg.edges.iter().map(|e| JsonEdge { from: e.from, to: e.to, kind: e.kind }).collect(),
        diagnostics: &cfg.diagnostics,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("cfg serializes");
    s.push('\n');
    s
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders the graph in Graphviz syntax: jump edges solid, fall-through edges dashed.
pub fn to_dot(cfg: &Cfg, emit_tac: bool) -> String {
    let mut s = String::from("digraph cfg {\n  node [shape=box, fontname=\"monospace\"];\n");
    for (&id, block) in &cfg.blocks {
        let mut label = format!("{:x}_{}\\l", id.offset, id.clone);
        let lines: Vec<String> = if emit_tac {
            tac_lines(cfg, id)
        } else {
            block.instructions.iter().map(|i| format!("{:04x}: {i}", i.offset)).collect()
        };
        for line in lines {
            label.push_str(&escape(&line));
            label.push_str("\\l");
        }
        let style = if block.is_data { ", style=dashed" } else { "" };
        let _ = writeln!(s, "  \"{id}\" [label=\"{label}\"{style}];");
    }
    for e in &cfg.edges {
        let style = match e.kind {
            EdgeKind::Jump => "solid",
            EdgeKind::FallThrough => "dashed",
        };
        let _ = writeln!(s, "  \"{}\" -> \"{}\" [style={style}];", e.from, e.to);
    }
    s.push_str("}\n");
    s
}

/// Plain-text rendering: one section per block with its successors, then diagnostics.
pub fn to_text(cfg: &Cfg, emit_tac: bool) -> String {
    let mut s = String::new();
    for (&id, block) in &cfg.blocks {
        let succs: Vec<String> = cfg.successors(id).map(|e| e.to.to_string()).collect();
        let mut tags = Vec::new();
        match cfg.clone_reasons.get(&id) {
            Some(CloneReason::Reuse) => tags.push(" reuse"),
            Some(CloneReason::EndBlock) => tags.push(" end"),
            _ => {}
        }
        if block.is_data {
            tags.push(" data");
        }
        let _ = writeln!(s, "block {id}{} -> [{}]", tags.concat(), succs.join(", "));
        if emit_tac {
            for line in tac_lines(cfg, id) {
                let _ = writeln!(s, "  {line}");
            }
        } else {
            for i in block.instructions.iter() {
                let _ = writeln!(s, "  {:04x}: {i}", i.offset);
            }
        }
    }
    for d in &cfg.diagnostics {
        let _ = writeln!(s, "{d}");
    }
    s
}

/// Renders in the requested format.
pub fn export(cfg: &Cfg, format: OutputFormat, emit_tac: bool) -> String {
    match format {
        OutputFormat::Dot => to_dot(cfg, emit_tac),
        OutputFormat::Json => to_json(cfg, emit_tac),
        OutputFormat::Text => to_text(cfg, emit_tac),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::config::Config;

    #[test]
    fn single_stop_exports_one_node() {
        let cfg = build_cfg(&[0x00], &Config::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&cfg, false)).unwrap();
        assert_eq!(v["blocks"].as_array().unwrap().len(), 1);
        assert_eq!(v["edges"].as_array().unwrap().len(), 0);
        assert_eq!(v["entry"], "0x0_0");
        let dot = to_dot(&cfg, false);
        assert_eq!(dot.matches("->").count(), 0);
        assert!(dot.contains("\"0x0_0\""));
    }

    #[test]
    fn edge_styles() {
        // PUSH1 0; CALLDATALOAD; PUSH1 7; JUMPI; STOP; JUMPDEST; STOP
        let code = [0x60, 0x00, 0x35, 0x60, 0x07, 0x57, 0x00, 0x5b, 0x00];
        let cfg = build_cfg(&code, &Config::default()).unwrap();
        let dot = to_dot(&cfg, false);
        assert!(dot.contains("\"0x0_0\" -> \"0x7_0\" [style=solid]"));
        assert!(dot.contains("\"0x0_0\" -> \"0x6_0\" [style=dashed]"));
        let json = to_json(&cfg, true);
        assert!(json.contains("\"kind\": \"fallthrough\""));
        assert!(json.contains("v0 = PUSH1(0x0)"));
    }
}
