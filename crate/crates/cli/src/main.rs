use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use reuse_cfg::bytecode::{disassemble, listing, looks_like_hex, parse_hex};
use reuse_cfg::cfg::export;
use reuse_cfg::corpus::{generate_with_bound, interp, Pattern, PatternSpec};
use reuse_cfg::detectors::detect_all;
use reuse_cfg::metrics::{count_paths, parse_traces, polymorphic_jump_targets, trace_coverage};
use reuse_cfg::{build_cfg, Cfg, Config, Mode, OutputFormat};

/// Reuse-sensitive control-flow graph recovery for EVM bytecode.
#[derive(Parser, Debug)]
#[command(name = "reuse-cfg", version)]
struct Cli {
    #[command(flatten)]
    limits: Limits,
    /// Worker threads when several input files are given.
    #[arg(long, global = true, env = "REUSE_CFG_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Limits {
    /// Maximum clones of one block offset.
    #[arg(long, global = true, env = "REUSE_CFG_CLONE_BUDGET", default_value_t = 512)]
    clone_budget: usize,
    /// Maximum nodes in one graph.
    #[arg(long, global = true, env = "REUSE_CFG_BLOCK_BUDGET", default_value_t = 100_000)]
    block_budget: usize,
    /// Re-emulations of one node before its entry stack is widened.
    #[arg(long, global = true, env = "REUSE_CFG_REEMULATION_CAP", default_value_t = 64)]
    reemulation_cap: usize,
    /// Branch decisions the interpreter explores per run.
    #[arg(long, global = true, env = "REUSE_CFG_BRANCH_BOUND", default_value_t = 16)]
    branch_bound: usize,
    /// Build the baseline graph that never clones reused blocks.
    #[arg(long, global = true, env = "REUSE_CFG_REUSE_INSENSITIVE")]
    reuse_insensitive: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GraphFormat {
    Dot,
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the instruction listing.
    Disasm { files: Vec<PathBuf> },
    /// Recover and print the control-flow graph.
    Cfg {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "json", env = "REUSE_CFG_FORMAT")]
        format: GraphFormat,
        /// Include three-address code for each block.
        #[arg(long)]
        emit_tac: bool,
    },
    /// Count entry-to-exit paths; with --reuse-insensitive also the baseline count.
    Paths {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// List blocks whose jumps reach more than one node.
    Poly {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Check which execution traces the graph covers.
    Cover {
        file: PathBuf,
        /// One trace per line, comma-separated hex block offsets.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Report tx.origin and reentrancy findings.
    Detect {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Generate a reuse-pattern fixture and its ground-truth manifest.
    Gen {
        #[arg(long)]
        pattern: Pattern,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Directory for `<pattern>_<seed>.hex` and `<pattern>_<seed>.json`.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the concrete interpreter and print block traces.
    Interp { file: PathBuf },
}

/// Bad input or invocation; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Failures already printed per file; `usage` selects the exit status.
#[derive(Debug)]
struct Reported {
    usage: bool,
}

impl std::fmt::Display for Reported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("one or more inputs failed")
    }
}

impl std::error::Error for Reported {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = match e.downcast_ref::<Reported>() {
                Some(r) => r.usage,
                None => {
                    eprintln!("error: {e:#}");
                    e.downcast_ref::<Usage>().is_some()
                }
            };
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn config(limits: &Limits) -> Result<Config> {
    let config = Config {
        clone_budget_per_offset: limits.clone_budget,
        total_block_budget: limits.block_budget,
        reemulation_cap: limits.reemulation_cap,
        branch_bound: limits.branch_bound,
        mode: if limits.reuse_insensitive { Mode::ReuseInsensitive } else { Mode::ReuseSensitive },
        ..Config::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// Reads bytecode given as hex text or raw bytes.
fn read_code(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if looks_like_hex(&bytes) {
        let text = String::from_utf8_lossy(&bytes);
        parse_hex(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    } else if bytes.is_empty() {
        Err(usage(format!("{}: empty input", path.display())))
    } else {
        Ok(bytes)
    }
}

fn analyse(path: &Path, config: &Config) -> Result<Cfg> {
    let code = read_code(path)?;
    build_cfg(&code, config).with_context(|| format!("analysing {}", path.display()))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Runs `job` per file on `jobs` threads and prints results in argument order,
/// each preceded by a header when there are several files.
fn per_file(files: &[PathBuf], jobs: usize, job: impl Fn(&Path) -> Result<String> + Sync) -> Result<()> {
    if files.is_empty() {
        return Err(usage("no input files"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let outputs: Vec<Result<String>> = pool.install(|| files.par_iter().map(|f| job(f)).collect());
    let mut failed: Option<Reported> = None;
    for (file, out) in files.iter().zip(outputs) {
        match out {
            Ok(text) => {
                if files.len() > 1 {
                    println!("==> {} <==", file.display());
                }
                print!("{text}");
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                failed.get_or_insert(Reported { usage: e.downcast_ref::<Usage>().is_some() });
            }
        }
    }
    failed.map_or(Ok(()), |r| Err(r.into()))
}

fn run(cli: Cli) -> Result<()> {
    let config = config(&cli.limits)?;
    let jobs = cli.jobs;
    match cli.command {
        Command::Disasm { files } => per_file(&files, jobs, |f| {
            let dis = disassemble(&read_code(f)?);
            for d in &dis.diagnostics {
                eprintln!("{d}");
            }
            Ok(listing(&dis.instructions))
        }),
        Command::Cfg { files, format, emit_tac } => {
            let format = match format {
                GraphFormat::Dot => OutputFormat::Dot,
                GraphFormat::Json => OutputFormat::Json,
                GraphFormat::Text => OutputFormat::Text,
            };
            per_file(&files, jobs, |f| Ok(export(&analyse(f, &config)?, format, emit_tac)))
        }
        Command::Paths { files, format } => per_file(&files, jobs, |f| {
            let code = read_code(f)?;
            let mut rows = Vec::new();
            let mut modes = vec![("sensitive", Mode::ReuseSensitive)];
            if config.mode == Mode::ReuseInsensitive {
                modes.push(("insensitive", Mode::ReuseInsensitive));
            }
            for (name, mode) in modes {
                let cfg = build_cfg(&code, &Config { mode, ..config.clone() })?;
                rows.push((name, count_paths(&cfg)?));
            }
            Ok(match format {
                ReportFormat::Json => {
                    let map: serde_json::Map<String, serde_json::Value> =
                        rows.iter().map(|(k, r)| (k.to_string(), serde_json::to_value(r).unwrap())).collect();
                    json(&map)
                }
                ReportFormat::Text => rows.iter().fold(String::new(), |mut s, (k, r)| {
                    let _ = writeln!(s, "{k}_paths: {}", r.path_count);
                    let _ = writeln!(s, "{k}_back_edges_removed: {}", r.back_edges_removed);
                    s
                }),
            })
        }),
        Command::Poly { files, format } => per_file(&files, jobs, |f| {
            let poly = polymorphic_jump_targets(&analyse(f, &config)?);
            Ok(match format {
                ReportFormat::Json => json(&poly),
                ReportFormat::Text => poly.iter().fold(String::new(), |mut s, (from, targets)| {
                    let targets: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
                    let _ = writeln!(s, "{from}: {}", targets.join(", "));
                    s
                }),
            })
        }),
        Command::Cover { file, traces, format } => {
            let cfg = analyse(&file, &config)?;
            let text =
                fs::read_to_string(&traces).map_err(|e| usage(format!("cannot read {}: {e}", traces.display())))?;
            let traces = parse_traces(&text).map_err(|e| usage(e.to_string()))?;
            let cov = trace_coverage(&cfg, &traces);
            match format {
                ReportFormat::Json => print!("{}", json(&cov)),
                ReportFormat::Text => {
                    println!("covered: {}", cov.covered);
                    println!("total: {}", cov.total);
                    println!("ratio: {:.4}", cov.ratio());
                    for u in &cov.uncovered {
                        println!("uncovered: {} (fails at position {})", u.trace, u.failed_at);
                    }
                }
            }
            Ok(())
        }
        Command::Detect { files, format } => per_file(&files, jobs, |f| {
            let findings = detect_all(&analyse(f, &config)?);
            Ok(match format {
                ReportFormat::Json => json(&findings),
                ReportFormat::Text => findings.iter().fold(String::new(), |mut s, x| {
                    let _ = writeln!(s, "{x}");
                    s
                }),
            })
        }),
        Command::Gen { pattern, seed, depth, out_dir } => {
            let truth = generate_with_bound(PatternSpec::new(pattern, seed, depth), config.branch_bound)?;
            fs::create_dir_all(&out_dir).map_err(|e| usage(format!("cannot create {}: {e}", out_dir.display())))?;
            let stem = out_dir.join(format!("{pattern}_{seed}"));
            let hex_path = stem.with_extension("hex");
            let manifest_path = stem.with_extension("json");
            fs::write(&hex_path, format!("0x{}\n", hex::encode(&truth.bytecode)))
                .with_context(|| format!("writing {}", hex_path.display()))?;
            fs::write(&manifest_path, json(&truth)).with_context(|| format!("writing {}", manifest_path.display()))?;
            println!("{}", hex_path.display());
            println!("{}", manifest_path.display());
            Ok(())
        }
        Command::Interp { file } => {
            let code = read_code(&file)?;
            let traces = interp::interpret(&code, config.branch_bound)?;
            for t in traces {
                println!("{t}");
            }
            Ok(())
        }
    }
}
