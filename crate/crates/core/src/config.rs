use serde::Serialize;

/// CFG construction strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub enum Mode {
    /// Detect code reuse through reuse contexts and clone reused blocks.
    #[default]
    ReuseSensitive,
    /// One node per block offset; the comparison baseline.
    ReuseInsensitive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub enum OutputFormat {
    Dot,
    #[default]
    Json,
    Text,
}

/// Analysis limits and presentation options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Config {
    pub clone_budget_per_offset: usize,
    pub total_block_budget: usize,
    pub reemulation_cap: usize,
    pub branch_bound: usize,
    pub mode: Mode,
    pub output_format: OutputFormat,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            clone_budget_per_offset: 512,
            total_block_budget: 100_000,
            reemulation_cap: 64,
            branch_bound: 16,
            mode: Mode::ReuseSensitive,
            output_format: OutputFormat::Json,
        }
    }
}

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
#[error("{0} must be at least 1")]
pub struct InvalidConfig(pub &'static str);

impl Config {
    pub fn with_mode(mode: Mode) -> Self {
        Config { mode, ..Config::default() }
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let checks = [
            (self.clone_budget_per_offset, "clone_budget_per_offset"),
            (self.total_block_budget, "total_block_budget"),
            (self.reemulation_cap, "reemulation_cap"),
            (self.branch_bound, "branch_bound"),
        ];
        match checks.iter().find(|(v, _)| *v == 0) {
            Some((_, name)) => Err(InvalidConfig(name)),
            None => Ok(()),
        }
    }
}
