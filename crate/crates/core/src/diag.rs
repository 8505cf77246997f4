use serde::Serialize;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

/// A non-fatal finding produced while decoding or analysing code.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub offset: Option<usize>,
}

impl Diagnostic {
    pub fn warning(message: impl Into<String>, offset: impl Into<Option<usize>>) -> Self {
        Diagnostic { severity: Severity::Warning, message: message.into(), offset: offset.into() }
    }

    pub fn info(message: impl Into<String>, offset: impl Into<Option<usize>>) -> Self {
        Diagnostic { severity: Severity::Info, message: message.into(), offset: offset.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match self.offset {
            Some(off) => write!(f, "{sev}: {} (at 0x{off:x})", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}
