//! CSV emitters. Every table ends with a `# config_hash=...` comment line.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub comments: Vec<String>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            comments: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Extra `# ...` line emitted before the hash line.
    pub fn comment(&mut self, text: impl Into<String>) {
        self.comments.push(text.into());
    }

    pub fn render(&self, config_hash: &str) -> String {
        let mut s = self.header.join(",") + "\n";
        for r in &self.rows {
            writeln!(s, "{}", r.join(",")).unwrap();
        }
        for c in &self.comments {
            writeln!(s, "# {c}").unwrap();
        }
        writeln!(s, "# config_hash={config_hash}").unwrap();
        s
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.render(config_hash)).map_err(|e| Error::io(path, e))
    }
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
