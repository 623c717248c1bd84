use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;

use crate::clock::Timestamp;
use crate::error::Result;

/// Append-only operations log. Lines carry who, what and the outcome code,
/// never arguments, so no identity or PID reaches it.
pub(crate) struct AuditLog {
    file: Mutex<Option<File>>,
    lines: Mutex<Vec<String>>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            file: Mutex::new(None),
            lines: Mutex::new(Vec::new()),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(Some(file)),
            lines: Mutex::new(Vec::new()),
        })
    }

    pub fn record<T>(&self, at: Timestamp, principal: &str, op: &str, outcome: &Result<T>) {
        let outcome = match outcome {
            Ok(_) => "ok",
            Err(e) => e.code().as_str(),
        };
        self.write(format!("{} INFO {principal} {op} {outcome}", at.to_rfc3339()));
    }

    pub fn warn(&self, at: Timestamp, principal: &str, op: &str, note: &str) {
        self.write(format!("{} WARN {principal} {op} {note}", at.to_rfc3339()));
    }

    fn write(&self, line: String) {
        if let Some(f) = self.file.lock().as_mut() {
            // Losing an audit line must not fail the operation it describes.
            let _ = writeln!(f, "{line}");
        }
        self.lines.lock().push(line);
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().clone()
    }
}
