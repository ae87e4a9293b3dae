pub mod agent;
pub mod replay;
pub mod schedule;
pub mod send;
pub mod serve;

use std::io::Write;

use serde_json::Value;

/// Prints one JSON line and flushes, so scripts reading a pipe see it at once.
pub(crate) fn emit(value: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
    let _ = out.flush();
}
