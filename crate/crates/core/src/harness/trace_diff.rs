//! Line-level comparison of JSONL event logs.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TraceDiff {
    Equal { lines: usize },
    /// 1-based line number of the first difference; `None` marks end of file.
    Diverged {
        line: usize,
        left: Option<String>,
        right: Option<String>,
    },
}

fn load_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(serde_json::Value::Object(_)) => {}
            Ok(_) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "expected a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(lines)
}

/// Validate both logs line by line, then report equality or the first
/// differing line.
pub fn trace_diff(left: &Path, right: &Path) -> Result<TraceDiff> {
    let a = load_lines(left)?;
    let b = load_lines(right)?;
    for i in 0..a.len().max(b.len()) {
        let (x, y) = (a.get(i), b.get(i));
        if x != y {
            return Ok(TraceDiff::Diverged {
                line: i + 1,
                left: x.cloned(),
                right: y.cloned(),
            });
        }
    }
    Ok(TraceDiff::Equal { lines: a.len() })
}
