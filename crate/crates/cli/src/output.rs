use std::fs;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde_json::{Map, Value};

use crate::OutputArgs;

/// Prints `report` as pretty JSON and mirrors it to `--json` when given. A
/// `timestamp` field (Unix seconds) is added unless `--no-timestamp` is set.
pub fn emit(report: Value, opts: &OutputArgs) -> anyhow::Result<()> {
    let mut report = match report {
        Value::Object(map) => map,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    if !opts.no_timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        report.insert("timestamp".into(), Value::from(secs));
    }
    let text = serde_json::to_string_pretty(&Value::Object(report))?;
    println!("{text}");
    if let Some(path) = &opts.json {
        fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
