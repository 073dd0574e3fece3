//! Report files and the dashboard.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde_json::{json, Value};

use crate::experiments::{Resolved, EXPERIMENTS};
use crate::Format;
use rtower::limits::ExperimentReport;

/// Writes `report.json` and `tables.csv` (or `tables.json`) into `dir`. Both carry
/// the library version and the resolved config; neither carries timings, so the
/// same config reproduces the same bytes.
pub fn write(dir: &Path, report: &ExperimentReport, cfg: &Resolved, format: Format) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config = json!({ "version": rtower::VERSION, "config": cfg, "format": format });
    let doc = json!({
        "version": rtower::VERSION,
        "config": cfg,
        "format": format,
        "experiment": report.experiment,
        "passed": report.passed,
        "report": report,
    });
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    match format {
        Format::Csv => {
            let path = dir.join("tables.csv");
            let mut buf = format!("# rtower {}\n# config {}\n", rtower::VERSION, serde_json::to_string(&config)?);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&report.columns)?;
            for row in &report.rows {
                w.write_record(row.iter().map(|v| v.to_string()))?;
            }
            buf.push_str(std::str::from_utf8(&w.into_inner()?)?);
            fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        Format::Json => {
            let path = dir.join("tables.json");
            let doc = json!({
                "version": rtower::VERSION,
                "config": cfg,
                "columns": report.columns,
                "rows": report.rows,
            });
            fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn status(dir: &Path, name: &str) -> (&'static str, String) {
    let path = dir.join(name).join("report.json");
    let Ok(text) = fs::read_to_string(&path) else {
        return ("NOT RUN", String::new());
    };
    let Ok(doc) = serde_json::from_str::<Value>(&text) else {
        return ("INVALID", "report.json does not parse".into());
    };
    let tag = match doc["passed"].as_bool() {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "INFO",
    };
    let cfg = &doc["config"];
    let detail = format!(
        "model {}, seed {}, version {}",
        cfg["model"].as_str().unwrap_or("?"),
        cfg["seed"],
        doc["version"].as_str().unwrap_or("?")
    );
    (tag, detail)
}

/// Plain-text status of every experiment under `dir`. Missing or unreadable
/// entries are reported, never fatal.
pub fn dashboard(dir: &Path) -> String {
    let mut out = format!("rtower {} report for {}\n", rtower::VERSION, dir.display());
    let mut counts = [0usize; 3];
    for (name, criterion, title) in EXPERIMENTS {
        let (tag, detail) = status(dir, name);
        let label = match criterion {
            Some(c) => format!("[{c:>2}]"),
            None => "[--]".to_string(),
        };
        if criterion.is_some() {
            match tag {
                "PASS" => counts[0] += 1,
                "FAIL" | "INVALID" => counts[1] += 1,
                _ => counts[2] += 1,
            }
        }
        let _ = write!(out, "{label} {tag:<8} {name:<13} {title}");
        if !detail.is_empty() {
            let _ = write!(out, " ({detail})");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "passed {}, failed {}, not run {}", counts[0], counts[1], counts[2]);
    out
}
