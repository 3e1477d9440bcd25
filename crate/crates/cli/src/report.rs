//! Metric and stage report files (JSON + CSV) and comparison tables.

use anyhow::{Context, Result};
use std::path::Path;
use tsvos_core::metrics::MetricReport;
use tsvos_core::trainer::StageReport;

pub fn save_metric_report(report: &MetricReport, json_path: &Path) -> Result<()> {
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(json_path, serde_json::to_string_pretty(report)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let csv_path = json_path.with_extension("csv");
    std::fs::write(&csv_path, report.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))
}

pub fn load_metric_report(path: &Path) -> Result<MetricReport> {
    let json = std::fs::read_to_string(path)
        .with_context(|| format!("reading report {}", path.display()))?;
    serde_json::from_str(&json).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_stage_report(report: &StageReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Markdown comparison table over named reports, mirroring the standard
/// column order (J&F, J, F, DSC, HD).
pub fn comparison_table(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("| method | J&F | J | F | DSC | HD |\n|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2} |\n",
            name, r.mean.jf, r.mean.j, r.mean.f, r.mean.dsc, r.mean.hd
        ));
    }
    s
}

pub fn comparison_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from("method,JF,J,F,DSC,HD\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            name, r.mean.jf, r.mean.j, r.mean.f, r.mean.dsc, r.mean.hd
        ));
    }
    s
}
