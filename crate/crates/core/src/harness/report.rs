//! Markdown rendering of sweep and comparison summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{d_optimal, read_csv, write_atomic, SummaryRow, COMPARE_TABLE_CSV, SWEEP_SUMMARY};
use crate::error::{Error, Result};
use crate::prop1::GridRow;

/// `72.9±2.1` style cell, in percent.
fn pct(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std)
}

struct Column {
    title: &'static str,
    get: fn(&SummaryRow) -> Option<(f64, f64)>,
}

const METRICS: [Column; 4] = [
    Column {
        title: "AUC",
        get: |r| Some((r.auroc_mean, r.auroc_std)),
    },
    Column {
        title: "AP",
        get: |r| Some((r.ap_mean, r.ap_std)),
    },
    Column {
        title: "AP_pix",
        get: |r| r.ap_pix_mean.zip(r.ap_pix_std),
    },
    Column {
        title: "⌈Dice⌉",
        get: |r| r.dice_mean.zip(r.dice_std),
    },
];

/// Metric columns present in every row; pixel metrics drop out without masks.
fn columns(rows: &[SummaryRow]) -> Vec<&'static Column> {
    METRICS.iter().filter(|c| rows.iter().all(|r| (c.get)(r).is_some())).collect()
}

/// Rows of `label | metrics...`, with the best value of each column in bold.
fn metric_table(head: &str, rows: &[SummaryRow], label: impl Fn(&SummaryRow) -> String) -> String {
    let cols = columns(rows);
    let mut s = format!("| {head} |");
    for c in &cols {
        write!(s, " {} |", c.title).unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(cols.len()));
    s.push('\n');
    let best: Vec<f64> = cols
        .iter()
        .map(|c| rows.iter().filter_map(|r| (c.get)(r)).map(|v| v.0).fold(f64::MIN, f64::max))
        .collect();
    for r in rows {
        write!(s, "| {} |", label(r)).unwrap();
        for (c, b) in cols.iter().zip(&best) {
            let (m, sd) = (c.get)(r).expect("column present");
            let cell = pct(m, sd);
            if m == *b {
                write!(s, " **{cell}** |").unwrap();
            } else {
                write!(s, " {cell} |").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

/// Table of the sweep with `d` descending, followed by per-`d` diagnostics.
pub fn sweep_markdown(summary: &[SummaryRow], d_opt: usize) -> String {
    let mut rows = summary.to_vec();
    rows.sort_by(|a, b| b.latent_dim.cmp(&a.latent_dim));
    let repeats = rows.first().map_or(0, |r| r.repeats);
    let mut s = format!("## AE performance by latent dimension d\n\nMean±std over {repeats} repeats, in percent. d_optimal = {d_opt}.\n\n");
    s.push_str(&metric_table("d", &rows, |r| r.latent_dim.to_string()));
    s.push_str("\n### Diagnostics\n\n| d | MSE train normal | MSE test normal | MSE test abnormal | Ĥ(Z) (nats) | ordering holds |\n|---|---:|---:|---:|---:|:---:|\n");
    for r in &rows {
        writeln!(
            s,
            "| {} | {:.6} | {:.6} | {:.6} | {:.2}±{:.2} | {} |",
            r.latent_dim,
            r.mse_train_normal_mean,
            r.mse_test_normal_mean,
            r.mse_test_abnormal_mean,
            r.h_z_mean,
            r.h_z_std,
            if r.ordering_all { "yes" } else { "no" }
        )
        .unwrap();
    }
    s
}

pub fn compare_markdown(rows: &[SummaryRow]) -> String {
    let repeats = rows.first().map_or(0, |r| r.repeats);
    let mut s = format!("## Comparison of anomaly detection methods\n\nMean±std over {repeats} repeats, in percent.\n\n");
    s.push_str(&metric_table("Method", rows, |r| {
        if r.method.contains("d_optimal") {
            format!("{} (d={})", r.method, r.latent_dim)
        } else {
            r.method.clone()
        }
    }));
    s
}

fn prop1_markdown(grid: &[GridRow]) -> String {
    let mut s = String::from(
        "## Bottleneck identity residual\n\n| D | d | d < D/2 | d < D | residual | D − d |\n|---:|---:|:---:|:---:|---:|---:|\n",
    );
    for r in grid {
        writeln!(
            s,
            "| {} | {} | {} | {} | {:.6} | {:.0} |",
            r.big_d,
            r.d,
            if r.half_bound_blocks { "blocks" } else { "" },
            if r.rank_bound_blocks { "blocks" } else { "" },
            r.residual,
            r.closed_form
        )
        .unwrap();
    }
    s
}

/// Collects whatever results exist under `out` into `report.md`. The sweep
/// summary is required.
pub fn cmd_report(sweep_dir: &Path, out: &Path) -> Result<PathBuf> {
    let summary_path = sweep_dir.join(SWEEP_SUMMARY);
    if !summary_path.exists() {
        return Err(Error::MissingArtifact {
            path: summary_path,
            hint: "run `latent-gate sweep` first".into(),
        });
    }
    let summary: Vec<SummaryRow> = read_csv(&summary_path)?;
    let d_opt = d_optimal(&summary).ok_or_else(|| Error::MissingArtifact {
        path: summary_path.clone(),
        hint: "the sweep summary is empty".into(),
    })?;
    let mut s = String::from("# latent-gate report\n\n");
    s.push_str(&sweep_markdown(&summary, d_opt));
    let compare = out.join("compare").join(COMPARE_TABLE_CSV);
    if compare.exists() {
        s.push('\n');
        s.push_str(&compare_markdown(&read_csv::<SummaryRow>(&compare)?));
    }
    let grid = out.join("prop1").join(super::theory::PROP1_GRID);
    if grid.exists() {
        s.push('\n');
        s.push_str(&prop1_markdown(&read_csv::<GridRow>(&grid)?));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("report.md");
    write_atomic(&path, s.as_bytes())?;
    Ok(path)
}
