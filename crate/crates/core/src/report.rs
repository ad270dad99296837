//! CSV and SVG rendering of an [`ExperimentReport`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{ConditionResult, ExperimentReport};
use crate::io::write_atomic;

pub const TABLE_FILE: &str = "table.csv";

/// One row per condition: `name,n,id_count,ood_count`.
pub fn table_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("name,n,id_count,ood_count\n");
    for c in &report.conditions {
        let _ = writeln!(out, "{},{},{},{}", c.key(), c.n, c.id_count, c.ood_count);
    }
    out
}

pub fn histogram_csv(c: &ConditionResult) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in c.histogram.counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{}",
            c.histogram.edges[i],
            c.histogram.edges[i + 1],
            count
        );
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const MARGIN: f64 = 40.0;

/// A static bar chart of one condition's p-value histogram.
pub fn histogram_svg(c: &ConditionResult) -> String {
    let counts = &c.histogram.counts;
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bar_w = plot_w / counts.len().max(1) as f64;
    let base = H - MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(&c.key())
    );
    for (i, &n) in counts.iter().enumerate() {
        let h = n as f64 / max * plot_h;
        let x = MARGIN + i as f64 * bar_w;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4a7ab5"><title>{n}</title></rect>"##,
            base - h,
            (bar_w - 1.0).max(0.5),
        );
    }
    // axes
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#
    );
    for (label, x) in [
        ("0", MARGIN),
        ("0.5", MARGIN + plot_w / 2.0),
        ("1", W - MARGIN),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            base + 15.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0,
        max as usize
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">p-value</text>"#,
        W / 2.0,
        H - 8.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// File stem for a condition, e.g. `hist_last_leaky_relu_gaussian_0.02`.
pub fn histogram_stem(c: &ConditionResult) -> String {
    let raw = format!("hist_{}_{}", c.layer, c.name);
    raw.chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || matches!(ch, '.' | '_' | '-') {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes the table and one histogram file per condition into `out_dir`,
/// creating it if needed. Returns the written paths in order.
pub fn write_report(report: &ExperimentReport, out_dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let table = out_dir.join(TABLE_FILE);
    write_atomic(&table, table_csv(report).as_bytes())?;
    written.push(table);
    let mut seen = std::collections::HashSet::new();
    for c in &report.conditions {
        let stem = histogram_stem(c);
        if !seen.insert(stem.clone()) {
            return Err(Error::InvalidArtifact(format!(
                "duplicate condition {}",
                c.key()
            )));
        }
        let csv = out_dir.join(format!("{stem}.csv"));
        write_atomic(&csv, histogram_csv(c).as_bytes())?;
        written.push(csv);
        if svg {
            let path = out_dir.join(format!("{stem}.svg"));
            write_atomic(&path, histogram_svg(c).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
