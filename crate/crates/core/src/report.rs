//! Report artifacts: metric tables, reliability tables, per-image scatter
//! data, and the SVG reliability diagram.
//!
//! Floats are written with Rust's shortest round-trip formatting, so the
//! files are byte-stable and parse back to identical values.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{MetricRow, ReliabilityTable};

pub const METRICS_HEADER: &str = "method,dsc,mcc,ece,brier,nll";
pub const RELIABILITY_HEADER: &str = "bin_lo,bin_hi,mean_conf,accuracy,count";
pub const PER_IMAGE_HEADER: &str = "image,dice,ece";

pub fn metrics_csv(rows: &[(String, MetricRow)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{method},{},{},{},{},{}",
            r.dsc, r.mcc, r.ece, r.brier, r.nll
        );
    }
    out
}

pub fn reliability_csv(table: &ReliabilityTable) -> String {
    let mut out = format!("{RELIABILITY_HEADER}\n");
    for b in &table.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.confidence_lo, b.confidence_hi, b.mean_confidence, b.accuracy, b.count
        );
    }
    out
}

/// One `image,dice,ece` line per test image.
pub fn per_image_csv(names: &[String], rows: &[MetricRow]) -> Result<String> {
    if names.len() != rows.len() {
        return Err(Error::Dimension(format!(
            "{} image names for {} rows",
            names.len(),
            rows.len()
        )));
    }
    let mut out = format!("{PER_IMAGE_HEADER}\n");
    for (n, r) in names.iter().zip(rows) {
        let _ = writeln!(out, "{n},{},{}", r.dsc, r.ece);
    }
    Ok(out)
}

/// Markdown table with the metric directions in the header.
pub fn metrics_markdown(rows: &[(String, MetricRow)]) -> String {
    let mut out = String::from("| Method | DSC ↑ | MCC ↑ | ECE ↓ | BS ↓ | NLL ↓ |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (m, r) in rows {
        let _ = writeln!(
            out,
            "| {m} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.dsc, r.mcc, r.ece, r.brier, r.nll
        );
    }
    out
}

fn csv_lines<'a>(text: &'a str, header: &str, origin: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if first != header {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 0,
            message: format!("header {first:?}, expected {header:?}"),
        });
    }
    let width = header.split(',').count();
    let mut offset = first.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        if !line.is_empty() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::Format {
                    path: origin.to_string(),
                    offset,
                    message: format!("{} fields, expected {width}", cells.len()),
                });
            }
            out.push((offset, cells));
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

fn parse_cell<T: std::str::FromStr>(cell: &str, origin: &str, offset: usize) -> Result<T> {
    cell.parse().map_err(|_| Error::Format {
        path: origin.to_string(),
        offset,
        message: format!("bad number {cell:?}"),
    })
}

pub fn parse_metrics_csv(text: &str, origin: &str) -> Result<Vec<(String, MetricRow)>> {
    csv_lines(text, METRICS_HEADER, origin)?
        .into_iter()
        .map(|(off, c)| {
            let f = |i: usize| parse_cell::<f64>(c[i], origin, off);
            Ok((
                c[0].to_string(),
                MetricRow {
                    dsc: f(1)?,
                    mcc: f(2)?,
                    ece: f(3)?,
                    brier: f(4)?,
                    nll: f(5)?,
                },
            ))
        })
        .collect()
}

pub fn parse_reliability_csv(text: &str, origin: &str) -> Result<ReliabilityTable> {
    let bins = csv_lines(text, RELIABILITY_HEADER, origin)?
        .into_iter()
        .map(|(off, c)| {
            let f = |i: usize| parse_cell::<f64>(c[i], origin, off);
            Ok(crate::metrics::ReliabilityBin {
                confidence_lo: f(0)?,
                confidence_hi: f(1)?,
                mean_confidence: f(2)?,
                accuracy: f(3)?,
                count: parse_cell(c[4], origin, off)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReliabilityTable { bins })
}

const SVG_SIZE: f64 = 320.0;
const SVG_MARGIN: f64 = 40.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Reliability diagram over the confidence range `[0.5, 1]`: one `<rect>`
/// per bin (height = accuracy) and one dashed `<path>` for the diagonal
/// of perfect calibration. Axes are drawn with `<line>` elements.
pub fn reliability_svg(table: &ReliabilityTable, title: &str) -> String {
    let plot = SVG_SIZE - 2.0 * SVG_MARGIN;
    let lo = table.bins.first().map_or(0.5, |b| b.confidence_lo);
    let hi = table.bins.last().map_or(1.0, |b| b.confidence_hi);
    let sx = |c: f64| SVG_MARGIN + (c - lo) / (hi - lo) * plot;
    let sy = |a: f64| SVG_SIZE - SVG_MARGIN - (a - lo) / (hi - lo) * plot;
    let base = SVG_SIZE - SVG_MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(
        out,
        r#"  <text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        SVG_SIZE / 2.0,
        xml_escape(title)
    );
    for b in &table.bins {
        let (x0, x1) = (sx(b.confidence_lo), sx(b.confidence_hi));
        let top = if b.count == 0 {
            base
        } else {
            sy(b.accuracy.max(lo))
        };
        let _ = writeln!(
            out,
            r##"  <rect x="{x0:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="#4c72b0" stroke="#1f2f4f" data-count="{}"/>"##,
            x1 - x0,
            base - top,
            b.count
        );
    }
    let _ = writeln!(
        out,
        r##"  <path d="M {:.3} {:.3} L {:.3} {:.3}" stroke="#c44e52" stroke-dasharray="4 3" fill="none"/>"##,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    let _ = writeln!(
        out,
        r#"  <line x1="{SVG_MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        SVG_SIZE - SVG_MARGIN
    );
    let _ = writeln!(
        out,
        r#"  <line x1="{SVG_MARGIN}" y1="{SVG_MARGIN}" x2="{SVG_MARGIN}" y2="{base}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"  <text x="{}" y="{}" text-anchor="middle" font-size="11">confidence ({lo} to {hi})</text>"#,
        SVG_SIZE / 2.0,
        SVG_SIZE - 10.0
    );
    let _ = writeln!(
        out,
        r#"  <text x="12" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {})">accuracy</text>"#,
        SVG_SIZE / 2.0,
        SVG_SIZE / 2.0
    );
    out.push_str("</svg>\n");
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
