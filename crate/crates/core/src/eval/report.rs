use std::fmt::Write as _;
use std::path::Path;

use super::RecallReport;
use crate::error::{Error, Result};

/// Header plus string rows, ready for CSV output.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Argument(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Head-to-tail order: descending count, ties by class id.
fn head_to_tail(report: &RecallReport) -> Vec<usize> {
    let mut order: Vec<usize> = (0..report.num_classes()).collect();
    order.sort_by(|&a, &b| {
        report.per_class[b]
            .count
            .cmp(&report.per_class[a].count)
            .then(a.cmp(&b))
    });
    order
}

/// One row per class (head to tail) with its count, frequency, and a
/// `R@K_<constraint>` column per K of every report.
///
/// All reports must come from the same episodes.
pub fn per_class_table(reports: &[RecallReport]) -> Result<Table> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Argument("per_class_table needs at least one report".into()))?;
    for r in reports {
        if r.num_classes() != first.num_classes() || r.num_pairs != first.num_pairs {
            return Err(Error::Argument("reports cover different episodes".into()));
        }
    }
    let mut header = vec!["class_id".to_string(), "count".to_string(), "freq".to_string()];
    for r in reports {
        for k in &r.k_values {
            header.push(format!("R@{k}_{}", r.constraint.short()));
        }
    }
    let rows = head_to_tail(first)
        .into_iter()
        .map(|c| {
            let pc = &first.per_class[c];
            let freq = if first.num_pairs == 0 {
                0.0
            } else {
                pc.count as f64 / first.num_pairs as f64
            };
            let mut row = vec![c.to_string(), pc.count.to_string(), format!("{freq:.6}")];
            for r in reports {
                row.extend(r.per_class[c].recall.iter().map(|v| fmt_opt(*v)));
            }
            row
        })
        .collect();
    Ok(Table { header, rows })
}

const BAR_WIDTH: f64 = 24.0;
const GAP: f64 = 8.0;
const PLOT_HEIGHT: f64 = 200.0;
const MARGIN: f64 = 40.0;

/// SVG with one bar pair per occurring class, head to tail: a light bar for
/// relative occurrence and a dark bar for Recall@K at the report's first K.
pub fn render_bar_chart(report: &RecallReport) -> Result<String> {
    let classes: Vec<usize> = head_to_tail(report)
        .into_iter()
        .filter(|&c| report.per_class[c].count > 0)
        .collect();
    if classes.is_empty() {
        return Err(Error::Argument("report has no occurring classes to plot".into()));
    }
    let k = report.k_values[0];
    let max_count = classes
        .iter()
        .map(|&c| report.per_class[c].count)
        .max()
        .expect("non-empty") as f64;
    let width = 2.0 * MARGIN + classes.len() as f64 * (BAR_WIDTH + GAP);
    let height = PLOT_HEIGHT + 2.0 * MARGIN;
    let base = MARGIN + PLOT_HEIGHT;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN:.0}" y="20" font-family="sans-serif" font-size="12">R@{k} ({}) by class, head to tail</text>"#,
        report.constraint
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN:.0}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="black"/>"#,
        width - MARGIN
    );
    for (i, &c) in classes.iter().enumerate() {
        let pc = &report.per_class[c];
        let x = MARGIN + i as f64 * (BAR_WIDTH + GAP);
        let occ = PLOT_HEIGHT * pc.count as f64 / max_count;
        let rec = PLOT_HEIGHT * pc.recall[0].unwrap_or(0.0);
        let _ = writeln!(
            s,
            r##"<rect class="occurrence" x="{x:.2}" y="{:.2}" width="{BAR_WIDTH:.2}" height="{occ:.2}" fill="#cccccc"/>"##,
            base - occ
        );
        let _ = writeln!(
            s,
            r##"<rect class="recall" data-class="{c}" x="{:.2}" y="{:.2}" width="{:.2}" height="{rec:.2}" fill="#1f4e79"/>"##,
            x + BAR_WIDTH / 4.0,
            base - rec,
            BAR_WIDTH / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="9" text-anchor="middle">{c}</text>"#,
            x + BAR_WIDTH / 2.0,
            base + 12.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes [`render_bar_chart`] output to `path`.
pub fn bar_chart_svg(report: &RecallReport, path: &Path) -> Result<()> {
    let svg = render_bar_chart(report)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
