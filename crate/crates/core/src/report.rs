//! Rendering of alignment reports and frequency tables: JSON (full
//! precision plus rendered strings), CSV and plain text.
//!
//! Rendered numbers are rounded half-up to two decimals. No timestamps are
//! written into report bodies, so identical inputs give identical bytes.

use std::fmt::Write as _;

use serde_json::{json, Value};

use crate::scoring::{AlignmentReport, FrequencyDistribution};
use crate::taxonomy::{lookup_option, CueCategory};

/// Rounds half away from zero at `decimals` places and formats the result.
///
/// A tolerance of 1e-9 in scaled units absorbs binary representation error,
/// so 0.2475 renders as "0.25" even though its nearest double is slightly
/// below the tie.
pub fn round_half_up(value: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value.abs() * scale;
    let rounded = (scaled + 0.5 + 1e-9).floor();
    let signed = if value < 0.0 && rounded != 0.0 { -rounded } else { rounded };
    format!("{:.*}", decimals as usize, signed / scale)
}

pub fn render_percent(percent: f64) -> String {
    format!("{}%", round_half_up(percent, 2))
}

fn category_label(category: CueCategory) -> &'static str {
    match category {
        CueCategory::Speech => "Speech",
        CueCategory::Action => "Action",
        CueCategory::Face => "Face",
        CueCategory::Emotion => "Emotion",
    }
}

pub fn report_to_json(report: &AlignmentReport) -> Value {
    let categories: Vec<Value> = report
        .categories
        .iter()
        .map(|c| {
            json!({
                "category": c.category.key(),
                "mean": c.mean,
                "sd": c.sd,
                "accuracy_percent": c.accuracy_percent,
                "rendered": {
                    "mean": round_half_up(c.mean, 2),
                    "sd": round_half_up(c.sd, 2),
                    "accuracy": render_percent(c.accuracy_percent),
                }
            })
        })
        .collect();
    json!({
        "n": report.n,
        "categories": categories,
        "total": {
            "mean": report.total.mean,
            "sd": report.total.sd,
            "accuracy_percent": report.total.accuracy_percent,
            "rendered": {
                "mean": round_half_up(report.total.mean, 2),
                "sd": round_half_up(report.total.sd, 2),
                "accuracy": render_percent(report.total.accuracy_percent),
            }
        }
    })
}

/// Columns `category,mean,sd,accuracy_percent`, one row per category and a
/// final `total` row, values rendered to two decimals.
pub fn report_to_csv(report: &AlignmentReport) -> String {
    let mut out = String::from("category,mean,sd,accuracy_percent\n");
    for c in &report.categories {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            c.category.key(),
            round_half_up(c.mean, 2),
            round_half_up(c.sd, 2),
            round_half_up(c.accuracy_percent, 2)
        );
    }
    let t = &report.total;
    let _ = writeln!(
        out,
        "total,{},{},{}",
        round_half_up(t.mean, 2),
        round_half_up(t.sd, 2),
        round_half_up(t.accuracy_percent, 2)
    );
    out
}

/// The summary table: Score, SD and Accuracy rows across the four
/// categories and the total.
pub fn render_alignment_table(report: &AlignmentReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", format!("n={}", report.n));
    for c in CueCategory::ALL {
        let _ = write!(out, "{:>10}", category_label(c));
    }
    let _ = writeln!(out, "{:>10}", "Total");

    let cats = &report.categories;
    let t = &report.total;
    let rows = [
        ("Score", cats.iter().map(|c| round_half_up(c.mean, 2)).collect::<Vec<_>>(), round_half_up(t.mean, 2)),
        ("SD", cats.iter().map(|c| round_half_up(c.sd, 2)).collect(), round_half_up(t.sd, 2)),
        (
            "Accuracy",
            cats.iter().map(|c| render_percent(c.accuracy_percent)).collect(),
            render_percent(t.accuracy_percent),
        ),
    ];
    for (name, cells, total) in &rows {
        let _ = write!(out, "{name:<10}");
        for cell in cells {
            let _ = write!(out, "{cell:>10}");
        }
        let _ = writeln!(out, "{total:>10}");
    }
    out
}

pub fn frequency_to_json(dists: &[FrequencyDistribution]) -> Value {
    Value::Array(
        dists
            .iter()
            .map(|d| {
                let options: Vec<Value> = d
                    .counts
                    .iter()
                    .map(|(&id, &count)| {
                        let proportion = d.proportion(id);
                        json!({
                            "id": id,
                            "label": lookup_option(d.category, id).map(|o| o.label).unwrap_or(""),
                            "count": count,
                            "proportion": proportion,
                            "percent": render_percent(100.0 * proportion),
                        })
                    })
                    .collect();
                json!({
                    "category": d.category.key(),
                    "source": d.source.key(),
                    "total": d.total,
                    "options": options,
                })
            })
            .collect(),
    )
}

/// Columns `category,source,option_id,label,count,percent`.
pub fn frequency_to_csv(dists: &[FrequencyDistribution]) -> String {
    let mut out = String::from("category,source,option_id,label,count,percent\n");
    for d in dists {
        for (&id, &count) in &d.counts {
            let label = lookup_option(d.category, id).map(|o| o.label).unwrap_or("");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                d.category.key(),
                d.source.key(),
                id,
                csv_field(label),
                count,
                round_half_up(100.0 * d.proportion(id), 2)
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const BAR_WIDTH: f64 = 50.0;

/// Horizontal bar chart, one block per category.
pub fn render_frequency_bars(dists: &[FrequencyDistribution]) -> String {
    let mut out = String::new();
    for d in dists {
        let _ = writeln!(out, "{} ({}, n={})", d.category.header(), d.source.key(), d.total);
        for (&id, &count) in &d.counts {
            let label = lookup_option(d.category, id).map(|o| o.label).unwrap_or("");
            let p = d.proportion(id);
            let bar = "#".repeat((p * BAR_WIDTH + 0.5 + 1e-9).floor() as usize);
            let _ = writeln!(out, "  {id:>2} {label:<44} {count:>4} {:>8} {bar}", render_percent(100.0 * p));
        }
        out.push('\n');
    }
    out
}
