use std::fmt::Write;

use super::{MetricsReport, Perplexity};

/// One line of the comparison grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub unlearn_success: f64,
    pub unlearn_ppl: Perplexity,
    pub retention_success: f64,
    pub retention_ppl: Perplexity,
    pub avg_success: f64,
    pub general: Option<f64>,
}

impl TableRow {
    pub fn new(name: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            unlearn_success: r.unlearn_success,
            unlearn_ppl: r.unlearn_ppl,
            retention_success: r.retention_success,
            retention_ppl: r.retention_ppl,
            avg_success: r.avg_success,
            general: r.general_proxy_acc,
        }
    }
}

pub const COLUMNS: [&str; 6] = [
    "Unlearn Succ",
    "Unlearn PPL",
    "Retention Succ",
    "Retention PPL",
    "Avg",
    "General",
];

/// Column scores oriented so that larger is better.
fn scores(r: &TableRow) -> [Option<f64>; 6] {
    [
        Some(r.unlearn_success),
        Some(r.unlearn_ppl.mean_bits),
        Some(r.retention_success),
        Some(-r.retention_ppl.mean_bits),
        Some(r.avg_success),
        r.general,
    ]
}

fn cells(r: &TableRow) -> [String; 6] {
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    [
        pct(r.unlearn_success),
        r.unlearn_ppl.render(),
        pct(r.retention_success),
        r.retention_ppl.render(),
        pct(r.avg_success),
        r.general.map_or_else(|| "-".into(), pct),
    ]
}

fn best(rows: &[TableRow]) -> [Option<f64>; 6] {
    let mut out = [None; 6];
    for r in rows {
        for (b, s) in out.iter_mut().zip(scores(r)) {
            if let Some(s) = s {
                *b = Some(b.map_or(s, |x: f64| x.max(s)));
            }
        }
    }
    out
}

/// Fixed-width grid, one row per run; the best value per column is
/// marked with `*`.
pub fn comparison_table(rows: &[TableRow]) -> String {
    let best = best(rows);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.name.clone()];
            for ((cell, s), b) in cells(r).into_iter().zip(scores(r)).zip(best) {
                let mark = if s.is_some() && s == b { "*" } else { "" };
                line.push(format!("{cell}{mark}"));
            }
            line
        })
        .collect();
    let header: Vec<String> = std::iter::once("Method")
        .chain(COLUMNS)
        .map(String::from)
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|l| l[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let emit = |out: &mut String, line: &[String]| {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
    };
    emit(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for l in &body {
        emit(&mut out, l);
    }
    out
}

/// Comma-separated form of the grid with raw (unmarked) values.
pub fn comparison_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method,unlearn_succ,unlearn_ppl,retention_succ,retention_ppl,avg,general\n");
    for r in rows {
        let c = cells(r);
        let name = if r.name.contains([',', '"']) {
            format!("\"{}\"", r.name.replace('"', "\"\""))
        } else {
            r.name.clone()
        };
        let _ = writeln!(out, "{name},{}", c.join(","));
    }
    out
}
