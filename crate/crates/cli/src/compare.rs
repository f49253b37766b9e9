use std::collections::BTreeSet;
use std::fmt::Write;

use serde::Serialize;
use unlearn_core::eval::{comparison_csv, comparison_table, TableRow};
use unlearn_core::unlearn::{LocalizationMask, Method};

use crate::manifest::LoadedManifest;
use crate::pipeline::RunReport;
use crate::CliError;

pub struct Comparison {
    pub text: String,
    pub csv: String,
    pub rows: Vec<TableRow>,
}

/// Table rows for every report: the runs, or the vanilla model alone when
/// there are none.
pub fn table_rows(reports: &[RunReport]) -> Vec<TableRow> {
    let runs: Vec<_> = reports.iter().filter(|r| r.unlearn.is_some()).collect();
    let pick: Vec<&RunReport> = if runs.is_empty() { reports.iter().collect() } else { runs };
    pick.iter().map(|r| TableRow::new(&r.name, &r.metrics)).collect()
}

/// One table across several manifests. Run names must be unique across
/// them; the vanilla rows are dropped when any run exists.
pub fn compare(manifests: &[LoadedManifest]) -> Result<Comparison, CliError> {
    let mut reports = Vec::new();
    let mut seen = BTreeSet::new();
    for m in manifests {
        for r in m.reports()? {
            if r.unlearn.is_some() && !seen.insert(r.name.clone()) {
                return Err(CliError::NameCollision(r.name));
            }
            reports.push(r);
        }
    }
    let rows = table_rows(&reports);
    Ok(Comparison {
        text: comparison_table(&rows),
        csv: comparison_csv(&rows),
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskView {
    pub run: String,
    pub mask: LocalizationMask,
}

impl MaskView {
    /// Modules by decreasing magnitude.
    pub fn render(&self) -> String {
        let m = &self.mask;
        let mut rows: Vec<_> = m.diagnostics.iter().collect();
        rows.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.module.cmp(&b.module)));
        let width = rows.iter().map(|d| d.module.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "run {}: mu = {:.6}, sigma = {:.6e}", self.run, m.mu, m.sigma);
        if m.fallback {
            let _ = writeln!(out, "threshold rule selected nothing; using top-magnitude module");
        }
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>12}  selected", "module", "cosine", "magnitude");
        for d in rows {
            let line = format!(
                "{:<width$}  {:>9.4}  {:>12.4e}  {}",
                d.module,
                d.cosine,
                d.magnitude,
                if m.selected.contains(&d.module) { "*" } else { "" }
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }
}

/// The localization recorded by a MemFlex run: the named one, or the
/// first in the manifest.
pub fn inspect_mask(manifest: &LoadedManifest, run: Option<&str>) -> Result<MaskView, CliError> {
    let m = &manifest.manifest;
    let record = m
        .runs
        .iter()
        .filter(|r| r.method == Method::MemFlex)
        .find(|r| run.is_none_or(|n| n == r.name))
        .ok_or_else(|| CliError::NoMemFlex(run.map(|n| format!(" named {n:?}")).unwrap_or_default()))?;
    let report = manifest.report(&record.report)?;
    let mask = report
        .unlearn
        .and_then(|u| u.mask)
        .ok_or_else(|| CliError::NoMemFlex(format!(" with a recorded mask ({})", record.name)))?;
    Ok(MaskView {
        run: record.name.clone(),
        mask,
    })
}
