//! Aggregates per-sub-protocol evaluation reports into one table with a
//! mean +/- sample-std footer.

use crate::{AppError, AppResult};
use psmmlab_core::metrics::{format_keyvalue, format_table, parse_keyvalue, EvalReport, SubReport};
use std::fs;
use std::path::Path;

/// Reads `report.kv` files and merges their sub-protocol rows. All rows
/// must belong to one protocol family; duplicate sub-protocols are
/// rejected.
pub fn merge_reports(paths: &[impl AsRef<Path>]) -> AppResult<EvalReport> {
    if paths.is_empty() {
        return Err(AppError::input("no report files given"));
    }
    let mut subs: Vec<SubReport> = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
        let report = parse_keyvalue(&text)
            .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
        for sub in report.subs {
            if subs.iter().any(|s| s.sub_protocol == sub.sub_protocol) {
                return Err(AppError::Input(format!(
                    "sub-protocol {} appears in more than one report",
                    sub.sub_protocol
                )));
            }
            subs.push(sub);
        }
    }
    Ok(EvalReport::from_subs(subs)?)
}

/// The human-readable aggregation. With a single sub-protocol the
/// aggregate footer is replaced by a notice, since a one-point spread
/// is meaningless.
pub fn render(report: &EvalReport) -> String {
    let table = format_table(report);
    if report.subs.len() >= 2 {
        return table;
    }
    let body: String = table
        .lines()
        .take(report.subs.len() + 1)
        .map(|l| format!("{l}\n"))
        .collect();
    format!("{body}# aggregate omitted: only one sub-protocol\n")
}

pub fn run_report(paths: &[impl AsRef<Path>], out: Option<&Path>) -> AppResult<String> {
    let report = merge_reports(paths)?;
    let table = render(&report);
    if let Some(out) = out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut contents = table.clone();
        contents.push_str(&format_keyvalue(&report));
        fs::write(out, contents)?;
    }
    Ok(table)
}
