//! Scans a dataset root back into clip records.
//!
//! Expected layout (three directory levels under the root):
//! `<eth>_<subject>/<pai>_<k>/<modality>/frame_%04d.png`. A `dyn/`
//! subfolder inside a modality directory holds pooled dynamic images
//! and is ignored by the scan.

use crate::{AppError, AppResult};
use psmmlab_core::protocol::{ClipRecord, Ethnicity, Modality, Pai};
use std::fs;
use std::path::Path;

fn dir_entries(path: &Path) -> AppResult<Vec<(String, bool)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        out.push((name, entry.file_type()?.is_dir()));
    }
    out.sort();
    Ok(out)
}

fn split_tag(name: &str) -> Option<(&str, &str)> {
    name.rsplit_once('_')
}

fn parse_subject_dir(name: &str) -> Option<(Ethnicity, u32)> {
    let (code, num) = split_tag(name)?;
    let ethnicity = Ethnicity::from_code(code)?;
    let subject: u32 = num.parse().ok()?;
    if subject == 0 {
        return None;
    }
    Some((ethnicity, subject))
}

fn parse_sample_dir(name: &str) -> Option<(Pai, u32)> {
    let (pai, num) = split_tag(name)?;
    let pai = Pai::from_name(pai)?;
    let sample_index: u32 = num.parse().ok()?;
    Some((pai, sample_index))
}

fn count_frames(dir: &Path) -> AppResult<u32> {
    let mut n = 0;
    for (name, is_dir) in dir_entries(dir)? {
        if is_dir {
            if name == "dyn" {
                continue;
            }
            return Err(AppError::Input(format!(
                "unexpected directory {} inside clip {}",
                name,
                dir.display()
            )));
        }
        if name.starts_with("frame_") && name.ends_with(".png") {
            n += 1;
        }
    }
    Ok(n)
}

/// One record per clip directory, ordered by relative path. Clips with
/// fewer than two frames are rejected up front so later stages can rely
/// on every clip supporting a dynamic image.
pub fn scan_catalog(root: &Path) -> AppResult<Vec<ClipRecord>> {
    let mut records = Vec::new();
    if !root.is_dir() {
        return Err(AppError::Input(format!("dataset root {} is not a directory", root.display())));
    }
    for (subject_dir, is_dir) in dir_entries(root)? {
        if !is_dir || subject_dir.starts_with('.') {
            continue;
        }
        let (ethnicity, subject) = parse_subject_dir(&subject_dir).ok_or_else(|| {
            AppError::Input(format!("malformed subject directory {}", root.join(&subject_dir).display()))
        })?;
        let subject_path = root.join(&subject_dir);
        for (sample_dir, is_dir) in dir_entries(&subject_path)? {
            if !is_dir || sample_dir.starts_with('.') {
                continue;
            }
            let (pai, sample_index) = parse_sample_dir(&sample_dir).ok_or_else(|| {
                AppError::Input(format!(
                    "malformed sample directory {}",
                    subject_path.join(&sample_dir).display()
                ))
            })?;
            let sample_path = subject_path.join(&sample_dir);
            for (modality_dir, is_dir) in dir_entries(&sample_path)? {
                if !is_dir || modality_dir.starts_with('.') {
                    continue;
                }
                let modality = Modality::from_name(&modality_dir).ok_or_else(|| {
                    AppError::Input(format!(
                        "malformed modality directory {}",
                        sample_path.join(&modality_dir).display()
                    ))
                })?;
                let clip_path = sample_path.join(&modality_dir);
                let frame_count = count_frames(&clip_path)?;
                if frame_count < 2 {
                    return Err(AppError::Input(format!(
                        "clip {} has {frame_count} frame(s); at least 2 required",
                        clip_path.display()
                    )));
                }
                records.push(ClipRecord {
                    rel_path: format!("{subject_dir}/{sample_dir}/{modality_dir}"),
                    ethnicity,
                    subject,
                    pai,
                    sample_index,
                    modality,
                    frame_count,
                });
            }
        }
    }
    records.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    Ok(records)
}
