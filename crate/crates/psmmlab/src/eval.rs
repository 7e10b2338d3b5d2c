//! Evaluation: restore a checkpoint, score videos, pick a threshold,
//! and emit the score file plus machine- and human-readable reports.
//!
//! A video's score is the mean sigmoid of the scoring logit over all of
//! its stride-spaced windows, evaluated without augmentation.

use crate::catalog::scan_catalog;
use crate::ckpt::{load, restore_model};
use crate::loader::{group_manifest, load_batch, ClipGroup, FrameStore, WindowRule};
use crate::model::{Model, Variant};
use crate::train::resolve_protocol;
use crate::{AppError, AppResult};
use psmmlab_core::graph::Mode;
use psmmlab_core::metrics::{
    eer, format_keyvalue, format_table, sub_report, ApcerMode, EvalReport, PadLabel, ScoredSample,
};
use psmmlab_core::protocol::{Manifest, Split, SplitOptions};
use psmmlab_core::sdnet::Preset;
use std::fs;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub root: PathBuf,
    pub protocol: String,
    pub protocol_table: Option<PathBuf>,
    pub include_3d: bool,
    pub checkpoint: PathBuf,
    /// Optional cross-checks against the checkpoint metadata.
    pub expect_variant: Option<Variant>,
    pub expect_preset: Option<Preset>,
    /// Split whose metrics are reported.
    pub split: Split,
    /// Fixed decision threshold; otherwise derived at the EER of
    /// `threshold_split`.
    pub threshold: Option<f64>,
    pub threshold_split: Split,
    pub stride: Option<usize>,
    pub worst_pai: bool,
    pub out: PathBuf,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub threshold: f64,
    pub score_path: PathBuf,
    pub report_kv_path: PathBuf,
    pub report_table_path: PathBuf,
}

/// One scored video.
#[derive(Debug, Clone)]
pub struct VideoScore {
    pub key: String,
    pub score: f64,
    pub label: PadLabel,
    pub pai: String,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scores every group of a manifest: mean window sigmoid per video.
pub fn score_manifest(
    model: &mut Model,
    store: &FrameStore,
    manifest: &Manifest,
    stride: usize,
) -> AppResult<Vec<VideoScore>> {
    let groups = group_manifest(manifest)?;
    let modalities = model.modalities();
    let logit_id = model.score_logit();
    let mut out = Vec::with_capacity(groups.len());
    for group in &groups {
        // Streams can disagree in length; use starts valid everywhere.
        let mut starts: Option<Vec<usize>> = None;
        for m in &modalities {
            let rel = group.clips.get(m).ok_or_else(|| {
                AppError::Input(format!(
                    "sample {} lacks the {} stream required by the model",
                    group.key,
                    m.name()
                ))
            })?;
            let s = store.starts(rel, stride)?;
            starts = Some(match starts {
                None => s,
                Some(prev) => {
                    let keep = prev.len().min(s.len());
                    prev[..keep].to_vec()
                }
            });
        }
        let starts = starts.unwrap_or_default();
        if starts.is_empty() {
            return Err(AppError::Input(format!("sample {} has no windows", group.key)));
        }

        let mut sum = 0.0;
        for &start in &starts {
            let refs: Vec<&ClipGroup> = vec![group];
            let batch = load_batch(
                store,
                &refs,
                &modalities,
                WindowRule::Fixed(start),
                None,
            )?;
            model.forward_batch(&batch, Mode::Eval)?;
            let logits = model
                .graph()
                .value(logit_id)
                .ok_or_else(|| AppError::input("scoring logit has no value"))?;
            let z = logits.data()[0];
            if !z.is_finite() {
                return Err(AppError::Numerical(format!(
                    "non-finite logit while scoring {}",
                    group.key
                )));
            }
            sum += sigmoid(z);
        }
        out.push(VideoScore {
            key: group.key.clone(),
            score: sum / starts.len() as f64,
            label: group.label,
            pai: group.pai.name().to_string(),
        });
    }
    Ok(out)
}

fn to_samples(scores: &[VideoScore]) -> Vec<ScoredSample> {
    scores
        .iter()
        .map(|v| ScoredSample::with_pai(v.score, v.label, &v.pai))
        .collect()
}

/// `path score label sub_protocol` rows; label 1 is bona fide.
pub fn render_scores(scores: &[VideoScore], sub_protocol: &str) -> String {
    let mut out = String::new();
    for v in scores {
        let label = if v.label == PadLabel::BonaFide { 1 } else { 0 };
        out.push_str(&format!("{} {} {} {}\n", v.key, v.score, label, sub_protocol));
    }
    out
}

pub fn run_eval(settings: &EvalSettings) -> AppResult<EvalOutcome> {
    let spec = resolve_protocol(settings.protocol_table.as_deref(), &settings.protocol)?;
    let catalog = scan_catalog(&settings.root)?;
    if catalog.is_empty() {
        return Err(AppError::Input(format!(
            "no clips found under {}",
            settings.root.display()
        )));
    }
    let split =
        protocol_split_all(&catalog, &spec, settings.include_3d)?;

    let loaded = load(&settings.checkpoint)?;
    let mut model = restore_model(
        &loaded,
        settings.expect_variant,
        settings.expect_preset,
        None,
    )?;
    let k: usize = loaded
        .meta("k")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| AppError::Incompatible("checkpoint lacks a window length entry".into()))?;
    let stride = settings.stride.unwrap_or(k);
    let store = FrameStore::new(&settings.root, model.preset().input_side(), k);

    let manifest_of = |s: Split| match s {
        Split::Train => &split.train,
        Split::Valid => &split.valid,
        Split::Test => &split.test,
    };
    let target = manifest_of(settings.split);
    if target.is_empty() {
        return Err(AppError::Input(format!(
            "protocol {} has no {} clips in this dataset",
            spec.id(),
            settings.split.name()
        )));
    }
    let scores = score_manifest(&mut model, &store, target, stride)?;

    let threshold = match settings.threshold {
        Some(t) => t,
        None => {
            let source = manifest_of(settings.threshold_split);
            if source.is_empty() {
                return Err(AppError::Input(format!(
                    "cannot derive a threshold: the {} split is empty; pass an explicit threshold",
                    settings.threshold_split.name()
                )));
            }
            let threshold_scores = if settings.threshold_split == settings.split {
                scores.clone()
            } else {
                score_manifest(&mut model, &store, source, stride)?
            };
            eer(&to_samples(&threshold_scores))?.threshold
        }
    };

    let samples = to_samples(&scores);
    let mode = if settings.worst_pai { ApcerMode::WorstPai } else { ApcerMode::Pooled };
    let sub = sub_report(&spec.id(), &samples, threshold, &[1e-2, 1e-3, 1e-4], mode)?;
    let report = EvalReport::from_subs(vec![sub])?;

    fs::create_dir_all(&settings.out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", settings.out.display())))?;
    let score_path = settings.out.join(format!("scores_{}.txt", settings.split.name()));
    fs::write(&score_path, render_scores(&scores, &spec.id()))?;
    let report_kv_path = settings.out.join("report.kv");
    fs::write(&report_kv_path, format_keyvalue(&report))?;
    let report_table_path = settings.out.join("report.txt");
    fs::write(&report_table_path, format_table(&report))?;

    Ok(EvalOutcome { report, threshold, score_path, report_kv_path, report_table_path })
}

fn protocol_split_all(
    catalog: &[psmmlab_core::protocol::ClipRecord],
    spec: &psmmlab_core::protocol::ProtocolSpec,
    include_3d: bool,
) -> AppResult<psmmlab_core::protocol::ProtocolSplit> {
    Ok(psmmlab_core::protocol::protocol_split(
        catalog,
        spec,
        &SplitOptions { include_3d },
    )?)
}

/// Parses a score file back into samples (used by tests and tooling).
pub fn parse_scores(text: &str) -> AppResult<Vec<(String, f64, PadLabel, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(AppError::Input(format!("score line {} malformed: {line:?}", i + 1)));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| AppError::Input(format!("bad score on line {}", i + 1)))?;
        let label = match fields[2] {
            "1" => PadLabel::BonaFide,
            "0" => PadLabel::Attack,
            other => {
                return Err(AppError::Input(format!("bad label {other:?} on line {}", i + 1)))
            }
        };
        out.push((fields[0].to_string(), score, label, fields[3].to_string()));
    }
    Ok(out)
}
