//! Batch construction: reads clips, pools dynamic images, applies
//! augmentation, and packs network-ready tensors.
//!
//! A "group" is one video sample seen across modalities (the clip
//! directories sharing `<eth>_<subject>/<pai>_<k>/`). Labels are
//! attached per group so all modality streams of a sample stay aligned.

use crate::synth::load_frame;
use crate::{AppError, AppResult};
use psmmlab_core::augment::{augment, prepare, AugmentConfig};
use psmmlab_core::metrics::PadLabel;
use psmmlab_core::protocol::{Ethnicity, Manifest, Modality, Pai};
use psmmlab_core::rankpool::{
    dynamic_image, window_starts, Clip, Image, RankPoolConfig,
};
use psmmlab_core::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipGroup {
    /// `<eth>_<subject>/<pai>_<k>`; unique per video sample.
    pub key: String,
    pub label: PadLabel,
    pub pai: Pai,
    pub ethnicity: Ethnicity,
    pub subject: u32,
    /// Relative clip directory per modality.
    pub clips: BTreeMap<Modality, String>,
}

/// Groups manifest rows into per-sample records, ordered by key.
pub fn group_manifest(manifest: &Manifest) -> AppResult<Vec<ClipGroup>> {
    let mut groups: BTreeMap<String, ClipGroup> = BTreeMap::new();
    for row in &manifest.rows {
        let (key, _) = row.rel_path.rsplit_once('/').ok_or_else(|| {
            AppError::Input(format!("manifest path {} has no modality component", row.rel_path))
        })?;
        let entry = groups.entry(key.to_string()).or_insert_with(|| ClipGroup {
            key: key.to_string(),
            label: row.label,
            pai: row.pai,
            ethnicity: row.ethnicity,
            subject: row.subject,
            clips: BTreeMap::new(),
        });
        if entry.label != row.label || entry.pai != row.pai || entry.subject != row.subject {
            return Err(AppError::Input(format!(
                "manifest rows of sample {key} disagree on label or identity"
            )));
        }
        if entry.clips.insert(row.modality, row.rel_path.clone()).is_some() {
            return Err(AppError::Input(format!(
                "manifest lists {} twice",
                row.rel_path
            )));
        }
    }
    Ok(groups.into_values().collect())
}

/// One network input pair before augmentation: the window's first frame
/// and its pooled dynamic image, both resized to the model side.
#[derive(Debug, Clone)]
pub struct Item {
    pub anchor: Image,
    pub dynamic: Image,
}

/// Loads clips and serves (anchor, dynamic image) pairs with a
/// per-(clip, window) cache so each window is pooled exactly once.
pub struct FrameStore {
    root: PathBuf,
    side: usize,
    k: usize,
    pool_cfg: RankPoolConfig,
    items: Mutex<HashMap<(String, usize), Arc<Item>>>,
    lengths: Mutex<HashMap<String, usize>>,
}

impl FrameStore {
    pub fn new(root: &std::path::Path, side: usize, k: usize) -> FrameStore {
        FrameStore {
            root: root.to_path_buf(),
            side,
            k,
            pool_cfg: RankPoolConfig::default(),
            items: Mutex::new(HashMap::new()),
            lengths: Mutex::new(HashMap::new()),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn frame_paths(&self, rel: &str) -> AppResult<Vec<PathBuf>> {
        let dir = self.root.join(rel);
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(&dir)
            .map_err(|e| AppError::Input(format!("cannot read clip {}: {e}", dir.display())))?
        {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("frame_") && name.ends_with(".png") {
                paths.push(entry.path());
            }
        }
        paths.sort();
        if paths.len() < 2 {
            return Err(AppError::Input(format!(
                "clip {} has {} frame(s); at least 2 required",
                dir.display(),
                paths.len()
            )));
        }
        Ok(paths)
    }

    /// Frame count of a clip (cached).
    pub fn clip_len(&self, rel: &str) -> AppResult<usize> {
        if let Some(&n) = self.lengths.lock().unwrap().get(rel) {
            return Ok(n);
        }
        let n = self.frame_paths(rel)?.len();
        self.lengths.lock().unwrap().insert(rel.to_string(), n);
        Ok(n)
    }

    /// Window start offsets for a clip at the given stride.
    pub fn starts(&self, rel: &str, stride: usize) -> AppResult<Vec<usize>> {
        let len = self.clip_len(rel)?;
        Ok(window_starts(len, stride)?)
    }

    fn load_clip(&self, rel: &str) -> AppResult<Clip> {
        let frames = self
            .frame_paths(rel)?
            .iter()
            .map(|p| load_frame(p))
            .collect::<AppResult<Vec<Image>>>()?;
        Clip::new(frames).map_err(|e| AppError::Input(format!("{rel}: {e}")))
    }

    /// The pre-augmentation pair for one clip window.
    pub fn item(&self, rel: &str, start: usize) -> AppResult<Arc<Item>> {
        let key = (rel.to_string(), start);
        if let Some(item) = self.items.lock().unwrap().get(&key) {
            return Ok(item.clone());
        }
        let clip = self.load_clip(rel)?;
        self.lengths.lock().unwrap().insert(rel.to_string(), clip.len());
        let pooled = dynamic_image(&clip, self.k, start, &self.pool_cfg)
            .map_err(|e| AppError::Input(format!("{rel}: {e}")))?;
        if !pooled.converged {
            return Err(AppError::Numerical(format!(
                "rank pooling did not converge on {rel} window {start}"
            )));
        }
        let anchor_index = start.min(clip.len() - 1);
        let item = Arc::new(Item {
            anchor: prepare(clip.frame(anchor_index), self.side),
            dynamic: prepare(&pooled.image, self.side),
        });
        self.items.lock().unwrap().insert(key, item.clone());
        Ok(item)
    }
}

/// How window starts are chosen when batching.
#[derive(Debug, Clone, Copy)]
pub enum WindowRule {
    /// Deterministic pick by index among the stride-spaced starts.
    Pick { stride: usize, index: u64 },
    /// Always the window at offset 0.
    First,
    /// Exactly this start offset.
    Fixed(usize),
}

fn pick_start(store: &FrameStore, rel: &str, rule: WindowRule) -> AppResult<usize> {
    match rule {
        WindowRule::First => Ok(0),
        WindowRule::Fixed(start) => Ok(start),
        WindowRule::Pick { stride, index } => {
            let starts = store.starts(rel, stride)?;
            Ok(starts[(index % starts.len() as u64) as usize])
        }
    }
}

fn image_rows(images: &[Image], side: usize) -> AppResult<Tensor> {
    let n = images.len();
    let per = 3 * side * side;
    let mut data = Vec::with_capacity(n * per);
    for img in images {
        if img.channels() != 3 || img.height() != side || img.width() != side {
            return Err(AppError::Input(format!(
                "expected 3x{side}x{side} image, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[n, 3, side, side], data)
        .map_err(|e| AppError::Input(format!("batch assembly: {e}")))
}

/// A packed batch: per-modality (static, dynamic) tensors plus labels,
/// in the modality order requested.
pub struct Batch {
    pub inputs: Vec<(Modality, Tensor, Tensor)>,
    pub labels: Tensor,
}

/// Assembles one batch. `augmentation` is `(config, seed)`; the same
/// per-sample transform is applied to the anchor and the dynamic image
/// of every modality so the streams stay registered. `window_salt`
/// separates window draws across epochs.
pub fn load_batch(
    store: &FrameStore,
    groups: &[&ClipGroup],
    modalities: &[Modality],
    rule: WindowRule,
    augmentation: Option<(&AugmentConfig, u64)>,
) -> AppResult<Batch> {
    if groups.is_empty() {
        return Err(AppError::input("empty batch"));
    }
    for g in groups {
        for m in modalities {
            if !g.clips.contains_key(m) {
                return Err(AppError::Input(format!(
                    "sample {} lacks the {} stream required by the model",
                    g.key,
                    m.name()
                )));
            }
        }
    }

    // (group, modality) jobs resolved in parallel, order preserved.
    let jobs: Vec<(usize, Modality, &str)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| {
            modalities.iter().map(move |&m| (gi, m, g.clips[&m].as_str()))
        })
        .collect();
    let side = store.side();
    let loaded: Vec<(usize, Modality, Image, Image)> = jobs
        .par_iter()
        .map(|&(gi, m, rel)| {
            let rule = match rule {
                WindowRule::Pick { stride, index } => WindowRule::Pick {
                    stride,
                    // One draw per sample, shared by its modalities.
                    index: index.wrapping_add(gi as u64),
                },
                other => other,
            };
            let start = pick_start(store, rel, rule)?;
            let item = store.item(rel, start)?;
            let (anchor, dynamic) = match augmentation {
                None => (item.anchor.clone(), item.dynamic.clone()),
                Some((cfg, seed)) => {
                    let sample_seed = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(gi as u64);
                    (
                        augment(&item.anchor, cfg, sample_seed),
                        augment(&item.dynamic, cfg, sample_seed),
                    )
                }
            };
            Ok((gi, m, anchor, dynamic))
        })
        .collect::<AppResult<Vec<_>>>()?;

    let mut inputs = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let statics: Vec<Image> = loaded
            .iter()
            .filter(|(_, lm, _, _)| *lm == m)
            .map(|(_, _, a, _)| a.clone())
            .collect();
        let dynamics: Vec<Image> = loaded
            .iter()
            .filter(|(_, lm, _, _)| *lm == m)
            .map(|(_, _, _, d)| d.clone())
            .collect();
        inputs.push((m, image_rows(&statics, side)?, image_rows(&dynamics, side)?));
    }
    let labels: Vec<f64> = groups
        .iter()
        .map(|g| if g.label == PadLabel::BonaFide { 1.0 } else { 0.0 })
        .collect();
    let n = labels.len();
    Ok(Batch {
        inputs,
        labels: Tensor::from_vec(&[n, 1], labels)
            .map_err(|e| AppError::Input(format!("labels: {e}")))?,
    })
}
