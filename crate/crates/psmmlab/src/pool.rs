//! The `pool` pipeline: materialize dynamic images next to their source
//! clips, one PNG per window under `<clip>/dyn/`.

use crate::catalog::scan_catalog;
use crate::synth::load_frame;
use crate::{AppError, AppResult};
use psmmlab_core::protocol::Modality;
use psmmlab_core::rankpool::{dynamic_image, window_starts, Clip, Image, RankPoolConfig};
use rayon::prelude::*;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PoolSettings {
    pub root: std::path::PathBuf,
    pub k: usize,
    pub stride: usize,
    /// Restrict pooling to these streams; `None` pools everything.
    pub modalities: Option<Vec<Modality>>,
}

fn save_image(img: &Image, path: &Path) -> AppResult<()> {
    let side_err = || {
        AppError::Input(format!(
            "dynamic image for {} is not 3-channel",
            path.display()
        ))
    };
    if img.channels() != 3 {
        return Err(side_err());
    }
    let (h, w) = (img.height(), img.width());
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path)
        .map_err(|e| AppError::Input(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn pool_clip(root: &Path, rel: &str, k: usize, stride: usize) -> AppResult<usize> {
    let dir = root.join(rel);
    let mut frame_paths: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    frame_paths.sort();
    let frames = frame_paths
        .iter()
        .map(|p| load_frame(p))
        .collect::<AppResult<Vec<Image>>>()?;
    let clip = Clip::new(frames).map_err(|e| AppError::Input(format!("{rel}: {e}")))?;
    let out_dir = dir.join("dyn");
    fs::create_dir_all(&out_dir)?;
    let starts = window_starts(clip.len(), stride)
        .map_err(|e| AppError::Input(format!("{rel}: {e}")))?;
    let cfg = RankPoolConfig::default();
    for (i, &start) in starts.iter().enumerate() {
        let pooled = dynamic_image(&clip, k, start, &cfg)
            .map_err(|e| AppError::Input(format!("{rel}: {e}")))?;
        if !pooled.converged {
            return Err(AppError::Numerical(format!(
                "rank pooling did not converge on {rel} window {start}"
            )));
        }
        save_image(&pooled.image, &out_dir.join(format!("dyn_{i:04}.png")))?;
    }
    Ok(starts.len())
}

/// Pools every cataloged clip; returns the number of windows written.
pub fn run_pool(settings: &PoolSettings) -> AppResult<usize> {
    if settings.k < 2 {
        return Err(AppError::input("window length must be at least 2"));
    }
    if settings.stride == 0 {
        return Err(AppError::input("stride must be positive"));
    }
    let catalog = scan_catalog(&settings.root)?;
    let selected: Vec<&str> = catalog
        .iter()
        .filter(|r| {
            settings
                .modalities
                .as_ref()
                .is_none_or(|mods| mods.contains(&r.modality))
        })
        .map(|r| r.rel_path.as_str())
        .collect();
    let counts = selected
        .par_iter()
        .map(|rel| pool_clip(&settings.root, rel, settings.k, settings.stride))
        .collect::<AppResult<Vec<usize>>>()?;
    Ok(counts.iter().sum())
}
