//! Deterministic synthetic dataset generator.
//!
//! Layout: `root/<eth>_<subject>/<pai>_<k>/<modality>/frame_%04d.png`.
//! Each instrument gets a distinct procedural texture family so the
//! classes are learnable from both the static frames and the pooled
//! dynamic images:
//!
//! * real    - smooth low-frequency gradient drifting over time
//! * print   - static mid-frequency weave, no motion at all
//! * replay  - high-frequency grid with a global frame flicker
//! * mask3d  - coarse blocks drifting slowly
//! * silica  - fixed speckle with a slow global pulse
//!
//! 2D subjects are numbered from 1; 3D-attack subjects sit above 500 so
//! they can never collide with the 2D protocol ranges.

use crate::{AppError, AppResult};
use psmmlab_core::protocol::{Ethnicity, Modality, Pai};
use psmmlab_core::seed::rng_for;
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub subjects_per_ethnicity: u32,
    pub frames_per_clip: u32,
    pub side: u32,
    pub seed: u64,
    pub include_3d: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects_per_ethnicity: 2,
            frames_per_clip: 9,
            side: 32,
            seed: 0,
            include_3d: false,
        }
    }
}

/// Offset added to 3D-attack subject numbers; keeps them out of the
/// 1..=500 range the 2D protocols slice.
pub const THREE_D_SUBJECT_BASE: u32 = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub ethnicity: Ethnicity,
    pub subject: u32,
    pub pai: Pai,
    pub sample_index: u32,
    pub modality: Modality,
}

impl ClipPlan {
    pub fn rel_dir(&self) -> String {
        format!(
            "{}_{:03}/{}_{}/{}",
            self.ethnicity.code(),
            self.subject,
            self.pai.name(),
            self.sample_index,
            self.modality.name()
        )
    }
}

/// The full deterministic clip list for a spec, in directory order.
pub fn clip_plan(spec: &SynthSpec) -> Vec<ClipPlan> {
    let mut plans = Vec::new();
    let two_d: [(Pai, u32); 4] =
        [(Pai::Real, 1), (Pai::Print, 1), (Pai::Print, 2), (Pai::Replay, 1)];
    for &ethnicity in &Ethnicity::ALL {
        for subject in 1..=spec.subjects_per_ethnicity {
            for &(pai, sample_index) in &two_d {
                for &modality in &Modality::ALL {
                    plans.push(ClipPlan { ethnicity, subject, pai, sample_index, modality });
                }
            }
        }
        if spec.include_3d {
            for s in 1..=spec.subjects_per_ethnicity {
                let subject = THREE_D_SUBJECT_BASE + s;
                for &(pai, sample_index) in &[(Pai::Mask3d, 1), (Pai::Silica, 1)] {
                    for &modality in &Modality::ALL {
                        plans.push(ClipPlan { ethnicity, subject, pai, sample_index, modality });
                    }
                }
            }
        }
    }
    plans
}

/// Per-clip style constants drawn once from the clip's own stream; the
/// texture is then a pure function of (x, y, t, channel).
struct Style {
    phase_x: f64,
    phase_y: f64,
    speed_x: f64,
    speed_y: f64,
    noise: Vec<f64>,
}

fn style_for(spec: &SynthSpec, plan: &ClipPlan) -> Style {
    let mut rng = rng_for(spec.seed, &format!("synth/{}", plan.rel_dir()));
    let side = spec.side as usize;
    let phase_x = rng.random_range(0.0..TAU);
    let phase_y = rng.random_range(0.0..TAU);
    let speed_x = rng.random_range(0.5..1.5);
    let speed_y = rng.random_range(0.5..1.5);
    let noise = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Style { phase_x, phase_y, speed_x, speed_y, noise }
}

/// Intensity in [0,1] for one pixel of one frame.
fn texel(plan: &ClipPlan, style: &Style, side: u32, x: u32, y: u32, t: u32, channel: u32) -> f64 {
    let s = side as f64;
    let xf = x as f64;
    let yf = y as f64;
    let tf = t as f64;
    // Small, fixed per-modality and per-channel phase offsets keep the
    // three streams distinct without changing the class signature.
    let mo = match plan.modality {
        Modality::Color => 0.0,
        Modality::Depth => 0.7,
        Modality::Ir => 1.4,
    };
    let co = channel as f64 * 0.25;
    let v = match plan.pai {
        Pai::Real => {
            let u = TAU * (xf + style.speed_x * tf) / s + style.phase_x + mo + co;
            let w = TAU * (yf + style.speed_y * tf) / s + style.phase_y + co;
            0.5 + 0.35 * u.sin() * w.sin()
        }
        Pai::Print => {
            let u = TAU * 3.0 * xf / s + style.phase_x + mo + co;
            let w = TAU * 2.0 * yf / s + style.phase_y + co;
            let speckle = style.noise[(y * side + x) as usize];
            0.5 + 0.3 * u.sin() * w.cos() + 0.05 * speckle
        }
        Pai::Replay => {
            let u = TAU * 6.0 * xf / s + style.phase_x + mo + co;
            let w = TAU * 6.0 * yf / s + style.phase_y + co;
            let flicker = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
            0.5 + 0.2 * u.sin() * w.sin() + 0.15 * flicker
        }
        Pai::Mask3d => {
            let bx = (x / 4) as f64 * 4.0;
            let by = (y / 4) as f64 * 4.0;
            let u = TAU * (bx + 0.25 * tf) / s + style.phase_x + mo + co;
            let w = TAU * by / s + style.phase_y + co;
            0.5 + 0.3 * u.sin() * w.cos()
        }
        Pai::Silica => {
            let speckle = style.noise[(y * side + x) as usize];
            let pulse = (TAU * tf / 8.0 + style.phase_x + mo + co).sin();
            0.5 + 0.25 * speckle + 0.1 * pulse
        }
    };
    v.clamp(0.0, 1.0)
}

fn render_frame(plan: &ClipPlan, style: &Style, side: u32, t: u32) -> image::RgbImage {
    image::RgbImage::from_fn(side, side, |x, y| {
        let px = |c: u32| (texel(plan, style, side, x, y, t, c) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn write_clip(root: &Path, spec: &SynthSpec, plan: &ClipPlan) -> AppResult<()> {
    let dir = root.join(plan.rel_dir());
    fs::create_dir_all(&dir)?;
    let style = style_for(spec, plan);
    for t in 0..spec.frames_per_clip {
        let frame = render_frame(plan, &style, spec.side, t);
        let path = dir.join(format!("frame_{t:04}.png"));
        frame
            .save(&path)
            .map_err(|e| AppError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Writes the whole tree; byte-identical for identical specs.
pub fn generate_synthetic(root: &Path, spec: &SynthSpec) -> AppResult<Vec<ClipPlan>> {
    if spec.side < 8 {
        return Err(AppError::input(format!("side {} too small, need at least 8", spec.side)));
    }
    if spec.frames_per_clip < 2 {
        return Err(AppError::input(format!(
            "frames {} too few, need at least 2",
            spec.frames_per_clip
        )));
    }
    if spec.subjects_per_ethnicity == 0 || spec.subjects_per_ethnicity > 500 {
        return Err(AppError::input(format!(
            "subjects per ethnicity must be in 1..=500, got {}",
            spec.subjects_per_ethnicity
        )));
    }
    fs::create_dir_all(root)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", root.display())))?;
    let plans = clip_plan(spec);
    plans
        .par_iter()
        .try_for_each(|plan| write_clip(root, spec, plan))?;
    Ok(plans)
}

/// Reads one stored frame back as a planar [0,1] image.
pub fn load_frame(path: &Path) -> AppResult<psmmlab_core::rankpool::Image> {
    let img = image::open(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    psmmlab_core::rankpool::Image::new(3, h, w, data)
        .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_spec() -> SynthSpec {
        SynthSpec { subjects_per_ethnicity: 1, frames_per_clip: 3, side: 8, seed: 7, include_3d: false }
    }

    #[test]
    fn plan_counts_follow_the_catalog_formula() {
        let mut spec = SynthSpec { subjects_per_ethnicity: 2, ..SynthSpec::default() };
        // 3 ethnicities x 2 subjects x 4 samples = 24 clips per modality.
        let plans = clip_plan(&spec);
        assert_eq!(plans.len(), 24 * 3);
        let per_mod = plans.iter().filter(|p| p.modality == Modality::Color).count();
        assert_eq!(per_mod, 24);

        spec.include_3d = true;
        let with_3d = clip_plan(&spec);
        // Adds 2 subjects x 2 instruments per ethnicity.
        assert_eq!(with_3d.len(), 24 * 3 + 3 * 2 * 2 * 3);
        assert!(with_3d
            .iter()
            .filter(|p| p.pai.is_3d())
            .all(|p| p.subject > THREE_D_SUBJECT_BASE));

        spec.include_3d = false;
        spec.subjects_per_ethnicity = 500;
        let full = clip_plan(&spec);
        assert_eq!(full.iter().filter(|p| p.modality == Modality::Ir).count(), 6000);
        assert_eq!(full.len(), 18000);
    }

    #[test]
    fn generation_is_deterministic_and_loadable() {
        let spec = tiny_spec();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic(dir_a.path(), &spec).unwrap();
        generate_synthetic(dir_b.path(), &spec).unwrap();

        let collect = |root: &Path| -> BTreeMap<String, Vec<u8>> {
            let mut out = BTreeMap::new();
            for entry in walkdir::WalkDir::new(root) {
                let entry = entry.unwrap();
                if entry.file_type().is_file() {
                    let rel = entry.path().strip_prefix(root).unwrap();
                    out.insert(
                        rel.to_string_lossy().into_owned(),
                        std::fs::read(entry.path()).unwrap(),
                    );
                }
            }
            out
        };
        let a = collect(dir_a.path());
        let b = collect(dir_b.path());
        assert_eq!(a.len(), 3 * 4 * 3 * 3, "clips x frames");
        assert_eq!(a, b, "same seed must give a byte-identical tree");

        let one = dir_a.path().join("A_001/real_1/color/frame_0000.png");
        let img = load_frame(&one).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 8, 8));
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn print_clips_are_perfectly_static_and_real_clips_move() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), &spec).unwrap();

        let frame = |rel: &str| load_frame(&dir.path().join(rel)).unwrap();
        let print0 = frame("A_001/print_1/color/frame_0000.png");
        let print1 = frame("A_001/print_1/color/frame_0001.png");
        assert_eq!(print0.data(), print1.data(), "print frames must not move");

        let real0 = frame("A_001/real_1/color/frame_0000.png");
        let real1 = frame("A_001/real_1/color/frame_0001.png");
        assert_ne!(real0.data(), real1.data(), "real frames must move");
    }

    #[test]
    fn bad_specs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.side = 4;
        assert!(generate_synthetic(dir.path(), &spec).is_err());
        let mut spec = tiny_spec();
        spec.frames_per_clip = 1;
        assert!(generate_synthetic(dir.path(), &spec).is_err());
    }
}
