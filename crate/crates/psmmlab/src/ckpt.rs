//! Checkpoint directories: `index.txt` + `weights.bin`, as produced by
//! the core encoder. Metadata lines carry the model configuration so an
//! evaluation run can rebuild the right network.

use crate::model::{Model, Variant};
use crate::{AppError, AppResult};
use psmmlab_core::checkpoint::{self, CheckpointIndex};
use psmmlab_core::protocol::Modality;
use psmmlab_core::sdnet::{NormMode, Preset};
use std::fs;
use std::path::Path;

pub const INDEX_FILE: &str = "index.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Writes `dir/index.txt` and `dir/weights.bin`. Purely a function of
/// the graph parameters and the metadata, so identical runs produce
/// byte-identical files.
pub fn save(dir: &Path, model: &Model, extra_meta: &[(&str, &str)]) -> AppResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", dir.display())))?;
    let modalities = model
        .modalities()
        .iter()
        .map(|m| m.name())
        .collect::<Vec<_>>()
        .join(",");
    let norm = match model {
        Model::Sd(net) => net.config.norm,
        Model::Psmm(net) => net.config.norm,
    };
    let norm = match norm {
        NormMode::Batch => "batch",
        NormMode::None => "none",
    };
    let mut meta: Vec<(&str, &str)> = vec![
        ("variant", model.variant().name()),
        ("preset", model.preset().name()),
        ("modalities", &modalities),
        ("norm", norm),
    ];
    meta.extend_from_slice(extra_meta);
    let (index, blob) = checkpoint::export_graph(model.graph(), &meta);
    fs::write(dir.join(INDEX_FILE), index)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub index: CheckpointIndex,
    pub blob: Vec<u8>,
}

impl LoadedCheckpoint {
    pub fn variant(&self) -> AppResult<Variant> {
        let name = self
            .index
            .meta_value("variant")
            .ok_or_else(|| AppError::Incompatible("checkpoint lacks a variant entry".into()))?;
        Variant::from_name(name)
            .ok_or_else(|| AppError::Incompatible(format!("unknown checkpoint variant {name:?}")))
    }

    pub fn preset(&self) -> AppResult<Preset> {
        let name = self
            .index
            .meta_value("preset")
            .ok_or_else(|| AppError::Incompatible("checkpoint lacks a preset entry".into()))?;
        Preset::from_name(name)
            .ok_or_else(|| AppError::Incompatible(format!("unknown checkpoint preset {name:?}")))
    }

    pub fn modalities(&self) -> AppResult<Vec<Modality>> {
        let list = self
            .index
            .meta_value("modalities")
            .ok_or_else(|| AppError::Incompatible("checkpoint lacks a modalities entry".into()))?;
        let mut out = Vec::new();
        for part in list.split(',') {
            out.push(Modality::from_name(part).ok_or_else(|| {
                AppError::Incompatible(format!("unknown checkpoint modality {part:?}"))
            })?);
        }
        Ok(out)
    }

    pub fn norm(&self) -> AppResult<NormMode> {
        match self.index.meta_value("norm") {
            Some("batch") | None => Ok(NormMode::Batch),
            Some("none") => Ok(NormMode::None),
            Some(other) => {
                Err(AppError::Incompatible(format!("unknown checkpoint norm mode {other:?}")))
            }
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.index.meta_value(key)
    }
}

pub fn load(dir: &Path) -> AppResult<LoadedCheckpoint> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", index_path.display())))?;
    let index = checkpoint::parse_index(&text)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", weights_path.display())))?;
    Ok(LoadedCheckpoint { index, blob })
}

/// Rebuilds the model a checkpoint describes and installs its weights.
/// Any explicit expectation that disagrees with the stored metadata is
/// an artifact-compatibility error.
pub fn restore_model(
    loaded: &LoadedCheckpoint,
    expect_variant: Option<Variant>,
    expect_preset: Option<Preset>,
    expect_modalities: Option<&[Modality]>,
) -> AppResult<Model> {
    let variant = loaded.variant()?;
    let preset = loaded.preset()?;
    let modalities = loaded.modalities()?;
    let norm = loaded.norm()?;
    if let Some(v) = expect_variant {
        if v != variant {
            return Err(AppError::Incompatible(format!(
                "checkpoint was trained as {}, requested {}",
                variant.name(),
                v.name()
            )));
        }
    }
    if let Some(p) = expect_preset {
        if p != preset {
            return Err(AppError::Incompatible(format!(
                "checkpoint uses preset {}, requested {}",
                preset.name(),
                p.name()
            )));
        }
    }
    if let Some(mods) = expect_modalities {
        let mut want = mods.to_vec();
        want.sort();
        if want != modalities {
            return Err(AppError::Incompatible(
                "checkpoint modalities differ from the requested set".into(),
            ));
        }
    }
    // Weight import overwrites everything, so the init seed is moot.
    let mut model = Model::build(variant, preset, &modalities, norm, 0)?;
    checkpoint::import_graph(model.graph_mut(), &loaded.index, &loaded.blob)?;
    Ok(model)
}
