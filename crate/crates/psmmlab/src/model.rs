//! A uniform handle over the two network families so train/eval code
//! does not branch on the variant everywhere.

use crate::loader::Batch;
use crate::{AppError, AppResult};
use psmmlab_core::graph::{Graph, Mode, NodeId};
use psmmlab_core::protocol::Modality;
use psmmlab_core::psmm::{build_psmm, PsmmConfig, PsmmNet, PsmmVariant};
use psmmlab_core::sdnet::{build_sd_net, NormMode, Preset, SdNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Psmm,
    PsmmWobf,
    Nhf,
    SdNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Psmm, Variant::PsmmWobf, Variant::Nhf, Variant::SdNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Psmm => "psmm",
            Variant::PsmmWobf => "psmm-wobf",
            Variant::Nhf => "nhf",
            Variant::SdNet => "sdnet",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        match s {
            "psmm" => Some(Variant::Psmm),
            "psmm-wobf" | "psmm_wobf" => Some(Variant::PsmmWobf),
            "nhf" => Some(Variant::Nhf),
            "sdnet" => Some(Variant::SdNet),
            _ => None,
        }
    }
}

pub enum Model {
    Sd(psmmlab_core::sdnet::SdNet),
    Psmm(PsmmNet),
}

impl Model {
    pub fn build(
        variant: Variant,
        preset: Preset,
        modalities: &[Modality],
        norm: NormMode,
        seed: u64,
    ) -> AppResult<Model> {
        match variant {
            Variant::SdNet => {
                if modalities.len() != 1 {
                    return Err(AppError::Input(format!(
                        "variant sdnet takes exactly one modality, got {}",
                        modalities.len()
                    )));
                }
                let mut cfg = SdNetConfig::new(modalities[0], preset);
                cfg.norm = norm;
                Ok(Model::Sd(build_sd_net(&cfg, seed)?))
            }
            Variant::Psmm | Variant::PsmmWobf | Variant::Nhf => {
                let pv = match variant {
                    Variant::Psmm => PsmmVariant::Psmm,
                    Variant::PsmmWobf => PsmmVariant::PsmmWobf,
                    _ => PsmmVariant::Nhf,
                };
                let mut cfg = PsmmConfig::new(modalities, pv, preset);
                cfg.norm = norm;
                Ok(Model::Psmm(build_psmm(&cfg, seed)?))
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Model::Sd(_) => Variant::SdNet,
            Model::Psmm(net) => match net.config.variant {
                PsmmVariant::Psmm => Variant::Psmm,
                PsmmVariant::PsmmWobf => Variant::PsmmWobf,
                PsmmVariant::Nhf => Variant::Nhf,
            },
        }
    }

    pub fn preset(&self) -> Preset {
        match self {
            Model::Sd(net) => net.config.preset,
            Model::Psmm(net) => net.config.preset,
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self {
            Model::Sd(net) => vec![net.config.modality],
            Model::Psmm(net) => net.config.modalities.clone(),
        }
    }

    pub fn graph(&self) -> &Graph {
        match self {
            Model::Sd(net) => &net.graph,
            Model::Psmm(net) => &net.graph,
        }
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        match self {
            Model::Sd(net) => &mut net.graph,
            Model::Psmm(net) => &mut net.graph,
        }
    }

    pub fn total_loss(&self) -> NodeId {
        match self {
            Model::Sd(net) => net.handles.total_loss,
            Model::Psmm(net) => net.handles.total_loss,
        }
    }

    /// The logit whose sigmoid scores a video: the whole-network head
    /// for the multi-modal variants, the sum head for plain SD-Net.
    pub fn score_logit(&self) -> NodeId {
        match self {
            Model::Sd(net) => net.handles.heads.logit_sdf,
            Model::Psmm(net) => net.handles.whole_logit,
        }
    }

    /// Named scalar loss terms in summation order.
    pub fn component_losses(&self) -> Vec<(String, NodeId)> {
        match self {
            Model::Sd(net) => {
                let h = &net.handles.heads;
                vec![
                    ("static".to_string(), h.loss_static),
                    ("dynamic".to_string(), h.loss_dynamic),
                    ("fused".to_string(), h.loss_fused),
                    ("sdf".to_string(), h.loss_sdf),
                ]
            }
            Model::Psmm(net) => net.component_losses(),
        }
    }

    /// Runs the graph on a packed batch.
    pub fn forward_batch(&mut self, batch: &Batch, mode: Mode) -> AppResult<()> {
        match self {
            Model::Sd(net) => {
                let m = net.config.modality;
                let (_, s, d) = batch
                    .inputs
                    .iter()
                    .find(|(bm, _, _)| *bm == m)
                    .ok_or_else(|| {
                        AppError::Input(format!("batch lacks the {} stream", m.name()))
                    })?;
                let feeds = [
                    (net.handles.static_input, s),
                    (net.handles.dynamic_input, d),
                    (net.handles.label, &batch.labels),
                ];
                net.graph.forward(&feeds, mode)?;
                Ok(())
            }
            Model::Psmm(net) => {
                let pairs: Vec<(Modality, &psmmlab_core::tensor::Tensor, &psmmlab_core::tensor::Tensor)> =
                    batch.inputs.iter().map(|(m, s, d)| (*m, s, d)).collect();
                net.forward_pairs(&pairs, &batch.labels, mode)?;
                Ok(())
            }
        }
    }
}

pub fn parse_modalities(s: &str) -> AppResult<Vec<Modality>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let m = Modality::from_name(part)
            .ok_or_else(|| AppError::Input(format!("unknown modality {part:?}")))?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(AppError::input("no modalities given"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
        assert_eq!(Variant::from_name("psmm_wobf"), Some(Variant::PsmmWobf));
        assert_eq!(Variant::from_name("resnet"), None);
    }

    #[test]
    fn sdnet_variant_requires_one_modality() {
        let err = Model::build(
            Variant::SdNet,
            Preset::Toy,
            &Modality::ALL,
            NormMode::Batch,
            0,
        )
        .err().expect("sdnet needs one modality");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn modality_list_parsing() {
        assert_eq!(
            parse_modalities("color,depth,ir").unwrap(),
            vec![Modality::Color, Modality::Depth, Modality::Ir]
        );
        assert_eq!(parse_modalities(" depth ").unwrap(), vec![Modality::Depth]);
        assert!(parse_modalities("rgb").is_err());
        assert!(parse_modalities("").is_err());
    }
}
