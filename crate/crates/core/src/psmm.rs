//! Multi-modal model: one two-stream trunk per modality plus a
//! partially shared branch.
//!
//! Levels are indexed t = 1..4. The shared branch starts from a zero
//! level-1 state S1. At t in {1,2,3} the shared input is the
//! elementwise sum of every modality's static and dynamic level-t
//! features plus S^t; one shared downsampling stage turns that into
//! S^{t+1}. At t in {2,3} the shared state is added back into the
//! static and dynamic features before their next stage; the fused
//! branch never receives shared state and never contributes to the
//! shared input. A whole-network head reads the sum of the
//! per-modality GAP sums plus GAP(S^4), and the training loss is that
//! head's term plus every per-modality head term.
//!
//! Variants: `PsmmWobf` drops the add-back edges; `Nhf` merges all
//! level-1 static and dynamic features once and runs a single shared
//! trunk with one head.
//!
//! Modalities are kept in canonical order (color, depth, ir)
//! regardless of configuration order, so fusion sums are
//! order-canonical and rebuilding with a permuted modality list yields
//! a bitwise-identical model.

use crate::graph::{Graph, GraphError, Mode, NodeId};
use crate::protocol::Modality;
use crate::sdnet::{
    build_head, build_level, build_m1, build_modality_heads, HeadSet, NormMode, Preset,
};
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsmmVariant {
    Psmm,
    PsmmWobf,
    Nhf,
}

impl PsmmVariant {
    pub fn name(self) -> &'static str {
        match self {
            PsmmVariant::Psmm => "psmm",
            PsmmVariant::PsmmWobf => "psmm-wobf",
            PsmmVariant::Nhf => "nhf",
        }
    }

    pub fn from_name(s: &str) -> Option<PsmmVariant> {
        match s {
            "psmm" => Some(PsmmVariant::Psmm),
            "psmm-wobf" | "psmm_wobf" => Some(PsmmVariant::PsmmWobf),
            "nhf" => Some(PsmmVariant::Nhf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsmmConfig {
    pub modalities: Vec<Modality>,
    pub variant: PsmmVariant,
    pub preset: Preset,
    pub norm: NormMode,
}

impl PsmmConfig {
    pub fn new(modalities: &[Modality], variant: PsmmVariant, preset: Preset) -> PsmmConfig {
        PsmmConfig { modalities: modalities.to_vec(), variant, preset, norm: NormMode::Batch }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PsmmError {
    EmptyModalities,
    DuplicateModality(Modality),
    Graph(GraphError),
}

impl fmt::Display for PsmmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsmmError::EmptyModalities => write!(f, "at least one modality is required"),
            PsmmError::DuplicateModality(m) => write!(f, "modality {} listed twice", m.name()),
            PsmmError::Graph(e) => write!(f, "graph construction failed: {e}"),
        }
    }
}

impl core::error::Error for PsmmError {}

impl From<GraphError> for PsmmError {
    fn from(e: GraphError) -> Self {
        PsmmError::Graph(e)
    }
}

/// Per-modality pieces present in every variant.
#[derive(Debug, Clone)]
pub struct ModalityHandles {
    pub modality: Modality,
    pub static_input: NodeId,
    pub dynamic_input: NodeId,
    pub x_static1: NodeId,
    pub x_dynamic1: NodeId,
    /// Levels 2..4, heads and feedback; absent under `Nhf`.
    pub full: Option<ModalityFull>,
}

#[derive(Debug, Clone)]
pub struct ModalityFull {
    /// Raw stage outputs X^1..X^4 (pre add-back).
    pub x_static: [NodeId; 4],
    pub x_dynamic: [NodeId; 4],
    pub x_fused: [NodeId; 4],
    /// (t, node) add-back sums X^t + S^t; empty under `PsmmWobf`.
    pub feedback_static: Vec<(usize, NodeId)>,
    pub feedback_dynamic: Vec<(usize, NodeId)>,
    pub gap_static: NodeId,
    pub gap_dynamic: NodeId,
    pub gap_fused: NodeId,
    pub heads: HeadSet,
}

#[derive(Debug, Clone)]
pub struct SharedHandles {
    /// (t, node). For `Psmm`/`PsmmWobf`: S^1..S^4 with S^1 a zero
    /// constant. For `Nhf`: the shared stage outputs at levels 2..4.
    pub s: Vec<(usize, NodeId)>,
    /// (t, node) shared-input sums; `Nhf` has the single level-1 merge.
    pub fusion: Vec<(usize, NodeId)>,
    pub gap: NodeId,
}

#[derive(Debug, Clone)]
pub struct PsmmHandles {
    pub label: NodeId,
    pub modalities: Vec<ModalityHandles>,
    pub shared: SharedHandles,
    pub whole_logit: NodeId,
    pub whole_loss: NodeId,
    pub total_loss: NodeId,
}

#[derive(Debug)]
pub struct PsmmNet {
    pub graph: Graph,
    pub config: PsmmConfig,
    pub handles: PsmmHandles,
}

impl PsmmNet {
    pub fn input_ids(&self, m: Modality) -> Option<(NodeId, NodeId)> {
        self.handles
            .modalities
            .iter()
            .find(|h| h.modality == m)
            .map(|h| (h.static_input, h.dynamic_input))
    }

    /// Named scalar loss components in summation order; the first is
    /// the whole-network term.
    pub fn component_losses(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        out.push((String::from("whole"), self.handles.whole_loss));
        for m in &self.handles.modalities {
            if let Some(full) = &m.full {
                let name = m.modality.name();
                out.push((format!("{name}.static"), full.heads.loss_static));
                out.push((format!("{name}.dynamic"), full.heads.loss_dynamic));
                out.push((format!("{name}.fused"), full.heads.loss_fused));
                out.push((format!("{name}.sdf"), full.heads.loss_sdf));
            }
        }
        out
    }

    /// Convenience forward: pairs are (modality, static, dynamic) in
    /// any order; label is a [n,1] tensor.
    pub fn forward_pairs(
        &mut self,
        pairs: &[(Modality, &Tensor, &Tensor)],
        label: &Tensor,
        mode: Mode,
    ) -> Result<(), GraphError> {
        let mut feeds: Vec<(NodeId, &Tensor)> = Vec::with_capacity(pairs.len() * 2 + 1);
        for &(m, s, d) in pairs {
            if let Some((si, di)) = self.input_ids(m) {
                feeds.push((si, s));
                feeds.push((di, d));
            }
        }
        feeds.push((self.handles.label, label));
        self.graph.forward(&feeds, mode)
    }
}

fn canonical_modalities(modalities: &[Modality]) -> Result<Vec<Modality>, PsmmError> {
    if modalities.is_empty() {
        return Err(PsmmError::EmptyModalities);
    }
    let mut sorted = modalities.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(PsmmError::DuplicateModality(w[0]));
        }
    }
    Ok(sorted)
}

pub fn build_psmm(cfg: &PsmmConfig, seed: u64) -> Result<PsmmNet, PsmmError> {
    let modalities = canonical_modalities(&cfg.modalities)?;
    let cfg = PsmmConfig { modalities, ..cfg.clone() };
    let mut g = Graph::new();
    let handles = match cfg.variant {
        PsmmVariant::Psmm | PsmmVariant::PsmmWobf => build_full(&mut g, &cfg, seed)?,
        PsmmVariant::Nhf => build_nhf(&mut g, &cfg, seed)?,
    };
    Ok(PsmmNet { graph: g, config: cfg, handles })
}

struct TrunkState {
    modality: Modality,
    static_input: NodeId,
    dynamic_input: NodeId,
    x_static: [NodeId; 4],
    x_dynamic: [NodeId; 4],
    x_fused: [NodeId; 4],
    // Stage inputs for the next level, post add-back where it applies.
    next_static: NodeId,
    next_dynamic: NodeId,
    feedback_static: Vec<(usize, NodeId)>,
    feedback_dynamic: Vec<(usize, NodeId)>,
}

fn build_full(g: &mut Graph, cfg: &PsmmConfig, seed: u64) -> Result<PsmmHandles, PsmmError> {
    let preset = cfg.preset;
    let norm = cfg.norm;
    let side = preset.input_side();
    let label = g.input(&[1]);
    g.set_tag(label, "psmm.label");

    // Level 1 of every modality trunk.
    let mut trunks: Vec<TrunkState> = Vec::new();
    for &m in &cfg.modalities {
        let p = format!("psmm.{}", m.name());
        let static_input = g.input(&[3, side, side]);
        g.set_tag(static_input, &format!("{p}.input.static"));
        let dynamic_input = g.input(&[3, side, side]);
        g.set_tag(dynamic_input, &format!("{p}.input.dynamic"));
        let s1 = build_m1(g, norm, preset, seed, &format!("{p}.static"), static_input)?;
        let d1 = build_m1(g, norm, preset, seed, &format!("{p}.dynamic"), dynamic_input)?;
        let f1 = g.add(s1, d1)?;
        g.set_tag(f1, &format!("{p}.fused.x1"));
        trunks.push(TrunkState {
            modality: m,
            static_input,
            dynamic_input,
            x_static: [s1; 4],
            x_dynamic: [d1; 4],
            x_fused: [f1; 4],
            next_static: s1,
            next_dynamic: d1,
            feedback_static: Vec::new(),
            feedback_dynamic: Vec::new(),
        });
    }

    // S^1 is identically zero, carried as a constant so the level-1
    // shared input is an explicit (2 modalities + 1)-ary sum.
    let w = preset.widths();
    let sides = preset.level_sides();
    let s1 = g.zero_const(&[w[0], sides[0], sides[0]]);
    g.set_tag(s1, "psmm.shared.s1");
    let mut s_nodes: Vec<(usize, NodeId)> = alloc::vec![(1, s1)];
    let mut fusion: Vec<(usize, NodeId)> = Vec::new();

    for t in 1..=3 {
        // Shared input at level t from the raw stage outputs.
        let mut terms: Vec<NodeId> = trunks.iter().map(|tr| tr.x_static[t - 1]).collect();
        terms.extend(trunks.iter().map(|tr| tr.x_dynamic[t - 1]));
        terms.push(s_nodes[t - 1].1);
        let fused_in = g.sum_n(&terms)?;
        g.set_tag(fused_in, &format!("psmm.fuse.fwd.t{t}"));
        fusion.push((t, fused_in));

        // One shared stage: level-t geometry to level-(t+1).
        let s_next = build_level(g, norm, preset, seed, "psmm.shared", t + 1, fused_in)?;
        g.set_tag(s_next, &format!("psmm.shared.s{}", t + 1));
        s_nodes.push((t + 1, s_next));

        // Add-back into static and dynamic features at t = 2, 3; the
        // fused branch is left alone.
        if t >= 2 && cfg.variant == PsmmVariant::Psmm {
            let s_t = s_nodes[t - 1].1;
            for tr in trunks.iter_mut() {
                let fb_s = g.add(tr.x_static[t - 1], s_t)?;
                g.set_tag(fb_s, &format!("psmm.fb.{}.static.t{t}", tr.modality.name()));
                let fb_d = g.add(tr.x_dynamic[t - 1], s_t)?;
                g.set_tag(fb_d, &format!("psmm.fb.{}.dynamic.t{t}", tr.modality.name()));
                tr.feedback_static.push((t, fb_s));
                tr.feedback_dynamic.push((t, fb_d));
                tr.next_static = fb_s;
                tr.next_dynamic = fb_d;
            }
        }

        // Next trunk level for every modality and branch.
        for tr in trunks.iter_mut() {
            let p = format!("psmm.{}", tr.modality.name());
            tr.x_static[t] =
                build_level(g, norm, preset, seed, &format!("{p}.static"), t + 1, tr.next_static)?;
            tr.x_dynamic[t] =
                build_level(g, norm, preset, seed, &format!("{p}.dynamic"), t + 1, tr.next_dynamic)?;
            tr.x_fused[t] =
                build_level(g, norm, preset, seed, &format!("{p}.fused"), t + 1, tr.x_fused[t - 1])?;
            tr.next_static = tr.x_static[t];
            tr.next_dynamic = tr.x_dynamic[t];
        }
    }

    // Heads.
    let mut modality_handles = Vec::new();
    let mut whole_terms: Vec<NodeId> = Vec::new();
    let mut loss_terms: Vec<NodeId> = Vec::new();
    for tr in &trunks {
        let p = format!("psmm.{}", tr.modality.name());
        let gap_static = g.global_avg_pool(tr.x_static[3])?;
        g.set_tag(gap_static, &format!("{p}.static.gap"));
        let gap_dynamic = g.global_avg_pool(tr.x_dynamic[3])?;
        g.set_tag(gap_dynamic, &format!("{p}.dynamic.gap"));
        let gap_fused = g.global_avg_pool(tr.x_fused[3])?;
        g.set_tag(gap_fused, &format!("{p}.fused.gap"));
        let heads = build_modality_heads(g, seed, &p, gap_static, gap_dynamic, gap_fused, label)?;
        whole_terms.push(heads.gap_sum);
        modality_handles.push(ModalityHandles {
            modality: tr.modality,
            static_input: tr.static_input,
            dynamic_input: tr.dynamic_input,
            x_static1: tr.x_static[0],
            x_dynamic1: tr.x_dynamic[0],
            full: Some(ModalityFull {
                x_static: tr.x_static,
                x_dynamic: tr.x_dynamic,
                x_fused: tr.x_fused,
                feedback_static: tr.feedback_static.clone(),
                feedback_dynamic: tr.feedback_dynamic.clone(),
                gap_static,
                gap_dynamic,
                gap_fused,
                heads,
            }),
        });
    }
    let gap_shared = g.global_avg_pool(s_nodes[3].1)?;
    g.set_tag(gap_shared, "psmm.shared.gap");
    whole_terms.push(gap_shared);
    let whole_feature = g.sum_n(&whole_terms)?;
    g.set_tag(whole_feature, "psmm.whole.feature");
    let (whole_logit, whole_loss) = build_head(g, seed, "psmm.shared.head", whole_feature, label)?;

    loss_terms.push(whole_loss);
    for mh in &modality_handles {
        // Full variants always carry per-modality heads.
        let heads = &mh.full.as_ref().expect("full variant").heads;
        loss_terms.extend(heads.losses());
    }
    let total_loss = g.sum_n(&loss_terms)?;
    g.set_tag(total_loss, "psmm.loss.total");

    Ok(PsmmHandles {
        label,
        modalities: modality_handles,
        shared: SharedHandles { s: s_nodes, fusion, gap: gap_shared },
        whole_logit,
        whole_loss,
        total_loss,
    })
}

fn build_nhf(g: &mut Graph, cfg: &PsmmConfig, seed: u64) -> Result<PsmmHandles, PsmmError> {
    let preset = cfg.preset;
    let norm = cfg.norm;
    let side = preset.input_side();
    let label = g.input(&[1]);
    g.set_tag(label, "psmm.label");

    let mut modality_handles = Vec::new();
    let mut terms: Vec<NodeId> = Vec::new();
    let mut dyn_terms: Vec<NodeId> = Vec::new();
    for &m in &cfg.modalities {
        let p = format!("psmm.{}", m.name());
        let static_input = g.input(&[3, side, side]);
        g.set_tag(static_input, &format!("{p}.input.static"));
        let dynamic_input = g.input(&[3, side, side]);
        g.set_tag(dynamic_input, &format!("{p}.input.dynamic"));
        let s1 = build_m1(g, norm, preset, seed, &format!("{p}.static"), static_input)?;
        let d1 = build_m1(g, norm, preset, seed, &format!("{p}.dynamic"), dynamic_input)?;
        terms.push(s1);
        dyn_terms.push(d1);
        modality_handles.push(ModalityHandles {
            modality: m,
            static_input,
            dynamic_input,
            x_static1: s1,
            x_dynamic1: d1,
            full: None,
        });
    }
    terms.extend(dyn_terms);
    let merged = g.sum_n(&terms)?;
    g.set_tag(merged, "psmm.fuse.fwd.t1");

    let mut x = merged;
    let mut s_nodes = Vec::new();
    for t in 2..=4 {
        x = build_level(g, norm, preset, seed, "psmm.shared", t, x)?;
        s_nodes.push((t, x));
    }
    let gap = g.global_avg_pool(x)?;
    g.set_tag(gap, "psmm.shared.gap");
    let (whole_logit, whole_loss) = build_head(g, seed, "psmm.shared.head", gap, label)?;
    g.set_tag(whole_loss, "psmm.loss.total");

    Ok(PsmmHandles {
        label,
        modalities: modality_handles,
        shared: SharedHandles { s: s_nodes, fusion: alloc::vec![(1, merged)], gap },
        whole_logit,
        whole_loss,
        total_loss: whole_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::sdnet::{build_sd_net, SdNetConfig};
    use crate::seed::rng_for;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;

    fn toy_cfg(mods: &[Modality], variant: PsmmVariant) -> PsmmConfig {
        PsmmConfig::new(mods, variant, Preset::Toy)
    }

    fn rand_image(seed: u64, tag: &str, batch: usize) -> Tensor {
        let mut rng = rng_for(seed, tag);
        let n = batch * 3 * 32 * 32;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(&[batch, 3, 32, 32], data).unwrap()
    }

    fn zero_trainable(g: &mut Graph) {
        for id in g.trainable_param_ids() {
            let shape = g.param(id).value().shape().to_vec();
            *g.param_mut(id).value_mut() = Tensor::zeros(&shape);
        }
    }

    fn feed_all(net: &mut PsmmNet, seed: u64, batch: usize, labels: &[f64]) {
        let mods = net.config.modalities.clone();
        let imgs: Vec<(Modality, Tensor, Tensor)> = mods
            .iter()
            .map(|&m| {
                (
                    m,
                    rand_image(seed, &format!("{}s", m.name()), batch),
                    rand_image(seed, &format!("{}d", m.name()), batch),
                )
            })
            .collect();
        let pairs: Vec<(Modality, &Tensor, &Tensor)> =
            imgs.iter().map(|(m, s, d)| (*m, s, d)).collect();
        let label = Tensor::from_vec(&[batch, 1], labels.to_vec()).unwrap();
        net.forward_pairs(&pairs, &label, Mode::Train).unwrap();
    }

    #[test]
    fn empty_or_duplicate_modalities_are_rejected() {
        assert_eq!(
            build_psmm(&toy_cfg(&[], PsmmVariant::Psmm), 0).err(),
            Some(PsmmError::EmptyModalities)
        );
        let dup = toy_cfg(&[Modality::Color, Modality::Color], PsmmVariant::Psmm);
        assert_eq!(build_psmm(&dup, 0).err(), Some(PsmmError::DuplicateModality(Modality::Color)));
    }

    #[test]
    fn zero_parameters_give_thirteen_ln2_for_three_modalities() {
        let mut net = build_psmm(&toy_cfg(&Modality::ALL, PsmmVariant::Psmm), 1).unwrap();
        zero_trainable(&mut net.graph);
        feed_all(&mut net, 3, 2, &[1.0, 0.0]);
        let total = net.graph.scalar_value(net.handles.total_loss).unwrap();
        assert!((total - 13.0 * math::ln(2.0)).abs() < 1e-12);
        assert_eq!(net.component_losses().len(), 13);
    }

    #[test]
    fn zero_parameters_give_five_ln2_for_one_modality() {
        let mut net = build_psmm(&toy_cfg(&[Modality::Depth], PsmmVariant::Psmm), 1).unwrap();
        zero_trainable(&mut net.graph);
        feed_all(&mut net, 4, 2, &[1.0, 1.0]);
        let total = net.graph.scalar_value(net.handles.total_loss).unwrap();
        assert!((total - 5.0 * math::ln(2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_give_single_ln2_for_nhf() {
        let mut net = build_psmm(&toy_cfg(&Modality::ALL, PsmmVariant::Nhf), 1).unwrap();
        zero_trainable(&mut net.graph);
        feed_all(&mut net, 5, 2, &[0.0, 1.0]);
        let total = net.graph.scalar_value(net.handles.total_loss).unwrap();
        assert!((total - math::ln(2.0)).abs() < 1e-12);
        assert_eq!(net.component_losses().len(), 1);
    }

    #[test]
    fn component_losses_sum_to_total_exactly() {
        let mut net =
            build_psmm(&toy_cfg(&[Modality::Color, Modality::Ir], PsmmVariant::Psmm), 9).unwrap();
        feed_all(&mut net, 6, 2, &[1.0, 0.0]);
        let total = net.graph.scalar_value(net.handles.total_loss).unwrap();
        let sum = net
            .component_losses()
            .iter()
            .map(|(_, id)| net.graph.scalar_value(*id).unwrap())
            .fold(0.0, |a, b| a + b);
        assert_eq!(total, sum);
        assert_eq!(net.component_losses().len(), 9);
    }

    #[test]
    fn modality_list_order_does_not_change_the_model() {
        let a = build_psmm(&toy_cfg(&[Modality::Ir, Modality::Color], PsmmVariant::Psmm), 11).unwrap();
        let b = build_psmm(&toy_cfg(&[Modality::Color, Modality::Ir], PsmmVariant::Psmm), 11).unwrap();
        assert_eq!(a.config.modalities, b.config.modalities);
        let mut a = a;
        let mut b = b;
        feed_all(&mut a, 8, 2, &[1.0, 0.0]);
        feed_all(&mut b, 8, 2, &[1.0, 0.0]);
        let la = a.graph.value(a.handles.whole_logit).unwrap().data().to_vec();
        let lb = b.graph.value(b.handles.whole_logit).unwrap().data().to_vec();
        assert_eq!(la, lb);
        assert_eq!(
            a.graph.scalar_value(a.handles.total_loss).unwrap(),
            b.graph.scalar_value(b.handles.total_loss).unwrap()
        );
    }

    #[test]
    fn missing_modality_feed_is_rejected() {
        let mut net =
            build_psmm(&toy_cfg(&[Modality::Color, Modality::Depth], PsmmVariant::Psmm), 2).unwrap();
        let s = rand_image(1, "s", 2);
        let d = rand_image(1, "d", 2);
        let label = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let err = net.forward_pairs(&[(Modality::Color, &s, &d)], &label, Mode::Train);
        assert!(matches!(err, Err(GraphError::FeedMissing(_))));
    }

    #[test]
    fn zero_shared_psmm_matches_standalone_networks_bitwise() {
        let mods = [Modality::Color, Modality::Depth];
        let mut net = build_psmm(&toy_cfg(&mods, PsmmVariant::Psmm), 17).unwrap();
        // Kill every shared trainable weight; running stats stay at
        // their neutral defaults.
        for id in net.graph.trainable_param_ids() {
            if net.graph.param(id).name().starts_with("psmm.shared.") {
                let shape = net.graph.param(id).value().shape().to_vec();
                *net.graph.param_mut(id).value_mut() = Tensor::zeros(&shape);
            }
        }

        let batch = 2;
        let label = Tensor::from_vec(&[batch, 1], vec![1.0, 0.0]).unwrap();
        for &m in &mods {
            let cfg = SdNetConfig::new(m, Preset::Toy);
            let mut sd = build_sd_net(&cfg, 99).unwrap();
            // Transplant the trunk and head parameters by name.
            let ids: Vec<_> = sd.graph.param_ids().collect();
            for id in ids {
                let name = sd.graph.param(id).name().to_string();
                let suffix = &name["sdnet.".len()..];
                let src = net.graph.param_id(&format!("psmm.{suffix}")).unwrap();
                let value = net.graph.param(src).value().clone();
                *sd.graph.param_mut(id).value_mut() = value;
            }
            let si = rand_image(40, &format!("{}s", m.name()), batch);
            let di = rand_image(40, &format!("{}d", m.name()), batch);
            sd.graph
                .forward(
                    &[
                        (sd.handles.static_input, &si),
                        (sd.handles.dynamic_input, &di),
                        (sd.handles.label, &label),
                    ],
                    Mode::Train,
                )
                .unwrap();

            let pairs_owned: Vec<(Modality, Tensor, Tensor)> = mods
                .iter()
                .map(|&mm| {
                    (
                        mm,
                        rand_image(40, &format!("{}s", mm.name()), batch),
                        rand_image(40, &format!("{}d", mm.name()), batch),
                    )
                })
                .collect();
            let pairs: Vec<(Modality, &Tensor, &Tensor)> =
                pairs_owned.iter().map(|(mm, s, d)| (*mm, s, d)).collect();
            net.forward_pairs(&pairs, &label, Mode::Train).unwrap();

            let pm = net
                .handles
                .modalities
                .iter()
                .find(|h| h.modality == m)
                .and_then(|h| h.full.as_ref())
                .unwrap();
            for t in 0..4 {
                assert_eq!(
                    net.graph.value(pm.x_static[t]).unwrap().data(),
                    sd.graph.value(sd.handles.x_static[t]).unwrap().data(),
                    "static level {} of {}",
                    t + 1,
                    m.name()
                );
                assert_eq!(
                    net.graph.value(pm.x_dynamic[t]).unwrap().data(),
                    sd.graph.value(sd.handles.x_dynamic[t]).unwrap().data(),
                    "dynamic level {} of {}",
                    t + 1,
                    m.name()
                );
                assert_eq!(
                    net.graph.value(pm.x_fused[t]).unwrap().data(),
                    sd.graph.value(sd.handles.x_fused[t]).unwrap().data(),
                    "fused level {} of {}",
                    t + 1,
                    m.name()
                );
            }
            for (a, b) in pm.heads.logits().iter().zip(sd.handles.heads.logits()) {
                assert_eq!(
                    net.graph.value(*a).unwrap().data(),
                    sd.graph.value(b).unwrap().data()
                );
            }
            // The shared state is exactly zero everywhere.
            for &(t, s) in &net.handles.shared.s {
                if t > 1 {
                    assert!(net.graph.value(s).unwrap().data().iter().all(|&v| v == 0.0), "S{t}");
                }
            }
        }
    }

    #[test]
    fn fused_branch_matches_between_variants_with_zero_shared() {
        let mods = [Modality::Color, Modality::Ir];
        let mut a = build_psmm(&toy_cfg(&mods, PsmmVariant::Psmm), 23).unwrap();
        let mut b = build_psmm(&toy_cfg(&mods, PsmmVariant::PsmmWobf), 23).unwrap();
        for id in a.graph.trainable_param_ids() {
            if a.graph.param(id).name().starts_with("psmm.shared.") {
                let shape = a.graph.param(id).value().shape().to_vec();
                *a.graph.param_mut(id).value_mut() = Tensor::zeros(&shape);
            }
        }
        for id in b.graph.trainable_param_ids() {
            if b.graph.param(id).name().starts_with("psmm.shared.") {
                let shape = b.graph.param(id).value().shape().to_vec();
                *b.graph.param_mut(id).value_mut() = Tensor::zeros(&shape);
            }
        }
        feed_all(&mut a, 31, 2, &[1.0, 0.0]);
        feed_all(&mut b, 31, 2, &[1.0, 0.0]);
        for (ha, hb) in a.handles.modalities.iter().zip(&b.handles.modalities) {
            let fa = ha.full.as_ref().unwrap();
            let fb = hb.full.as_ref().unwrap();
            for t in 0..4 {
                assert_eq!(
                    a.graph.value(fa.x_fused[t]).unwrap().data(),
                    b.graph.value(fb.x_fused[t]).unwrap().data(),
                    "fused level {}",
                    t + 1
                );
            }
        }
    }

    #[test]
    fn fusion_gradient_distributes_to_all_summands() {
        // Seven broadcast parameters summed into a batched path; after
        // backward every summand holds the same folded gradient.
        let mut g = Graph::new();
        let x = g.input(&[4]);
        let label = g.input(&[1]);
        let mut param_ids = Vec::new();
        let mut nodes = Vec::new();
        for i in 0..7 {
            let p = g
                .add_param(&format!("p{i}"), Tensor::filled(&[4], 0.1 * (i as f64 + 1.0)), true)
                .unwrap();
            param_ids.push(p);
            nodes.push(g.param_node(p));
        }
        let s = g.sum_n(&nodes).unwrap();
        let y = g.add(x, s).unwrap();
        let w = g.add_param("w", Tensor::filled(&[4, 1], 0.3), true).unwrap();
        let bb = g.add_param("b", Tensor::zeros(&[1]), true).unwrap();
        let wn = g.param_node(w);
        let bn = g.param_node(bb);
        let logit = g.dense(y, wn, bn).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();

        let xv = Tensor::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let lv = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        g.forward(&[(x, &xv), (label, &lv)], Mode::Train).unwrap();
        g.backward(loss).unwrap();
        let first = g.param(param_ids[0]).value().grad().unwrap().to_vec();
        assert!(first.iter().any(|&v| v != 0.0));
        for &p in &param_ids[1..] {
            assert_eq!(g.param(p).value().grad().unwrap(), first.as_slice());
        }
    }

    #[test]
    fn nhf_has_no_per_modality_levels_beyond_one() {
        let net = build_psmm(&toy_cfg(&Modality::ALL, PsmmVariant::Nhf), 5).unwrap();
        for id in net.graph.param_ids() {
            let name = net.graph.param(id).name();
            if !name.starts_with("psmm.shared.") {
                assert!(
                    name.contains(".l0.") || name.contains(".l1."),
                    "unexpected deep per-modality parameter {name}"
                );
                assert!(!name.contains(".fused."), "nhf has no fused branch, found {name}");
            }
        }
        // One merge point, one head.
        assert_eq!(net.handles.shared.fusion.len(), 1);
        assert!(net.graph.find_tag("psmm.fuse.fwd.t2").is_none());
        assert!(net.graph.param_id("psmm.shared.head.w").is_some());
        assert!(net.graph.param_id("psmm.color.head.static.w").is_none());
    }

    #[test]
    fn whole_logit_equals_bias_when_everything_is_zero() {
        let mut net = build_psmm(&toy_cfg(&Modality::ALL, PsmmVariant::Psmm), 29).unwrap();
        zero_trainable(&mut net.graph);
        let id = net.graph.param_id("psmm.shared.head.b").unwrap();
        *net.graph.param_mut(id).value_mut() = Tensor::filled(&[1], -0.35);
        feed_all(&mut net, 44, 2, &[1.0, 0.0]);
        for v in net.graph.value(net.handles.whole_logit).unwrap().data() {
            assert!((v + 0.35).abs() < 1e-12);
        }
    }
}
