//! Two-stream network over a residual trunk, per modality.
//!
//! Three branches share one architecture: the static branch reads an
//! anchor frame, the dynamic branch reads a rank-pooled image, and the
//! fused branch starts from the elementwise sum of their level-1
//! features and only carries levels 2..4. Four binary heads supervise
//! the three branch GAP vectors plus their elementwise sum; the
//! training loss is the sum of the four.
//!
//! Parameter names follow `<prefix>.<branch>.l<level>.…`, where the
//! standalone network uses prefix `sdnet.<modality>`. The multi-modal
//! builder reuses these constructors with its own prefix so that the
//! name suffixes line up between the two models.

use crate::graph::{Graph, GraphError, NodeId, ShapeKind};
use crate::math;
use crate::protocol::Modality;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 32x32 input, one block per level, widths 8/16/24/32. Small
    /// enough for finite-difference gradient checks.
    Toy,
    /// 112x112 input, two blocks per level, widths 64/128/256/512,
    /// 7x7 stride-2 stem followed by a 3x3 stride-2 max pool.
    Resnet18,
}

impl Preset {
    pub fn input_side(self) -> usize {
        match self {
            Preset::Toy => 32,
            Preset::Resnet18 => 112,
        }
    }

    pub fn widths(self) -> [usize; 4] {
        match self {
            Preset::Toy => [8, 16, 24, 32],
            Preset::Resnet18 => [64, 128, 256, 512],
        }
    }

    pub fn blocks_per_level(self) -> usize {
        match self {
            Preset::Toy => 1,
            Preset::Resnet18 => 2,
        }
    }

    /// Spatial side of the level-t feature map, t = 1..4.
    pub fn level_sides(self) -> [usize; 4] {
        match self {
            Preset::Toy => [16, 8, 4, 2],
            Preset::Resnet18 => [28, 14, 7, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Resnet18 => "resnet18",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        match s {
            "toy" => Some(Preset::Toy),
            "resnet18" => Some(Preset::Resnet18),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct SdNetConfig {
    pub modality: Modality,
    pub preset: Preset,
    pub norm: NormMode,
}

impl SdNetConfig {
    pub fn new(modality: Modality, preset: Preset) -> Self {
        SdNetConfig { modality, preset, norm: NormMode::Batch }
    }
}

fn expect_tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    // Length always matches: callers size the buffer from the shape.
    Tensor::from_vec(shape, data).expect("buffer sized from shape")
}

/// Conv weight with Kaiming-uniform init, bound sqrt(6 / fan_in); the
/// draw stream is keyed by the parameter name so init order does not
/// matter.
pub(crate) fn conv_weight(
    g: &mut Graph,
    seed: u64,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> Result<NodeId, GraphError> {
    let fan_in = (in_c * k * k) as f64;
    let bound = math::sqrt(6.0 / fan_in);
    let mut rng = rng_for(seed, name);
    let data: Vec<f64> = (0..out_c * in_c * k * k).map(|_| rng.random_range(-bound..=bound)).collect();
    let p = g.add_param(name, expect_tensor(&[out_c, in_c, k, k], data), true)?;
    Ok(g.param_node(p))
}

/// Gamma 1, beta 0, running mean 0, running variance 1.
fn batch_norm_unit(
    g: &mut Graph,
    prefix: &str,
    x: NodeId,
    c: usize,
) -> Result<NodeId, GraphError> {
    let gamma = g.add_param(&format!("{prefix}.g"), Tensor::filled(&[c], 1.0), true)?;
    let beta = g.add_param(&format!("{prefix}.b"), Tensor::zeros(&[c]), true)?;
    let rm = g.add_param(&format!("{prefix}.rm"), Tensor::zeros(&[c]), false)?;
    let rv = g.add_param(&format!("{prefix}.rv"), Tensor::filled(&[c], 1.0), false)?;
    let gamma = g.param_node(gamma);
    let beta = g.param_node(beta);
    g.batch_norm(x, gamma, beta, rm, rv, BN_EPSILON, BN_MOMENTUM)
}

fn maybe_norm(
    g: &mut Graph,
    norm: NormMode,
    prefix: &str,
    x: NodeId,
    c: usize,
) -> Result<NodeId, GraphError> {
    match norm {
        NormMode::Batch => batch_norm_unit(g, prefix, x, c),
        NormMode::None => Ok(x),
    }
}

/// conv3x3 -> norm -> relu -> conv3x3 -> norm, plus a skip that is the
/// identity when the geometry is unchanged and a 1x1 projection
/// otherwise; relu after the join.
#[allow(clippy::too_many_arguments)]
fn basic_block(
    g: &mut Graph,
    norm: NormMode,
    seed: u64,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    stride: usize,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let w1 = conv_weight(g, seed, &format!("{prefix}.conv1.w"), out_c, in_c, 3)?;
    let mut y = g.conv2d(x, w1, stride, 1)?;
    y = maybe_norm(g, norm, &format!("{prefix}.bn1"), y, out_c)?;
    y = g.relu(y)?;
    let w2 = conv_weight(g, seed, &format!("{prefix}.conv2.w"), out_c, out_c, 3)?;
    y = g.conv2d(y, w2, 1, 1)?;
    y = maybe_norm(g, norm, &format!("{prefix}.bn2"), y, out_c)?;
    let skip = if stride == 1 && in_c == out_c {
        x
    } else {
        let ws = conv_weight(g, seed, &format!("{prefix}.skip.conv.w"), out_c, in_c, 1)?;
        let s = g.conv2d(x, ws, stride, 0)?;
        maybe_norm(g, norm, &format!("{prefix}.skip.bn"), s, out_c)?
    };
    let joined = g.residual_add(y, skip)?;
    g.relu(joined)
}

/// Stem plus level 1; produces the X^1 feature, tagged `<prefix>.x1`.
pub(crate) fn build_m1(
    g: &mut Graph,
    norm: NormMode,
    preset: Preset,
    seed: u64,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId, GraphError> {
    let w0 = preset.widths()[0];
    let (k, stride, pad) = match preset {
        Preset::Toy => (3, 2, 1),
        Preset::Resnet18 => (7, 2, 3),
    };
    let wc = conv_weight(g, seed, &format!("{prefix}.l0.conv.w"), w0, 3, k)?;
    let mut x = g.conv2d(input, wc, stride, pad)?;
    x = maybe_norm(g, norm, &format!("{prefix}.l0.bn"), x, w0)?;
    x = g.relu(x)?;
    if preset == Preset::Resnet18 {
        x = g.max_pool2d(x, 3, 2, 1)?;
    }
    for b in 0..preset.blocks_per_level() {
        x = basic_block(g, norm, seed, &format!("{prefix}.l1.b{b}"), w0, w0, 1, x)?;
    }
    g.set_tag(x, &format!("{prefix}.x1"));
    Ok(x)
}

/// One downsampling level t in 2..=4 on top of a level-(t-1) feature;
/// produces X^t, tagged `<prefix>.x<t>`.
pub(crate) fn build_level(
    g: &mut Graph,
    norm: NormMode,
    preset: Preset,
    seed: u64,
    prefix: &str,
    t: usize,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    debug_assert!((2..=4).contains(&t));
    let in_c = preset.widths()[t - 2];
    let out_c = preset.widths()[t - 1];
    let mut y = x;
    for b in 0..preset.blocks_per_level() {
        let (ci, s) = if b == 0 { (in_c, 2) } else { (out_c, 1) };
        y = basic_block(g, norm, seed, &format!("{prefix}.l{t}.b{b}"), ci, out_c, s, y)?;
    }
    g.set_tag(y, &format!("{prefix}.x{t}"));
    Ok(y)
}

/// Dense binary head over a feature vector; weight U(+-sqrt(1/f)),
/// zero bias. Tags `<prefix>.logit` and `<prefix>.loss`.
pub(crate) fn build_head(
    g: &mut Graph,
    seed: u64,
    prefix: &str,
    feature: NodeId,
    label: NodeId,
) -> Result<(NodeId, NodeId), GraphError> {
    let f = match g.kind(feature) {
        ShapeKind::PerSample(d) if d.len() == 1 => d[0],
        k => {
            return Err(GraphError::Shape {
                op: "head",
                detail: format!("feature must be a batched vector, got {k:?}"),
            })
        }
    };
    let bound = math::sqrt(1.0 / f as f64);
    let wname = format!("{prefix}.w");
    let mut rng = rng_for(seed, &wname);
    let data: Vec<f64> = (0..f).map(|_| rng.random_range(-bound..=bound)).collect();
    let w = g.add_param(&wname, expect_tensor(&[f, 1], data), true)?;
    let b = g.add_param(&format!("{prefix}.b"), Tensor::zeros(&[1]), true)?;
    let w = g.param_node(w);
    let b = g.param_node(b);
    let logit = g.dense(feature, w, b)?;
    g.set_tag(logit, &format!("{prefix}.logit"));
    let loss = g.sigmoid_bce_loss(logit, label)?;
    g.set_tag(loss, &format!("{prefix}.loss"));
    Ok((logit, loss))
}

#[derive(Debug, Clone, Copy)]
pub struct HeadSet {
    pub gap_sum: NodeId,
    pub logit_static: NodeId,
    pub logit_dynamic: NodeId,
    pub logit_fused: NodeId,
    pub logit_sdf: NodeId,
    pub loss_static: NodeId,
    pub loss_dynamic: NodeId,
    pub loss_fused: NodeId,
    pub loss_sdf: NodeId,
}

impl HeadSet {
    pub fn losses(&self) -> [NodeId; 4] {
        [self.loss_static, self.loss_dynamic, self.loss_fused, self.loss_sdf]
    }

    pub fn logits(&self) -> [NodeId; 4] {
        [self.logit_static, self.logit_dynamic, self.logit_fused, self.logit_sdf]
    }
}

/// The four supervised heads of one modality: one per branch GAP plus
/// one over the elementwise sum of the three GAPs.
pub(crate) fn build_modality_heads(
    g: &mut Graph,
    seed: u64,
    prefix: &str,
    gap_static: NodeId,
    gap_dynamic: NodeId,
    gap_fused: NodeId,
    label: NodeId,
) -> Result<HeadSet, GraphError> {
    let gap_sum = g.sum_n(&[gap_static, gap_dynamic, gap_fused])?;
    g.set_tag(gap_sum, &format!("{prefix}.gap.sdf"));
    let (logit_static, loss_static) =
        build_head(g, seed, &format!("{prefix}.head.static"), gap_static, label)?;
    let (logit_dynamic, loss_dynamic) =
        build_head(g, seed, &format!("{prefix}.head.dynamic"), gap_dynamic, label)?;
    let (logit_fused, loss_fused) =
        build_head(g, seed, &format!("{prefix}.head.fused"), gap_fused, label)?;
    let (logit_sdf, loss_sdf) = build_head(g, seed, &format!("{prefix}.head.sdf"), gap_sum, label)?;
    Ok(HeadSet {
        gap_sum,
        logit_static,
        logit_dynamic,
        logit_fused,
        logit_sdf,
        loss_static,
        loss_dynamic,
        loss_fused,
        loss_sdf,
    })
}

#[derive(Debug, Clone)]
pub struct SdNetHandles {
    pub static_input: NodeId,
    pub dynamic_input: NodeId,
    pub label: NodeId,
    /// X^1..X^4 per branch; `x_fused[0]` is the level-1 sum node.
    pub x_static: [NodeId; 4],
    pub x_dynamic: [NodeId; 4],
    pub x_fused: [NodeId; 4],
    pub gap_static: NodeId,
    pub gap_dynamic: NodeId,
    pub gap_fused: NodeId,
    pub heads: HeadSet,
    pub total_loss: NodeId,
}

#[derive(Debug)]
pub struct SdNet {
    pub graph: Graph,
    pub config: SdNetConfig,
    pub handles: SdNetHandles,
}

pub fn build_sd_net(cfg: &SdNetConfig, seed: u64) -> Result<SdNet, GraphError> {
    let mut g = Graph::new();
    let handles = build_sd_core(&mut g, cfg, seed, &format!("sdnet.{}", cfg.modality.name()))?;
    Ok(SdNet { graph: g, config: *cfg, handles })
}

/// Builds the full per-modality network under an arbitrary name
/// prefix. The multi-modal model layers its fusion on top of the same
/// construction, so everything here must stay prefix-clean.
pub(crate) fn build_sd_core(
    g: &mut Graph,
    cfg: &SdNetConfig,
    seed: u64,
    prefix: &str,
) -> Result<SdNetHandles, GraphError> {
    let side = cfg.preset.input_side();
    let static_input = g.input(&[3, side, side]);
    g.set_tag(static_input, &format!("{prefix}.input.static"));
    let dynamic_input = g.input(&[3, side, side]);
    g.set_tag(dynamic_input, &format!("{prefix}.input.dynamic"));
    let label = g.input(&[1]);
    g.set_tag(label, &format!("{prefix}.label"));

    let s1 = build_m1(g, cfg.norm, cfg.preset, seed, &format!("{prefix}.static"), static_input)?;
    let d1 = build_m1(g, cfg.norm, cfg.preset, seed, &format!("{prefix}.dynamic"), dynamic_input)?;
    let f1 = g.add(s1, d1)?;
    g.set_tag(f1, &format!("{prefix}.fused.x1"));

    let mut x_static = [s1; 4];
    let mut x_dynamic = [d1; 4];
    let mut x_fused = [f1; 4];
    for t in 2..=4 {
        x_static[t - 1] = build_level(
            g,
            cfg.norm,
            cfg.preset,
            seed,
            &format!("{prefix}.static"),
            t,
            x_static[t - 2],
        )?;
        x_dynamic[t - 1] = build_level(
            g,
            cfg.norm,
            cfg.preset,
            seed,
            &format!("{prefix}.dynamic"),
            t,
            x_dynamic[t - 2],
        )?;
        x_fused[t - 1] = build_level(
            g,
            cfg.norm,
            cfg.preset,
            seed,
            &format!("{prefix}.fused"),
            t,
            x_fused[t - 2],
        )?;
    }

    let gap_static = g.global_avg_pool(x_static[3])?;
    g.set_tag(gap_static, &format!("{prefix}.static.gap"));
    let gap_dynamic = g.global_avg_pool(x_dynamic[3])?;
    g.set_tag(gap_dynamic, &format!("{prefix}.dynamic.gap"));
    let gap_fused = g.global_avg_pool(x_fused[3])?;
    g.set_tag(gap_fused, &format!("{prefix}.fused.gap"));

    let heads = build_modality_heads(g, seed, prefix, gap_static, gap_dynamic, gap_fused, label)?;
    let total_loss = g.sum_n(&heads.losses())?;
    g.set_tag(total_loss, &format!("{prefix}.loss.total"));

    Ok(SdNetHandles {
        static_input,
        dynamic_input,
        label,
        x_static,
        x_dynamic,
        x_fused,
        gap_static,
        gap_dynamic,
        gap_fused,
        heads,
        total_loss,
    })
}
