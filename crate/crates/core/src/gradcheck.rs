//! Finite-difference verification of the backward pass.
//!
//! The numeric side uses central differences on forward evaluations
//! only, so it exercises none of the backward code it checks. Sampled
//! parameter entries are drawn deterministically from a seed.

use crate::graph::{Graph, GraphError, Mode, NodeId, ParamId};
use crate::math;
use crate::seed;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative error threshold.
    pub tolerance: f64,
    /// Number of sampled parameter entries.
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, samples: 100, seed: 0, mode: Mode::Train }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)` with floor 1e-4 so near-zero pairs
/// compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric)).max(1e-4);
    math::abs(analytic - numeric) / denom
}

/// Central difference of the loss w.r.t. one parameter entry. Restores
/// the original value afterwards.
pub fn central_difference(
    graph: &mut Graph,
    loss: NodeId,
    feeds: &[(NodeId, &crate::tensor::Tensor)],
    mode: Mode,
    param: ParamId,
    index: usize,
    step: f64,
) -> Result<f64, GraphError> {
    let original = graph.param(param).value().data()[index];
    graph.param_mut(param).value_mut().data_mut()[index] = original + step;
    graph.forward(feeds, mode)?;
    let plus = graph.scalar_value(loss)?;
    graph.param_mut(param).value_mut().data_mut()[index] = original - step;
    graph.forward(feeds, mode)?;
    let minus = graph.scalar_value(loss)?;
    graph.param_mut(param).value_mut().data_mut()[index] = original;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares analytic gradients against central differences on a sample
/// of trainable parameter entries.
pub fn check_gradients(
    graph: &mut Graph,
    loss: NodeId,
    feeds: &[(NodeId, &crate::tensor::Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GraphError> {
    graph.zero_grad();
    graph.forward(feeds, cfg.mode)?;
    graph.backward(loss)?;

    // Flat table of (param, entries) for uniform sampling.
    let table: Vec<(ParamId, usize)> = graph
        .trainable_param_ids()
        .into_iter()
        .map(|id| (id, graph.param(id).value().numel()))
        .collect();
    let total: usize = table.iter().map(|(_, n)| n).sum();
    let analytic: Vec<Vec<f64>> = table
        .iter()
        .map(|&(id, n)| {
            graph
                .param(id)
                .value()
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; n])
        })
        .collect();

    let mut rng = seed::rng_for(cfg.seed, "gradcheck.sample");
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    for _ in 0..cfg.samples {
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= table[slot].1 {
            flat -= table[slot].1;
            slot += 1;
        }
        let (pid, _) = table[slot];
        let a = analytic[slot][flat];
        let n = central_difference(graph, loss, feeds, cfg.mode, pid, flat, cfg.step)?;
        let rel = relative_error(a, n);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckEntry {
                param: graph.param(pid).name().to_string(),
                index: flat,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relative_error_uses_absolute_floor_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-5).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn check_passes_on_a_conv_bn_dense_chain() {
        let mut g = Graph::new();
        let x = g.input(&[2, 4, 4]);
        let label = g.input(&[1]);
        let mut rng = seed::rng_for(11, "t.init");
        let wconv = Tensor::from_vec(
            &[3, 2, 3, 3],
            (0..54).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let wc = g.add_param("conv.w", wconv, true).unwrap();
        let gamma = g.add_param("bn.g", Tensor::filled(&[3], 1.0), true).unwrap();
        let beta = g.add_param("bn.b", Tensor::zeros(&[3]), true).unwrap();
        let rm = g.add_param("bn.rm", Tensor::zeros(&[3]), false).unwrap();
        let rv = g.add_param("bn.rv", Tensor::filled(&[3], 1.0), false).unwrap();
        let wd = Tensor::from_vec(&[3, 1], (0..3).map(|_| rng.random_range(-0.5..0.5)).collect())
            .unwrap();
        let w2 = g.add_param("head.w", wd, true).unwrap();
        let b2 = g.add_param("head.b", Tensor::zeros(&[1]), true).unwrap();

        let wcn = g.param_node(wc);
        let gn = g.param_node(gamma);
        let btn = g.param_node(beta);
        let w2n = g.param_node(w2);
        let b2n = g.param_node(b2);
        let c = g.conv2d(x, wcn, 1, 1).unwrap();
        let b = g.batch_norm(c, gn, btn, rm, rv, 1e-5, 0.9).unwrap();
        let r = g.relu(b).unwrap();
        let p = g.global_avg_pool(r).unwrap();
        let logit = g.dense(p, w2n, b2n).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();

        let xv = Tensor::from_vec(
            &[2, 2, 4, 4],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let yv = Tensor::from_vec(&[2, 1], alloc::vec![1.0, 0.0]).unwrap();
        let cfg = GradCheckConfig { samples: 40, seed: 5, ..Default::default() };
        let report = check_gradients(&mut g, loss, &[(x, &xv), (label, &yv)], &cfg).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error);
        assert_eq!(report.checked, 40);
    }

    #[test]
    fn check_catches_a_broken_gradient() {
        // A graph whose "analytic" gradient we corrupt by scaling the
        // parameter after backward: FD then disagrees.
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let label = g.input(&[1]);
        let w = g.add_param("w", Tensor::from_vec(&[1, 1], alloc::vec![0.7]).unwrap(), true).unwrap();
        let b = g.add_param("b", Tensor::zeros(&[1]), true).unwrap();
        let wn = g.param_node(w);
        let bn = g.param_node(b);
        let logit = g.dense(x, wn, bn).unwrap();
        let loss = g.sigmoid_bce_loss(logit, label).unwrap();
        let xv = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();
        let yv = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();

        g.zero_grad();
        g.forward(&[(x, &xv), (label, &yv)], Mode::Train).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.param(w).value().grad().unwrap()[0];
        let numeric =
            central_difference(&mut g, loss, &[(x, &xv), (label, &yv)], Mode::Train, w, 0, 1e-5)
                .unwrap();
        assert!(relative_error(analytic, numeric) < 1e-6);
        assert!(relative_error(analytic * 1.5, numeric) > 0.3);
    }
}
