//! End-to-end learning checks: the networks must drive their training
//! loss close to zero on a small linearly separable problem.

use psmmlab_core::graph::Mode;
use psmmlab_core::optim::{Adam, AdamConfig};
use psmmlab_core::protocol::Modality;
use psmmlab_core::psmm::{build_psmm, PsmmConfig, PsmmVariant};
use psmmlab_core::sdnet::{build_sd_net, Preset, SdNetConfig};
use psmmlab_core::seed::rng_for;
use psmmlab_core::tensor::Tensor;
use rand::Rng;

const SIDE: usize = 32;

/// Bright images for the positive class, dark for the negative, with
/// enough noise that the net cannot key on a single pixel.
fn separable_batch(n: usize, seed: u64, tag: &str) -> (Tensor, Tensor, Tensor) {
    let mut rng = rng_for(seed, tag);
    let per = 3 * SIDE * SIDE;
    let mut s = Vec::with_capacity(n * per);
    let mut d = Vec::with_capacity(n * per);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let (bs, bd) = if positive { (0.75, 0.70) } else { (0.25, 0.30) };
        y.push(if positive { 1.0 } else { 0.0 });
        for _ in 0..per {
            s.push(bs + rng.random_range(-0.1..0.1));
        }
        for _ in 0..per {
            d.push(bd + rng.random_range(-0.1..0.1));
        }
    }
    (
        Tensor::from_vec(&[n, 3, SIDE, SIDE], s).unwrap(),
        Tensor::from_vec(&[n, 3, SIDE, SIDE], d).unwrap(),
        Tensor::from_vec(&[n, 1], y).unwrap(),
    )
}

#[test]
fn sd_net_overfits_a_separable_batch() {
    let n = 32;
    let (xs, xd, y) = separable_batch(n, 101, "learn-sdnet");
    let mut net = build_sd_net(&SdNetConfig::new(Modality::Color, Preset::Toy), 11).unwrap();
    let feeds = [
        (net.handles.static_input, &xs),
        (net.handles.dynamic_input, &xd),
        (net.handles.label, &y),
    ];
    let mut opt = Adam::new(&net.graph, AdamConfig::new(0.01));
    let mut last = f64::INFINITY;
    for step in 0..200 {
        net.graph.zero_grad();
        net.graph.forward(&feeds, Mode::Train).unwrap();
        last = net.graph.scalar_value(net.handles.total_loss).unwrap();
        assert!(last.is_finite(), "loss diverged at step {step}: {last}");
        if last < 0.05 {
            break;
        }
        net.graph.backward(net.handles.total_loss).unwrap();
        opt.step(&mut net.graph);
    }
    assert!(last < 0.05, "sum of four losses stuck at {last}");

    // Every head separates the classes on its own.
    net.graph.forward(&feeds, Mode::Train).unwrap();
    for logit_id in net.handles.heads.logits() {
        let logits = net.graph.value(logit_id).unwrap();
        for (i, &z) in logits.data().iter().enumerate() {
            let want_positive = i % 2 == 0;
            assert_eq!(z > 0.0, want_positive, "head {logit_id:?} sample {i} logit {z}");
        }
    }
}

#[test]
fn psmm_overfits_a_separable_multimodal_batch() {
    let n = 16;
    let cfg = PsmmConfig::new(&Modality::ALL, PsmmVariant::Psmm, Preset::Toy);
    let mut net = build_psmm(&cfg, 13).unwrap();
    let data: Vec<(Modality, Tensor, Tensor)> = Modality::ALL
        .iter()
        .map(|&m| {
            let (xs, xd, _) = separable_batch(n, 103, &format!("learn-psmm-{}", m.name()));
            (m, xs, xd)
        })
        .collect();
    let (_, _, y) = separable_batch(n, 103, "learn-psmm-color");
    let pairs: Vec<(Modality, &Tensor, &Tensor)> =
        data.iter().map(|(m, s, d)| (*m, s, d)).collect();

    let mut opt = Adam::new(&net.graph, AdamConfig::new(0.01));
    let mut last = f64::INFINITY;
    for step in 0..300 {
        net.graph.zero_grad();
        net.forward_pairs(&pairs, &y, Mode::Train).unwrap();
        last = net.graph.scalar_value(net.handles.total_loss).unwrap();
        assert!(last.is_finite(), "loss diverged at step {step}: {last}");
        if last < 0.2 {
            break;
        }
        net.graph.backward(net.handles.total_loss).unwrap();
        opt.step(&mut net.graph);
    }
    assert!(last < 0.2, "sum of thirteen losses stuck at {last}");

    // The whole-network head classifies every sample correctly.
    net.forward_pairs(&pairs, &y, Mode::Train).unwrap();
    let logits = net.graph.value(net.handles.whole_logit).unwrap();
    for (i, &z) in logits.data().iter().enumerate() {
        assert_eq!(z > 0.0, i % 2 == 0, "whole head sample {i} logit {z}");
    }
}
