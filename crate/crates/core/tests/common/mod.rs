//! Helpers shared by the integration tests: batch loss/gradient wrappers and
//! the central-difference gradient oracle.

#![allow(dead_code)]

use fsddi::nn::loss::{label_loss, label_loss_backward, pixel_loss, pixel_loss_backward};
use fsddi::nn::params::{LayerSpec, NormKind};
use fsddi::nn::{backward_batch, forward_batch, Phase};
use fsddi::{ModelParams64, Tensor64};

/// What the network output is scored against.
pub enum Target {
    Pixels { masks: Vec<Vec<u8>>, weights: Vec<Vec<f64>> },
    Labels(Vec<usize>),
}

/// Mean training-phase loss over the batch.
pub fn batch_loss(model: &ModelParams64, images: &[&Tensor64], target: &Target) -> f64 {
    let fwd = forward_batch(model, images, Phase::Train).expect("forward");
    let outs = fwd.outputs();
    let total: f64 = match target {
        Target::Pixels { masks, weights } => outs
            .iter()
            .zip(masks)
            .zip(weights)
            .map(|((o, m), w)| pixel_loss(o, m, w).expect("loss"))
            .sum(),
        Target::Labels(labels) => outs.iter().zip(labels).map(|(o, &l)| label_loss(o, l).expect("loss")).sum(),
    };
    total / images.len() as f64
}

/// Analytic gradient of [`batch_loss`] with respect to every parameter.
pub fn batch_grad(model: &ModelParams64, images: &[&Tensor64], target: &Target) -> Vec<f64> {
    let fwd = forward_batch(model, images, Phase::Train).expect("forward");
    let outs = fwd.outputs();
    let inv_b = 1.0 / images.len() as f64;
    let dlogits: Vec<Tensor64> = match target {
        Target::Pixels { masks, weights } => outs
            .iter()
            .zip(masks)
            .zip(weights)
            .map(|((o, m), w)| {
                let mut d = pixel_loss_backward(o, m, w).expect("grad");
                for v in d.data_mut() {
                    *v *= inv_b;
                }
                d
            })
            .collect(),
        Target::Labels(labels) => outs
            .iter()
            .zip(labels)
            .map(|(o, &l)| {
                let mut d = label_loss_backward(o, l).expect("grad");
                for v in d.data_mut() {
                    *v *= inv_b;
                }
                d
            })
            .collect(),
    };
    backward_batch(model, &fwd, dlogits).expect("backward")
}

/// Finite differences are only trustworthy away from non-smooth points: a
/// relu input inside the probe window flips its kink, and a norm channel with
/// near-zero variance has exploding curvature. This rejects configurations
/// whose activations sit too close to either hazard so the oracle can insist
/// on a tight tolerance.
pub fn fd_safe(model: &ModelParams64, images: &[&Tensor64]) -> bool {
    const RELU_MARGIN: f64 = 1e-3;
    const MIN_CHANNEL_STD: f64 = 3e-2;
    let fwd = forward_batch(model, images, Phase::Train).expect("forward");
    for (li, spec) in model.arch().layers.iter().enumerate() {
        match spec {
            LayerSpec::Relu => {
                for t in fwd.layer_inputs(li) {
                    if t.data().iter().any(|v| v.abs() < RELU_MARGIN) {
                        return false;
                    }
                }
            }
            LayerSpec::Norm { kind: NormKind::Instance, ch } => {
                for t in fwd.layer_inputs(li) {
                    for c in 0..*ch {
                        let plane = t.channel(c);
                        let n = plane.len() as f64;
                        let mean = plane.iter().sum::<f64>() / n;
                        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        if var.sqrt() < MIN_CHANNEL_STD {
                            return false;
                        }
                    }
                }
            }
            LayerSpec::Norm { kind: NormKind::Batch, .. } => {
                if let Some((_, stats)) = fwd.bn_stats().iter().find(|(l, _)| *l == li) {
                    if stats.var.iter().any(|v| v.sqrt() < MIN_CHANNEL_STD) {
                        return false;
                    }
                }
            }
            _ => {}
        }
    }
    true
}

/// Central-difference check of every parameter, aggregated per layer as a
/// norm ratio: `|numeric - analytic| / max(|numeric| + |analytic|, 1e-8)`
/// over the layer's full parameter vector. Per-coordinate comparison would be
/// meaningless for parameters a downstream norm layer exactly cancels (a conv
/// bias before any norm, channel scales before instance norm): their true
/// gradient is at the epsilon-leak level and finite differences only measure
/// rounding noise there. Returns `(layer name, relative error)` pairs.
pub fn fd_check(model: &ModelParams64, images: &[&Tensor64], target: &Target) -> Vec<(String, f64)> {
    const STEP: f64 = 1e-5;
    let analytic = batch_grad(model, images, target);
    let mut numeric = vec![0.0f64; analytic.len()];
    let mut probe = model.clone();
    for j in 0..analytic.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + STEP;
        let up = batch_loss(&probe, images, target);
        probe.data_mut()[j] = orig - STEP;
        let down = batch_loss(&probe, images, target);
        probe.data_mut()[j] = orig;
        numeric[j] = (up - down) / (2.0 * STEP);
    }
    let mut report = Vec::new();
    let layout = model.layout().to_vec();
    let mut layers: Vec<usize> = layout.iter().map(|e| e.layer).collect();
    layers.dedup();
    for layer in layers {
        let mut nn = 0.0f64;
        let mut na = 0.0f64;
        let mut nd = 0.0f64;
        for entry in layout.iter().filter(|e| e.layer == layer) {
            for j in entry.offset..entry.offset + entry.len {
                nn += numeric[j] * numeric[j];
                na += analytic[j] * analytic[j];
                nd += (numeric[j] - analytic[j]) * (numeric[j] - analytic[j]);
            }
        }
        let rel = nd.sqrt() / (nn.sqrt() + na.sqrt()).max(1e-8);
        report.push((model.arch().layer_name(layer), rel));
    }
    report
}

/// Asserts every block of [`fd_check`] stays under `tol`, with a readable
/// failure message.
pub fn assert_grads_match(model: &ModelParams64, images: &[&Tensor64], target: &Target, tol: f64) -> f64 {
    let report = fd_check(model, images, target);
    let mut overall = 0.0f64;
    for (name, err) in &report {
        assert!(err < &tol, "block {name}: relative error {err:.3e} exceeds {tol:.1e}");
        overall = overall.max(*err);
    }
    overall
}
