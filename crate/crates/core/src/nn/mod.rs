//! The segmentation network and classifier: forward, exact backward, SGD.
//!
//! Parameters live in one flat vector (see [`params`]); forward and backward
//! walk the architecture descriptor layer by layer. Backward produces analytic
//! per-parameter gradients; an independent finite-difference oracle in the test
//! suite pins them down.

pub mod layers;
pub mod loss;
pub mod norm;
pub mod params;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use params::{ActShape, ArchDescriptor, LayerSpec, LayoutEntry, ModelParams, NormKind, SegNetConfig};

use layers::{ConvGeom, UpConvGeom};
use norm::{BatchStats, NormCache};

/// Whether normalization layers pool batch statistics (train) or use stored
/// running statistics (eval). Instance norm behaves identically in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Which pixels contributed to a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassScope {
    All,
    Class(usize),
}

/// A flat parameter gradient with its provenance.
#[derive(Debug, Clone)]
pub struct GradVector<F> {
    pub values: Vec<F>,
    pub sample: u64,
    pub class: ClassScope,
    pub normalized: bool,
}

impl<F: Scalar> GradVector<F> {
    pub fn norm(&self) -> F {
        self.values.iter().fold(F::zero(), |a, &v| a + v * v).sqrt()
    }
}

enum LayerCache<F> {
    None,
    PerSample(Vec<NormCache<F>>),
    Shared(NormCache<F>),
}

/// Activations and normalization caches of one batch forward pass.
/// `acts[l]` holds the inputs of layer `l` per sample; the final entry holds
/// the network outputs.
pub struct BatchForward<F> {
    acts: Vec<Vec<Tensor<F>>>,
    caches: Vec<LayerCache<F>>,
    stats: Vec<(usize, BatchStats<F>)>,
}

impl<F: Scalar> BatchForward<F> {
    pub fn outputs(&self) -> &[Tensor<F>] {
        self.acts.last().expect("forward stores outputs")
    }

    /// Inputs of layer `layer`, one tensor per sample. Empty for the skipped
    /// intermediate of a fused upsample-conv pair.
    pub fn layer_inputs(&self, layer: usize) -> &[Tensor<F>] {
        &self.acts[layer]
    }

    /// Batch-norm statistics gathered during a training-phase forward,
    /// as (layer index, stats) pairs.
    pub fn bn_stats(&self) -> &[(usize, BatchStats<F>)] {
        &self.stats
    }
}

fn conv_geom(spec: &LayerSpec, shape: &ActShape) -> ConvGeom {
    match (*spec, *shape) {
        (LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad }, ActShape::Map { h, w, .. }) => {
            ConvGeom::new(in_ch, out_ch, kernel, stride, pad, h, w)
        }
        _ => unreachable!("conv geometry on a non-conv layer"),
    }
}

/// One unit of the execution plan: either a single layer, or an
/// `upsample x2 -> 3x3 conv` pair collapsed into the fused kernel
/// (see [`layers::upconv_forward`]). The fused form skips materializing the
/// upsampled activation, so its slot in the activation list stays empty and
/// backward jumps over it.
enum Step {
    Single(usize),
    UpConv { conv: usize, geom: UpConvGeom },
}

fn execution_plan(arch: &ArchDescriptor, shapes: &[ActShape]) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut li = 0;
    while li < arch.layers.len() {
        if li + 1 < arch.layers.len() {
            if let (
                LayerSpec::UpsampleNearest2,
                LayerSpec::Conv { in_ch, out_ch, kernel: 3, stride: 1, pad: 1 },
            ) = (&arch.layers[li], &arch.layers[li + 1])
            {
                if let ActShape::Map { h, w, .. } = shapes[li] {
                    let geom = UpConvGeom { in_ch: *in_ch, out_ch: *out_ch, h, w };
                    steps.push(Step::UpConv { conv: li + 1, geom });
                    li += 2;
                    continue;
                }
            }
        }
        steps.push(Step::Single(li));
        li += 1;
    }
    steps
}

fn check_finite<F: Scalar>(tensors: &[Tensor<F>], name: &str) -> Result<()> {
    for t in tensors {
        if !t.all_finite() {
            return Err(Error::NumericOverflow { layer: name.to_string() });
        }
    }
    Ok(())
}

/// Runs the whole batch through the network, keeping every intermediate
/// activation for backward.
pub fn forward_batch<F: Scalar>(
    model: &ModelParams<F>,
    images: &[&Tensor<F>],
    phase: Phase,
) -> Result<BatchForward<F>> {
    let arch = model.arch();
    let shapes = arch.act_shapes()?;
    for img in images {
        if img.dims() != shapes[0].dims().as_slice() {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input {:?}",
                img.dims(),
                shapes[0].dims()
            )));
        }
    }
    let mut acts: Vec<Vec<Tensor<F>>> = Vec::with_capacity(arch.layers.len() + 1);
    acts.push(images.iter().map(|t| (*t).clone()).collect());
    let mut caches = Vec::with_capacity(arch.layers.len());
    let mut stats = Vec::new();

    for step in execution_plan(arch, &shapes) {
        let li = match step {
            Step::Single(li) => li,
            Step::UpConv { conv, geom } => {
                let inputs = acts.last().expect("inputs present");
                let blocks = model.layer_blocks(conv);
                let weight = block_slice(model, blocks[0]);
                let bias = block_slice(model, blocks[1]);
                let outputs: Vec<Tensor<F>> =
                    inputs.iter().map(|x| layers::upconv_forward(&geom, x, weight, bias)).collect();
                check_finite(&outputs, &arch.layer_name(conv))?;
                caches.push(LayerCache::None);
                caches.push(LayerCache::None);
                acts.push(Vec::new()); // upsample output stays unmaterialized
                acts.push(outputs);
                continue;
            }
        };
        let spec = &arch.layers[li];
        let inputs = acts.last().expect("inputs present");
        let mut cache = LayerCache::None;
        let outputs: Vec<Tensor<F>> = match spec {
            LayerSpec::Conv { .. } => {
                let g = conv_geom(spec, &shapes[li]);
                let blocks = model.layer_blocks(li);
                let weight = block_slice(model, blocks[0]);
                let bias = block_slice(model, blocks[1]);
                inputs.iter().map(|x| layers::conv_forward(&g, x, weight, bias)).collect()
            }
            LayerSpec::Norm { kind, .. } => {
                let blocks = model.layer_blocks(li);
                let gamma = block_slice(model, blocks[0]);
                let beta = block_slice(model, blocks[1]);
                match (kind, phase) {
                    (NormKind::Instance, _) => {
                        let mut per = Vec::with_capacity(inputs.len());
                        let outs = inputs
                            .iter()
                            .map(|x| {
                                let (y, c) = norm::instance_norm_forward(x, gamma, beta);
                                per.push(c);
                                y
                            })
                            .collect();
                        cache = LayerCache::PerSample(per);
                        outs
                    }
                    (NormKind::Batch, Phase::Train) => {
                        let (outs, c, st) = norm::batch_norm_forward_train(inputs, gamma, beta);
                        cache = LayerCache::Shared(c);
                        stats.push((li, st));
                        outs
                    }
                    (NormKind::Batch, Phase::Eval) => {
                        let rmean = block_slice(model, blocks[2]);
                        let rvar = block_slice(model, blocks[3]);
                        let mut per = Vec::with_capacity(inputs.len());
                        let outs = inputs
                            .iter()
                            .map(|x| {
                                let (y, c) = norm::batch_norm_forward_eval(x, gamma, beta, rmean, rvar);
                                per.push(c);
                                y
                            })
                            .collect();
                        cache = LayerCache::PerSample(per);
                        outs
                    }
                }
            }
            LayerSpec::Relu => inputs.iter().map(layers::relu_forward).collect(),
            LayerSpec::UpsampleNearest2 => inputs.iter().map(layers::upsample2_forward).collect(),
            LayerSpec::MeanPool2 => inputs.iter().map(layers::meanpool2_forward).collect(),
            LayerSpec::GlobalMeanPool => inputs.iter().map(layers::global_meanpool_forward).collect(),
            LayerSpec::Dense { .. } => {
                let blocks = model.layer_blocks(li);
                let weight = block_slice(model, blocks[0]);
                let bias = block_slice(model, blocks[1]);
                inputs.iter().map(|x| layers::dense_forward(x, weight, bias)).collect()
            }
        };
        check_finite(&outputs, &arch.layer_name(li))?;
        caches.push(cache);
        acts.push(outputs);
    }
    Ok(BatchForward { acts, caches, stats })
}

fn block_slice<'a, F: Scalar>(model: &'a ModelParams<F>, entry: &LayoutEntry) -> &'a [F] {
    &model.data()[entry.offset..entry.offset + entry.len]
}

/// Propagates output gradients back through a stored forward pass. Returns the
/// gradient with respect to the full parameter vector, summed over the batch.
pub fn backward_batch<F: Scalar>(
    model: &ModelParams<F>,
    fwd: &BatchForward<F>,
    dlogits: Vec<Tensor<F>>,
) -> Result<Vec<F>> {
    let arch = model.arch();
    let shapes = arch.act_shapes()?;
    let mut grad = vec![F::zero(); model.len()];
    let mut dy = dlogits;

    let plan = execution_plan(arch, &shapes);
    for step in plan.iter().rev() {
        let li = match *step {
            Step::Single(li) => li,
            Step::UpConv { conv, geom } => {
                let inputs = &fwd.acts[conv - 1];
                let blocks = model.layer_blocks(conv);
                let weight = block_slice(model, blocks[0]);
                let (w_off, w_len) = (blocks[0].offset, blocks[0].len);
                let (b_off, b_len) = (blocks[1].offset, blocks[1].len);
                let mut dxs = Vec::with_capacity(inputs.len());
                for (x, g_out) in inputs.iter().zip(&dy) {
                    let (dx, dw, db) = layers::upconv_backward(&geom, x, weight, g_out);
                    accumulate(&mut grad[w_off..w_off + w_len], &dw);
                    accumulate(&mut grad[b_off..b_off + b_len], &db);
                    dxs.push(dx);
                }
                dy = dxs;
                continue;
            }
        };
        let spec = &arch.layers[li];
        let inputs = &fwd.acts[li];
        dy = match spec {
            LayerSpec::Conv { .. } => {
                let g = conv_geom(spec, &shapes[li]);
                let blocks = model.layer_blocks(li);
                let weight = block_slice(model, blocks[0]);
                let (w_off, w_len) = (blocks[0].offset, blocks[0].len);
                let (b_off, b_len) = (blocks[1].offset, blocks[1].len);
                let mut dxs = Vec::with_capacity(inputs.len());
                for (x, g_out) in inputs.iter().zip(&dy) {
                    let (dx, dw, db) = layers::conv_backward(&g, x, weight, g_out);
                    accumulate(&mut grad[w_off..w_off + w_len], &dw);
                    accumulate(&mut grad[b_off..b_off + b_len], &db);
                    dxs.push(dx);
                }
                dxs
            }
            LayerSpec::Norm { .. } => {
                let blocks = model.layer_blocks(li);
                let gamma = block_slice(model, blocks[0]);
                let (g_off, g_len) = (blocks[0].offset, blocks[0].len);
                let (be_off, be_len) = (blocks[1].offset, blocks[1].len);
                match &fwd.caches[li] {
                    LayerCache::PerSample(per) => {
                        let mut dxs = Vec::with_capacity(inputs.len());
                        let eval_bn = matches!(spec, LayerSpec::Norm { kind: NormKind::Batch, .. });
                        for ((x, cache), g_out) in inputs.iter().zip(per).zip(&dy) {
                            let (dx, dgamma, dbeta) = if eval_bn {
                                norm::batch_norm_backward_eval(x, gamma, cache, g_out)
                            } else {
                                norm::instance_norm_backward(x, gamma, cache, g_out)
                            };
                            accumulate(&mut grad[g_off..g_off + g_len], &dgamma);
                            accumulate(&mut grad[be_off..be_off + be_len], &dbeta);
                            dxs.push(dx);
                        }
                        dxs
                    }
                    LayerCache::Shared(cache) => {
                        let (dxs, dgamma, dbeta) = norm::batch_norm_backward_train(inputs, gamma, cache, &dy);
                        accumulate(&mut grad[g_off..g_off + g_len], &dgamma);
                        accumulate(&mut grad[be_off..be_off + be_len], &dbeta);
                        dxs
                    }
                    LayerCache::None => unreachable!("norm layer stored no cache"),
                }
            }
            LayerSpec::Relu => inputs.iter().zip(&dy).map(|(x, g)| layers::relu_backward(x, g)).collect(),
            LayerSpec::UpsampleNearest2 => {
                inputs.iter().zip(&dy).map(|(x, g)| layers::upsample2_backward(x, g)).collect()
            }
            LayerSpec::MeanPool2 => inputs.iter().zip(&dy).map(|(x, g)| layers::meanpool2_backward(x, g)).collect(),
            LayerSpec::GlobalMeanPool => {
                inputs.iter().zip(&dy).map(|(x, g)| layers::global_meanpool_backward(x, g)).collect()
            }
            LayerSpec::Dense { .. } => {
                let blocks = model.layer_blocks(li);
                let weight = block_slice(model, blocks[0]);
                let (w_off, w_len) = (blocks[0].offset, blocks[0].len);
                let (b_off, b_len) = (blocks[1].offset, blocks[1].len);
                let mut dxs = Vec::with_capacity(inputs.len());
                for (x, g_out) in inputs.iter().zip(&dy) {
                    let (dx, dw, db) = layers::dense_backward(x, weight, g_out);
                    accumulate(&mut grad[w_off..w_off + w_len], &dw);
                    accumulate(&mut grad[b_off..b_off + b_len], &db);
                    dxs.push(dx);
                }
                dxs
            }
        };
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { layer: "backward".to_string() });
    }
    Ok(grad)
}

fn accumulate<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// FP update to batch-norm running statistics after a training forward.
pub fn apply_bn_updates<F: Scalar>(model: &mut ModelParams<F>, updates: &[(usize, BatchStats<F>)]) {
    let momentum = F::from_f64_lossy(norm::BN_MOMENTUM);
    let keep = F::one() - momentum;
    for (li, stats) in updates {
        let blocks: Vec<LayoutEntry> = model.layer_blocks(*li).into_iter().cloned().collect();
        debug_assert_eq!(blocks.len(), 4, "batch norm layer has running stats");
        {
            let rmean = &mut model.data_mut()[blocks[2].offset..blocks[2].offset + blocks[2].len];
            for (r, &m) in rmean.iter_mut().zip(&stats.mean) {
                *r = keep * *r + momentum * m;
            }
        }
        {
            let rvar = &mut model.data_mut()[blocks[3].offset..blocks[3].offset + blocks[3].len];
            for (r, &v) in rvar.iter_mut().zip(&stats.var) {
                *r = keep * *r + momentum * v;
            }
        }
    }
}

/// Evaluation-mode forward of a single image; returns the logits.
pub fn forward<F: Scalar>(model: &ModelParams<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
    let fwd = forward_batch(model, &[image], Phase::Eval)?;
    Ok(fwd.outputs()[0].clone())
}

/// Argmax class map of a `[classes, h, w]` logits tensor (lowest class index
/// wins ties).
pub fn argmax_mask<F: Scalar>(logits: &Tensor<F>) -> Vec<u8> {
    let classes = logits.dims()[0];
    let npix = logits.dims()[1] * logits.dims()[2];
    let data = logits.data();
    let mut out = vec![0u8; npix];
    for (px, o) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = data[px];
        for c in 1..classes {
            let v = data[c * npix + px];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        *o = best as u8;
    }
    out
}

/// Argmax segmentation of one image.
pub fn predict_mask<F: Scalar>(model: &ModelParams<F>, image: &Tensor<F>) -> Result<Vec<u8>> {
    let logits = forward(model, image)?;
    Ok(argmax_mask(&logits))
}

/// Argmax of a flat logit vector (lowest index wins ties).
pub fn argmax_flat<F: Scalar>(logits: &Tensor<F>) -> usize {
    let data = logits.data();
    let mut best = 0usize;
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > data[best] {
            best = i;
        }
    }
    best
}

/// Training-phase loss and parameter gradient of one sample under the given
/// pixel weights.
pub fn backward<F: Scalar>(
    model: &ModelParams<F>,
    image: &Tensor<F>,
    mask: &[u8],
    weights: &[F],
    sample: u64,
) -> Result<(F, GradVector<F>)> {
    let fwd = forward_batch(model, &[image], Phase::Train)?;
    let logits = &fwd.outputs()[0];
    let loss = loss::pixel_loss(logits, mask, weights)?;
    let dlogits = loss::pixel_loss_backward(logits, mask, weights)?;
    let values = backward_batch(model, &fwd, vec![dlogits])?;
    Ok((loss, GradVector { values, sample, class: ClassScope::All, normalized: false }))
}

/// Raw (unnormalized) class-masked gradients for every requested class, with a
/// single shared forward pass. Classes absent from the mask yield an error.
pub fn per_class_raw_gradients<F: Scalar>(
    model: &ModelParams<F>,
    image: &Tensor<F>,
    mask: &[u8],
    classes: &[usize],
    sample: u64,
) -> Result<Vec<GradVector<F>>> {
    let fwd = forward_batch(model, &[image], Phase::Train)?;
    let logits = fwd.outputs()[0].clone();
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let weights = loss::class_indicator_weights::<F>(mask, class)
            .ok_or(Error::ClassAbsent { sample, class })?;
        let dlogits = loss::pixel_loss_backward(&logits, mask, &weights)?;
        let values = backward_batch(model, &fwd, vec![dlogits])?;
        out.push(GradVector { values, sample, class: ClassScope::Class(class), normalized: false });
    }
    Ok(out)
}

/// Restriction of a raw gradient to a sorted coordinate subset, rescaled to
/// unit norm after the cut.
pub fn prune_view<F: Scalar>(grad: &GradVector<F>, indices: &[usize]) -> Result<GradVector<F>> {
    if grad.normalized {
        return Err(Error::Config("prune_view expects an unnormalized gradient".into()));
    }
    let p = grad.values.len();
    for pair in indices.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config("prune indices must be strictly increasing".into()));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= p {
            return Err(Error::Config(format!("prune index {last} out of range for {p} parameters")));
        }
    }
    if indices.is_empty() {
        return Err(Error::Config("prune index list is empty".into()));
    }
    let mut values: Vec<F> = indices.iter().map(|&i| grad.values[i]).collect();
    let norm = values.iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
    if norm <= F::zero() {
        let class = match grad.class {
            ClassScope::Class(c) => c,
            ClassScope::All => usize::MAX,
        };
        return Err(Error::DegenerateGradient { sample: grad.sample, class });
    }
    for v in &mut values {
        *v = *v / norm;
    }
    Ok(GradVector { values, sample: grad.sample, class: grad.class, normalized: true })
}

/// Normalized class-masked gradient over all coordinates.
pub fn class_masked_gradient<F: Scalar>(
    model: &ModelParams<F>,
    image: &Tensor<F>,
    mask: &[u8],
    class: usize,
    sample: u64,
) -> Result<GradVector<F>> {
    let raw = per_class_raw_gradients(model, image, mask, &[class], sample)?.pop().expect("one class");
    let all: Vec<usize> = (0..raw.values.len()).collect();
    prune_view(&raw, &all)
}

/// In-place SGD step with L2 weight decay: `w -= lr * (g + wd * w)`.
pub fn sgd_step<F: Scalar>(model: &mut ModelParams<F>, grad: &[F], lr: F, weight_decay: F) {
    debug_assert_eq!(model.len(), grad.len());
    for (w, &g) in model.data_mut().iter_mut().zip(grad) {
        *w = *w - lr * (g + weight_decay * *w);
    }
}
