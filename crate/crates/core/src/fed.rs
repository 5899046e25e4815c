//! Federated optimization: client-local SGD, FedAvg and SCAFFOLD aggregation,
//! and the synchronous round loop.
//!
//! Everything here is deterministic given the experiment seed. Client shuffles
//! are keyed by (client, round, epoch), so a run can be stopped and resumed at
//! any round boundary and reproduce the uninterrupted trajectory bit for bit.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{SegAccumulator, SegMetrics};
use crate::nn::loss::{pixel_loss, pixel_loss_backward, uniform_weights};
use crate::nn::{apply_bn_updates, argmax_mask, backward_batch, forward_batch, ActShape, Phase};
use crate::rng::{stream, SeedSplitter};
use crate::{ModelParams64, Tensor64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Fedavg,
    Scaffold,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Fedavg => "fedavg",
            Optimizer::Scaffold => "scaffold",
        }
    }
}

/// Per-round training hyperparameters. Weight decay applies to the whole
/// parameter vector, so nets carrying running statistics should keep it at
/// zero (the defaults do).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            local_epochs: 1,
            batch_size: 16,
            lr0: 0.32,
            lr_decay: 0.9975,
            weight_decay: 0.0,
            optimizer: Optimizer::Fedavg,
        }
    }
}

/// Learning rate at (zero-based) round `t`.
pub fn learning_rate(cfg: &RoundConfig, round: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(round as i32)
}

/// SCAFFOLD control variates seen by one client during a local run.
#[derive(Debug, Clone, Copy)]
pub struct Control<'a> {
    pub global: &'a [f64],
    pub local: &'a [f64],
}

/// Parameter container [`local_sgd`] can step through. The gradient closure
/// gets the full container (so it can e.g. refresh batch-norm running
/// statistics); the optimizer only touches the flat vector.
pub trait ParamStore {
    fn params_mut(&mut self) -> &mut [f64];
}

impl ParamStore for Vec<f64> {
    fn params_mut(&mut self) -> &mut [f64] {
        self
    }
}

impl ParamStore for ModelParams64 {
    fn params_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }
}

/// Location of a local run, used to name divergence errors.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub client: usize,
    pub round: usize,
}

/// Runs `steps` SGD steps in place and returns the mean per-step loss.
///
/// `grad(step, state, out)` writes the loss gradient into `out` (pre-zeroed)
/// and returns the loss; it may update non-trainable state but must not apply
/// the step itself. With control variates the update is
/// `w -= lr * (g + wd*w + c - c_k)`.
pub fn local_sgd<S, G>(
    state: &mut S,
    steps: usize,
    lr: f64,
    weight_decay: f64,
    control: Option<&Control>,
    ctx: StepContext,
    mut grad: G,
) -> Result<f64>
where
    S: ParamStore,
    G: FnMut(usize, &mut S, &mut [f64]) -> Result<f64>,
{
    let dim = state.params_mut().len();
    let mut gbuf = vec![0.0; dim];
    let mut total = 0.0;
    for s in 0..steps {
        gbuf.fill(0.0);
        let diverged = || Error::Diverged { client: ctx.client, round: ctx.round, batch: s };
        let loss = match grad(s, state, &mut gbuf) {
            Ok(l) => l,
            Err(Error::NumericOverflow { layer }) => {
                log::warn!(
                    "client {} round {} batch {s}: non-finite activations in {layer}",
                    ctx.client,
                    ctx.round
                );
                return Err(diverged());
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged());
        }
        total += loss;
        let w = state.params_mut();
        match control {
            Some(c) => {
                for i in 0..dim {
                    w[i] -= lr * (gbuf[i] + weight_decay * w[i] + c.global[i] - c.local[i]);
                }
            }
            None => {
                for i in 0..dim {
                    w[i] -= lr * (gbuf[i] + weight_decay * w[i]);
                }
            }
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(diverged());
        }
    }
    Ok(total / steps.max(1) as f64)
}

/// SCAFFOLD client control update over a finished local run:
/// `c_k^+ - c_k = -c - delta / (steps * lr)`.
pub fn control_delta(delta: &[f64], global_control: &[f64], steps: usize, lr: f64) -> Vec<f64> {
    let s_eta = steps as f64 * lr;
    delta.iter().zip(global_control).map(|(d, c)| -c - d / s_eta).collect()
}

/// One client's finished local run.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client: usize,
    /// `w_local - w_global` over the full parameter vector.
    pub delta: Vec<f64>,
    /// Sample count backing the run (FedAvg aggregation weight).
    pub n: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Present when the run used control variates.
    pub control_delta: Option<Vec<f64>>,
}

/// Local training of a segmentation or classification net on one client's
/// shard: `local_epochs` passes, each a fresh seeded shuffle chunked into
/// `batch_size` batches, minimizing the mean per-sample loss per batch.
pub fn local_train(
    model: &ModelParams64,
    shard: &[&Sample],
    client: usize,
    round: usize,
    cfg: &RoundConfig,
    control: Option<&Control>,
    splitter: &SeedSplitter,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Config(format!("client {client} has an empty shard")));
    }
    let lr = learning_rate(cfg, round);
    let batch = cfg.batch_size.max(1);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut rng = splitter.substream3(stream::SHUFFLE, client as u64, round as u64, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            batches.push(chunk.to_vec());
        }
    }
    let [_, h, w] = model.arch().input;
    let weights = uniform_weights::<f64>(h, w);

    let mut params = model.clone();
    let steps = batches.len();
    let ctx = StepContext { client, round };
    let mean_loss = local_sgd(&mut params, steps, lr, cfg.weight_decay, control, ctx, |s, p, out| {
        let idx = &batches[s];
        let images: Vec<&Tensor64> = idx.iter().map(|&i| &shard[i].image).collect();
        let fwd = forward_batch(p, &images, Phase::Train)?;
        let b = idx.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let logits = &fwd.outputs()[j];
            loss += pixel_loss(logits, &shard[i].mask, &weights)?;
            let mut d = pixel_loss_backward(logits, &shard[i].mask, &weights)?;
            for v in d.data_mut() {
                *v /= b;
            }
            dlogits.push(d);
        }
        let g = backward_batch(p, &fwd, dlogits)?;
        out.copy_from_slice(&g);
        apply_bn_updates(p, fwd.bn_stats());
        Ok(loss / b)
    })?;

    let delta: Vec<f64> = params.data().iter().zip(model.data()).map(|(a, b)| a - b).collect();
    let control_delta = control.map(|c| control_delta(&delta, c.global, steps, lr));
    Ok(LocalOutcome { client, delta, n: shard.len(), steps, mean_loss, control_delta })
}

fn sorted_by_client(updates: &[LocalOutcome]) -> Vec<&LocalOutcome> {
    let mut refs: Vec<&LocalOutcome> = updates.iter().collect();
    refs.sort_by_key(|u| u.client);
    for pair in refs.windows(2) {
        assert_ne!(pair[0].client, pair[1].client, "duplicate client update");
    }
    refs
}

/// Sample-weighted FedAvg step: `w += sum_k (n_k / N) * delta_k`, client
/// contributions folded in ascending client id so the result is independent
/// of update arrival order.
pub fn fedavg_aggregate(global: &mut [f64], updates: &[LocalOutcome]) {
    assert!(!updates.is_empty(), "fedavg over zero updates");
    let refs = sorted_by_client(updates);
    let total: usize = refs.iter().map(|u| u.n).sum();
    let mut acc = vec![0.0; global.len()];
    for u in &refs {
        let wk = u.n as f64 / total as f64;
        for (a, d) in acc.iter_mut().zip(&u.delta) {
            *a += wk * d;
        }
    }
    for (g, a) in global.iter_mut().zip(&acc) {
        *g += a;
    }
}

/// Server-side SCAFFOLD state: the global control variate and one per client.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState {
    pub global: Vec<f64>,
    pub clients: Vec<Vec<f64>>,
}

impl ScaffoldState {
    pub fn zeros(dim: usize, k: usize) -> Self {
        ScaffoldState { global: vec![0.0; dim], clients: vec![vec![0.0; dim]; k] }
    }

    pub fn control(&self, client: usize) -> Control<'_> {
        Control { global: &self.global, local: &self.clients[client] }
    }
}

/// SCAFFOLD server step under full participation: uniform `1/K` averaging of
/// parameter deltas and control deltas, folded in ascending client id.
pub fn scaffold_aggregate(global: &mut [f64], state: &mut ScaffoldState, updates: &[LocalOutcome]) -> Result<()> {
    assert!(!updates.is_empty(), "scaffold over zero updates");
    let refs = sorted_by_client(updates);
    let k = refs.len() as f64;
    let mut acc_w = vec![0.0; global.len()];
    let mut acc_c = vec![0.0; global.len()];
    for u in &refs {
        let dc = u
            .control_delta
            .as_ref()
            .ok_or_else(|| Error::Config(format!("client {} update carries no control delta", u.client)))?;
        for i in 0..global.len() {
            acc_w[i] += u.delta[i] / k;
            acc_c[i] += dc[i] / k;
        }
        let own = &mut state.clients[u.client];
        for (c, d) in own.iter_mut().zip(dc) {
            *c += d;
        }
    }
    for i in 0..global.len() {
        global[i] += acc_w[i];
        state.global[i] += acc_c[i];
    }
    Ok(())
}

pub const EVAL_BATCH: usize = 16;

/// Adds a model's predictions over samples to a pixel-count accumulator, so
/// evaluations of several models (one per client, say) can pool into one
/// dataset-level score.
pub fn accumulate_miou(
    model: &ModelParams64,
    samples: &[&Sample],
    batch: usize,
    acc: &mut SegAccumulator,
) -> Result<()> {
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Tensor64> = chunk.iter().map(|s| &s.image).collect();
        let fwd = forward_batch(model, &images, Phase::Eval)?;
        for (i, s) in chunk.iter().enumerate() {
            acc.add(&argmax_mask(&fwd.outputs()[i]), &s.mask);
        }
    }
    Ok(())
}

/// Dataset-level mean IoU of a model over samples, batched eval-phase forward.
pub fn evaluate_miou(model: &ModelParams64, samples: &[&Sample], batch: usize) -> Result<SegMetrics> {
    let shapes = model.arch().act_shapes()?;
    let classes = match shapes.last() {
        Some(ActShape::Map { ch, .. }) => *ch,
        _ => return Err(Error::Config("model does not produce a class map".into())),
    };
    let mut acc = SegAccumulator::new(classes);
    accumulate_miou(model, samples, batch, &mut acc)?;
    Ok(acc.finish())
}

/// One line of the training log (`rounds.jsonl`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub wall_ms: u64,
    pub optimizer: String,
}

/// A federated training job over `[start_round, end_round)`. To resume a
/// finished job, feed its final parameters (and SCAFFOLD state, if any) back
/// in and bump `start_round`.
pub struct FedJob<'a> {
    pub init: &'a ModelParams64,
    pub shards: &'a [Vec<&'a Sample>],
    /// Validation pool; empty skips per-round evaluation and best tracking.
    pub val: &'a [&'a Sample],
    pub cfg: RoundConfig,
    pub start_round: usize,
    pub end_round: usize,
    pub scaffold: Option<ScaffoldState>,
}

pub struct FedOutcome {
    pub final_params: ModelParams64,
    /// Highest-validation-mIoU snapshot within this job (ties keep the
    /// earlier round); equals `final_params` when no validation pool given.
    pub best_params: ModelParams64,
    pub best_val: Option<f64>,
    pub log: Vec<RoundLog>,
    pub scaffold: Option<ScaffoldState>,
}

/// Runs synchronous federated rounds with full participation. Empty shards
/// are skipped with a warning; a round in which no client trains is an error.
pub fn run_federated(job: FedJob, splitter: &SeedSplitter, mut sink: Option<&mut (dyn Write + '_)>) -> Result<FedOutcome> {
    let mut params = job.init.clone();
    let mut scaffold = match (job.cfg.optimizer, job.scaffold) {
        (Optimizer::Scaffold, Some(s)) => Some(s),
        (Optimizer::Scaffold, None) => Some(ScaffoldState::zeros(params.len(), job.shards.len())),
        (Optimizer::Fedavg, s) => {
            assert!(s.is_none(), "control state passed to a FedAvg job");
            None
        }
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams64)> = None;

    for (k, shard) in job.shards.iter().enumerate() {
        if shard.is_empty() {
            log::warn!(
                "client {k} holds no samples for rounds {}..{} and skips this job",
                job.start_round,
                job.end_round
            );
        }
    }

    for t in job.start_round..job.end_round {
        let started = Instant::now();
        let lr = learning_rate(&job.cfg, t);

        let jobs: Vec<(usize, &Vec<&Sample>)> = job
            .shards
            .iter()
            .enumerate()
            .filter(|(_, shard)| !shard.is_empty())
            .collect();
        let updates: Vec<LocalOutcome> = jobs
            .par_iter()
            .map(|&(k, shard)| {
                let control = scaffold.as_ref().map(|s| s.control(k));
                local_train(&params, shard, k, t, &job.cfg, control.as_ref(), splitter)
            })
            .collect::<Result<_>>()?;
        if updates.is_empty() {
            return Err(Error::Config(format!("round {t}: no client produced an update")));
        }

        match &mut scaffold {
            None => fedavg_aggregate(params.data_mut(), &updates),
            Some(state) => scaffold_aggregate(params.data_mut(), state, &updates)?,
        }

        let samples: usize = updates.iter().map(|u| u.n).sum();
        let train_loss = updates.iter().map(|u| u.n as f64 * u.mean_loss).sum::<f64>() / samples as f64;
        let val_miou = if job.val.is_empty() {
            None
        } else {
            let m = evaluate_miou(&params, job.val, EVAL_BATCH)?.miou;
            if best.as_ref().map_or(true, |(b, _)| m > *b) {
                best = Some((m, params.clone()));
            }
            Some(m)
        };

        let row = RoundLog {
            round: t,
            lr,
            train_loss,
            val_miou,
            wall_ms: started.elapsed().as_millis() as u64,
            optimizer: job.cfg.optimizer.name().to_string(),
        };
        if let Some(out) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *out, &row).map_err(Error::Json)?;
            out.write_all(b"\n")?;
        }
        log::info!(
            "round {t}: lr {lr:.5} loss {train_loss:.4} val {} ({} ms)",
            val_miou.map_or("-".to_string(), |v| format!("{v:.4}")),
            row.wall_ms
        );
        log.push(row);
    }

    let (best_val, best_params) = match best {
        Some((v, p)) => (Some(v), p),
        None => (None, params.clone()),
    };
    Ok(FedOutcome { final_params: params, best_params, best_val, log, scaffold })
}
