//! Sample-clustered federated training, end to end: a common pretraining,
//! gradient-based isolation of sample domains, independent per-cluster
//! refinement, and a small classifier that dispatches test images to cluster
//! models. The client-level clustering and local-finetuning baselines live
//! here too, since they share every stage primitive.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Scheme};
use crate::ddi::{deep_domain_isolation, DdiConfig, DomainIsolation};
use crate::error::{Error, Result};
use crate::fed::{
    control_delta, evaluate_miou, fedavg_aggregate, local_sgd, local_train, run_federated,
    scaffold_aggregate, learning_rate, FedJob, FedOutcome, LocalOutcome, Optimizer, RoundConfig,
    RoundLog, ScaffoldState, StepContext, EVAL_BATCH,
};
use crate::metrics::{macro_f1, SegAccumulator, SegMetrics};
use crate::nn::loss::{label_loss, label_loss_backward};
use crate::nn::{
    apply_bn_updates, argmax_flat, argmax_mask, backward_batch, forward_batch, predict_mask,
    ActShape, ArchDescriptor, Phase,
};
use crate::rng::{stream, SeedSplitter};
use crate::{ModelParams64, Tensor64};

/// Training recipe for the domain classifier: SCAFFOLD at a deliberately
/// small constant learning rate, full local batches, mild weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Full-batch gradient steps each client takes per round. Several local
    /// steps are what separates the optimizers here: SCAFFOLD keeps its
    /// correction, while plain FedAvg drifts towards single-label optima on
    /// disjoint clients.
    pub local_epochs: usize,
    pub max_rounds: usize,
    pub optimizer: Optimizer,
    /// Final validation macro-F1 below this flags the classifier as
    /// unconverged (the pipeline still returns it).
    pub fail_f1: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.005,
            weight_decay: 0.001,
            local_epochs: 10,
            max_rounds: 100,
            optimizer: Optimizer::Scaffold,
            fail_f1: 0.6,
        }
    }
}

/// Full pipeline schedule. The learning-rate decay runs on absolute round
/// numbers, so refinement continues the pretraining schedule seamlessly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Rounds of common pretraining before clustering.
    pub split_round: usize,
    /// Total communication rounds (pretraining + refinement).
    pub total_rounds: usize,
    pub round: RoundConfig,
    pub ddi: DdiConfig,
    pub classifier: ClassifierConfig,
    /// Aggregation used during per-cluster refinement.
    pub refine_optimizer: Optimizer,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split_round: 30,
            total_rounds: 120,
            round: RoundConfig::default(),
            ddi: DdiConfig::default(),
            classifier: ClassifierConfig::default(),
            refine_optimizer: Optimizer::Fedavg,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split_round == 0 || self.split_round >= self.total_rounds {
            return Err(Error::Config(format!(
                "split round {} must lie strictly inside the {}-round budget",
                self.split_round, self.total_rounds
            )));
        }
        Ok(())
    }
}

/// One segmentation model per kept cluster, densely indexed.
#[derive(Debug, Clone)]
pub struct ClusterModels {
    pub models: Vec<ModelParams64>,
}

/// Per-cluster client sub-shards: entry `[m][k]` holds client `k`'s samples
/// assigned to cluster `m`, in shard order. Errors if a sample is missing
/// from the assignment (the clustering must be total).
pub fn cluster_shards<'a>(
    shards: &[Vec<&'a Sample>],
    assignments: &BTreeMap<u64, usize>,
    m: usize,
) -> Result<Vec<Vec<Vec<&'a Sample>>>> {
    let mut out: Vec<Vec<Vec<&Sample>>> = vec![vec![Vec::new(); shards.len()]; m];
    for (k, shard) in shards.iter().enumerate() {
        for s in shard {
            let &c = assignments
                .get(&s.id)
                .ok_or_else(|| Error::Config(format!("sample {} has no cluster assignment", s.id)))?;
            if c >= m {
                return Err(Error::Config(format!("sample {} assigned to cluster {c} of {m}", s.id)));
            }
            out[c][k].push(s);
        }
    }
    Ok(out)
}

/// Output of [`clustered_refinement`]: kept clusters (densely re-indexed when
/// empties were dropped) with their models and logs.
#[derive(Debug)]
pub struct Refinement {
    pub models: ClusterModels,
    /// Original cluster id of each kept model, in dense order.
    pub kept: Vec<usize>,
    /// Assignments re-labeled to dense kept ids.
    pub assignments: BTreeMap<u64, usize>,
    pub logs: Vec<Vec<RoundLog>>,
}

/// Independent federated refinement per cluster over rounds
/// `[start_round, end_round)`, every cluster starting from the common
/// pretrained parameters. A client contributes to a cluster exactly its
/// samples assigned there (weight `n_{k,m} / N_m`); clients without matching
/// samples skip that cluster. Empty clusters are dropped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn clustered_refinement(
    w_init: &ModelParams64,
    shards: &[Vec<&Sample>],
    assignments: &BTreeMap<u64, usize>,
    m: usize,
    cfg: &RoundConfig,
    start_round: usize,
    end_round: usize,
    splitter: &SeedSplitter,
    mut sink: Option<&mut (dyn Write + '_)>,
) -> Result<Refinement> {
    let per_cluster = cluster_shards(shards, assignments, m)?;
    let mut models = Vec::new();
    let mut kept = Vec::new();
    let mut logs = Vec::new();
    for (c, cluster) in per_cluster.iter().enumerate() {
        let total: usize = cluster.iter().map(Vec::len).sum();
        if total == 0 {
            log::warn!("cluster {c} holds no samples and is dropped");
            continue;
        }
        let out = run_federated(
            FedJob {
                init: w_init,
                shards: cluster,
                val: &[],
                cfg: cfg.clone(),
                start_round,
                end_round,
                scaffold: None,
            },
            splitter,
            sink.as_deref_mut(),
        )?;
        models.push(out.final_params);
        logs.push(out.log);
        kept.push(c);
    }
    if models.is_empty() {
        return Err(Error::Config("every cluster came out empty".into()));
    }
    let dense: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let assignments = assignments.iter().map(|(&id, c)| (id, dense[c])).collect();
    Ok(Refinement { models: ClusterModels { models }, kept, assignments, logs })
}

/// Ground-truth clustering: every sample labeled by its hidden domain.
/// Evaluation-harness reference only; the gradient pipeline never sees it.
pub fn prior_isolation(shards: &[Vec<&Sample>]) -> Result<DomainIsolation> {
    let mut assignments = BTreeMap::new();
    let mut domains = BTreeSet::new();
    for s in shards.iter().flatten() {
        assignments.insert(s.id, s.domain as usize);
        domains.insert(s.domain as usize);
    }
    if assignments.is_empty() {
        return Err(Error::Config("no samples to cluster".into()));
    }
    let m = domains.iter().max().unwrap() + 1;
    Ok(DomainIsolation {
        assignments,
        m,
        class_models: BTreeMap::new(),
        per_class_rand: BTreeMap::new(),
        rand_vs_domain: 1.0,
        silhouette: 1.0,
        isolatable: true,
        pruned_dim: 0,
    })
}

/// Whole-client clustering lifted to sample assignments.
pub fn client_assignments(shards: &[Vec<&Sample>], clusters: &[usize]) -> BTreeMap<u64, usize> {
    assert_eq!(shards.len(), clusters.len());
    shards
        .iter()
        .zip(clusters)
        .flat_map(|(shard, &c)| shard.iter().map(move |s| (s.id, c)))
        .collect()
}

/// Trained dispatch classifier with its convergence diagnostics.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub params: ModelParams64,
    pub val_f1: f64,
    pub flagged: bool,
    pub rounds_run: usize,
}

/// One classifier training round (`rounds.jsonl` line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierRound {
    pub round: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
    pub optimizer: String,
}

/// Stops classifier training once validation is perfect this many rounds in
/// a row; the remaining budget cannot change a 1.0 that persists.
const PERFECT_STREAK: usize = 3;

/// Majority-vote map from hidden domains to cluster labels, used to score the
/// classifier on validation samples (which carry domains but no clustering).
pub fn domain_to_cluster(
    shards: &[Vec<&Sample>],
    assignments: &BTreeMap<u64, usize>,
) -> BTreeMap<u8, usize> {
    let mut counts: BTreeMap<u8, BTreeMap<usize, usize>> = BTreeMap::new();
    for s in shards.iter().flatten() {
        if let Some(&c) = assignments.get(&s.id) {
            *counts.entry(s.domain).or_default().entry(c).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(d, by_cluster)| {
            let best = by_cluster
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0);
            (d, best)
        })
        .collect()
}

/// One full-batch local step of the classifier on (image, cluster label)
/// pairs. Plays the same role as `local_train` does for segmentation.
fn classifier_local_step(
    model: &ModelParams64,
    shard: &[&Sample],
    labels: &BTreeMap<u64, usize>,
    client: usize,
    round: usize,
    cfg: &ClassifierConfig,
    control: Option<&crate::fed::Control>,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Config(format!("client {client} has an empty shard")));
    }
    let mut params = model.clone();
    let ctx = StepContext { client, round };
    let steps = cfg.local_epochs.max(1);
    let mean_loss = local_sgd(&mut params, steps, cfg.lr, cfg.weight_decay, control, ctx, |_, p, out| {
        let images: Vec<&Tensor64> = shard.iter().map(|s| &s.image).collect();
        let fwd = forward_batch(p, &images, Phase::Train)?;
        let b = shard.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(shard.len());
        for (j, s) in shard.iter().enumerate() {
            let label = *labels
                .get(&s.id)
                .ok_or_else(|| Error::Config(format!("sample {} has no cluster label", s.id)))?;
            loss += label_loss(&fwd.outputs()[j], label)?;
            let mut d = label_loss_backward(&fwd.outputs()[j], label)?;
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
    let control_delta = control.map(|c| control_delta(&delta, c.global, steps, cfg.lr));
    Ok(LocalOutcome { client, delta, n: shard.len(), steps, mean_loss, control_delta })
}

/// Predicted cluster per sample, batched eval-phase forward.
pub fn classify_batch(
    classifier: &ModelParams64,
    samples: &[&Sample],
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Tensor64> = chunk.iter().map(|s| &s.image).collect();
        let fwd = forward_batch(classifier, &images, Phase::Eval)?;
        out.extend(fwd.outputs().iter().map(argmax_flat));
    }
    Ok(out)
}

/// Federated training of the dispatch classifier on each client's own
/// (image, cluster label) pairs. Validation macro-F1 is computed against the
/// majority-domain expectation each round; training stops early once it is
/// sustained at 1.0, and the result is flagged when the final score stays
/// under `cfg.fail_f1`.
pub fn train_domain_classifier(
    shards: &[Vec<&Sample>],
    labels: &BTreeMap<u64, usize>,
    m: usize,
    val: &[&Sample],
    cfg: &ClassifierConfig,
    splitter: &SeedSplitter,
    mut sink: Option<&mut (dyn Write + '_)>,
) -> Result<(DomainClassifier, Vec<ClassifierRound>)> {
    if val.is_empty() {
        return Err(Error::Config("classifier training needs a validation pool".into()));
    }
    let first = shards
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Config("classifier training needs samples".into()))?;
    let dims = first.image.dims();
    let arch = ArchDescriptor::domain_classifier(dims[1], dims[2], m);
    let mut init_rng = splitter.substream(stream::INIT, 1);
    let mut params = ModelParams64::init(arch, &mut init_rng)?;

    let expected: Vec<usize> = {
        let map = domain_to_cluster(shards, labels);
        val.iter().map(|s| map.get(&s.domain).copied().unwrap_or(0)).collect()
    };

    let mut scaffold = match cfg.optimizer {
        Optimizer::Scaffold => Some(ScaffoldState::zeros(params.len(), shards.len())),
        Optimizer::Fedavg => None,
    };
    let mut log = Vec::new();
    let mut f1 = 0.0;
    let mut streak = 0;
    let mut rounds_run = 0;

    for t in 0..cfg.max_rounds {
        let jobs: Vec<usize> =
            (0..shards.len()).filter(|&k| !shards[k].is_empty()).collect();
        let updates: Vec<LocalOutcome> = jobs
            .par_iter()
            .map(|&k| {
                let control = scaffold.as_ref().map(|s| s.control(k));
                classifier_local_step(&params, &shards[k], labels, k, t, cfg, control.as_ref())
            })
            .collect::<Result<_>>()?;
        if updates.is_empty() {
            return Err(Error::Config(format!("classifier round {t}: no client trained")));
        }
        match &mut scaffold {
            None => fedavg_aggregate(params.data_mut(), &updates),
            Some(state) => scaffold_aggregate(params.data_mut(), state, &updates)?,
        }

        let predicted = classify_batch(&params, val, EVAL_BATCH)?;
        f1 = macro_f1(&predicted, &expected, m);
        let samples: usize = updates.iter().map(|u| u.n).sum();
        let train_loss =
            updates.iter().map(|u| u.n as f64 * u.mean_loss).sum::<f64>() / samples as f64;
        let row = ClassifierRound {
            round: t,
            lr: cfg.lr,
            train_loss,
            val_f1: f1,
            optimizer: format!("{}-classifier", cfg.optimizer.name()),
        };
        if let Some(out) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *out, &row).map_err(Error::Json)?;
            out.write_all(b"\n")?;
        }
        log::info!("classifier round {t}: loss {train_loss:.4} val F1 {f1:.4}");
        log.push(row);
        rounds_run = t + 1;

        streak = if f1 >= 1.0 { streak + 1 } else { 0 };
        if streak >= PERFECT_STREAK {
            break;
        }
    }

    let flagged = f1 < cfg.fail_f1;
    if flagged {
        log::warn!("classifier failed to converge: validation F1 {f1:.4} after {rounds_run} rounds");
    }
    Ok((DomainClassifier { params, val_f1: f1, flagged, rounds_run }, log))
}

/// Cluster choice for a single image.
pub fn classify_one(classifier: &ModelParams64, image: &Tensor64) -> Result<usize> {
    let fwd = forward_batch(classifier, &[image], Phase::Eval)?;
    Ok(argmax_flat(&fwd.outputs()[0]))
}

/// Label-free inference: pick a cluster from the image alone, then segment
/// with that cluster's model.
pub fn infer(
    classifier: &ModelParams64,
    models: &ClusterModels,
    image: &Tensor64,
) -> Result<Vec<u8>> {
    let cluster = classify_one(classifier, image)?;
    let model = models
        .models
        .get(cluster)
        .ok_or_else(|| Error::Config(format!("classifier picked cluster {cluster} of {}", models.models.len())))?;
    predict_mask(model, image)
}

/// Pooled segmentation metrics under classifier dispatch, plus the cluster
/// chosen for every sample (in input order).
pub fn evaluate_dispatched(
    classifier: &ModelParams64,
    models: &ClusterModels,
    samples: &[&Sample],
    batch: usize,
) -> Result<(SegMetrics, Vec<usize>)> {
    let choices = classify_batch(classifier, samples, batch)?;
    let shapes = models.models[0].arch().act_shapes()?;
    let classes = match shapes.last() {
        Some(ActShape::Map { ch, .. }) => *ch,
        _ => return Err(Error::Config("cluster model does not produce a class map".into())),
    };
    let mut acc = SegAccumulator::new(classes);
    for (c, model) in models.models.iter().enumerate() {
        let mine: Vec<&Sample> = samples
            .iter()
            .zip(&choices)
            .filter(|&(_, &choice)| choice == c)
            .map(|(s, _)| *s)
            .collect();
        for chunk in mine.chunks(batch.max(1)) {
            let images: Vec<&Tensor64> = chunk.iter().map(|s| &s.image).collect();
            let fwd = forward_batch(model, &images, Phase::Eval)?;
            for (i, s) in chunk.iter().enumerate() {
                acc.add(&argmax_mask(&fwd.outputs()[i]), &s.mask);
            }
        }
    }
    Ok((acc.finish(), choices))
}

/// Where stage two's clustering comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSource {
    /// Gradient-based isolation at the pretrained parameters.
    Ddi,
    /// Hidden ground-truth domains (upper-reference baseline).
    Prior,
}

#[derive(Debug)]
pub struct ScflOutcome {
    pub clustering: DomainIsolation,
    /// Sample assignments with dense kept-cluster ids.
    pub assignments: BTreeMap<u64, usize>,
    /// Original cluster id behind each dense id.
    pub kept: Vec<usize>,
    pub models: ClusterModels,
    pub classifier: DomainClassifier,
    pub refine_logs: Vec<Vec<RoundLog>>,
    pub classifier_log: Vec<ClassifierRound>,
}

/// Stages two to four, starting from already-pretrained parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_scfl_from(
    pretrained: &ModelParams64,
    shards: &[Vec<&Sample>],
    val: &[&Sample],
    classes: usize,
    cfg: &PipelineConfig,
    source: ClusterSource,
    splitter: &SeedSplitter,
    mut sink: Option<&mut (dyn Write + '_)>,
) -> Result<ScflOutcome> {
    cfg.validate()?;
    let clustering = match source {
        ClusterSource::Ddi => deep_domain_isolation(pretrained, shards, classes, &cfg.ddi, splitter),
        ClusterSource::Prior => prior_isolation(shards),
    }
    .map_err(|e| e.in_stage("isolation"))?;
    let refine_cfg = RoundConfig { optimizer: cfg.refine_optimizer, ..cfg.round.clone() };
    let refinement = clustered_refinement(
        pretrained,
        shards,
        &clustering.assignments,
        clustering.m,
        &refine_cfg,
        cfg.split_round,
        cfg.total_rounds,
        splitter,
        sink.as_deref_mut(),
    )
    .map_err(|e| e.in_stage("refinement"))?;
    let (classifier, classifier_log) = train_domain_classifier(
        shards,
        &refinement.assignments,
        refinement.kept.len(),
        val,
        &cfg.classifier,
        splitter,
        sink,
    )
    .map_err(|e| e.in_stage("classifier"))?;
    Ok(ScflOutcome {
        clustering,
        assignments: refinement.assignments,
        kept: refinement.kept,
        models: refinement.models,
        classifier,
        refine_logs: refinement.logs,
        classifier_log,
    })
}

/// The full pipeline from untrained parameters: FedAvg pretraining to the
/// split round, then clustering, refinement and the dispatch classifier.
#[allow(clippy::too_many_arguments)]
pub fn run_scfl(
    init: &ModelParams64,
    shards: &[Vec<&Sample>],
    val: &[&Sample],
    classes: usize,
    cfg: &PipelineConfig,
    source: ClusterSource,
    splitter: &SeedSplitter,
    mut sink: Option<&mut (dyn Write + '_)>,
) -> Result<(FedOutcome, ScflOutcome)> {
    cfg.validate()?;
    let pretrain = run_federated(
        FedJob {
            init,
            shards,
            val,
            cfg: cfg.round.clone(),
            start_round: 0,
            end_round: cfg.split_round,
            scaffold: None,
        },
        splitter,
        sink.as_deref_mut(),
    )
    .map_err(|e| e.in_stage("pretrain"))?;
    let outcome = run_scfl_from(
        &pretrain.final_params,
        shards,
        val,
        classes,
        cfg,
        source,
        splitter,
        sink,
    )?;
    Ok((pretrain, outcome))
}

/// Seeded 80/20 carve of one client's shard into (finetune, local validation),
/// both in shard order.
pub fn local_carve<'a>(
    shard: &[&'a Sample],
    client: usize,
    splitter: &SeedSplitter,
) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    if shard.len() < 2 {
        return Err(Error::Config(format!(
            "client {client} has {} samples, too few for a local validation carve",
            shard.len()
        )));
    }
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut rng = splitter.substream(stream::LOCAL_VAL, client as u64);
    order.shuffle(&mut rng);
    let n_val = ((shard.len() as f64) * 0.2).round().max(1.0) as usize;
    let n_val = n_val.min(shard.len() - 1);
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| shard[i]).collect(),
        val_idx.into_iter().map(|i| shard[i]).collect(),
    ))
}

/// Per-client local finetuning results.
#[derive(Debug)]
pub struct LocalFinetune {
    /// Best-local-validation checkpoint per client.
    pub models: Vec<ModelParams64>,
    /// The local validation mIoU backing each checkpoint.
    pub best_vals: Vec<f64>,
}

/// Local finetuning of a trained global model: every client runs `epochs`
/// local epochs on 80% of its shard, continuing the global learning-rate
/// schedule from `start_round`, and keeps the checkpoint with the best mIoU
/// on its held-out 20% (the untouched global model competes as epoch zero).
pub fn fedavg_plus(
    base: &ModelParams64,
    shards: &[Vec<&Sample>],
    cfg: &RoundConfig,
    start_round: usize,
    epochs: usize,
    splitter: &SeedSplitter,
) -> Result<LocalFinetune> {
    let results: Vec<(ModelParams64, f64)> = shards
        .par_iter()
        .enumerate()
        .map(|(k, shard)| {
            let (train, val) = local_carve(shard, k, splitter)?;
            let mut params = base.clone();
            let mut best_val = evaluate_miou(&params, &val, EVAL_BATCH)?.miou;
            let mut best = params.clone();
            for e in 0..epochs {
                let round = start_round + e;
                let out = local_train(&params, &train, k, round, cfg, None, splitter)?;
                for (p, d) in params.data_mut().iter_mut().zip(&out.delta) {
                    *p += d;
                }
                let v = evaluate_miou(&params, &val, EVAL_BATCH)?.miou;
                log::info!(
                    "client {k} local epoch {e}: lr {:.5} loss {:.4} val {v:.4}",
                    learning_rate(cfg, round),
                    out.mean_loss
                );
                if v > best_val {
                    best_val = v;
                    best = params.clone();
                }
            }
            Ok((best, best_val))
        })
        .collect::<Result<_>>()?;
    let (models, best_vals) = results.into_iter().unzip();
    Ok(LocalFinetune { models, best_vals })
}

/// `(1 + cos)/2` similarity of client update vectors, indexed by position.
/// Zero-length updates score 0.5 against everything (cosine taken as zero).
pub fn update_cosine_similarity(updates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = updates.len();
    let norms: Vec<f64> = updates
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = updates[i].iter().zip(&updates[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            let v = (1.0 + cos) / 2.0;
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// Client-level clustering baseline outcome.
#[derive(Debug)]
pub struct CflOutcome {
    /// Dense cluster id per client.
    pub client_clusters: Vec<usize>,
    pub similarity: Vec<Vec<f64>>,
    pub models: ClusterModels,
    pub logs: Vec<Vec<RoundLog>>,
}

/// Client-level clustered federated learning from pretrained parameters:
/// bipartitions clients by the cosine similarity of their local updates at
/// the split round (a diagnostic pass; those updates are not applied), then
/// refines one model per client cluster. Test-time model choice is client
/// identity, so the method is undefined on an iid split.
#[allow(clippy::too_many_arguments)]
pub fn cfl_from(
    pretrained: &ModelParams64,
    shards: &[Vec<&Sample>],
    scheme: Scheme,
    cfg: &RoundConfig,
    split_round: usize,
    total_rounds: usize,
    splitter: &SeedSplitter,
    sink: Option<&mut (dyn Write + '_)>,
) -> Result<CflOutcome> {
    if scheme == Scheme::Iid {
        return Err(Error::NotApplicable(
            "client-level clustering is meaningless on an iid split".into(),
        ));
    }
    let participants: Vec<usize> = (0..shards.len()).filter(|&k| !shards[k].is_empty()).collect();
    if participants.len() < 2 {
        return Err(Error::Config("client clustering needs at least two non-empty clients".into()));
    }
    let updates: Vec<LocalOutcome> = participants
        .par_iter()
        .map(|&k| local_train(pretrained, &shards[k], k, split_round, cfg, None, splitter))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("clustering"))?;
    let deltas: Vec<Vec<f64>> = updates.into_iter().map(|u| u.delta).collect();
    let similarity = update_cosine_similarity(&deltas);
    let mut kmeans_rng = splitter.substream(stream::KMEANS, 1);
    let labels = crate::spectral::spectral_cluster(&similarity, 2, &mut kmeans_rng)
        .map_err(|e| e.in_stage("clustering"))?;

    let mut client_clusters = vec![usize::MAX; shards.len()];
    for (&k, &c) in participants.iter().zip(&labels) {
        client_clusters[k] = c;
    }
    for (k, c) in client_clusters.iter_mut().enumerate() {
        if *c == usize::MAX {
            log::warn!("client {k} holds no samples; placed in cluster 0");
            *c = 0;
        }
    }

    let assignments = client_assignments(shards, &client_clusters);
    let refinement = clustered_refinement(
        pretrained,
        shards,
        &assignments,
        2,
        cfg,
        split_round,
        total_rounds,
        splitter,
        sink,
    )
    .map_err(|e| e.in_stage("refinement"))?;
    let dense: BTreeMap<usize, usize> =
        refinement.kept.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let client_clusters: Vec<usize> = client_clusters
        .into_iter()
        .map(|c| dense.get(&c).copied().unwrap_or(0))
        .collect();
    Ok(CflOutcome {
        client_clusters,
        similarity,
        models: refinement.models,
        logs: refinement.logs,
    })
}

/// Full client-level clustering baseline from untrained parameters.
#[allow(clippy::too_many_arguments)]
pub fn cfl(
    init: &ModelParams64,
    shards: &[Vec<&Sample>],
    val: &[&Sample],
    scheme: Scheme,
    cfg: &RoundConfig,
    split_round: usize,
    total_rounds: usize,
    splitter: &SeedSplitter,
    mut sink: Option<&mut (dyn Write + '_)>,
) -> Result<(FedOutcome, CflOutcome)> {
    if scheme == Scheme::Iid {
        return Err(Error::NotApplicable(
            "client-level clustering is meaningless on an iid split".into(),
        ));
    }
    let pretrain = run_federated(
        FedJob {
            init,
            shards,
            val,
            cfg: cfg.clone(),
            start_round: 0,
            end_round: split_round,
            scaffold: None,
        },
        splitter,
        sink.as_deref_mut(),
    )
    .map_err(|e| e.in_stage("pretrain"))?;
    let outcome = cfl_from(
        &pretrain.final_params,
        shards,
        scheme,
        cfg,
        split_round,
        total_rounds,
        splitter,
        sink,
    )?;
    Ok((pretrain, outcome))
}
