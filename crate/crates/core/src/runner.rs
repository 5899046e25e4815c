//! Experiment orchestration.
//!
//! Sequences the stages of one run — data, partition, training, evaluation —
//! and persists every artifact: `config.json` (resolved config echo),
//! `rounds.jsonl`, `clustering.json` when a method clusters, per-stage
//! checkpoints, `metrics.csv`, and `manifest.json`. Stage failures carry the
//! stage name. Everything except wall-clock fields in `rounds.jsonl` is a
//! pure function of (config, seed).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::Serialize;

use crate::config::{config_sha256, ExperimentConfig, Method};
use crate::data::{
    dataset_hash, generate_dataset, load_dataset, partition, save_dataset, FederatedSplit, Sample,
    Scheme,
};
use crate::ddi::{clustering_report, deep_domain_isolation, ClusteringReport, DdiConfig};
use crate::error::{Error, Result};
use crate::fed::{
    accumulate_miou, evaluate_miou, run_federated, FedJob, Optimizer, RoundConfig, EVAL_BATCH,
};
use crate::gmm::GmmFitConfig;
use crate::metrics::{
    rand_index, seg_metric_rows, write_metrics, MetricRow, SegAccumulator, SegMetrics,
};
use crate::nn::{ArchDescriptor, ModelParams};
use crate::rng::{stream, SeedSplitter};
use crate::scfl::{
    cfl, client_assignments, evaluate_dispatched, fedavg_plus, run_scfl, ClusterModels,
    ClusterSource,
};
use crate::ModelParams64;

/// Resolves a client id list against the samples that carry those ids.
pub fn shards_from<'a>(samples: &'a [Sample], clients: &[Vec<u64>]) -> Result<Vec<Vec<&'a Sample>>> {
    let by_id: BTreeMap<u64, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    clients
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::Dataset(format!("sample {id} is not in this split")))
                })
                .collect()
        })
        .collect()
}

/// How a trained method maps a test sample to a prediction.
pub enum Trained {
    /// One global model for every sample.
    Global(ModelParams64),
    /// Label-free sample-level dispatch through the domain classifier.
    Dispatch { classifier: ModelParams64, models: ClusterModels },
    /// One model per client; a sample is scored by its shard owner's model.
    PerClient(Vec<ModelParams64>),
}

/// Pooled dataset-level segmentation metrics of a trained method over client
/// test shards. Client identity matters only for `PerClient`; the other modes
/// score the pooled union, so any re-sharding of the same samples gives the
/// same counts.
pub fn evaluate_on_shards(
    trained: &Trained,
    shards: &[Vec<&Sample>],
    classes: usize,
) -> Result<SegMetrics> {
    match trained {
        Trained::Global(model) => {
            let pooled: Vec<&Sample> = shards.iter().flatten().copied().collect();
            evaluate_miou(model, &pooled, EVAL_BATCH)
        }
        Trained::Dispatch { classifier, models } => {
            let pooled: Vec<&Sample> = shards.iter().flatten().copied().collect();
            evaluate_dispatched(classifier, models, &pooled, EVAL_BATCH).map(|(m, _)| m)
        }
        Trained::PerClient(models) => {
            if models.len() != shards.len() {
                return Err(Error::Config(format!(
                    "{} client models cannot cover {} test shards",
                    models.len(),
                    shards.len()
                )));
            }
            let mut acc = SegAccumulator::new(classes);
            for (model, shard) in models.iter().zip(shards) {
                accumulate_miou(model, shard, EVAL_BATCH, &mut acc)?;
            }
            Ok(acc.finish())
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    method: &'a str,
    split_scheme: &'a str,
    seed: u64,
    config_sha256: String,
    dataset_sha256: String,
}

fn persist_err(e: std::io::Error) -> Error {
    Error::from(e).in_stage("persist")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(persist_err)
}

/// Generates a dataset with its federated split and writes both to `out`.
/// Returns the dataset content hash.
pub fn generate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let ds = generate_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let splitter = SeedSplitter::new(cfg.seed);
    let split = partition(&ds.train, cfg.scheme, cfg.clients, &mut splitter.stream(stream::SPLIT))
        .map_err(|e| e.in_stage("partition"))?;
    fs::create_dir_all(out).map_err(persist_err)?;
    save_dataset(&ds, out).map_err(|e| e.in_stage("persist"))?;
    write_json(&out.join("split.json"), &split)?;
    Ok(dataset_hash(&ds))
}

/// Runs gradient-based sample clustering at a checkpoint over a persisted
/// dataset + split directory, writing `clustering.json` to `out`.
pub fn cluster_stage(
    checkpoint: &Path,
    split_dir: &Path,
    m: usize,
    alpha: f64,
    seed: u64,
    out: &Path,
) -> Result<ClusteringReport> {
    let model = ModelParams64::load(checkpoint).map_err(|e| e.in_stage("checkpoint"))?;
    let ds = load_dataset(split_dir).map_err(|e| e.in_stage("data"))?;
    let text = fs::read_to_string(split_dir.join("split.json"))
        .map_err(|e| Error::Dataset(format!("split.json: {e}")).in_stage("data"))?;
    let split: FederatedSplit =
        serde_json::from_str(&text).map_err(|e| Error::from(e).in_stage("data"))?;
    let shards = shards_from(&ds.train, &split.clients).map_err(|e| e.in_stage("data"))?;

    let splitter = SeedSplitter::new(seed);
    let ddi_cfg = DdiConfig { alpha, gmm: GmmFitConfig { components: m, ..GmmFitConfig::default() } };
    let iso = deep_domain_isolation(&model, &shards, ds.config.classes(), &ddi_cfg, &splitter)
        .map_err(|e| e.in_stage("isolation"))?;

    let report = clustering_report(&iso, alpha);
    fs::create_dir_all(out).map_err(persist_err)?;
    write_json(&out.join("clustering.json"), &report)?;
    Ok(report)
}

/// Scores a single checkpoint on a persisted dataset's test split and writes
/// `metrics.csv` to `out`.
pub fn evaluate_stage(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<SegMetrics> {
    let model = ModelParams64::load(checkpoint).map_err(|e| e.in_stage("checkpoint"))?;
    let ds = load_dataset(data_dir).map_err(|e| e.in_stage("data"))?;
    let test: Vec<&Sample> = ds.test.iter().collect();
    let metrics =
        evaluate_miou(&model, &test, EVAL_BATCH).map_err(|e| e.in_stage("evaluation"))?;

    let stem = checkpoint.file_stem().unwrap_or_default().to_string_lossy();
    let base = MetricRow::new(&format!("evaluate-{stem}"), "checkpoint", "-", "test", "", 0.0);
    let rows = seg_metric_rows(&base, &metrics, "test");
    fs::create_dir_all(out).map_err(persist_err)?;
    write_metrics(&out.join("metrics.csv"), &rows).map_err(|e| e.in_stage("persist"))?;
    Ok(metrics)
}

fn cluster_size_rows(
    base: &dyn Fn(&str, &str, f64) -> MetricRow,
    assignments: &BTreeMap<u64, usize>,
) -> Vec<MetricRow> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in assignments.values() {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(c, n)| base("cluster", "cluster_size", n as f64).cluster(c))
        .collect()
}

/// Executes one experiment end to end and persists all artifacts into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(persist_err)?;
    write_json(&out.join("config.json"), cfg)?;

    let ds = match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.data),
    }
    .map_err(|e| e.in_stage("data"))?;
    let classes = ds.config.classes();
    if cfg.model.classes != classes {
        return Err(Error::Config(format!(
            "model.classes = {} but the dataset has {classes} classes",
            cfg.model.classes
        ))
        .in_stage("data"));
    }
    let ds_hash = dataset_hash(&ds);

    let splitter = SeedSplitter::new(cfg.seed);
    let split = partition(&ds.train, cfg.scheme, cfg.clients, &mut splitter.stream(stream::SPLIT))
        .map_err(|e| e.in_stage("partition"))?;
    let shards = shards_from(&ds.train, &split.clients).map_err(|e| e.in_stage("partition"))?;
    let val: Vec<&Sample> = ds.val.iter().collect();

    let arch = ArchDescriptor::seg_net(&cfg.model);
    let init =
        ModelParams::init(arch, &mut splitter.stream(stream::INIT)).map_err(|e| e.in_stage("init"))?;

    let mut rounds = BufWriter::new(fs::File::create(out.join("rounds.jsonl")).map_err(persist_err)?);
    let mut rows: Vec<MetricRow> = Vec::new();
    let base = |phase: &str, name: &str, v: f64| {
        MetricRow::new(&run_id, cfg.method.name(), cfg.scheme.name(), phase, name, v)
    };

    let trained = match cfg.method {
        Method::Fedavg | Method::Scaffold => {
            let optimizer = match cfg.method {
                Method::Scaffold => Optimizer::Scaffold,
                _ => Optimizer::Fedavg,
            };
            let rc = RoundConfig { optimizer, ..cfg.pipeline.round.clone() };
            let outcome = run_federated(
                FedJob {
                    init: &init,
                    shards: &shards,
                    val: &val,
                    cfg: rc,
                    start_round: 0,
                    end_round: cfg.pipeline.total_rounds,
                    scaffold: None,
                },
                &splitter,
                Some(&mut rounds),
            )
            .map_err(|e| e.in_stage("train"))?;
            outcome.final_params.save(&ckpt_dir.join("final.ckpt")).map_err(|e| e.in_stage("persist"))?;
            outcome.best_params.save(&ckpt_dir.join("best.ckpt")).map_err(|e| e.in_stage("persist"))?;
            if let Some(v) = outcome.best_val {
                rows.push(base("train", "best_val_miou", v));
            }
            Trained::Global(outcome.best_params)
        }

        Method::FedavgPlus => {
            let rc = RoundConfig { optimizer: Optimizer::Fedavg, ..cfg.pipeline.round.clone() };
            let base_run = run_federated(
                FedJob {
                    init: &init,
                    shards: &shards,
                    val: &val,
                    cfg: rc.clone(),
                    start_round: 0,
                    end_round: cfg.pipeline.total_rounds,
                    scaffold: None,
                },
                &splitter,
                Some(&mut rounds),
            )
            .map_err(|e| e.in_stage("train"))?;
            base_run.best_params.save(&ckpt_dir.join("base.ckpt")).map_err(|e| e.in_stage("persist"))?;
            if let Some(v) = base_run.best_val {
                rows.push(base("train", "best_val_miou", v));
            }
            let ft = fedavg_plus(
                &base_run.best_params,
                &shards,
                &rc,
                cfg.pipeline.total_rounds,
                cfg.finetune_epochs,
                &splitter,
            )
            .map_err(|e| e.in_stage("finetune"))?;
            for (k, m) in ft.models.iter().enumerate() {
                m.save(&ckpt_dir.join(format!("client_{k}.ckpt"))).map_err(|e| e.in_stage("persist"))?;
            }
            let mean_local = ft.best_vals.iter().sum::<f64>() / ft.best_vals.len().max(1) as f64;
            rows.push(base("finetune", "mean_local_val_miou", mean_local));
            Trained::PerClient(ft.models)
        }

        Method::Cfl => {
            let rc = cfg.pipeline.round.clone();
            let (pre, outcome) = cfl(
                &init,
                &shards,
                &val,
                cfg.scheme,
                &rc,
                cfg.pipeline.split_round,
                cfg.pipeline.total_rounds,
                &splitter,
                Some(&mut rounds),
            )?;
            pre.final_params.save(&ckpt_dir.join("pretrain.ckpt")).map_err(|e| e.in_stage("persist"))?;
            for (i, m) in outcome.models.models.iter().enumerate() {
                m.save(&ckpt_dir.join(format!("cluster_{i}.ckpt"))).map_err(|e| e.in_stage("persist"))?;
            }
            if let Some(v) = pre.best_val {
                rows.push(base("pretrain", "best_val_miou", v));
            }

            let lifted = client_assignments(&shards, &outcome.client_clusters);
            let domains: BTreeMap<u64, u8> =
                shards.iter().flatten().map(|s| (s.id, s.domain)).collect();
            let labels: Vec<usize> = lifted.values().copied().collect();
            let truth: Vec<usize> = lifted.keys().map(|id| domains[id] as usize).collect();
            let rand = rand_index(&labels, &truth);
            rows.push(base("cluster", "rand_index_vs_domain", rand));
            rows.extend(cluster_size_rows(&base, &lifted));
            let report = ClusteringReport {
                m: outcome.models.models.len(),
                // Client updates are compared unpruned, hence alpha 1.
                alpha: 1.0,
                assignments: lifted.iter().map(|(id, &c)| (id.to_string(), c)).collect(),
                rand_index_vs_domain: rand,
                per_class_rand: BTreeMap::new(),
            };
            write_json(&out.join("clustering.json"), &report)?;

            let models: Vec<ModelParams64> = outcome
                .client_clusters
                .iter()
                .map(|&c| outcome.models.models[c].clone())
                .collect();
            Trained::PerClient(models)
        }

        Method::Scfl | Method::PriorScfl => {
            let source = match cfg.method {
                Method::PriorScfl => ClusterSource::Prior,
                _ => ClusterSource::Ddi,
            };
            let (pre, outcome) = run_scfl(
                &init,
                &shards,
                &val,
                classes,
                &cfg.pipeline,
                source,
                &splitter,
                Some(&mut rounds),
            )?;
            pre.final_params.save(&ckpt_dir.join("pretrain.ckpt")).map_err(|e| e.in_stage("persist"))?;
            for (i, m) in outcome.models.models.iter().enumerate() {
                m.save(&ckpt_dir.join(format!("cluster_{i}.ckpt"))).map_err(|e| e.in_stage("persist"))?;
            }
            outcome.classifier.params.save(&ckpt_dir.join("classifier.ckpt")).map_err(|e| e.in_stage("persist"))?;
            if let Some(v) = pre.best_val {
                rows.push(base("pretrain", "best_val_miou", v));
            }

            let alpha = match source {
                // Ground-truth clustering reads no gradients; report "no pruning".
                ClusterSource::Prior => 1.0,
                ClusterSource::Ddi => cfg.pipeline.ddi.alpha,
            };
            let report = clustering_report(&outcome.clustering, alpha);
            write_json(&out.join("clustering.json"), &report)?;
            rows.push(base("cluster", "rand_index_vs_domain", outcome.clustering.rand_vs_domain));
            rows.push(base("cluster", "silhouette", outcome.clustering.silhouette));
            rows.push(base("cluster", "isolatable", f64::from(u8::from(outcome.clustering.isolatable))));
            for (&class, &r) in &outcome.clustering.per_class_rand {
                rows.push(base("cluster", "per_class_rand", r).class(class));
            }
            rows.extend(cluster_size_rows(&base, &outcome.assignments));

            rows.push(base("classifier", "val_f1", outcome.classifier.val_f1));
            rows.push(base("classifier", "rounds_run", outcome.classifier.rounds_run as f64));
            rows.push(base("classifier", "flagged", f64::from(u8::from(outcome.classifier.flagged))));

            Trained::Dispatch { classifier: outcome.classifier.params, models: outcome.models }
        }
    };

    let matched = partition(&ds.test, cfg.scheme, cfg.clients, &mut splitter.substream(stream::SPLIT, 1))
        .map_err(|e| e.in_stage("evaluation"))?;
    let shifted = partition(&ds.test, Scheme::Iid, cfg.clients, &mut splitter.substream(stream::SPLIT, 2))
        .map_err(|e| e.in_stage("evaluation"))?;
    for (split, name) in [(&matched, "test"), (&shifted, "test_shift")] {
        let test_shards = shards_from(&ds.test, &split.clients).map_err(|e| e.in_stage("evaluation"))?;
        let metrics = evaluate_on_shards(&trained, &test_shards, classes)
            .map_err(|e| e.in_stage("evaluation"))?;
        rows.extend(seg_metric_rows(&base("test", "", 0.0), &metrics, name));
    }

    rounds.flush().map_err(persist_err)?;
    write_metrics(&out.join("metrics.csv"), &rows).map_err(|e| e.in_stage("persist"))?;
    let manifest = Manifest {
        run_id: &run_id,
        method: cfg.method.name(),
        split_scheme: cfg.scheme.name(),
        seed: cfg.seed,
        config_sha256: config_sha256(cfg),
        dataset_sha256: ds_hash,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}
