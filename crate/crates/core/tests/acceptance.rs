//! Acceptance gate: ten end-to-end checks, each printing one
//! `criterion NN <name>: PASS/FAIL (detail)` line before asserting.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! The slow fixtures (federated trainings on the 800-sample glyph set) are
//! shared through `OnceLock`s and built on first use, so the whole gate costs
//! about two hours on one desktop core while individual fast criteria stay
//! runnable in isolation.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use common::{fd_check, fd_safe, Target};
use fsddi::data::{generate_dataset, partition, DataConfig, Dataset, Sample, Scheme};
use fsddi::ddi::{deep_domain_isolation, DdiConfig, DomainIsolation};
use fsddi::fed::{
    evaluate_miou, learning_rate, run_federated, FedJob, Optimizer, RoundConfig, EVAL_BATCH,
};
use fsddi::gmm::{fed_gmm_fit, gmm_fit, Gmm, GmmFitConfig};
use fsddi::metrics::rand_index;
use fsddi::nn::loss::uniform_weights;
use fsddi::nn::params::{ArchDescriptor, NormKind, SegNetConfig};
use fsddi::rng::{stream, SeedSplitter};
use fsddi::runner::{evaluate_on_shards, shards_from, Trained};
use fsddi::scfl::{
    cfl_from, fedavg_plus, run_scfl_from, train_domain_classifier, ClassifierConfig,
    ClusterSource, PipelineConfig, ScflOutcome,
};
use fsddi::spectral::spectral_cluster;
use fsddi::{ModelParams64, Tensor64};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 1;
const CLIENTS: usize = 10;
const SPLIT_ROUND: usize = 30;
const TOTAL_ROUNDS: usize = 60;
const FINETUNE_EPOCHS: usize = 100;

fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    let state = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n:02} {name}: {state} ({detail})");
    assert!(ok, "criterion {n:02} {name}: {detail}");
}

fn idx(scheme: Scheme) -> usize {
    match scheme {
        Scheme::FullNoniid => 0,
        Scheme::Iid => 1,
        Scheme::Dirichlet => 2,
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures. Everything downstream of the same pretraining reuses it;
// `secs` carries the fixture's full cost including that attributed pretraining
// so per-criterion budgets stay honest.
// ---------------------------------------------------------------------------

static DATASET: OnceLock<Dataset> = OnceLock::new();

fn dataset() -> &'static Dataset {
    DATASET.get_or_init(|| generate_dataset(&DataConfig::default()).expect("glyph dataset"))
}

fn val_pool() -> Vec<&'static Sample> {
    dataset().val.iter().collect()
}

fn pooled_test_miou(model: &ModelParams64) -> f64 {
    let test: Vec<&Sample> = dataset().test.iter().collect();
    evaluate_miou(model, &test, EVAL_BATCH).expect("test evaluation").miou
}

/// Matched evaluation partitions the test split like the training scheme;
/// shifted re-deals the same samples iid. Client-agnostic models see the same
/// pooled pixels either way, per-client ones are scored shard by shard.
fn eval_matched_shifted(trained: &Trained, scheme: Scheme) -> (f64, f64) {
    let ds = dataset();
    let splitter = SeedSplitter::new(SEED);
    let classes = ds.config.classes();
    let score = |scheme: Scheme, counter: u64| {
        let split = partition(&ds.test, scheme, CLIENTS, &mut splitter.substream(stream::SPLIT, counter))
            .expect("test partition");
        let shards = shards_from(&ds.test, &split.clients).expect("test shards");
        evaluate_on_shards(trained, &shards, classes).expect("shard evaluation").miou
    };
    (score(scheme, 1), score(Scheme::Iid, 2))
}

struct PreFix {
    shards: Vec<Vec<&'static Sample>>,
    final_params: ModelParams64,
    best_params: ModelParams64,
    best_val: f64,
    secs: f64,
}

static PRE: [OnceLock<PreFix>; 3] = [const { OnceLock::new() }; 3];

/// Common 30-round FedAvg pretraining for one split scheme.
fn pre(scheme: Scheme) -> &'static PreFix {
    PRE[idx(scheme)].get_or_init(|| {
        let ds = dataset();
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        let split = partition(&ds.train, scheme, CLIENTS, &mut splitter.stream(stream::SPLIT))
            .expect("train partition");
        let shards = shards_from(&ds.train, &split.clients).expect("train shards");
        let init = ModelParams64::init(
            ArchDescriptor::seg_net(&SegNetConfig::default()),
            &mut splitter.stream(stream::INIT),
        )
        .expect("model init");
        let val = val_pool();
        eprintln!("[fixture] {}: pretraining {SPLIT_ROUND} rounds", scheme.name());
        let out = run_federated(
            FedJob {
                init: &init,
                shards: &shards,
                val: &val,
                cfg: RoundConfig::default(),
                start_round: 0,
                end_round: SPLIT_ROUND,
                scaffold: None,
            },
            &splitter,
            None,
        )
        .expect("pretraining");
        PreFix {
            shards,
            final_params: out.final_params,
            best_params: out.best_params,
            best_val: out.best_val.expect("validation pool given"),
            secs: t0.elapsed().as_secs_f64(),
        }
    })
}

struct ContFix {
    best_params: ModelParams64,
    miou: f64,
    secs: f64,
}

static FED60: [OnceLock<ContFix>; 3] = [const { OnceLock::new() }; 3];

/// Plain FedAvg continued to the full round budget; deliverable is the
/// best-validation checkpoint over all 60 rounds (earlier round wins ties,
/// matching an unbroken run).
fn fedavg60(scheme: Scheme) -> &'static ContFix {
    FED60[idx(scheme)].get_or_init(|| {
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        let val = val_pool();
        eprintln!(
            "[fixture] {}: fedavg rounds {SPLIT_ROUND}..{TOTAL_ROUNDS}",
            scheme.name()
        );
        let out = run_federated(
            FedJob {
                init: &p.final_params,
                shards: &p.shards,
                val: &val,
                cfg: RoundConfig::default(),
                start_round: SPLIT_ROUND,
                end_round: TOTAL_ROUNDS,
                scaffold: None,
            },
            &splitter,
            None,
        )
        .expect("continued training");
        let cont_best = out.best_val.expect("validation pool given");
        let best_params = if cont_best > p.best_val { out.best_params } else { p.best_params.clone() };
        let miou = pooled_test_miou(&best_params);
        ContFix { best_params, miou, secs: p.secs + t0.elapsed().as_secs_f64() }
    })
}

const FULL_DDI: usize = 0;
const FULL_PRIOR: usize = 1;
const IID_DDI: usize = 2;

struct ScflFix {
    outcome: ScflOutcome,
    matched: f64,
    shifted: f64,
    secs: f64,
}

static SCFL: [OnceLock<ScflFix>; 3] = [const { OnceLock::new() }; 3];

fn pipeline_config() -> PipelineConfig {
    PipelineConfig { split_round: SPLIT_ROUND, total_rounds: TOTAL_ROUNDS, ..Default::default() }
}

/// Clustered pipeline (isolation, refinement, dispatch classifier) resumed
/// from the shared pretraining.
fn scfl_fix(which: usize) -> &'static ScflFix {
    SCFL[which].get_or_init(|| {
        let (scheme, source) = match which {
            FULL_DDI => (Scheme::FullNoniid, ClusterSource::Ddi),
            FULL_PRIOR => (Scheme::FullNoniid, ClusterSource::Prior),
            _ => (Scheme::Iid, ClusterSource::Ddi),
        };
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        let val = val_pool();
        eprintln!("[fixture] {}: clustered pipeline ({source:?})", scheme.name());
        let outcome = run_scfl_from(
            &p.final_params,
            &p.shards,
            &val,
            dataset().config.classes(),
            &pipeline_config(),
            source,
            &splitter,
            None,
        )
        .expect("clustered pipeline");
        let trained = Trained::Dispatch {
            classifier: outcome.classifier.params.clone(),
            models: outcome.models.clone(),
        };
        let (matched, shifted) = eval_matched_shifted(&trained, scheme);
        ScflFix { outcome, matched, shifted, secs: p.secs + t0.elapsed().as_secs_f64() }
    })
}

struct DdiFix {
    iso01: DomainIsolation,
    rand005: f64,
    rand1: f64,
    secs: f64,
}

static DDI: [OnceLock<DdiFix>; 3] = [const { OnceLock::new() }; 3];

/// Domain isolation at the pretrained parameters, swept over the prune
/// fraction: the pipeline default 0.01, the looser 0.05, and unpruned 1.0.
fn ddi_fix(scheme: Scheme) -> &'static DdiFix {
    DDI[idx(scheme)].get_or_init(|| {
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        let classes = dataset().config.classes();
        let isolate = |alpha: f64| {
            eprintln!("[fixture] {}: isolation at alpha {alpha}", scheme.name());
            let cfg = DdiConfig { alpha, ..Default::default() };
            deep_domain_isolation(&p.final_params, &p.shards, classes, &cfg, &splitter)
                .expect("domain isolation")
        };
        let iso01 = isolate(0.01);
        let rand005 = isolate(0.05).rand_vs_domain;
        let rand1 = isolate(1.0).rand_vs_domain;
        DdiFix { iso01, rand005, rand1, secs: p.secs + t0.elapsed().as_secs_f64() }
    })
}

struct PerClientFix {
    matched: f64,
    shifted: f64,
    secs: f64,
}

static CFL: OnceLock<PerClientFix> = OnceLock::new();

/// Client-level clustering baseline on the full non-iid split; scored with
/// each test shard owner's cluster model.
fn cfl_fix() -> &'static PerClientFix {
    CFL.get_or_init(|| {
        let scheme = Scheme::FullNoniid;
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        eprintln!("[fixture] {}: client-level clustering baseline", scheme.name());
        let out = cfl_from(
            &p.final_params,
            &p.shards,
            scheme,
            &RoundConfig::default(),
            SPLIT_ROUND,
            TOTAL_ROUNDS,
            &splitter,
            None,
        )
        .expect("client clustering baseline");
        let models: Vec<ModelParams64> =
            out.client_clusters.iter().map(|&c| out.models.models[c].clone()).collect();
        let (matched, shifted) = eval_matched_shifted(&Trained::PerClient(models), scheme);
        PerClientFix { matched, shifted, secs: p.secs + t0.elapsed().as_secs_f64() }
    })
}

static PLUS: OnceLock<PerClientFix> = OnceLock::new();

/// Local-finetuning baseline on the full non-iid split, grown from the
/// 60-round FedAvg deliverable.
fn plus_fix() -> &'static PerClientFix {
    PLUS.get_or_init(|| {
        let scheme = Scheme::FullNoniid;
        let base = fedavg60(scheme);
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        eprintln!("[fixture] {}: local finetuning baseline", scheme.name());
        let tuned = fedavg_plus(
            &base.best_params,
            &p.shards,
            &RoundConfig::default(),
            TOTAL_ROUNDS,
            FINETUNE_EPOCHS,
            &splitter,
        )
        .expect("local finetuning");
        let (matched, shifted) = eval_matched_shifted(&Trained::PerClient(tuned.models), scheme);
        PerClientFix { matched, shifted, secs: base.secs + t0.elapsed().as_secs_f64() }
    })
}

struct BnFix {
    miou: f64,
    secs: f64,
}

static BN60: [OnceLock<BnFix>; 3] = [const { OnceLock::new() }; 3];

/// Batch-norm counterpart of [`fedavg60`]: same split, same 60-round budget,
/// same best-validation deliverable, batch-norm layers instead of instance
/// norm.
fn bn60(scheme: Scheme) -> &'static BnFix {
    BN60[idx(scheme)].get_or_init(|| {
        let p = pre(scheme);
        let t0 = Instant::now();
        let splitter = SeedSplitter::new(SEED);
        let arch = ArchDescriptor::seg_net(&SegNetConfig {
            norm: NormKind::Batch,
            ..Default::default()
        });
        let init = ModelParams64::init(arch, &mut splitter.stream(stream::INIT)).expect("model init");
        let val = val_pool();
        eprintln!("[fixture] {}: batch-norm fedavg {TOTAL_ROUNDS} rounds", scheme.name());
        let out = run_federated(
            FedJob {
                init: &init,
                shards: &p.shards,
                val: &val,
                cfg: RoundConfig::default(),
                start_round: 0,
                end_round: TOTAL_ROUNDS,
                scaffold: None,
            },
            &splitter,
            None,
        )
        .expect("batch-norm training");
        let miou = pooled_test_miou(&out.best_params);
        BnFix { miou, secs: t0.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients against central finite differences.
// ---------------------------------------------------------------------------

fn random_images(seed: u64, n: usize, h: usize, w: usize) -> Vec<Tensor64> {
    let split = SeedSplitter::new(seed);
    let mut rng = split.stream(stream::DATA);
    (0..n)
        .map(|_| Tensor64::from_vec(&[1, h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

/// Worst per-block relative error on the first finite-difference-safe draw
/// (seeds whose activations graze a relu kink or a degenerate norm channel
/// are skipped, see [`common::fd_safe`]).
fn max_fd_err(arch: ArchDescriptor, classes: usize, batch: usize, seed: u64, labels: bool) -> f64 {
    let (h, w) = (arch.input[1], arch.input[2]);
    let out = arch.act_shapes().expect("valid arch").last().expect("nonempty stack").dims();
    for attempt in 0..50 {
        let s = seed + 1000 * attempt;
        let split = SeedSplitter::new(s);
        let model = ModelParams64::init(arch.clone(), &mut split.stream(stream::INIT)).expect("init");
        let images = random_images(s + 1, batch, h, w);
        let refs: Vec<&Tensor64> = images.iter().collect();
        if !fd_safe(&model, &refs) {
            continue;
        }
        let mut rng = split.stream(stream::SHUFFLE);
        let target = if labels {
            Target::Labels((0..batch).map(|_| rng.gen_range(0..classes)).collect())
        } else {
            let pixels = out[1] * out[2];
            let masks = (0..batch)
                .map(|_| (0..pixels).map(|_| rng.gen_range(0..classes) as u8).collect())
                .collect();
            let weights = vec![uniform_weights::<f64>(out[1], out[2]); batch];
            Target::Pixels { masks, weights }
        };
        return fd_check(&model, &refs, &target).into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    }
    panic!("no finite-difference-safe draw in 50 attempts");
}

#[test]
fn criterion_01_layer_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let toy = |norm| SegNetConfig { height: 6, width: 8, channels: [3, 4, 3], classes: 3, norm };
    let instance = max_fd_err(ArchDescriptor::seg_net(&toy(NormKind::Instance)), 3, 2, 31, false);
    let batchnorm = max_fd_err(ArchDescriptor::seg_net(&toy(NormKind::Batch)), 3, 3, 32, false);
    let classifier = max_fd_err(ArchDescriptor::domain_classifier(8, 8, 3), 3, 2, 33, true);
    let worst = instance.max(batchnorm).max(classifier);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "layer-gradients",
        worst < 1e-4 && secs <= 10.0,
        format!("max rel err {worst:.2e} across 3 stacks in {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. One FedAvg round of full-batch steps equals one centralized GD step.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_fedavg_equals_centralized_step() {
    let t0 = Instant::now();
    let cfg = DataConfig { train_size: 20, val_size: 4, test_size: 4, ..Default::default() };
    let ds = generate_dataset(&cfg).expect("toy dataset");
    let shards: Vec<Vec<&Sample>> = ds.train.chunks(4).map(|c| c.iter().collect()).collect();
    assert_eq!(shards.len(), 5, "five equal clients");

    let splitter = SeedSplitter::new(SEED);
    let arch = ArchDescriptor::seg_net(&SegNetConfig::default());
    let init = ModelParams64::init(arch, &mut splitter.stream(stream::INIT)).expect("init");
    let round = RoundConfig {
        local_epochs: 1,
        batch_size: 64,
        lr0: 0.05,
        lr_decay: 1.0,
        weight_decay: 0.0,
        optimizer: Optimizer::Fedavg,
    };
    let fed = run_federated(
        FedJob {
            init: &init,
            shards: &shards,
            val: &[],
            cfg: round.clone(),
            start_round: 0,
            end_round: 1,
            scaffold: None,
        },
        &splitter,
        None,
    )
    .expect("one federated round");

    let images: Vec<&Tensor64> = ds.train.iter().map(|s| &s.image).collect();
    let masks: Vec<Vec<u8>> = ds.train.iter().map(|s| s.mask.clone()).collect();
    let [_, h, w] = init.arch().input;
    let weights = vec![uniform_weights::<f64>(h, w); ds.train.len()];
    let grad = common::batch_grad(&init, &images, &Target::Pixels { masks, weights });
    let lr = learning_rate(&round, 0);
    let mut central = init.clone();
    for (p, g) in central.data_mut().iter_mut().zip(&grad) {
        *p -= lr * g;
    }

    let gap = fed
        .final_params
        .data()
        .iter()
        .zip(central.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "fedavg-centralized-step",
        gap <= 1e-10 && secs <= 5.0,
        format!("max param gap {gap:.2e} in {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 3. Federated EM: monotone likelihood, partition invariance, blob recovery.
// ---------------------------------------------------------------------------

fn blobs(seed: u64, n_per: usize, d: usize, centers: [f64; 2], sd: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let splitter = SeedSplitter::new(seed);
    let mut rng = splitter.stream(stream::DATA);
    let mut pts = Vec::with_capacity(2 * n_per);
    let mut labels = Vec::with_capacity(2 * n_per);
    for (b, &c) in centers.iter().enumerate() {
        for _ in 0..n_per {
            pts.push(
                (0..d)
                    .map(|_| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        c + sd * eps
                    })
                    .collect(),
            );
            labels.push(b);
        }
    }
    (pts, labels)
}

fn flat_gmm(g: &Gmm) -> Vec<f64> {
    let mut v = g.weights.clone();
    v.extend(g.means.iter().flatten());
    v.extend(g.vars.iter().flatten());
    v
}

fn max_ll_drop(history: &[f64]) -> f64 {
    history
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_03_federated_gmm() {
    let t0 = Instant::now();
    let (pts, labels) = blobs(SEED, 200, 4, [-3.0, 3.0], 0.5);
    let cfg = GmmFitConfig { components: 2, max_iters: 200, rel_tol: 1e-10, var_floor: 1e-6 };
    let splitter = SeedSplitter::new(SEED);

    let central = gmm_fit(&pts, &cfg, &mut splitter.substream(stream::GMM, 7)).expect("central fit");
    let mut worst_drop = max_ll_drop(&central.ll_history);
    assert_eq!(central.reseeded, 0, "clean blobs should never reseed a component");

    // Three different client partitions of the same points must land on the
    // same model as the pooled fit.
    let n = pts.len();
    let chunked: Vec<Vec<Vec<f64>>> = pts.chunks(n / 4).map(<[Vec<f64>]>::to_vec).collect();
    let strided: Vec<Vec<Vec<f64>>> =
        (0..4).map(|k| pts.iter().skip(k).step_by(4).cloned().collect()).collect();
    let rotated: Vec<Vec<Vec<f64>>> = {
        let mut shifted: Vec<Vec<f64>> = pts[137..].to_vec();
        shifted.extend_from_slice(&pts[..137]);
        shifted.chunks(n / 4).map(<[Vec<f64>]>::to_vec).collect()
    };
    let mut fed_gap = 0.0f64;
    for clients in [&chunked, &strided, &rotated] {
        let views: Vec<&[Vec<f64>]> = clients.iter().map(Vec::as_slice).collect();
        let fed = fed_gmm_fit(&views, &cfg, &mut splitter.substream(stream::GMM, 7)).expect("federated fit");
        worst_drop = worst_drop.max(max_ll_drop(&fed.ll_history));
        assert_eq!(fed.reseeded, 0, "clean blobs should never reseed a component");
        let gap = flat_gmm(&fed.gmm)
            .iter()
            .zip(flat_gmm(&central.gmm))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        fed_gap = fed_gap.max(gap);
    }

    // Blob recovery: map components to blobs by majority, then demand
    // near-certain responsibility for every point's own blob.
    let post: Vec<Vec<f64>> = pts.iter().map(|x| central.gmm.membership(x)).collect();
    let votes = post.iter().zip(&labels).filter(|(p, &l)| (p[1] > p[0]) == (l == 1)).count();
    let comp_of = |label: usize| if 2 * votes >= n { label } else { 1 - label };
    let min_resp = post
        .iter()
        .zip(&labels)
        .map(|(p, &l)| p[comp_of(l)])
        .fold(f64::INFINITY, f64::min);

    let secs = t0.elapsed().as_secs_f64();
    let ok = worst_drop <= 1e-8 && fed_gap <= 1e-9 && min_resp >= 0.999 && secs <= 30.0;
    verdict(
        3,
        "federated-gmm",
        ok,
        format!(
            "worst ll drop {worst_drop:.1e}, fed vs central gap {fed_gap:.1e}, min responsibility {min_resp:.4} in {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Spectral clustering recovers a planted two-block similarity exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_spectral_recovery() {
    let t0 = Instant::now();
    let n = 200;
    let truth: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let mut perfect = 0;
    for seed in 1..=5u64 {
        let splitter = SeedSplitter::new(seed);
        let mut noise = splitter.stream(stream::DATA);
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let base = if truth[i] == truth[j] { 0.9 } else { 0.1 };
                let v = base + noise.gen_range(0.0..0.05);
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        let labels = spectral_cluster(&s, 2, &mut splitter.stream(stream::KMEANS)).expect("spectral");
        if rand_index(&labels, &truth) == 1.0 {
            perfect += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        4,
        "spectral-recovery",
        perfect == 5 && secs <= 30.0,
        format!("rand 1.0 on {perfect}/5 seeds in {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 5. Domain isolation quality across split schemes and prune fractions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_domain_isolation_quality() {
    let mut ok = true;
    let mut details = Vec::new();
    for scheme in [Scheme::FullNoniid, Scheme::Iid, Scheme::Dirichlet] {
        let fix = ddi_fix(scheme);
        let r01 = fix.iso01.rand_vs_domain;
        let good = fix.rand1 >= 0.95
            && (fix.rand005 - fix.rand1).abs() <= 0.05
            && (r01 - fix.rand1).abs() <= 0.05
            && r01 >= 0.95
            && fix.secs <= 600.0;
        ok &= good;
        details.push(format!(
            "{} rand {:.3}/{:.3}/{:.3} (alpha 1/.05/.01) in {:.0}s",
            scheme.name(),
            fix.rand1,
            fix.rand005,
            r01,
            fix.secs
        ));
    }
    verdict(5, "domain-isolation", ok, details.join("; "));
}

// ---------------------------------------------------------------------------
// 6. End-to-end gain of the clustered pipeline over plain FedAvg.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_clustered_pipeline_gain() {
    let scfl = scfl_fix(FULL_DDI);
    let prior = scfl_fix(FULL_PRIOR);
    let iid = scfl_fix(IID_DDI);
    let fed_full = fedavg60(Scheme::FullNoniid);
    let fed_iid = fedavg60(Scheme::Iid);

    let gain = scfl.matched - fed_full.miou;
    let prior_gap = (scfl.matched - prior.matched).abs();
    let iid_gap = (iid.matched - fed_iid.miou).abs();
    let slowest = scfl.secs.max(prior.secs).max(iid.secs).max(fed_full.secs).max(fed_iid.secs);
    let ok = gain >= 0.01 && prior_gap <= 0.01 && iid_gap <= 0.015 && slowest <= 1800.0;
    verdict(
        6,
        "clustered-pipeline-gain",
        ok,
        format!(
            "full gain {gain:+.3} ({:.3} vs {:.3}), prior gap {prior_gap:.3}, iid gap {iid_gap:.3}, slowest run {slowest:.0}s",
            scfl.matched, fed_full.miou
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Robustness when the test split no longer matches the training split.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_test_shift_robustness() {
    let scfl = scfl_fix(FULL_DDI);
    let cfl = cfl_fix();
    let plus = plus_fix();

    let scfl_drift = (scfl.matched - scfl.shifted).abs();
    let cfl_drop = cfl.matched - cfl.shifted;
    let plus_drop = plus.matched - plus.shifted;
    let ok = scfl_drift < 0.005 && cfl_drop >= 0.05 && plus_drop >= 0.02;
    verdict(
        7,
        "test-shift",
        ok,
        format!(
            "dispatch drift {scfl_drift:.4}, client-clustering drop {cfl_drop:.3} ({:.3} to {:.3}) in {:.0}s, local-finetune drop {plus_drop:.3} ({:.3} to {:.3}) in {:.0}s",
            cfl.matched, cfl.shifted, cfl.secs, plus.matched, plus.shifted, plus.secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Dispatch classifier converges under SCAFFOLD but not plain FedAvg.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_domain_classifier() {
    let full = &scfl_fix(FULL_DDI).outcome;
    let iid = &scfl_fix(IID_DDI).outcome;

    // The dirichlet split never refines a full pipeline here; train the
    // classifier straight on that scheme's isolation labels.
    let dir_fix = ddi_fix(Scheme::Dirichlet);
    let splitter = SeedSplitter::new(SEED);
    let val = val_pool();
    let (dir, _) = train_domain_classifier(
        &pre(Scheme::Dirichlet).shards,
        &dir_fix.iso01.assignments,
        dir_fix.iso01.m,
        &val,
        &ClassifierConfig::default(),
        &splitter,
        None,
    )
    .expect("dirichlet classifier");

    // Ablation: identical task and labels, plain FedAvg, same round count the
    // SCAFFOLD run needed.
    let ablation_cfg = ClassifierConfig {
        optimizer: Optimizer::Fedavg,
        max_rounds: full.classifier.rounds_run,
        ..Default::default()
    };
    let (ablation, _) = train_domain_classifier(
        &pre(Scheme::FullNoniid).shards,
        &full.assignments,
        full.kept.len(),
        &val,
        &ablation_cfg,
        &splitter,
        None,
    )
    .expect("fedavg ablation classifier");

    let f1s = [full.classifier.val_f1, iid.classifier.val_f1, dir.val_f1];
    let rounds = [full.classifier.rounds_run, iid.classifier.rounds_run, dir.rounds_run];
    let margin = full.classifier.val_f1 - ablation.val_f1;
    let ok = f1s.iter().all(|&f| f >= 0.99) && rounds.iter().all(|&r| r <= 100) && margin >= 0.1;
    verdict(
        8,
        "domain-classifier",
        ok,
        format!(
            "F1 {:.3}/{:.3}/{:.3} (full/iid/dirichlet) in {}/{}/{} rounds; fedavg ablation {:.3} ({margin:+.3})",
            f1s[0], f1s[1], f1s[2], rounds[0], rounds[1], rounds[2], ablation.val_f1
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Batch norm collapses under FedAvg exactly when clients are heterogeneous.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_batch_norm_collapse() {
    let full_gap = fedavg60(Scheme::FullNoniid).miou - bn60(Scheme::FullNoniid).miou;
    let iid_gap = (fedavg60(Scheme::Iid).miou - bn60(Scheme::Iid).miou).abs();
    let ok = full_gap >= 0.10 && iid_gap <= 0.03;
    verdict(
        9,
        "batch-norm-collapse",
        ok,
        format!(
            "full_noniid gap {full_gap:.3} ({:.3} vs {:.3}), iid gap {iid_gap:.3}; batch-norm runs {:.0}s/{:.0}s",
            fedavg60(Scheme::FullNoniid).miou,
            bn60(Scheme::FullNoniid).miou,
            bn60(Scheme::FullNoniid).secs,
            bn60(Scheme::Iid).secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Reruns (any thread count) reproduce metrics byte for byte.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_deterministic_metrics() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let config = serde_json::json!({
        "method": "scfl",
        "scheme": "full_noniid",
        "clients": 4,
        "seed": 11,
        "data": { "train_size": 40, "val_size": 10, "test_size": 10 },
        "pipeline": {
            "split_round": 2,
            "total_rounds": 4,
            "classifier": { "max_rounds": 25 }
        }
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, serde_json::to_vec_pretty(&config).expect("json")).expect("write config");

    let run = |out: &Path, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fsddi"));
        cmd.arg("run").arg("--config").arg(&config_path).arg("--out").arg(out);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        let output = cmd.output().expect("binary spawns");
        assert!(
            output.status.success(),
            "run into {} failed:\n{}",
            out.display(),
            String::from_utf8_lossy(&output.stderr)
        );
    };
    run(&dir.path().join("a"), None);
    run(&dir.path().join("b"), None);
    run(&dir.path().join("c"), Some("4"));

    let read = |name: &str, file: &str| fs::read(dir.path().join(name).join(file)).expect("artifact");
    let metrics: Vec<Vec<u8>> = ["a", "b", "c"].iter().map(|n| read(n, "metrics.csv")).collect();
    let clustering: Vec<Vec<u8>> = ["a", "b", "c"].iter().map(|n| read(n, "clustering.json")).collect();
    let secs = t0.elapsed().as_secs_f64();
    let ok = !metrics[0].is_empty()
        && metrics[0] == metrics[1]
        && metrics[0] == metrics[2]
        && clustering[0] == clustering[1]
        && clustering[0] == clustering[2];
    verdict(
        10,
        "determinism",
        ok,
        format!(
            "metrics.csv ({} bytes) and clustering.json identical across rerun and --threads 4 in {secs:.0}s",
            metrics[0].len()
        ),
    );
}
