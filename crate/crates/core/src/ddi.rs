//! Deep domain isolation: clusters training samples by the mixture structure
//! of their class-conditional gradient signatures.
//!
//! Each client backpropagates a class-masked loss per sample and present
//! class, prunes the gradient to a shared random coordinate subset, and
//! normalizes it to unit length. A federated Gaussian mixture per class then
//! describes how those directions split into modes. Every sample uploads only
//! its per-class mode memberships; samples are compared through the
//! Bhattacharyya coefficient of those memberships averaged over common
//! classes, and partitioned by spectral clustering of that similarity.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gmm::{fed_gmm_fit, Gmm, GmmFitConfig};
use crate::metrics::{rand_index, silhouette_from_distances};
use crate::nn::{per_class_raw_gradients, prune_view};
use crate::rng::{stream, SeedSplitter};
use crate::spectral::spectral_cluster;
use crate::ModelParams64;

/// Silhouette threshold below which the similarity carries no usable cluster
/// structure.
pub const ISOLATION_SILHOUETTE_MIN: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdiConfig {
    /// Fraction of gradient coordinates kept by the shared random prune.
    pub alpha: f64,
    /// Per-class mixture fit; `components` doubles as the number of sample
    /// clusters to isolate.
    pub gmm: GmmFitConfig,
}

impl Default for DdiConfig {
    fn default() -> Self {
        DdiConfig { alpha: 0.01, gmm: GmmFitConfig::default() }
    }
}

impl DdiConfig {
    pub fn domains(&self) -> usize {
        self.gmm.components
    }
}

/// Sorted sample of `ceil(alpha * dim)` distinct coordinates.
pub fn prune_indices(dim: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if dim == 0 {
        return Err(Error::Config("cannot prune an empty parameter vector".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("prune fraction {alpha} outside (0, 1]")));
    }
    let keep = ((alpha * dim as f64).ceil() as usize).clamp(1, dim);
    let mut idx = rand::seq::index::sample(rng, dim, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One pruned, unit-length class gradient.
#[derive(Debug, Clone)]
pub struct GradSig {
    pub sample: u64,
    pub domain: u8,
    pub values: Vec<f64>,
}

/// All signatures of one class, grouped by client.
#[derive(Debug, Clone)]
pub struct ClassSignatures {
    pub class: usize,
    pub per_client: Vec<Vec<GradSig>>,
}

impl ClassSignatures {
    pub fn total(&self) -> usize {
        self.per_client.iter().map(Vec::len).sum()
    }
}

/// Backpropagates class-masked losses at the given model for every sample and
/// present class, pruning each gradient to `indices` before normalization.
/// Zero gradients (possible after a hard prune) are dropped with a warning.
pub fn collect_class_gradients(
    model: &ModelParams64,
    shards: &[Vec<&Sample>],
    classes: usize,
    indices: &[usize],
) -> Result<Vec<ClassSignatures>> {
    let per_client: Vec<Vec<Vec<GradSig>>> = shards
        .par_iter()
        .map(|shard| {
            let mut local: Vec<Vec<GradSig>> = vec![Vec::new(); classes];
            for s in shard {
                let present: Vec<usize> =
                    s.classes_present().into_iter().filter(|&c| c < classes).collect();
                let raws = per_class_raw_gradients(model, &s.image, &s.mask, &present, s.id)?;
                for raw in raws {
                    let class = match raw.class {
                        crate::nn::ClassScope::Class(c) => c,
                        crate::nn::ClassScope::All => unreachable!("per-class gradients are class scoped"),
                    };
                    match prune_view(&raw, indices) {
                        Ok(g) => local[class].push(GradSig {
                            sample: g.sample,
                            domain: s.domain,
                            values: g.values,
                        }),
                        Err(Error::DegenerateGradient { sample, class }) => {
                            log::warn!("sample {sample} class {class}: gradient vanished under prune, dropped");
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(local)
        })
        .collect::<Result<_>>()?;

    Ok((0..classes)
        .map(|class| ClassSignatures {
            class,
            per_client: per_client.iter().map(|c| c[class].clone()).collect(),
        })
        .collect())
}

/// Bhattacharyya coefficient of two discrete distributions.
pub fn bhattacharyya(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum()
}

/// Pairwise similarity from per-sample membership profiles (class -> mixture
/// membership): the Bhattacharyya coefficient averaged over classes both
/// samples contain. Pairs with no common class score zero.
pub fn membership_similarity(profiles: &[BTreeMap<usize, Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = profiles.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            let mut common = 0usize;
            for (class, pi) in &profiles[i] {
                if let Some(pj) = profiles[j].get(class) {
                    acc += bhattacharyya(pi, pj);
                    common += 1;
                }
            }
            let v = if common == 0 { 0.0 } else { acc / common as f64 };
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct DomainIsolation {
    /// Cluster per train sample, total over the split.
    pub assignments: BTreeMap<u64, usize>,
    /// Number of clusters requested.
    pub m: usize,
    /// Per-class mixtures, keyed by class id (skipped classes absent).
    pub class_models: BTreeMap<usize, Gmm>,
    /// Rand index of hard per-gradient mixture assignments against sample
    /// domains, per class.
    pub per_class_rand: BTreeMap<usize, f64>,
    /// Rand index of the sample partition against hidden sample domains.
    pub rand_vs_domain: f64,
    /// Silhouette of the sample partition under distance `1 - S`.
    pub silhouette: f64,
    /// False when the similarity shows no isolatable structure.
    pub isolatable: bool,
    pub pruned_dim: usize,
}

impl DomainIsolation {
    /// Majority hidden domain of each cluster (ties pick the lower domain).
    /// Diagnostic only; training never reads it.
    pub fn cluster_majority_domains(&self, shards: &[Vec<&Sample>]) -> BTreeMap<usize, u8> {
        let domains: BTreeMap<u64, u8> =
            shards.iter().flatten().map(|s| (s.id, s.domain)).collect();
        let mut counts: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
        for (id, &cluster) in &self.assignments {
            if let Some(&d) = domains.get(id) {
                *counts.entry(cluster).or_default().entry(d).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .map(|(cluster, by_domain)| {
                let best = by_domain
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(d, _)| d)
                    .unwrap_or(0);
                (cluster, best)
            })
            .collect()
    }
}

/// Runs the full isolation pipeline at a trained model.
pub fn deep_domain_isolation(
    model: &ModelParams64,
    shards: &[Vec<&Sample>],
    classes: usize,
    cfg: &DdiConfig,
    splitter: &SeedSplitter,
) -> Result<DomainIsolation> {
    let m = cfg.domains();
    let mut prune_rng = splitter.stream(stream::PRUNE);
    let indices = prune_indices(model.len(), cfg.alpha, &mut prune_rng)?;
    let signatures = collect_class_gradients(model, shards, classes, &indices)?;
    isolate_from_signatures(&signatures, shards, m, cfg, splitter, indices.len())
}

/// Clustering stage, separated so callers can reuse collected signatures
/// (e.g. to sweep mixture settings without recomputing gradients).
pub fn isolate_from_signatures(
    signatures: &[ClassSignatures],
    shards: &[Vec<&Sample>],
    m: usize,
    cfg: &DdiConfig,
    splitter: &SeedSplitter,
    pruned_dim: usize,
) -> Result<DomainIsolation> {
    // Universe of samples, ordered by id; rows of the similarity matrix.
    let domains: BTreeMap<u64, u8> = shards.iter().flatten().map(|s| (s.id, s.domain)).collect();
    let index: BTreeMap<u64, usize> =
        domains.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = index.len();

    let mut class_models = BTreeMap::new();
    let mut per_class_rand = BTreeMap::new();
    let mut profiles: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); n];

    for sig in signatures {
        if sig.total() < m.max(2) {
            log::warn!("class {}: only {} gradient signatures, skipped", sig.class, sig.total());
            continue;
        }
        let points: Vec<Vec<Vec<f64>>> = sig
            .per_client
            .iter()
            .map(|c| c.iter().map(|g| g.values.clone()).collect())
            .collect();
        let views: Vec<&[Vec<f64>]> = points.iter().map(|v| v.as_slice()).collect();
        let gmm_cfg = GmmFitConfig { components: m, ..cfg.gmm.clone() };
        let mut rng = splitter.substream(stream::GMM, sig.class as u64);
        let fit = fed_gmm_fit(&views, &gmm_cfg, &mut rng)?;

        // each sample of the class uploads its membership vector; hard
        // assignments double as a per-class diagnostic against domains
        let mut hard = Vec::new();
        let mut hard_domains = Vec::new();
        for g in sig.per_client.iter().flatten() {
            let r = fit.gmm.membership(&g.values);
            let top = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite membership"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            hard.push(top);
            hard_domains.push(g.domain as usize);
            let row = index[&g.sample];
            profiles[row].insert(sig.class, r);
        }
        if hard.len() >= 2 {
            per_class_rand.insert(sig.class, rand_index(&hard, &hard_domains));
        }
        class_models.insert(sig.class, fit.gmm);
    }

    if class_models.is_empty() {
        return Err(Error::Config("no class produced enough gradient signatures".into()));
    }

    let similarity = membership_similarity(&profiles);
    let mut kmeans_rng = splitter.stream(stream::KMEANS);
    let labels = spectral_cluster(&similarity, m, &mut kmeans_rng)?;

    let sample_domains: Vec<usize> = domains.values().map(|&d| d as usize).collect();
    let rand_vs_domain = rand_index(&labels, &sample_domains);
    let distance: Vec<Vec<f64>> =
        similarity.iter().map(|row| row.iter().map(|v| 1.0 - v).collect()).collect();
    let silhouette = silhouette_from_distances(&distance, &labels);
    let isolatable = silhouette >= ISOLATION_SILHOUETTE_MIN;
    if !isolatable {
        log::warn!("similarity silhouette {silhouette:.4} below {ISOLATION_SILHOUETTE_MIN}: no isolatable domains");
    }

    let assignments: BTreeMap<u64, usize> =
        domains.keys().zip(&labels).map(|(&id, &c)| (id, c)).collect();

    Ok(DomainIsolation {
        assignments,
        m,
        class_models,
        per_class_rand,
        rand_vs_domain,
        silhouette,
        isolatable,
        pruned_dim,
    })
}

/// Shape of `clustering.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClusteringReport {
    #[serde(rename = "M")]
    pub m: usize,
    pub alpha: f64,
    /// Sample id -> cluster.
    pub assignments: BTreeMap<String, usize>,
    pub rand_index_vs_domain: f64,
    pub per_class_rand: BTreeMap<String, f64>,
}

pub fn clustering_report(iso: &DomainIsolation, alpha: f64) -> ClusteringReport {
    ClusteringReport {
        m: iso.m,
        alpha,
        assignments: iso.assignments.iter().map(|(&id, &c)| (id.to_string(), c)).collect(),
        rand_index_vs_domain: iso.rand_vs_domain,
        per_class_rand: iso.per_class_rand.iter().map(|(c, &r)| (c.to_string(), r)).collect(),
    }
}
