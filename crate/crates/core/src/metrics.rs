//! Segmentation, clustering and classification metrics.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Dataset-level IoU accumulator: integer pixel counts per class, summed over
/// every evaluated sample before any division.
#[derive(Debug, Clone)]
pub struct SegAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fnn: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SegMetrics {
    /// Per-class IoU; `None` when the class never occurs in prediction or
    /// target (undefined, excluded from the mean).
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl SegAccumulator {
    pub fn new(classes: usize) -> Self {
        SegAccumulator { tp: vec![0; classes], fp: vec![0; classes], fnn: vec![0; classes] }
    }

    pub fn add(&mut self, pred: &[u8], target: &[u8]) {
        debug_assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (p as usize, t as usize);
            debug_assert!(p < self.tp.len() && t < self.tp.len());
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fnn[t] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &SegAccumulator) {
        for c in 0..self.tp.len() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fnn[c] += other.fnn[c];
        }
    }

    pub fn finish(&self) -> SegMetrics {
        let iou: Vec<Option<f64>> = (0..self.tp.len())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fnn[c];
                if denom == 0 {
                    None
                } else {
                    Some(self.tp[c] as f64 / denom as f64)
                }
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
        SegMetrics { iou, miou }
    }
}

/// Convenience wrapper for a batch of full masks.
pub fn miou(preds: &[Vec<u8>], targets: &[Vec<u8>], classes: usize) -> SegMetrics {
    let mut acc = SegAccumulator::new(classes);
    for (p, t) in preds.iter().zip(targets) {
        acc.add(p, t);
    }
    acc.finish()
}

/// Rand index between two partitions of the same items: the fraction of item
/// pairs on which the partitions agree (together in both or apart in both).
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2, "rand index needs at least two items");
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut contingency = vec![0u64; ka * kb];
    let mut row = vec![0u64; ka];
    let mut col = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        contingency[x * kb + y] += 1;
        row[x] += 1;
        col[y] += 1;
    }
    let c2 = |v: u64| v * v.saturating_sub(1) / 2;
    let pairs_both: u64 = contingency.iter().map(|&v| c2(v)).sum();
    let pairs_a: u64 = row.iter().map(|&v| c2(v)).sum();
    let pairs_b: u64 = col.iter().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    // ordered so intermediates never go negative (b >= 0 by inclusion-exclusion)
    let apart_both = total + pairs_both - pairs_a - pairs_b;
    (pairs_both + apart_both) as f64 / total as f64
}

/// Unweighted mean F1 over classes; a class absent from both prediction and
/// truth is skipped.
pub fn macro_f1(pred: &[usize], truth: &[usize], m: usize) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut tp = vec![0u64; m];
    let mut fp = vec![0u64; m];
    let mut fnn = vec![0u64; m];
    for (&p, &t) in pred.iter().zip(truth) {
        assert!(p < m && t < m, "label out of range");
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..m {
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean silhouette coefficient over points given a full distance matrix:
/// `(b - a) / max(a, b)` with `a` the mean distance to the own cluster and
/// `b` the smallest mean distance to another cluster. Singletons score zero;
/// a single-cluster labeling scores zero overall.
pub fn silhouette_from_distances(dist: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = labels.len();
    assert_eq!(dist.len(), n);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if n < 2 || k < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        if counts[labels[i]] < 2 {
            continue; // singleton contributes 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i][j];
            }
        }
        let a = sums[labels[i]] / (counts[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub split_scheme: String,
    pub phase: String,
    pub cluster_id: String,
    pub class_id: String,
    pub value_name: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: &str, method: &str, scheme: &str, phase: &str, value_name: &str, value: f64) -> Self {
        MetricRow {
            run_id: run_id.to_string(),
            method: method.to_string(),
            split_scheme: scheme.to_string(),
            phase: phase.to_string(),
            cluster_id: "-".to_string(),
            class_id: "mean".to_string(),
            value_name: value_name.to_string(),
            value,
        }
    }

    pub fn cluster(mut self, cluster: usize) -> Self {
        self.cluster_id = cluster.to_string();
        self
    }

    pub fn class(mut self, class: usize) -> Self {
        self.class_id = class.to_string();
        self
    }
}

/// Writes metric rows to `path` with a fixed header. Float formatting uses
/// the shortest round-trip representation, so files are byte-stable.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| crate::error::Error::Config(format!("metrics csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Config(format!("metrics csv: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rows for a segmentation evaluation: one per defined class plus the mean.
pub fn seg_metric_rows(base: &MetricRow, metrics: &SegMetrics, value_name: &str) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (c, iou) in metrics.iou.iter().enumerate() {
        if let Some(v) = iou {
            let mut r = base.clone();
            r.class_id = c.to_string();
            r.value_name = format!("{value_name}_iou");
            r.value = *v;
            rows.push(r);
        }
    }
    let mut mean = base.clone();
    mean.class_id = "mean".to_string();
    mean.value_name = format!("{value_name}_miou");
    mean.value = metrics.miou;
    rows.push(mean);
    rows
}
