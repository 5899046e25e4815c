//! Normalized spectral clustering of a similarity matrix, with seeded
//! k-means++ on the embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITERS: usize = 300;

fn validate_similarity(s: &[Vec<f64>]) -> Result<usize> {
    let n = s.len();
    if n == 0 {
        return Err(Error::Config("empty similarity matrix".into()));
    }
    for (i, row) in s.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Shape(format!("similarity row {i} has {} entries, want {n}", row.len())));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Config(format!("similarity[{i}][{j}] is not finite")));
            }
            if (v - s[j][i]).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "similarity is not symmetric at ({i},{j}): {v} vs {}",
                    s[j][i]
                )));
            }
        }
    }
    Ok(n)
}

/// Rows of the spectral embedding: eigenvectors of the `m` smallest
/// eigenvalues of the normalized Laplacian `I - D^-1/2 S D^-1/2`, one row per
/// node, each row scaled to unit length. A node with zero degree keeps a zero
/// row and later joins whichever cluster's centroid is nearest.
pub fn spectral_embedding(s: &[Vec<f64>], m: usize) -> Result<Vec<Vec<f64>>> {
    let n = validate_similarity(s)?;
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot embed {n} nodes into {m} cluster dimensions")));
    }
    let inv_sqrt_deg: Vec<f64> = s
        .iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let norm = inv_sqrt_deg[i] * s[i][j] * inv_sqrt_deg[j];
            lap[(i, j)] = if i == j { 1.0 - norm } else { -norm };
        }
    }
    let eigen = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a].partial_cmp(&eigen.eigenvalues[b]).expect("finite eigenvalues").then(a.cmp(&b))
    });
    let mut rows = vec![vec![0.0; m]; n];
    for (col, &which) in order.iter().take(m).enumerate() {
        let v = eigen.eigenvectors.column(which);
        for i in 0..n {
            rows[i][col] = v[i];
        }
    }
    for row in &mut rows {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(rows)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&d2).expect("positive total weight").sample(rng)
        } else {
            // all points coincide with a centroid already
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(&centroids, p);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        // refill any empty cluster with the point farthest from its centroid
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let (farthest, _) = assign
                .iter()
                .enumerate()
                .map(|(i, &a)| (i, sq_dist(&points[i], &centroids[a])))
                .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance").then(b.0.cmp(&a.0)))
                .expect("nonempty points");
            assign[farthest] = empty;
            centroids[empty] = points[farthest].clone();
            changed = true;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (acc, v) in sums[assign[i]].iter_mut().zip(p) {
                *acc += v;
            }
        }
        for c in 0..k {
            for v in sums[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        centroids = sums;
        if !changed {
            break;
        }
    }
    let inertia = points.iter().enumerate().map(|(i, p)| sq_dist(p, &centroids[assign[i]])).sum();
    (assign, inertia)
}

/// Seeded k-means++ with restarts; the restart with the lowest inertia wins,
/// ties keeping the earlier one.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if points.is_empty() || k == 0 || k > points.len() {
        return Err(Error::Config(format!("k-means with k {k} over {} points", points.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (assign, inertia) = kmeans_once(points, k, rng);
        if best.as_ref().map_or(true, |(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// Normalized spectral clustering into `m` groups.
pub fn spectral_cluster(s: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if m == 1 {
        let n = validate_similarity(s)?;
        return Ok(vec![0; n]);
    }
    let embedding = spectral_embedding(s, m)?;
    kmeans(&embedding, m, rng)
}
