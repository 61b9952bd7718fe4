//! Two-dimensional embeddings of activation traces, behavioral phase
//! segmentation and the two-state clustering score.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::EpisodeRecord;
use crate::env::EnvId;
use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    Pca,
    Neighbor,
}

impl EmbedMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMethod::Pca => "pca",
            EmbedMethod::Neighbor => "neighbor",
        }
    }
}

impl fmt::Display for EmbedMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbedMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(EmbedMethod::Pca),
            "neighbor" => Ok(EmbedMethod::Neighbor),
            other => config_err(format!("unknown embedding method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    /// `T × 2`, one row per source row.
    pub points: Matrix,
    pub method: EmbedMethod,
    pub source: String,
    /// Input rows were all identical; points are then all zero.
    pub degenerate: bool,
    /// Sample variance along each output dimension.
    pub captured_variance: [f64; 2],
}

fn column_variances(points: &Matrix) -> [f64; 2] {
    let t = points.rows() as f64;
    let mut out = [0.0; 2];
    for (c, v) in out.iter_mut().enumerate() {
        let col = points.column(c);
        let mean = col.iter().sum::<f64>() / t;
        *v = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1.0);
    }
    out
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, x) in mean.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
    let t = m.rows() as f64;
    mean.iter_mut().for_each(|x| *x /= t);
    mean
}

/// Top-two principal axes of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `2 × N`, unit-norm rows ordered by decreasing variance.
    pub components: Matrix,
    pub variances: [f64; 2],
    pub degenerate: bool,
}

const LOADING_EPS: f64 = 1e-12;

impl PcaModel {
    pub fn fit(m: &Matrix) -> Result<Self> {
        let (t, n) = m.shape();
        if t < 3 || n < 2 {
            return config_err(format!("pca needs at least 3 rows and 2 columns, got {t}×{n}"));
        }
        let mean = column_means(m);
        let first = m.row(0);
        if (1..t).all(|i| m.row(i) == first) {
            return Ok(Self {
                mean,
                components: Matrix::zeros(2, n),
                variances: [0.0; 2],
                degenerate: true,
            });
        }
        let mut centered = m.as_slice().to_vec();
        for row in centered.chunks_exact_mut(n) {
            for (x, mu) in row.iter_mut().zip(&mean) {
                *x -= mu;
            }
        }
        let mut cov = vec![0.0; n * n];
        gemm(n, t, n, &centered, true, &centered, false, 0.0, &mut cov);
        let scale = 1.0 / (t as f64 - 1.0);
        let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (cov[i * n + j] + cov[j * n + i]) * scale);
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Matrix::zeros(2, n);
        let mut variances = [0.0; 2];
        for (c, &k) in order.iter().take(2).enumerate() {
            let v = eig.eigenvectors.column(k);
            let sign = match v.iter().find(|x| x.abs() > LOADING_EPS) {
                Some(&x) if x < 0.0 => -1.0,
                _ => 1.0,
            };
            for (dst, src) in components.row_mut(c).iter_mut().zip(v.iter()) {
                *dst = sign * src;
            }
            variances[c] = eig.eigenvalues[k].max(0.0);
        }
        Ok(Self {
            mean,
            components,
            variances,
            degenerate: false,
        })
    }

    /// Projects rows onto the two components.
    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        let n = self.mean.len();
        if m.cols() != n {
            return dim_err(format!("pca transform: expected {n} columns, got {}", m.cols()));
        }
        let t = m.rows();
        let mut centered = m.as_slice().to_vec();
        for row in centered.chunks_exact_mut(n) {
            for (x, mu) in row.iter_mut().zip(&self.mean) {
                *x -= mu;
            }
        }
        let mut out = vec![0.0; t * 2];
        gemm(t, n, 2, &centered, false, self.components.as_slice(), true, 0.0, &mut out);
        Matrix::new(t, 2, out)
    }

    /// Maps embedded points back to the input space.
    pub fn reconstruct(&self, points: &Matrix) -> Result<Matrix> {
        if points.cols() != 2 {
            return dim_err("pca reconstruct: points must have 2 columns");
        }
        let n = self.mean.len();
        let t = points.rows();
        let mut out = vec![0.0; t * n];
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(&self.mean);
        }
        gemm(t, 2, n, points.as_slice(), false, self.components.as_slice(), false, 1.0, &mut out);
        Matrix::new(t, n, out)
    }
}

/// Principal-component projection of the rows of `m`.
pub fn pca_embed(m: &Matrix) -> Result<Embedding2D> {
    let model = PcaModel::fit(m)?;
    Ok(Embedding2D {
        points: model.transform(m)?,
        method: EmbedMethod::Pca,
        source: String::new(),
        degenerate: model.degenerate,
        captured_variance: model.variances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    /// Defaults to 500 for up to 10 000 rows and 200 beyond.
    pub n_epochs: Option<usize>,
    pub negative_samples: usize,
    pub seed: u64,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            n_epochs: None,
            negative_samples: 5,
            seed: 0,
        }
    }
}

const KNN_BLOCK: usize = 256;

/// Exact k nearest neighbors (self excluded) by Euclidean distance, sorted by
/// distance with ties broken by index.
pub fn knn(m: &Matrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let (t, n) = m.shape();
    if k == 0 || k >= t {
        return config_err(format!("need more than {k} rows for {k} neighbors, got {t}"));
    }
    let sq: Vec<f64> = (0..t).map(|i| m.row(i).iter().map(|x| x * x).sum()).collect();
    let mut out = Vec::with_capacity(t);
    let mut gram = vec![0.0; KNN_BLOCK * t];
    for start in (0..t).step_by(KNN_BLOCK) {
        let rows = KNN_BLOCK.min(t - start);
        let block = &m.as_slice()[start * n..(start + rows) * n];
        let g = &mut gram[..rows * t];
        gemm(rows, n, t, block, false, m.as_slice(), true, 0.0, g);
        for r in 0..rows {
            let i = start + r;
            let mut cand: Vec<(usize, f64)> = (0..t)
                .filter(|&j| j != i)
                .map(|j| (j, (sq[i] + sq[j] - 2.0 * g[r * t + j]).max(0.0).sqrt()))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_by(cmp);
            out.push(cand);
        }
    }
    Ok(out)
}

/// Fits `1 / (1 + a·d^(2b))` to the target membership curve that is 1 below
/// `min_dist` and decays as `exp(-(d - min_dist)/spread)` beyond it.
pub fn fit_ab(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let target: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let loss = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&target)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    // coarse grid, then a shrinking pattern search
    let (mut a, mut b, mut best) = (1.0, 1.0, f64::INFINITY);
    for i in 1..=50 {
        for j in 1..=40 {
            let (ca, cb) = (0.1 * i as f64, 0.05 * j as f64);
            let l = loss(ca, cb);
            if l < best {
                (a, b, best) = (ca, cb, l);
            }
        }
    }
    let mut step = 0.05;
    while step > 1e-9 {
        let mut moved = false;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (ca, cb) = (a + da, b + db);
            if ca <= 0.0 || cb <= 0.0 {
                continue;
            }
            let l = loss(ca, cb);
            if l < best {
                (a, b, best) = (ca, cb, l);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (a, b)
}

const SIGMA_TOL: f64 = 1e-5;
const MIN_SIGMA_SCALE: f64 = 1e-3;

/// Fuzzy neighbor weights per row: distances shifted by the nearest-neighbor
/// distance and scaled so that each row's weights sum to `log2(k)`.
fn membership_weights(neighbors: &[Vec<(usize, f64)>]) -> Vec<Vec<(usize, f64)>> {
    let all_mean = {
        let (s, c) = neighbors
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), &(_, d)| (s + d, c + 1));
        s / c as f64
    };
    neighbors
        .iter()
        .map(|row| {
            let k = row.len();
            let target = (k as f64).log2();
            let rho = row.iter().map(|&(_, d)| d).find(|&d| d > 0.0).unwrap_or(0.0);
            let (mut lo, mut hi, mut sigma) = (0.0_f64, f64::INFINITY, 1.0_f64);
            for _ in 0..64 {
                let psum: f64 = row.iter().map(|&(_, d)| (-(d - rho).max(0.0) / sigma).exp()).sum();
                if (psum - target).abs() < SIGMA_TOL {
                    break;
                }
                if psum > target {
                    hi = sigma;
                    sigma = 0.5 * (lo + hi);
                } else {
                    lo = sigma;
                    sigma = if hi.is_infinite() { 2.0 * sigma } else { 0.5 * (lo + hi) };
                }
            }
            let row_mean = row.iter().map(|&(_, d)| d).sum::<f64>() / k as f64;
            let floor = MIN_SIGMA_SCALE * if rho > 0.0 { row_mean } else { all_mean };
            let sigma = sigma.max(floor).max(f64::MIN_POSITIVE);
            row.iter()
                .map(|&(j, d)| (j, (-(d - rho).max(0.0) / sigma).exp()))
                .collect()
        })
        .collect()
}

const GRAD_CLIP: f64 = 4.0;

fn clip(x: f64) -> f64 {
    x.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Neighbor-graph force layout: a symmetric fuzzy k-NN graph is built in the
/// input space and a 2-D layout is optimized by stochastic attraction along
/// graph edges and repulsion from random rows. Deterministic for a given
/// seed.
pub fn neighbor_embed(m: &Matrix, cfg: &NeighborConfig) -> Result<Embedding2D> {
    let t = m.rows();
    if cfg.n_neighbors < 2 || t <= cfg.n_neighbors {
        return config_err(format!(
            "neighbor embedding needs more than {} rows, got {t}",
            cfg.n_neighbors
        ));
    }
    if !(cfg.min_dist >= 0.0 && cfg.spread > 0.0 && cfg.min_dist < cfg.spread) {
        return config_err("neighbor embedding needs 0 ≤ min_dist < spread");
    }
    let weights = membership_weights(&knn(m, cfg.n_neighbors)?);
    let mut sym: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, row) in weights.iter().enumerate() {
        for &(j, w) in row {
            let e = sym.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                e.0 = w;
            } else {
                e.1 = w;
            }
        }
    }
    let n_epochs = cfg.n_epochs.unwrap_or(if t <= 10_000 { 500 } else { 200 });
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * sym.len());
    for (&(i, j), &(a, b)) in &sym {
        let w = a + b - a * b;
        edges.push((i, j, w));
        edges.push((j, i, w));
    }
    let max_w = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    edges.retain(|e| e.2 >= max_w / n_epochs as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = initial_layout(m, &mut rng)?;
    let (a, b) = fit_ab(cfg.spread, cfg.min_dist);
    let eps: Vec<f64> = edges.iter().map(|e| max_w / e.2).collect();
    let neg_rate = cfg.negative_samples.max(1) as f64;
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / neg_rate).collect();
    let mut next_sample = eps.clone();
    let mut next_neg = eps_neg.clone();

    for epoch in 0..n_epochs {
        let n = epoch as f64;
        let alpha = 1.0 - n / n_epochs as f64;
        for (e, &(i, j, _)) in edges.iter().enumerate() {
            if next_sample[e] > n {
                continue;
            }
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let d2 = dx * dx + dy * dy;
            if d2 > 0.0 {
                let coef = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                let (gx, gy) = (clip(coef * dx) * alpha, clip(coef * dy) * alpha);
                y[i][0] += gx;
                y[i][1] += gy;
                y[j][0] -= gx;
                y[j][1] -= gy;
            }
            next_sample[e] += eps[e];
            let n_neg = ((n - next_neg[e]) / eps_neg[e]).max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.random_range(0..t);
                if k == i {
                    continue;
                }
                let (dx, dy) = (y[i][0] - y[k][0], y[i][1] - y[k][1]);
                let d2 = dx * dx + dy * dy;
                let (gx, gy) = if d2 > 0.0 {
                    let coef = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                    (clip(coef * dx), clip(coef * dy))
                } else {
                    (GRAD_CLIP, GRAD_CLIP)
                };
                y[i][0] += gx * alpha;
                y[i][1] += gy * alpha;
            }
            next_neg[e] += n_neg as f64 * eps_neg[e];
        }
    }
    let points = Matrix::new(t, 2, y.into_iter().flatten().collect())?;
    if !points.is_finite() {
        return Err(Error::Numeric("neighbor embedding diverged".into()));
    }
    let captured_variance = column_variances(&points);
    Ok(Embedding2D {
        points,
        method: EmbedMethod::Neighbor,
        source: String::new(),
        degenerate: false,
        captured_variance,
    })
}

const LAYOUT_BOX: f64 = 10.0;
const LAYOUT_JITTER: f64 = 1e-4;

/// PCA coordinates rescaled into a 10×10 box with a little seeded jitter so
/// coincident rows can separate.
fn initial_layout(m: &Matrix, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let t = m.rows();
    let pca = if m.cols() >= 2 && t >= 3 {
        Some(pca_embed(m)?).filter(|e| !e.degenerate)
    } else {
        None
    };
    let mut y: Vec<[f64; 2]> = match pca {
        Some(e) => (0..t).map(|i| [e.points.get(i, 0), e.points.get(i, 1)]).collect(),
        None => (0..t)
            .map(|_| [rng.random_range(0.0..LAYOUT_BOX), rng.random_range(0.0..LAYOUT_BOX)])
            .collect(),
    };
    for c in 0..2 {
        let lo = y.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
        let hi = y.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        for p in y.iter_mut() {
            p[c] = LAYOUT_BOX * (p[c] - lo) / range + rng.random_range(-LAYOUT_JITTER..LAYOUT_JITTER);
        }
    }
    Ok(y)
}

/// Mean fraction of each row's `k_high` input-space neighbors found among its
/// `k_low` nearest points in the embedding.
pub fn neighbor_preservation(m: &Matrix, points: &Matrix, k_high: usize, k_low: usize) -> Result<f64> {
    if m.rows() != points.rows() {
        return dim_err("neighbor preservation: row counts differ");
    }
    let high = knn(m, k_high)?;
    let low = knn(points, k_low)?;
    let total: f64 = high
        .iter()
        .zip(&low)
        .map(|(h, l)| h.iter().filter(|(j, _)| l.iter().any(|(k, _)| k == j)).count() as f64 / k_high as f64)
        .sum();
    Ok(total / m.rows() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean silhouette coefficient; a point alone in its cluster scores 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let t = points.rows();
    if labels.len() != t {
        return dim_err("silhouette: one label per row required");
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return config_err("silhouette needs at least two non-empty clusters");
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..t {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..t {
            if i != j {
                sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / t as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k × N`.
    pub centroids: Matrix,
    pub inertia: f64,
    /// Restart that produced this solution.
    pub restart: usize,
}

const KMEANS_MAX_ITER: usize = 300;

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, mu)| (c, sq_dist(row, mu)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_once(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let t = data.rows();
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![data.row(rng.random_range(0..t)).to_vec()];
    while centroids.len() < k {
        let d: Vec<f64> = (0..t).map(|i| nearest(data.row(i), &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(t - 1)
        } else {
            rng.random_range(0..t)
        };
        centroids.push(data.row(pick).to_vec());
    }
    let mut labels = vec![usize::MAX; t];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(data.row(i), &centroids);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; data.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l].iter_mut().zip(data.row(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // reseed an empty cluster at the worst-fit row
                let far = (0..t)
                    .map(|i| (i, sq_dist(data.row(i), &centroids[labels[i]])))
                    .fold((0, f64::NEG_INFINITY), |b, cur| if cur.1 > b.1 { cur } else { b })
                    .0;
                centroids[c] = data.row(far).to_vec();
            }
        }
    }
    let inertia = (0..t).map(|i| sq_dist(data.row(i), &centroids[labels[i]])).sum();
    (labels, centroids, inertia)
}

/// Lloyd's k-means with k-means++ seeding; the restart with the lowest
/// inertia wins, ties going to the earliest restart.
pub fn kmeans(data: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || data.rows() < k {
        return config_err(format!("k-means with k={k} needs at least k rows, got {}", data.rows()));
    }
    if restarts == 0 {
        return config_err("k-means needs at least one restart");
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (labels, centroids, inertia) = kmeans_once(data, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans {
                labels,
                centroids: Matrix::new(k, data.cols(), centroids.concat())?,
                inertia,
                restart: r,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Swingup,
    Stabilize,
    Balance,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Swingup => "swingup",
            Phase::Stabilize => "stabilize",
            Phase::Balance => "balance",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const UPRIGHT_COS: f64 = 0.95;
pub const STABILIZE_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSegmentation {
    /// First timestep with the pole upright, or `T` if it never is.
    pub swingup_end: usize,
    pub phases: Vec<Phase>,
    pub never_upright: bool,
}

impl PhaseSegmentation {
    pub fn range(&self, phase: Phase) -> Range<usize> {
        let start = self.phases.iter().position(|&p| p == phase);
        match start {
            Some(s) => s..s + self.phases[s..].iter().take_while(|&&p| p == phase).count(),
            None => self.phases.len()..self.phases.len(),
        }
    }
}

/// cos θ of the pole from an observation row.
pub fn pole_cos(env: EnvId, obs: &[f64]) -> f64 {
    match env {
        EnvId::Cpsu | EnvId::Cpb => obs[2],
        EnvId::Psu => obs[0],
    }
}

/// Splits an episode into swing-up (until the pole first gets upright),
/// a fixed-length stabilization window and balancing.
pub fn segment_phases(rec: &EpisodeRecord) -> PhaseSegmentation {
    let cos: Vec<f64> = (0..rec.len())
        .map(|i| pole_cos(rec.env_id, rec.observations.row(i)))
        .collect();
    segment_cos(rec.env_id, &cos)
}

/// Phase segmentation from the per-step cos θ of the pole.
pub fn segment_cos(env: EnvId, cos: &[f64]) -> PhaseSegmentation {
    let t = cos.len();
    if !env.has_swing_up() {
        return PhaseSegmentation {
            swingup_end: 0,
            phases: vec![Phase::Balance; t],
            never_upright: false,
        };
    }
    let swingup_end = cos.iter().position(|&c| c > UPRIGHT_COS).unwrap_or(t);
    let stabilize_end = (swingup_end + STABILIZE_STEPS).min(t);
    let phases = (0..t)
        .map(|i| {
            if i < swingup_end {
                Phase::Swingup
            } else if i < stabilize_end {
                Phase::Stabilize
            } else {
                Phase::Balance
            }
        })
        .collect();
    PhaseSegmentation {
        swingup_end,
        phases,
        never_upright: swingup_end == t,
    }
}

/// Balance-phase activation rows of `layer` and the matching actions.
pub fn balance_rows(rec: &EpisodeRecord, layer: usize, seg: &PhaseSegmentation) -> Result<(Matrix, Vec<f64>)> {
    let m = rec.layer(layer)?;
    let range = seg.range(Phase::Balance);
    let n = m.cols();
    let data = m.as_slice()[range.start * n..range.end * n].to_vec();
    Ok((Matrix::new(range.len(), n, data)?, rec.actions[range].to_vec()))
}

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_SEED: u64 = 0;
pub const MIN_BALANCE_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStateScore {
    pub agreement: f64,
    pub labels: Vec<usize>,
    /// Fraction of steps with a positive action.
    pub positive_fraction: f64,
}

/// Best agreement between a 2-way labelling and the action signs over both
/// label assignments.
pub fn sign_agreement(labels: &[usize], actions: &[f64]) -> Result<f64> {
    if labels.len() != actions.len() || labels.is_empty() {
        return dim_err("sign agreement: labels and actions must be non-empty and equally long");
    }
    let hits = labels
        .iter()
        .zip(actions)
        .filter(|&(&l, &a)| (l == 1) == (a > 0.0))
        .count() as f64;
    let p = hits / labels.len() as f64;
    Ok(p.max(1.0 - p))
}

/// How well a 2-means clustering of balance-phase activations separates the
/// two action directions.
pub fn two_state_score(m: &Matrix, actions: &[f64]) -> Result<TwoStateScore> {
    if m.rows() != actions.len() {
        return dim_err("two-state score: one action per activation row required");
    }
    if m.rows() < MIN_BALANCE_STEPS {
        return config_err(format!(
            "two-state score needs at least {MIN_BALANCE_STEPS} balance steps, got {}",
            m.rows()
        ));
    }
    let positive = actions.iter().filter(|&&a| a > 0.0).count();
    if positive == 0 || positive == actions.len() {
        return Err(Error::Undefined("all balance-phase actions have the same sign".into()));
    }
    let km = kmeans(m, 2, KMEANS_RESTARTS, KMEANS_SEED)?;
    Ok(TwoStateScore {
        agreement: sign_agreement(&km.labels, actions)?,
        labels: km.labels,
        positive_fraction: positive as f64 / actions.len() as f64,
    })
}

/// Agreement of the fitted clustering with randomly permuted actions.
pub fn two_state_null(score: &TwoStateScore, actions: &[f64], shuffles: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = actions.to_vec();
    (0..shuffles)
        .map(|_| {
            perm.shuffle(&mut rng);
            sign_agreement(&score.labels, &perm)
        })
        .collect()
}
