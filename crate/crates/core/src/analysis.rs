//! Episode records and the statistics computed from them: per-unit
//! activation/action correlation patterns, their summary statistics and
//! differences, and normalized returns.

use crate::env::EnvId;
use crate::error::{config_err, dim_err, Error, Result};
use crate::net::AblationMask;
use crate::numerics::Matrix;

/// One noise-free evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub env_id: EnvId,
    pub mask: AblationMask,
    pub seed: u64,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub return_total: f64,
    /// `T × obs_dim` observations seen before each action.
    pub observations: Matrix,
    /// `T × 400` post-clamp activations of the first hidden layer.
    pub layer1: Matrix,
    /// `T × 300` post-clamp activations of the second hidden layer.
    pub layer2: Matrix,
}

impl EpisodeRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env_id: EnvId,
        mask: AblationMask,
        seed: u64,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        observations: Matrix,
        layer1: Matrix,
        layer2: Matrix,
    ) -> Result<Self> {
        let t = actions.len();
        if rewards.len() != t
            || observations.rows() != t
            || layer1.rows() != t
            || layer2.rows() != t
        {
            return dim_err("episode record: per-timestep series have different lengths");
        }
        let return_total = rewards.iter().sum();
        Ok(Self {
            env_id,
            mask,
            seed,
            actions,
            rewards,
            return_total,
            observations,
            layer1,
            layer2,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn layer(&self, layer: usize) -> Result<&Matrix> {
        match layer {
            1 => Ok(&self.layer1),
            2 => Ok(&self.layer2),
            other => config_err(format!("layer must be 1 or 2, got {other}")),
        }
    }

    /// Units clamped in `layer` during this episode.
    pub fn ablated_in(&self, layer: usize) -> Option<std::ops::Range<usize>> {
        (self.mask.layer == layer && !self.mask.is_empty()).then(|| self.mask.start..self.mask.end())
    }
}

/// Sample Pearson correlation plus a flag that is set when either series
/// has zero variance, in which case `r` is reported as 0.
pub fn pearson_flagged(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return dim_err(format!("pearson: lengths {} and {} differ", x.len(), y.len()));
    }
    if x.len() < 2 {
        return dim_err("pearson: need at least two observations");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson_flagged(x, y).map(|(r, _)| r)
}

/// Ranks starting at 1, ties share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return dim_err("spearman: lengths differ");
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of unsorted `values`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Per-unit correlation between activation and action over one episode.
/// Ablated units are absent (`None`), which is distinct from `Some(0.0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPattern {
    pub layer: usize,
    pub values: Vec<Option<f64>>,
    /// Units whose activation (or the action) was constant over the episode.
    pub zero_variance: Vec<bool>,
    pub mask: AblationMask,
}

impl CorrelationPattern {
    pub fn present(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn correlation_pattern(rec: &EpisodeRecord, layer: usize) -> Result<CorrelationPattern> {
    let m = rec.layer(layer)?;
    let ablated = rec.ablated_in(layer);
    let mut values = Vec::with_capacity(m.cols());
    let mut zero_variance = vec![false; m.cols()];
    for j in 0..m.cols() {
        if ablated.as_ref().is_some_and(|r| r.contains(&j)) {
            values.push(None);
            continue;
        }
        let (r, flat) = pearson_flagged(&m.column(j), &rec.actions)?;
        zero_variance[j] = flat;
        values.push(Some(r));
    }
    Ok(CorrelationPattern {
        layer,
        values,
        zero_variance,
        mask: rec.mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternStats {
    /// Mean of |r| over present units.
    pub mean: f64,
    /// Population variance of |r| over present units.
    pub variance: f64,
    pub signed_mean: f64,
    pub signed_variance: f64,
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn pattern_stats(p: &CorrelationPattern) -> Result<PatternStats> {
    if p.present().next().is_none() {
        return dim_err("pattern_stats: pattern has no present units");
    }
    let signed: Vec<f64> = p.present().collect();
    let abs: Vec<f64> = signed.iter().map(|r| r.abs()).collect();
    let (mean, variance) = mean_and_variance(&abs);
    let (signed_mean, signed_variance) = mean_and_variance(&signed);
    Ok(PatternStats {
        mean,
        variance,
        signed_mean,
        signed_variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternDelta {
    /// `baseline − ablated` where both are present.
    pub values: Vec<Option<f64>>,
    pub l2: f64,
}

pub fn pattern_delta(baseline: &CorrelationPattern, ablated: &CorrelationPattern) -> Result<PatternDelta> {
    if baseline.layer != ablated.layer {
        return Err(Error::Config(format!(
            "pattern_delta: layers {} and {} differ",
            baseline.layer, ablated.layer
        )));
    }
    if baseline.len() != ablated.len() {
        return dim_err("pattern_delta: patterns differ in length");
    }
    let values: Vec<Option<f64>> = baseline
        .values
        .iter()
        .zip(&ablated.values)
        .map(|(b, a)| Some((*b)? - (*a)?))
        .collect();
    let l2 = values.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
    Ok(PatternDelta { values, l2 })
}

/// Affine rescaling that maps `r_min` to 0 and `r_base` to 1.
pub fn normalize_return(r: f64, r_min: f64, r_base: f64) -> Result<f64> {
    if !(r_base > r_min) {
        return config_err(format!(
            "normalize_return: baseline {r_base} must exceed minimum {r_min}"
        ));
    }
    Ok((r - r_min) / (r_base - r_min))
}
