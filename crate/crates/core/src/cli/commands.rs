//! The operations behind each subcommand. Each writes its outputs under an
//! output directory and returns a summary for callers and tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{worker_threads, EmbedConfig, RunConfig, TracePolicy};
use super::io::{fmt_f64, read_json, read_pattern, read_trace, write_csv, write_json, write_pattern, write_trace, LayerTrace};
use super::plot::{self, ScatterPoint};
use crate::ablate::{canonical_fraction, run_sweep, AblationPlan, MaskOutcome, SweepOptions, SweepResult};
use crate::analysis::{normalize_return, quantile, spearman, EpisodeRecord};
use crate::checkpoint::Checkpoint;
use crate::ddpg::{episode_seed, record_episode, train_with_progress, CurvePoint, TrainConfig, TrainOutcome};
use crate::embed::{
    neighbor_embed, neighbor_preservation, segment_cos, two_state_null, two_state_score, EmbedMethod,
    NeighborConfig, PcaModel, Phase, PhaseSegmentation,
};
use crate::env::EnvId;
use crate::error::{config_err, Error, Result};
use crate::net::AblationMask;
use crate::numerics::Matrix;

/// Progress sink for human-readable status lines.
pub type Log<'a> = &'a dyn Fn(&str);

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BEST_CHECKPOINT_FILE: &str = "best.bin";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SWEEP_MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub checkpoint_hash: String,
    pub best_checkpoint_hash: String,
    pub best_step: Option<u64>,
    pub best_eval_return: Option<f64>,
    pub final_eval_return: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub manifest: RunManifest,
    pub wall_time_s: f64,
}

fn curve_rows(curve: &[CurvePoint]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|p| vec![p.step.to_string(), fmt_f64(p.mean), fmt_f64(p.min), fmt_f64(p.max)])
        .collect()
}

/// Trains one agent and writes the final and best checkpoints, the learning
/// curve, a run manifest and the wall time.
pub fn cmd_train(cfg: &TrainConfig, out: &Path, log: Log) -> Result<TrainReport> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let outcome = train_with_progress(cfg, |p| {
        log(&format!(
            "{} step {:>7}: eval return {:.2} (min {:.2}, max {:.2})",
            cfg.env, p.step, p.mean, p.min, p.max
        ))
    })?;
    let wall_time_s = start.elapsed().as_secs_f64();
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    let best = outcome.best_checkpoint();
    best.save(&out.join(BEST_CHECKPOINT_FILE))?;
    write_csv(
        &out.join(CURVE_FILE),
        &["step", "eval_return_mean", "eval_return_min", "eval_return_max"],
        &curve_rows(&outcome.curve),
    )?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config: cfg.clone(),
        checkpoint_hash: outcome.checkpoint.content_hash(),
        best_checkpoint_hash: best.content_hash(),
        best_step: outcome.best.as_ref().map(|(p, _)| p.step),
        best_eval_return: outcome.best_return(),
        final_eval_return: outcome.curve.last().map(|p| p.mean),
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    write_json(&out.join(TIMING_FILE), &serde_json::json!({ "wall_time_s": wall_time_s }))?;
    Ok(TrainReport {
        outcome,
        manifest,
        wall_time_s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateOptions {
    pub layer: usize,
    /// Zeros are ignored; an empty list is a baseline-only sweep.
    pub fractions: Vec<f64>,
    pub stride: usize,
    pub episodes: usize,
    pub seed: u64,
    pub traces: TracePolicy,
    pub threads: usize,
}

impl AblateOptions {
    pub fn from_config(cfg: &RunConfig, layer: usize) -> Self {
        Self {
            layer,
            fractions: cfg.ablate.fractions.clone(),
            stride: cfg.ablate.stride,
            episodes: cfg.ablate.episodes,
            seed: cfg.ablate.seed,
            traces: cfg.ablate.traces,
            threads: worker_threads(cfg.ablate.threads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskWindow {
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub env: EnvId,
    pub layer: usize,
    pub stride: usize,
    pub fractions: Vec<f64>,
    pub masks: Vec<MaskWindow>,
    pub seeds: Vec<u64>,
    pub episodes_per_mask: usize,
    pub checkpoint_hash: String,
    pub traces: TracePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer: usize,
    pub start: usize,
    pub width: usize,
    /// 0 for the baseline row.
    pub fraction: f64,
    pub return_raw: f64,
    /// `None` only when every return in the sweep equals the minimum.
    pub return_norm: Option<f64>,
    pub pattern_mean: f64,
    pub pattern_var: f64,
    pub pattern_delta_l2: f64,
    pub signed_mean: f64,
    pub signed_var: f64,
    pub episode_returns: Vec<f64>,
}

impl SummaryRow {
    pub fn is_baseline(&self) -> bool {
        self.width == 0
    }

    pub fn id(&self) -> String {
        mask_id(&AblationMask::new(self.layer, self.start, self.width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedMask {
    pub layer: usize,
    pub start: usize,
    pub width: usize,
    pub fraction: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub env: EnvId,
    pub layer: usize,
    pub r_min: f64,
    pub r_base: f64,
    /// Baseline first, then masks ordered by `(fraction, start)`.
    pub rows: Vec<SummaryRow>,
    pub failed: Vec<FailedMask>,
}

impl SweepSummary {
    pub fn baseline(&self) -> &SummaryRow {
        &self.rows[0]
    }

    pub fn masks(&self) -> impl Iterator<Item = &SummaryRow> {
        self.rows.iter().skip(1)
    }
}

/// File stem for a mask's outputs, e.g. `w020_s100`.
pub fn mask_id(mask: &AblationMask) -> String {
    if mask.is_empty() {
        "baseline".to_owned()
    } else {
        format!("w{:03}_s{:03}", mask.width, mask.start)
    }
}

fn normalized(r: f64, r_min: f64, r_base: f64) -> Option<f64> {
    match normalize_return(r, r_min, r_base) {
        Ok(v) => Some(v),
        Err(_) => (r == r_base).then_some(1.0),
    }
}

pub fn summarize_sweep(result: &SweepResult) -> SweepSummary {
    let r_min = result.min_return();
    let r_base = result.baseline.return_raw;
    let row = |o: &MaskOutcome| SummaryRow {
        layer: result.layer,
        start: o.mask.start,
        width: o.mask.width,
        fraction: o.fraction,
        return_raw: o.return_raw,
        return_norm: normalized(o.return_raw, r_min, r_base),
        pattern_mean: o.pattern_mean,
        pattern_var: o.pattern_var,
        pattern_delta_l2: o.pattern_delta_l2,
        signed_mean: o.signed_mean,
        signed_var: o.signed_var,
        episode_returns: o.returns.clone(),
    };
    let mut rows = vec![row(&result.baseline)];
    let mut failed = Vec::new();
    for e in &result.entries {
        match &e.error {
            None => rows.push(row(e)),
            Some(msg) => failed.push(FailedMask {
                layer: result.layer,
                start: e.mask.start,
                width: e.mask.width,
                fraction: e.fraction,
                error: msg.clone(),
            }),
        }
    }
    SweepSummary {
        env: result.env,
        layer: result.layer,
        r_min,
        r_base,
        rows,
        failed,
    }
}

/// Runs a sliding-window sweep over one actor layer and writes the sweep
/// manifest, per-mask correlation patterns, the selected episode traces and
/// the summary.
pub fn cmd_ablate(ckpt: &Checkpoint, opts: &AblateOptions, out: &Path, log: Log) -> Result<SweepSummary> {
    let fractions: Vec<f64> = opts.fractions.iter().copied().filter(|&p| p != 0.0).collect();
    let sizes = ckpt.actor.hidden_sizes();
    let size = match opts.layer {
        1 => sizes.0,
        2 => sizes.1,
        l => return config_err(format!("layer must be 1 or 2, got {l}")),
    };
    let plan = AblationPlan::new(opts.layer, size, &fractions, opts.stride)?;
    let sweep_opts = SweepOptions {
        episodes_per_mask: opts.episodes,
        seed: opts.seed,
        threads: opts.threads,
    };
    fs::create_dir_all(out)?;
    let manifest = SweepManifest {
        env: ckpt.env,
        layer: opts.layer,
        stride: opts.stride,
        fractions: plan.fractions(),
        masks: plan
            .masks()
            .iter()
            .map(|(_, m)| MaskWindow { start: m.start, width: m.width })
            .collect(),
        seeds: crate::ablate::sweep_seeds(opts.seed, opts.episodes),
        episodes_per_mask: opts.episodes,
        checkpoint_hash: ckpt.content_hash(),
        traces: opts.traces,
    };
    write_json(&out.join(SWEEP_MANIFEST_FILE), &manifest)?;
    log(&format!(
        "{} layer {}: baseline + {} masks x {} episodes",
        ckpt.env,
        opts.layer,
        plan.len(),
        opts.episodes
    ));
    let sink = |o: &MaskOutcome, records: &[EpisodeRecord]| -> Result<()> {
        let id = mask_id(&o.mask);
        if let Some(p) = &o.pattern {
            write_pattern(&out.join("patterns").join(format!("{id}.csv")), p)?;
        }
        for (k, rec) in records.iter().enumerate() {
            if opts.traces.keeps(o.mask.is_empty(), k) {
                write_trace(&out.join("traces").join(&id), &format!("ep{k}"), rec)?;
            }
        }
        Ok(())
    };
    let result = run_sweep(&ckpt.actor, ckpt.env, &plan, &sweep_opts, &sink)?;
    let summary = summarize_sweep(&result);
    for f in &summary.failed {
        log(&format!("mask start {} width {} failed: {}", f.start, f.width, f.error));
    }
    write_json(&out.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionStats {
    pub fraction: f64,
    pub n_masks: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub env: EnvId,
    pub layer: usize,
    pub r_min: f64,
    pub r_base: f64,
    pub fractions: Vec<FractionStats>,
    /// Rank correlation between ablation fraction and median normalized
    /// return; `None` with fewer than two fractions.
    pub spearman_fraction_vs_median: Option<f64>,
    pub bar_chart_fraction: Option<f64>,
    pub pattern_examples: Vec<String>,
}

fn fraction_label(p: f64) -> String {
    format!("{:.2}%", 100.0 * p)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

fn fraction_stats(summary: &SweepSummary) -> Vec<FractionStats> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in summary.masks() {
        let g = groups.entry(r.fraction.to_bits()).or_insert((r.fraction, Vec::new()));
        if let Some(v) = r.return_norm {
            g.1.push(v);
        }
    }
    let mut out: Vec<FractionStats> = groups
        .into_values()
        .filter(|(_, v)| !v.is_empty())
        .map(|(fraction, v)| FractionStats {
            fraction,
            n_masks: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: quantile(&v, 0.0).unwrap_or(f64::NAN),
            q1: quantile(&v, 0.25).unwrap_or(f64::NAN),
            median: quantile(&v, 0.5).unwrap_or(f64::NAN),
            q3: quantile(&v, 0.75).unwrap_or(f64::NAN),
            max: quantile(&v, 1.0).unwrap_or(f64::NAN),
        })
        .collect();
    out.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    out
}

fn write_plot(dir: &Path, stem: &str, headers: &[&str], rows: &[Vec<String>], svg: &str) -> Result<()> {
    write_csv(&dir.join(format!("{stem}.csv")), headers, rows)?;
    crate::fsutil::write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())
}

fn mean_variance_plot(dir: &Path, stem: &str, title: &str, rows: &[&SummaryRow]) -> Result<()> {
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                if r.is_baseline() { "baseline" } else { "ablated" }.to_owned(),
                fmt_f64(r.fraction),
                r.start.to_string(),
                r.width.to_string(),
                fmt_f64(r.pattern_mean),
                fmt_f64(r.pattern_var),
                opt_cell(r.return_norm),
            ]
        })
        .collect();
    let points: Vec<ScatterPoint> = rows
        .iter()
        .map(|r| ScatterPoint {
            x: r.pattern_mean,
            y: r.pattern_var,
            fill: if r.is_baseline() {
                plot::BLUE.to_owned()
            } else {
                plot::sequential(r.return_norm.unwrap_or(f64::NAN))
            },
            highlight: r.is_baseline(),
        })
        .collect();
    let svg = plot::scatter(title, "mean |r|", "variance of |r|", &points);
    write_plot(
        dir,
        stem,
        &["kind", "fraction", "start", "width", "pattern_mean", "pattern_var", "return_norm"],
        &csv_rows,
        &svg,
    )
}

const BAR_CHART_FRACTION: f64 = 0.30;
const PATTERN_EXAMPLES: usize = 4;

/// Turns a sweep directory into the report figures (each an SVG with a CSV
/// of exactly the plotted values) and `analysis.json`.
pub fn cmd_analyze(sweep: &Path, out: &Path) -> Result<AnalysisReport> {
    let summary: SweepSummary = read_json(&sweep.join(SWEEP_SUMMARY_FILE))?;
    if summary.rows.is_empty() || !summary.rows[0].is_baseline() {
        return config_err("sweep summary must start with the baseline row");
    }
    fs::create_dir_all(out)?;
    let env = summary.env;
    let layer = summary.layer;
    let fractions = fraction_stats(&summary);
    let mut mask_fractions: Vec<f64> = summary.masks().map(|r| r.fraction).collect();
    mask_fractions.sort_by(f64::total_cmp);
    mask_fractions.dedup();

    // normalized returns of every window at one fraction, next to the baseline
    let bar_fraction = mask_fractions
        .iter()
        .copied()
        .find(|&p| canonical_fraction(p).ok() == Some(BAR_CHART_FRACTION))
        .or_else(|| mask_fractions.first().copied());
    let bar_rows: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| (r.is_baseline() || Some(r.fraction) == bar_fraction) && r.return_norm.is_some())
        .collect();
    let bars: Vec<(String, f64, &str)> = bar_rows
        .iter()
        .map(|r| {
            let label = if r.is_baseline() {
                "baseline".to_owned()
            } else {
                format!("{}-{}", r.start, r.start + r.width - 1)
            };
            (label, r.return_norm.unwrap_or_default(), if r.is_baseline() { plot::BLUE } else { plot::RED })
        })
        .collect();
    write_plot(
        out,
        "normalized_returns",
        &["label", "start", "width", "return_norm"],
        &bar_rows
            .iter()
            .zip(&bars)
            .map(|(r, b)| vec![b.0.clone(), r.start.to_string(), r.width.to_string(), fmt_f64(b.1)])
            .collect::<Vec<_>>(),
        &plot::bar_chart(
            &format!(
                "{env} layer {layer}: normalized return, {} windows",
                bar_fraction.map_or("no".to_owned(), fraction_label)
            ),
            "normalized return",
            &bars,
        ),
    )?;

    write_plot(
        out,
        "return_distribution",
        &["fraction", "n_masks", "min", "q1", "median", "q3", "max"],
        &fractions
            .iter()
            .map(|f| {
                vec![
                    fmt_f64(f.fraction),
                    f.n_masks.to_string(),
                    fmt_f64(f.min),
                    fmt_f64(f.q1),
                    fmt_f64(f.median),
                    fmt_f64(f.q3),
                    fmt_f64(f.max),
                ]
            })
            .collect::<Vec<_>>(),
        &plot::box_plot(
            &format!("{env} layer {layer}: normalized return by ablation fraction"),
            "normalized return",
            &fractions
                .iter()
                .map(|f| (fraction_label(f.fraction), [f.min, f.q1, f.median, f.q3, f.max]))
                .collect::<Vec<_>>(),
        ),
    )?;

    // baseline pattern, a few example windows at the smallest fraction and
    // their change against the baseline
    let smallest = mask_fractions.first().copied();
    let mut candidates: Vec<&SummaryRow> = summary.masks().filter(|r| Some(r.fraction) == smallest).collect();
    candidates.sort_by(|a, b| a.return_raw.total_cmp(&b.return_raw).then(a.start.cmp(&b.start)));
    let mut examples: Vec<&SummaryRow> = candidates.iter().take(PATTERN_EXAMPLES / 2).copied().collect();
    for r in candidates.iter().rev() {
        if examples.len() >= PATTERN_EXAMPLES.min(candidates.len()) {
            break;
        }
        if !examples.iter().any(|e| e.start == r.start) {
            examples.push(r);
        }
    }
    examples.sort_by_key(|r| r.start);
    let patterns_dir = sweep.join("patterns");
    let base_pattern = read_pattern(&patterns_dir.join("baseline.csv"))?;
    let mut strips: Vec<(String, &str, usize, usize, Vec<Option<f64>>)> =
        vec![("baseline".into(), "pattern", 0, 0, base_pattern.clone())];
    let mut deltas = Vec::new();
    for r in &examples {
        let p = read_pattern(&patterns_dir.join(format!("{}.csv", r.id())))?;
        if p.len() != base_pattern.len() {
            return Err(Error::Dimension(format!("pattern {} has {} units", r.id(), p.len())));
        }
        let d: Vec<Option<f64>> = base_pattern.iter().zip(&p).map(|(b, a)| Some((*b)? - (*a)?)).collect();
        let label = format!("units {}-{}", r.start, r.start + r.width - 1);
        deltas.push((format!("delta {label}"), "delta", r.start, r.width, d));
        strips.push((label, "pattern", r.start, r.width, p));
    }
    strips.extend(deltas);
    let pattern_rows: Vec<Vec<String>> = strips
        .iter()
        .flat_map(|(label, kind, start, width, values)| {
            values.iter().enumerate().map(move |(u, v)| {
                vec![label.clone(), kind.to_string(), start.to_string(), width.to_string(), u.to_string(), opt_cell(*v)]
            })
        })
        .collect();
    write_plot(
        out,
        "patterns",
        &["row", "kind", "start", "width", "unit", "value"],
        &pattern_rows,
        &plot::heat_strips(
            &format!("{env} layer {layer}: unit-action correlation patterns"),
            &strips.iter().map(|s| (s.0.clone(), s.4.clone())).collect::<Vec<_>>(),
        ),
    )?;

    if let Some(p) = smallest {
        let rows: Vec<&SummaryRow> = summary.rows.iter().filter(|r| r.is_baseline() || r.fraction == p).collect();
        mean_variance_plot(
            out,
            "mean_variance_smallest",
            &format!("{env} layer {layer}: pattern mean and variance, {} windows", fraction_label(p)),
            &rows,
        )?;
    }
    mean_variance_plot(
        out,
        "mean_variance_all",
        &format!("{env} layer {layer}: pattern mean and variance, all windows"),
        &summary.rows.iter().collect::<Vec<_>>(),
    )?;

    let spearman_fraction_vs_median = (fractions.len() >= 2)
        .then(|| {
            let x: Vec<f64> = fractions.iter().map(|f| f.fraction).collect();
            let y: Vec<f64> = fractions.iter().map(|f| f.median).collect();
            spearman(&x, &y).ok()
        })
        .flatten();
    let report = AnalysisReport {
        env,
        layer,
        r_min: summary.r_min,
        r_base: summary.r_base,
        fractions,
        spearman_fraction_vs_median,
        bar_chart_fraction: bar_fraction,
        pattern_examples: examples.iter().map(|r| r.id()).collect(),
    };
    write_json(&out.join("analysis.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOptions {
    pub method: EmbedMethod,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub seed: u64,
    pub null_shuffles: usize,
    /// Used for phase labels when the trace has no metadata sidecar.
    pub env: Option<EnvId>,
}

impl From<&EmbedConfig> for EmbedOptions {
    fn from(c: &EmbedConfig) -> Self {
        Self {
            method: c.method,
            n_neighbors: c.n_neighbors,
            min_dist: c.min_dist,
            seed: c.seed,
            null_shuffles: c.null_shuffles,
            env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStateReport {
    pub balance_steps: usize,
    pub agreement: Option<f64>,
    pub positive_fraction: Option<f64>,
    pub null_mean: Option<f64>,
    pub null_sd: Option<f64>,
    /// Why the score is missing, if it is.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub method: EmbedMethod,
    pub env: Option<EnvId>,
    pub rows: usize,
    pub ablated_rows: Option<usize>,
    pub degenerate: bool,
    pub captured_variance: [f64; 2],
    pub swingup_end: Option<usize>,
    pub never_upright: Option<bool>,
    /// Share of 15 input-space neighbors kept among the 30 nearest embedded
    /// points (neighbor method only).
    pub neighbor_preservation: Option<f64>,
    pub two_state: Option<TwoStateReport>,
}

fn phases_of(trace: &LayerTrace, env: Option<EnvId>) -> Option<PhaseSegmentation> {
    let env = trace.meta.as_ref().map(|m| m.env).or(env)?;
    let obs = trace.observations.as_ref()?;
    let cos: Vec<f64> = (0..obs.rows()).map(|t| crate::embed::pole_cos(env, obs.row(t))).collect();
    Some(segment_cos(env, &cos))
}

fn embedding_rows(points: &Matrix, seg: Option<&PhaseSegmentation>) -> Vec<Vec<String>> {
    (0..points.rows())
        .map(|t| {
            vec![
                t.to_string(),
                fmt_f64(points.get(t, 0)),
                fmt_f64(points.get(t, 1)),
                seg.map_or("none", |s| s.phases[t].as_str()).to_owned(),
            ]
        })
        .collect()
}

fn phase_color(p: Option<Phase>) -> &'static str {
    match p {
        Some(Phase::Swingup) => "#ff7f0e",
        Some(Phase::Stabilize) => "#2ca02c",
        Some(Phase::Balance) => plot::BLUE,
        None => plot::GREY,
    }
}

fn write_embedding(dir: &Path, stem: &str, title: &str, points: &Matrix, seg: Option<&PhaseSegmentation>) -> Result<()> {
    let scatter: Vec<ScatterPoint> = (0..points.rows())
        .map(|t| ScatterPoint {
            x: points.get(t, 0),
            y: points.get(t, 1),
            fill: phase_color(seg.map(|s| s.phases[t])).to_owned(),
            highlight: false,
        })
        .collect();
    write_plot(
        dir,
        stem,
        &["t", "dim1", "dim2", "phase"],
        &embedding_rows(points, seg),
        &plot::scatter(title, "dim 1", "dim 2", &scatter),
    )
}

/// Splits off the rows from `at` on; `None` when there are none.
fn split_rows(m: &Matrix, at: usize) -> Result<(Matrix, Option<Matrix>)> {
    let n = m.cols();
    let (a, b) = m.as_slice().split_at(at * n);
    let rest = if b.is_empty() { None } else { Some(Matrix::new(m.rows() - at, n, b.to_vec())?) };
    Ok((Matrix::new(at, n, a.to_vec())?, rest))
}

fn two_state_report(trace: &LayerTrace, seg: &PhaseSegmentation, opts: &EmbedOptions) -> TwoStateReport {
    let range = seg.range(Phase::Balance);
    let mut report = TwoStateReport {
        balance_steps: range.len(),
        agreement: None,
        positive_fraction: None,
        null_mean: None,
        null_sd: None,
        note: None,
    };
    let n = trace.activations.cols();
    let rows = Matrix::new(
        range.len(),
        n,
        trace.activations.as_slice()[range.start * n..range.end * n].to_vec(),
    );
    let actions = &trace.actions[range];
    let scored = rows.and_then(|m| two_state_score(&m, actions)).and_then(|s| {
        let null = two_state_null(&s, actions, opts.null_shuffles, opts.seed)?;
        Ok((s, null))
    });
    match scored {
        Ok((s, null)) => {
            report.agreement = Some(s.agreement);
            report.positive_fraction = Some(s.positive_fraction);
            if !null.is_empty() {
                let k = null.len() as f64;
                let mean = null.iter().sum::<f64>() / k;
                report.null_mean = Some(mean);
                report.null_sd = Some((null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt());
            }
        }
        Err(e) => report.note = Some(e.to_string()),
    }
    report
}

/// Embeds a layer trace in 2-D, optionally fitted jointly with an ablated
/// trace of the same layer, labels behavioral phases and scores the
/// balance-phase two-state structure.
pub fn cmd_embed(trace: &Path, ablated: Option<&Path>, opts: &EmbedOptions, out: &Path) -> Result<EmbedReport> {
    let base = read_trace(trace)?;
    let abl = ablated.map(read_trace).transpose()?;
    let t = base.activations.rows();
    let joint = match &abl {
        Some(a) => base.activations.vstack(&a.activations)?,
        None => base.activations.clone(),
    };
    let (points, degenerate, captured_variance, preservation) = match opts.method {
        EmbedMethod::Pca => {
            let model = PcaModel::fit(&joint)?;
            (model.transform(&joint)?, model.degenerate, model.variances, None)
        }
        EmbedMethod::Neighbor => {
            let cfg = NeighborConfig {
                n_neighbors: opts.n_neighbors,
                min_dist: opts.min_dist,
                seed: opts.seed,
                ..NeighborConfig::default()
            };
            let e = neighbor_embed(&joint, &cfg)?;
            let kept = neighbor_preservation(&joint, &e.points, cfg.n_neighbors, 2 * cfg.n_neighbors)?;
            (e.points, e.degenerate, e.captured_variance, Some(kept))
        }
    };
    let env = base.meta.as_ref().map(|m| m.env).or(opts.env);
    let seg = phases_of(&base, opts.env);
    fs::create_dir_all(out)?;
    let (base_points, abl_points) = split_rows(&points, t)?;
    let method = opts.method;
    write_embedding(out, "embedding_baseline", &format!("{method} embedding, reference trace"), &base_points, seg.as_ref())?;
    if let (Some(a), Some(abl_points)) = (&abl, &abl_points) {
        let aseg = phases_of(a, opts.env);
        write_embedding(out, "embedding_ablated", &format!("{method} embedding, ablated trace"), abl_points, aseg.as_ref())?;
        let mut rows = Vec::with_capacity(points.rows());
        let mut scatter = Vec::with_capacity(points.rows());
        for (source, m, color) in [("baseline", &base_points, plot::BLUE), ("ablated", abl_points, plot::RED)] {
            for i in 0..m.rows() {
                rows.push(vec![source.to_owned(), i.to_string(), fmt_f64(m.get(i, 0)), fmt_f64(m.get(i, 1))]);
                scatter.push(ScatterPoint {
                    x: m.get(i, 0),
                    y: m.get(i, 1),
                    fill: color.to_owned(),
                    highlight: false,
                });
            }
        }
        write_plot(
            out,
            "overlay",
            &["source", "t", "dim1", "dim2"],
            &rows,
            &plot::scatter(&format!("{method} embedding: baseline (blue) and ablated (red)"), "dim 1", "dim 2", &scatter),
        )?;
    }
    let two_state = seg
        .as_ref()
        .filter(|s| env.is_some_and(EnvId::has_swing_up) && !s.never_upright)
        .map(|s| two_state_report(&base, s, opts));
    let report = EmbedReport {
        method,
        env,
        rows: t,
        ablated_rows: abl.as_ref().map(|a| a.activations.rows()),
        degenerate,
        captured_variance,
        swingup_end: seg.as_ref().map(|s| s.swingup_end),
        never_upright: seg.as_ref().map(|s| s.never_upright),
        neighbor_preservation: preservation,
        two_state,
    };
    write_json(&out.join("embed_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_eval_return: Option<f64>,
    pub best_step: Option<u64>,
    pub best_checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub env: EnvId,
    pub steps: u64,
    pub seeds: Vec<SeedResult>,
    pub chosen_seed: u64,
    pub chosen_return: Option<f64>,
    pub layers: Vec<AnalysisReport>,
    pub embedding: Option<EmbedReport>,
    /// Mask used for the ablated side of the embedding comparison.
    pub embedding_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub envs: Vec<EnvReport>,
}

/// Index of the best score; `None` scores rank last and ties go to the
/// earliest entry.
pub fn pick_best(scores: &[Option<f64>]) -> Option<usize> {
    let key = |s: &Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
    (0..scores.len()).reduce(|best, i| if key(&scores[i]) > key(&scores[best]) { i } else { best })
}

/// Train on every seed, keep the best agent, sweep both layers, analyze the
/// sweeps and embed a baseline trace next to the most damaging smallest
/// ablation.
pub fn cmd_repro(cfg: &RunConfig, out: &Path, log: Log) -> Result<ReproReport> {
    cfg.validate()?;
    let mut envs = Vec::new();
    for &env in &cfg.repro.envs {
        let env_dir = out.join(env.as_str());
        let steps = cfg.repro.steps.get(&env).copied().unwrap_or(cfg.train.total_steps);
        let mut seeds = Vec::new();
        let mut best: Vec<Checkpoint> = Vec::new();
        for &seed in &cfg.repro.seeds {
            let tcfg = TrainConfig {
                env,
                seed,
                total_steps: steps,
                ..cfg.train.clone()
            };
            log(&format!("training {env} seed {seed} for {steps} steps"));
            let r = cmd_train(&tcfg, &env_dir.join(format!("train_seed{seed}")), log)?;
            seeds.push(SeedResult {
                seed,
                best_eval_return: r.manifest.best_eval_return,
                best_step: r.manifest.best_step,
                best_checkpoint_hash: r.manifest.best_checkpoint_hash.clone(),
            });
            best.push(r.outcome.best_checkpoint().clone());
        }
        let chosen = pick_best(&seeds.iter().map(|s| s.best_eval_return).collect::<Vec<_>>())
            .expect("at least one seed");
        let ckpt = &best[chosen];
        log(&format!("{env}: using seed {} (eval return {:?})", seeds[chosen].seed, seeds[chosen].best_eval_return));
        ckpt.save(&env_dir.join("chosen.bin"))?;

        let mut layers = Vec::new();
        let mut summaries = BTreeMap::new();
        for &layer in &cfg.ablate.layers {
            let sweep_dir = env_dir.join(format!("sweep_layer{layer}"));
            let summary = cmd_ablate(ckpt, &AblateOptions::from_config(cfg, layer), &sweep_dir, log)?;
            layers.push(cmd_analyze(&sweep_dir, &env_dir.join(format!("analysis_layer{layer}")))?);
            summaries.insert(layer, summary);
        }

        // baseline vs the lowest-return window of the smallest fraction
        let layer = cfg.embed.layer;
        let worst = summaries.get(&layer).and_then(|s| {
            let smallest = s.masks().map(|r| r.fraction).min_by(f64::total_cmp)?;
            s.masks()
                .filter(|r| r.fraction == smallest)
                .min_by(|a, b| a.return_raw.total_cmp(&b.return_raw).then(a.start.cmp(&b.start)))
                .map(|r| AblationMask::new(layer, r.start, r.width))
        });
        let embed_dir = env_dir.join("embedding");
        let seed = episode_seed(cfg.ablate.seed, 0);
        let base_rec = record_episode(&ckpt.actor, env, None, seed)?;
        write_trace(&embed_dir.join("traces"), "baseline", &base_rec)?;
        let ablated_path = match &worst {
            Some(m) => {
                let rec = record_episode(&ckpt.actor, env, Some(m), seed)?;
                write_trace(&embed_dir.join("traces"), "ablated", &rec)?;
                Some(embed_dir.join("traces").join(format!("ablated_layer{layer}.csv")))
            }
            None => None,
        };
        let mut eopts = EmbedOptions::from(&cfg.embed);
        eopts.env = Some(env);
        let embedding = cmd_embed(
            &embed_dir.join("traces").join(format!("baseline_layer{layer}.csv")),
            ablated_path.as_deref(),
            &eopts,
            &embed_dir,
        )?;
        envs.push(EnvReport {
            env,
            steps,
            chosen_seed: seeds[chosen].seed,
            chosen_return: seeds[chosen].best_eval_return,
            seeds,
            layers,
            embedding: Some(embedding),
            embedding_mask: worst.as_ref().map(mask_id),
        });
    }
    let report = ReproReport { envs };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Files under `dir` (recursively) with the given extensions, sorted.
pub fn output_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.contains(&e))
            {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
