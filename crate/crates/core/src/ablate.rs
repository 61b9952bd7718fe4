//! Sliding-window ablation plans and the sweep that evaluates them.
//!
//! For a layer of `N` units and an ablation fraction `p`, the window width is
//! `round(p·N)` and windows start at `0, stride, 2·stride, …` without
//! wrapping past the end of the layer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::analysis::{correlation_pattern, pattern_delta, pattern_stats, CorrelationPattern, EpisodeRecord};
use crate::ddpg::{episode_seed, record_episode};
use crate::env::EnvId;
use crate::error::{config_err, Error, Result};
use crate::net::{AblationMask, ActorParams};

pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_EPISODES_PER_MASK: usize = 5;

/// Fractions of a layer that may be ablated at once.
pub const ALLOWED_FRACTIONS: [f64; 13] = [
    0.05,
    0.10,
    0.15,
    0.20,
    0.25,
    0.30,
    1.0 / 3.0,
    0.40,
    0.50,
    0.60,
    0.70,
    0.80,
    0.90,
];

const FRACTION_MATCH_TOL: f64 = 1e-3;

/// Maps a user-supplied fraction onto the allowed set (so `0.3333` and
/// `0.33333` both mean one third).
pub fn canonical_fraction(p: f64) -> Result<f64> {
    ALLOWED_FRACTIONS
        .iter()
        .copied()
        .find(|f| (f - p).abs() < FRACTION_MATCH_TOL)
        .ok_or_else(|| Error::Config(format!("ablation fraction {p} is not in the allowed set")))
}

/// `round(p·N)`, ties to even.
pub fn window_width(layer_size: usize, fraction: f64) -> Result<usize> {
    let p = canonical_fraction(fraction)?;
    Ok((p * layer_size as f64).round_ties_even() as usize)
}

pub fn generate_masks(
    layer: usize,
    layer_size: usize,
    fraction: f64,
    stride: usize,
) -> Result<Vec<AblationMask>> {
    if stride == 0 {
        return config_err("stride must be at least 1");
    }
    if layer != 1 && layer != 2 {
        return config_err(format!("layer must be 1 or 2, got {layer}"));
    }
    let width = window_width(layer_size, fraction)?;
    if width > layer_size {
        return config_err(format!("window of {width} units exceeds layer size {layer_size}"));
    }
    Ok((0..=layer_size - width)
        .step_by(stride)
        .map(|start| AblationMask::new(layer, start, width))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionMasks {
    pub fraction: f64,
    pub masks: Vec<AblationMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub layer: usize,
    pub layer_size: usize,
    pub stride: usize,
    pub groups: Vec<FractionMasks>,
}

impl AblationPlan {
    /// Plan over `fractions` (sorted and de-duplicated). An empty list is a
    /// baseline-only plan.
    pub fn new(layer: usize, layer_size: usize, fractions: &[f64], stride: usize) -> Result<Self> {
        let mut canon = fractions
            .iter()
            .map(|&p| canonical_fraction(p))
            .collect::<Result<Vec<_>>>()?;
        canon.sort_by(f64::total_cmp);
        canon.dedup();
        let groups = canon
            .into_iter()
            .map(|fraction| {
                Ok(FractionMasks {
                    fraction,
                    masks: generate_masks(layer, layer_size, fraction, stride)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if layer != 1 && layer != 2 {
            return config_err(format!("layer must be 1 or 2, got {layer}"));
        }
        Ok(Self {
            layer,
            layer_size,
            stride,
            groups,
        })
    }

    /// Every allowed fraction with the default stride of 10.
    pub fn full(layer: usize, layer_size: usize) -> Result<Self> {
        Self::new(layer, layer_size, &ALLOWED_FRACTIONS, DEFAULT_STRIDE)
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.fraction).collect()
    }

    /// `(fraction, mask)` pairs ordered by fraction, then start.
    pub fn masks(&self) -> Vec<(f64, AblationMask)> {
        self.groups
            .iter()
            .flat_map(|g| g.masks.iter().map(move |m| (g.fraction, *m)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.masks.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of evaluating one mask (or the baseline) over all sweep seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    /// 0 for the baseline.
    pub fraction: f64,
    pub mask: AblationMask,
    pub returns: Vec<f64>,
    /// Mean return over episodes.
    pub return_raw: f64,
    /// Mean over episodes of the |r| pattern mean and variance.
    pub pattern_mean: f64,
    pub pattern_var: f64,
    pub signed_mean: f64,
    pub signed_var: f64,
    /// Mean over episodes of the L2 norm of the pattern change against the
    /// baseline episode with the same seed.
    pub pattern_delta_l2: f64,
    /// Correlation pattern of the first episode.
    pub pattern: Option<CorrelationPattern>,
    /// Set when evaluation failed; the numeric fields are then meaningless.
    pub error: Option<String>,
}

impl MaskOutcome {
    fn failed(fraction: f64, mask: AblationMask, err: &Error) -> Self {
        Self {
            fraction,
            mask,
            returns: Vec::new(),
            return_raw: f64::NAN,
            pattern_mean: f64::NAN,
            pattern_var: f64::NAN,
            signed_mean: f64::NAN,
            signed_var: f64::NAN,
            pattern_delta_l2: f64::NAN,
            pattern: None,
            error: Some(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub env: EnvId,
    pub layer: usize,
    pub stride: usize,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub baseline: MaskOutcome,
    /// Ordered by `(fraction, start)`.
    pub entries: Vec<MaskOutcome>,
}

impl SweepResult {
    /// Smallest single-episode return across baseline and all masks.
    pub fn min_return(&self) -> f64 {
        self.baseline
            .returns
            .iter()
            .chain(self.entries.iter().flat_map(|e| e.returns.iter()))
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub episodes_per_mask: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            episodes_per_mask: DEFAULT_EPISODES_PER_MASK,
            seed: 0,
            threads: 1,
        }
    }
}

/// Receives every mask's records (baseline first) before they are dropped.
pub trait RecordSink: Sync {
    fn accept(&self, outcome: &MaskOutcome, records: &[EpisodeRecord]) -> Result<()>;
}

impl<F> RecordSink for F
where
    F: Fn(&MaskOutcome, &[EpisodeRecord]) -> Result<()> + Sync,
{
    fn accept(&self, outcome: &MaskOutcome, records: &[EpisodeRecord]) -> Result<()> {
        self(outcome, records)
    }
}

pub fn sweep_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes).map(|i| episode_seed(seed, i)).collect()
}

fn summarize(
    fraction: f64,
    mask: AblationMask,
    layer: usize,
    records: &[EpisodeRecord],
    baseline_patterns: Option<&[CorrelationPattern]>,
) -> Result<(MaskOutcome, Vec<CorrelationPattern>)> {
    let returns: Vec<f64> = records.iter().map(|r| r.return_total).collect();
    let n = records.len() as f64;
    let patterns = records
        .iter()
        .map(|r| correlation_pattern(r, layer))
        .collect::<Result<Vec<_>>>()?;
    let mut out = MaskOutcome {
        fraction,
        mask,
        return_raw: returns.iter().sum::<f64>() / n,
        returns,
        pattern_mean: 0.0,
        pattern_var: 0.0,
        signed_mean: 0.0,
        signed_var: 0.0,
        pattern_delta_l2: 0.0,
        pattern: patterns.first().cloned(),
        error: None,
    };
    for (i, p) in patterns.iter().enumerate() {
        let s = pattern_stats(p)?;
        out.pattern_mean += s.mean / n;
        out.pattern_var += s.variance / n;
        out.signed_mean += s.signed_mean / n;
        out.signed_var += s.signed_variance / n;
        if let Some(base) = baseline_patterns {
            out.pattern_delta_l2 += pattern_delta(&base[i], p)?.l2 / n;
        }
    }
    Ok((out, patterns))
}

fn evaluate_mask(
    actor: &ActorParams,
    env: EnvId,
    mask: Option<&AblationMask>,
    seeds: &[u64],
) -> Result<Vec<EpisodeRecord>> {
    seeds
        .iter()
        .map(|&s| record_episode(actor, env, mask, s))
        .collect()
}

/// Evaluates the baseline and then every mask of `plan` on the same episode
/// seeds. A mask whose evaluation fails is flagged in its outcome and the
/// sweep continues. Masks may run on several threads; the result order is
/// always the plan order.
pub fn run_sweep(
    actor: &ActorParams,
    env: EnvId,
    plan: &AblationPlan,
    opts: &SweepOptions,
    sink: &dyn RecordSink,
) -> Result<SweepResult> {
    if opts.episodes_per_mask == 0 {
        return config_err("episodes_per_mask must be positive");
    }
    let sizes = actor.hidden_sizes();
    let size = if plan.layer == 1 { sizes.0 } else { sizes.1 };
    if size != plan.layer_size {
        return config_err(format!(
            "plan is for {} units but actor layer {} has {size}",
            plan.layer_size, plan.layer
        ));
    }
    let seeds = sweep_seeds(opts.seed, opts.episodes_per_mask);
    let base_mask = AblationMask::baseline(plan.layer);
    let base_records = evaluate_mask(actor, env, Some(&base_mask), &seeds)?;
    let (baseline, base_patterns) = summarize(0.0, base_mask, plan.layer, &base_records, None)?;
    sink.accept(&baseline, &base_records)?;
    drop(base_records);

    let jobs = plan.masks();
    let slots: Vec<Mutex<Option<MaskOutcome>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let sink_error: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= jobs.len() {
            break;
        }
        let (fraction, mask) = jobs[i];
        let outcome = match evaluate_mask(actor, env, Some(&mask), &seeds).and_then(|records| {
            let (o, _) = summarize(fraction, mask, plan.layer, &records, Some(&base_patterns))?;
            Ok((o, records))
        }) {
            Ok((o, records)) => {
                if let Err(e) = sink.accept(&o, &records) {
                    sink_error.lock().unwrap().get_or_insert(e);
                }
                o
            }
            Err(e) => MaskOutcome::failed(fraction, mask, &e),
        };
        *slots[i].lock().unwrap() = Some(outcome);
    };
    let threads = opts.threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(&worker);
            }
        });
    }
    if let Some(e) = sink_error.into_inner().unwrap() {
        return Err(e);
    }
    let entries = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every job produces an outcome"))
        .collect();
    Ok(SweepResult {
        env,
        layer: plan.layer,
        stride: plan.stride,
        fractions: plan.fractions(),
        seeds,
        baseline,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddpg::{initial_checkpoint, TrainConfig};
    use proptest::prelude::*;

    fn closed_form(n: usize, p: f64, s: usize) -> usize {
        let w = (p * n as f64).round() as usize;
        (n - w) / s + 1
    }

    #[test]
    fn widths() {
        assert_eq!(window_width(300, 0.05).unwrap(), 15);
        assert_eq!(window_width(400, 0.30).unwrap(), 120);
        assert_eq!(window_width(400, 1.0 / 3.0).unwrap(), 133);
        assert_eq!(window_width(400, 0.3333).unwrap(), 133);
        assert_eq!(window_width(300, 1.0 / 3.0).unwrap(), 100);
        assert!(matches!(window_width(300, 0.07), Err(Error::Config(_))));
        assert!(window_width(300, 1.0).is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(generate_masks(2, 300, 0.05, 10).unwrap().len(), 29);
        assert_eq!(generate_masks(1, 400, 0.30, 10).unwrap().len(), 29);
        assert_eq!(generate_masks(1, 400, 0.05, 10).unwrap().len(), 39);
        let masks = generate_masks(2, 300, 0.05, 10).unwrap();
        assert_eq!(masks[0], AblationMask::new(2, 0, 15));
        assert_eq!(masks[28], AblationMask::new(2, 280, 15));
        assert!(generate_masks(1, 400, 0.05, 0).is_err());
        assert!(generate_masks(3, 400, 0.05, 10).is_err());
    }

    #[test]
    fn full_plan_counts() {
        let plan = AblationPlan::full(1, 400).unwrap();
        let counts: Vec<usize> = plan.groups.iter().map(|g| g.masks.len()).collect();
        let expected: Vec<usize> = ALLOWED_FRACTIONS.iter().map(|&p| closed_form(400, p, 10)).collect();
        assert_eq!(counts, expected);
        assert_eq!(counts, vec![39, 37, 35, 33, 31, 29, 27, 25, 21, 17, 13, 9, 5]);
        assert_eq!(plan.len(), counts.iter().sum::<usize>());
        let masks = plan.masks();
        assert!(masks.windows(2).all(|w| (w[0].0, w[0].1.start) <= (w[1].0, w[1].1.start)));
        assert!(AblationPlan::new(1, 400, &[], 10).unwrap().is_empty());
        let dedup = AblationPlan::new(1, 400, &[0.3, 0.05, 0.30], 10).unwrap();
        assert_eq!(dedup.fractions(), vec![0.05, 0.30]);
    }

    proptest! {
        #[test]
        fn enumeration_matches_closed_form(
            n in prop::sample::select(vec![300usize, 400]),
            idx in 0usize..13,
            stride in 1usize..40,
            layer in 1usize..=2,
        ) {
            let p = ALLOWED_FRACTIONS[idx];
            let masks = generate_masks(layer, n, p, stride).unwrap();
            prop_assert_eq!(masks.len(), closed_form(n, p, stride));
            for (k, m) in masks.iter().enumerate() {
                prop_assert_eq!(m.start, k * stride);
                prop_assert!(m.end() <= n);
            }
            // windows at least as wide as the stride leave no gaps; only a
            // tail shorter than the stride can stay uncovered
            let w = masks[0].width;
            let last_end = masks.last().unwrap().end();
            prop_assert!(n - last_end < stride);
            if w >= stride {
                prop_assert!((0..last_end).all(|u| masks.iter().any(|m| m.contains(u))));
            }
        }
    }

    #[test]
    fn coverage_for_default_stride() {
        for n in [300, 400] {
            for &p in &ALLOWED_FRACTIONS {
                let masks = generate_masks(1, n, p, 10).unwrap();
                if masks[0].width >= 10 {
                    let uncovered: Vec<usize> =
                        (0..n).filter(|&u| !masks.iter().any(|m| m.contains(u))).collect();
                    assert!(uncovered.len() < 10, "n={n} p={p}: {uncovered:?}");
                    assert!(uncovered.iter().all(|&u| u >= masks.last().unwrap().end()));
                }
            }
        }
    }

    fn small_actor() -> ActorParams {
        let cfg = TrainConfig {
            env: EnvId::Psu,
            hidden: (40, 30),
            seed: 2,
            ..TrainConfig::default()
        };
        initial_checkpoint(&cfg).actor
    }

    fn no_sink(_: &MaskOutcome, _: &[EpisodeRecord]) -> Result<()> {
        Ok(())
    }

    #[test]
    fn baseline_only_sweep() {
        let actor = small_actor();
        let plan = AblationPlan::new(1, 40, &[], 10).unwrap();
        let opts = SweepOptions {
            episodes_per_mask: 2,
            seed: 5,
            threads: 1,
        };
        let r = run_sweep(&actor, EnvId::Psu, &plan, &opts, &no_sink).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(r.seeds, vec![5, 6]);
        let direct: Vec<f64> = r
            .seeds
            .iter()
            .map(|&s| record_episode(&actor, EnvId::Psu, None, s).unwrap().return_total)
            .collect();
        assert_eq!(r.baseline.returns, direct);
    }

    #[test]
    fn sweep_is_deterministic_and_thread_independent() {
        let actor = small_actor();
        let plan = AblationPlan::new(2, 30, &[0.2, 0.5], 5).unwrap();
        let mut opts = SweepOptions {
            episodes_per_mask: 2,
            seed: 9,
            threads: 1,
        };
        let a = run_sweep(&actor, EnvId::Psu, &plan, &opts, &no_sink).unwrap();
        let b = run_sweep(&actor, EnvId::Psu, &plan, &opts, &no_sink).unwrap();
        assert_eq!(a, b);
        opts.threads = 3;
        let c = run_sweep(&actor, EnvId::Psu, &plan, &opts, &no_sink).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.entries.len(), plan.len());
        for (e, (f, m)) in a.entries.iter().zip(plan.masks()) {
            assert_eq!((e.fraction, e.mask), (f, m));
            assert!(e.is_ok());
            let pattern = e.pattern.as_ref().unwrap();
            assert!(pattern.values[m.start..m.end()].iter().all(Option::is_none));
        }
    }

    #[test]
    fn sink_sees_frozen_masks() {
        let actor = small_actor();
        let plan = AblationPlan::new(1, 40, &[0.25], 10).unwrap();
        let opts = SweepOptions {
            episodes_per_mask: 1,
            seed: 1,
            threads: 1,
        };
        let seen = Mutex::new(0usize);
        let sink = |o: &MaskOutcome, records: &[EpisodeRecord]| -> Result<()> {
            for rec in records {
                assert_eq!(rec.mask, o.mask);
                if let Some(range) = rec.ablated_in(1) {
                    for t in 0..rec.len() {
                        assert!(rec.layer1.row(t)[range.clone()].iter().all(|&v| v == 0.0));
                    }
                }
            }
            *seen.lock().unwrap() += 1;
            Ok(())
        };
        run_sweep(&actor, EnvId::Psu, &plan, &opts, &sink).unwrap();
        assert_eq!(*seen.lock().unwrap(), 1 + plan.len());
    }

    #[test]
    fn plan_must_fit_the_actor() {
        let actor = small_actor();
        let plan = AblationPlan::full(1, 400).unwrap();
        assert!(run_sweep(&actor, EnvId::Psu, &plan, &SweepOptions::default(), &no_sink).is_err());
    }
}
