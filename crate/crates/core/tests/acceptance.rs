//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Trained agents come from `tests/fixtures/`: the chosen checkpoint of each
//! environment from a desk-scale `repro` run with `configs/desk.toml`, and
//! that run's `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ablscope::ablate::{
    run_sweep, AblationPlan, MaskOutcome, SweepOptions, ALLOWED_FRACTIONS, DEFAULT_EPISODES_PER_MASK, DEFAULT_STRIDE,
};
use ablscope::analysis::{median, pattern_stats, pearson, spearman, CorrelationPattern, EpisodeRecord};
use ablscope::checkpoint::Checkpoint;
use ablscope::cli::commands::{output_files, summarize_sweep, ReproReport, SweepSummary, TIMING_FILE};
use ablscope::cli::config::{worker_threads, RunConfig};
use ablscope::ddpg::{evaluate_returns, record_episode, training_eval_seed};
use ablscope::embed::{
    balance_rows, neighbor_embed, pca_embed, segment_phases, silhouette, two_state_null, two_state_score,
    NeighborConfig, PcaModel,
};
use ablscope::env::EnvId;
use ablscope::gradcheck::check_network_gradients;
use ablscope::net::AblationMask;
use ablscope::numerics::Matrix;

const CPB_TARGET: f64 = 1000.0;
const CPSU_TARGET: f64 = 800.0;
const PSU_TARGET: f64 = -400.0;
const SPEARMAN_MAX: f64 = -0.5;
const CPB_ROBUST_MEDIAN: f64 = 0.9;
const CPB_ROBUST_MAX_FRACTION: f64 = 0.5;
const GRAD_TOL: f64 = 1e-5;
const GRAD_POINTS: usize = 100;
const PEARSON_TOL: f64 = 1e-12;
const PEARSON_INSTANCES: usize = 1000;
const PATTERN_TOL: f64 = 1e-12;
const TWO_STATE_PASS: f64 = 0.8;
const TWO_STATE_DEGRADED: f64 = 0.6;
const NULL_CENTER: f64 = 0.5;
const NULL_TOL: f64 = 0.05;
const NULL_SHUFFLES: usize = 100;
const PCA_TOL: f64 = 1e-9;
const SILHOUETTE_MIN: f64 = 0.5;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixtures() -> PathBuf {
    manifest_dir().join("tests").join("fixtures")
}

fn workspace_root() -> PathBuf {
    manifest_dir().join("..").join("..")
}

struct Outcome {
    pass: bool,
    label: &'static str,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            label: if pass { "PASS" } else { "FAIL" },
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

/// Trained agents plus the training report they came from.
struct Agents {
    report: ReproReport,
    checkpoints: BTreeMap<EnvId, Checkpoint>,
    config: RunConfig,
}

fn load_agents() -> Result<Agents, String> {
    let text = fs::read_to_string(fixtures().join("desk_report.json")).map_err(|e| format!("desk_report.json: {e}"))?;
    let report: ReproReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let config = RunConfig::load(&workspace_root().join("configs").join("desk.toml")).map_err(|e| e.to_string())?;
    let mut checkpoints = BTreeMap::new();
    for env in EnvId::ALL {
        let path = fixtures().join(format!("{env}.bin"));
        if path.is_file() {
            checkpoints.insert(env, Checkpoint::load(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(Agents {
        report,
        checkpoints,
        config,
    })
}

fn agent<'a>(agents: &'a Result<Agents, String>, env: EnvId) -> Result<&'a Checkpoint, String> {
    let a = agents.as_ref().map_err(Clone::clone)?;
    a.checkpoints.get(&env).ok_or_else(|| format!("no {env} fixture"))
}

/// Best-of-seeds training return per environment, after re-evaluating the
/// stored checkpoint to confirm it is the agent that earned the score.
fn training_targets(agents: &Result<Agents, String>) -> Outcome {
    let a = match agents {
        Ok(a) => a,
        Err(e) => return Outcome::error(e),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (env, target) in [(EnvId::Cpb, CPB_TARGET), (EnvId::Cpsu, CPSU_TARGET), (EnvId::Psu, PSU_TARGET)] {
        let Some(rep) = a.report.envs.iter().find(|e| e.env == env) else {
            pass = false;
            parts.push(format!("{env}: not trained"));
            continue;
        };
        let best = rep.seeds.iter().filter_map(|s| s.best_eval_return).fold(f64::NEG_INFINITY, f64::max);
        let ok = best >= target;
        let reeval = a.checkpoints.get(&env).map(|ck| {
            let chosen = rep.seeds.iter().find(|s| s.seed == rep.chosen_seed);
            let hash_ok = chosen.is_some_and(|s| s.best_checkpoint_hash == ck.content_hash());
            let returns = evaluate_returns(&ck.actor, env, None, a.config.train.eval_episodes, training_eval_seed(ck.seed));
            let mean = returns.map(|r| r.iter().sum::<f64>() / r.len() as f64);
            (hash_ok, mean.ok())
        });
        let consistent = match reeval {
            Some((true, Some(m))) => rep.chosen_return == Some(m),
            _ => false,
        };
        pass &= ok && consistent;
        parts.push(format!(
            "{env} best-of-{} {best:.2} (target {target}){}",
            rep.seeds.len(),
            if consistent { "" } else { " [fixture does not reproduce the recorded score]" }
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn plan_exactness() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut total = 0;
    for n in [300usize, 400] {
        for &p in &ALLOWED_FRACTIONS {
            let plan = match AblationPlan::new(1, n, &[p], DEFAULT_STRIDE) {
                Ok(plan) => plan,
                Err(e) => return Outcome::error(e),
            };
            let w = (p * n as f64).round() as usize;
            let expected = (n - w) / DEFAULT_STRIDE + 1;
            total += plan.len();
            if plan.len() != expected {
                bad.push(format!("N={n} p={p}: {} vs {expected}", plan.len()));
            }
        }
    }
    let small = AblationPlan::new(2, 300, &[0.05], DEFAULT_STRIDE).map(|p| p.len());
    let large = AblationPlan::new(1, 400, &[0.3], DEFAULT_STRIDE).map(|p| p.len());
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && small.as_ref().ok() == Some(&29) && large.as_ref().ok() == Some(&29) && secs < 1.0;
    Outcome::new(
        pass,
        format!(
            "{total} masks over 26 (N, fraction) pairs, {} mismatches; (300, 5%) -> {:?}, (400, 30%) -> {:?}; {secs:.3}s",
            bad.len(),
            small.ok(),
            large.ok()
        ),
    )
}

/// Sweep results plus a count of ablated traces with a non-zero clamped unit.
struct Sweep {
    summary: SweepSummary,
    leaks: usize,
    checked: usize,
}

fn sweep(ck: &Checkpoint, layer: usize, fractions: &[f64]) -> Result<Sweep, String> {
    let size = if layer == 1 { ck.actor.hidden_sizes().0 } else { ck.actor.hidden_sizes().1 };
    let plan = AblationPlan::new(layer, size, fractions, DEFAULT_STRIDE).map_err(|e| e.to_string())?;
    let opts = SweepOptions {
        episodes_per_mask: DEFAULT_EPISODES_PER_MASK,
        seed: 0,
        threads: worker_threads(None),
    };
    let counts = Mutex::new((0usize, 0usize));
    let sink = |o: &MaskOutcome, records: &[EpisodeRecord]| -> ablscope::Result<()> {
        let Some(window) = records.first().and_then(|r| r.ablated_in(o.mask.layer)) else {
            return Ok(());
        };
        let mut leaks = 0;
        for rec in records {
            let m = rec.layer(o.mask.layer)?;
            leaks += (0..m.rows())
                .filter(|&t| m.row(t)[window.clone()].iter().any(|&v| v.to_bits() != 0.0f64.to_bits()))
                .count();
        }
        let mut c = counts.lock().expect("not poisoned");
        c.0 += leaks;
        c.1 += records.len();
        Ok(())
    };
    let result = run_sweep(&ck.actor, ck.env, &plan, &opts, &sink).map_err(|e| e.to_string())?;
    let (leaks, checked) = counts.into_inner().expect("not poisoned");
    Ok(Sweep {
        summary: summarize_sweep(&result),
        leaks,
        checked,
    })
}

fn medians_by_fraction(s: &SweepSummary) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in s.masks() {
        if let Some(v) = r.return_norm {
            groups.entry(r.fraction.to_bits()).or_insert((r.fraction, Vec::new())).1.push(v);
        }
    }
    let mut out: Vec<(f64, f64)> = groups
        .into_values()
        .filter_map(|(p, v)| median(&v).map(|m| (p, m)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn degradation_trend(s: &Result<Sweep, String>) -> Outcome {
    let s = match s {
        Ok(s) => s,
        Err(e) => return Outcome::error(e),
    };
    let m = medians_by_fraction(&s.summary);
    let (p, med): (Vec<f64>, Vec<f64>) = m.iter().copied().unzip();
    match spearman(&p, &med) {
        Ok(rho) => Outcome::new(
            rho <= SPEARMAN_MAX,
            format!(
                "CPSU layer 2: spearman(fraction, median normalized return) = {rho:.3} over {} fractions (need <= {SPEARMAN_MAX}); medians {}",
                p.len(),
                med.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
            ),
        ),
        Err(e) => Outcome::error(e),
    }
}

fn cpb_robustness(s: &Result<Sweep, String>) -> Outcome {
    let s = match s {
        Ok(s) => s,
        Err(e) => return Outcome::error(e),
    };
    let values: Vec<f64> = s
        .summary
        .masks()
        .filter(|r| r.fraction <= CPB_ROBUST_MAX_FRACTION + 1e-9)
        .filter_map(|r| r.return_norm)
        .collect();
    match median(&values) {
        Some(m) => Outcome::new(
            m >= CPB_ROBUST_MEDIAN,
            format!(
                "CPB layer 1: median normalized return {m:.3} over {} masks with fraction <= 50% (need >= {CPB_ROBUST_MEDIAN}); baseline return {:.1}",
                values.len(),
                s.summary.r_base
            ),
        ),
        None => Outcome::new(false, "no normalized returns (degenerate sweep)"),
    }
}

/// Double-double arithmetic for the oracles below.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn from(x: f64) -> Self {
        Dd(x, 0.0)
    }
    fn add(self, o: Dd) -> Dd {
        let s = self.0 + o.0;
        let bb = s - self.0;
        let err = (self.0 - (s - bb)) + (o.0 - bb);
        let lo = err + self.1 + o.1;
        let hi = s + lo;
        Dd(hi, lo - (hi - s))
    }
    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }
    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let err = self.0.mul_add(o.0, -p);
        let lo = err + self.0 * o.1 + self.1 * o.0;
        let hi = p + lo;
        Dd(hi, lo - (hi - p))
    }
    fn div(self, d: f64) -> Dd {
        let q = self.0 / d;
        let r = self.add(Dd::from(q).mul(Dd::from(d)).neg());
        Dd(q, 0.0).add(Dd::from(r.to_f64() / d))
    }
    fn to_f64(self) -> f64 {
        self.0 + self.1
    }
}

fn dd_sum(v: impl Iterator<Item = Dd>) -> Dd {
    v.fold(Dd::from(0.0), Dd::add)
}

/// Direct formula n·Σxy − Σx·Σy over the square roots of the matching
/// variance terms, in double-double.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = Dd::from(x.len() as f64);
    let sx = dd_sum(x.iter().map(|&v| Dd::from(v)));
    let sy = dd_sum(y.iter().map(|&v| Dd::from(v)));
    let sxx = dd_sum(x.iter().map(|&v| Dd::from(v).mul(Dd::from(v))));
    let syy = dd_sum(y.iter().map(|&v| Dd::from(v).mul(Dd::from(v))));
    let sxy = dd_sum(x.iter().zip(y).map(|(&a, &b)| Dd::from(a).mul(Dd::from(b))));
    let num = n.mul(sxy).add(sx.mul(sy).neg()).to_f64();
    let vx = n.mul(sxx).add(sx.mul(sx).neg()).to_f64();
    let vy = n.mul(syy).add(sy.mul(sy).neg()).to_f64();
    num / (vx.sqrt() * vy.sqrt())
}

/// Two-pass mean and population variance in double-double.
fn two_pass_oracle(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = dd_sum(v.iter().map(|&x| Dd::from(x))).div(n);
    let var = dd_sum(v.iter().map(|&x| {
        let d = Dd::from(x).add(mean.neg());
        d.mul(d)
    }))
    .div(n);
    (mean.to_f64(), var.to_f64())
}

fn numerics_suite() -> Outcome {
    let grads = match check_network_gradients(GRAD_POINTS, 2024) {
        Ok(g) => g,
        Err(e) => return Outcome::error(e),
    };
    let grad_ok = grads.worst() < GRAD_TOL && grads.clamp_leaks == 0;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pearson_worst = 0.0f64;
    for _ in 0..PEARSON_INSTANCES {
        let n = rng.random_range(2..400);
        let slope = rng.random_range(-2.0..2.0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + rng.random_range(-1.0..1.0)).collect();
        match pearson(&x, &y) {
            Ok(r) => pearson_worst = pearson_worst.max((r - pearson_oracle(&x, &y)).abs()),
            Err(e) => return Outcome::error(e),
        }
    }

    let mut pattern_worst = 0.0f64;
    for _ in 0..PEARSON_INSTANCES {
        let n = rng.random_range(2..400);
        let values: Vec<Option<f64>> = (0..n)
            .map(|_| rng.random_bool(0.9).then(|| rng.random_range(-1.0..1.0)))
            .collect();
        if values.iter().all(Option::is_none) {
            continue;
        }
        let p = CorrelationPattern {
            layer: 1,
            zero_variance: vec![false; n],
            values: values.clone(),
            mask: AblationMask::baseline(1),
        };
        let s = match pattern_stats(&p) {
            Ok(s) => s,
            Err(e) => return Outcome::error(e),
        };
        let signed: Vec<f64> = values.iter().flatten().copied().collect();
        let abs: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
        let (m, v) = two_pass_oracle(&abs);
        let (sm, sv) = two_pass_oracle(&signed);
        for d in [s.mean - m, s.variance - v, s.signed_mean - sm, s.signed_variance - sv] {
            pattern_worst = pattern_worst.max(d.abs());
        }
    }
    let pass = grad_ok && pearson_worst < PEARSON_TOL && pattern_worst < PATTERN_TOL;
    Outcome::new(
        pass,
        format!(
            "gradients at {GRAD_POINTS} points: actor {:.1e}, critic {:.1e}, critic-through-action {:.1e}, actor-through-critic {:.1e} (tol {GRAD_TOL:.0e}); pearson max |diff| {pearson_worst:.1e}; pattern stats max |diff| {pattern_worst:.1e}",
            grads.actor, grads.critic, grads.critic_action, grads.actor_through_critic
        ),
    )
}

fn repro_once(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ablscope"))
        .args(["repro", "--config"])
        .arg(workspace_root().join("configs").join("smoke.toml"))
        .arg("--out")
        .arg(out)
        .env("ABLSCOPE_THREADS", "1")
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("repro exited with {status}"))
    }
}

fn determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::error(e),
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if let Err(e) = repro_once(&a).and_then(|_| repro_once(&b)) {
        return Outcome::error(e);
    }
    let exts = ["bin", "csv", "json", "svg"];
    let list = |root: &Path| -> Vec<PathBuf> {
        output_files(root, &exts)
            .unwrap_or_default()
            .into_iter()
            .filter(|p| p.file_name().is_some_and(|n| n != TIMING_FILE))
            .map(|p| p.strip_prefix(root).expect("under root").to_path_buf())
            .collect()
    };
    let (fa, fb) = (list(&a), list(&b));
    if fa != fb || fa.is_empty() {
        return Outcome::new(false, format!("file lists differ: {} vs {}", fa.len(), fb.len()));
    }
    let differing: Vec<&PathBuf> = fa
        .iter()
        .filter(|p| fs::read(a.join(p)).ok() != fs::read(b.join(p)).ok())
        .collect();
    let count = |e: &str| fa.iter().filter(|p| p.extension().is_some_and(|x| x == e)).count();
    Outcome::new(
        differing.is_empty(),
        format!(
            "two repro runs (configs/smoke.toml): {} files compared ({} checkpoints, {} csv, {} json, {} svg), {} differ{}",
            fa.len(),
            count("bin"),
            count("csv"),
            count("json"),
            count("svg"),
            differing.len(),
            differing.first().map_or(String::new(), |p| format!(", first {}", p.display()))
        ),
    )
}

fn two_state(agents: &Result<Agents, String>, training_passed: bool) -> Outcome {
    let ck = match agent(agents, EnvId::Cpsu) {
        Ok(c) => c,
        Err(e) => return Outcome::error(e),
    };
    let run = || -> ablscope::Result<(usize, f64, f64, f64)> {
        let rec = record_episode(&ck.actor, EnvId::Cpsu, None, 0)?;
        let seg = segment_phases(&rec);
        let (rows, actions) = balance_rows(&rec, 1, &seg)?;
        let score = two_state_score(&rows, &actions)?;
        let null = two_state_null(&score, &actions, NULL_SHUFFLES, 0)?;
        let null_mean = null.iter().sum::<f64>() / null.len() as f64;
        Ok((rows.rows(), score.agreement, null_mean, rec.return_total))
    };
    match run() {
        Ok((steps, agreement, null_mean, ret)) => {
            let null_ok = (null_mean - NULL_CENTER).abs() <= NULL_TOL;
            let detail = format!(
                "CPSU baseline (return {ret:.1}): {steps} balance steps, agreement {agreement:.3} (need >= {TWO_STATE_PASS}), null mean {null_mean:.3} over {NULL_SHUFFLES} shuffles"
            );
            if agreement >= TWO_STATE_PASS && null_ok {
                Outcome::new(true, detail)
            } else if training_passed && agreement >= TWO_STATE_DEGRADED && null_ok {
                Outcome {
                    pass: true,
                    label: "DEGRADED-PASS",
                    detail,
                }
            } else {
                Outcome::new(false, detail)
            }
        }
        Err(e) => Outcome::error(e),
    }
}

fn width_zero_matches_baseline(ck: &Checkpoint) -> ablscope::Result<bool> {
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let vbits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let base = record_episode(&ck.actor, ck.env, None, 5)?;
    for (layer, start) in [(1, 0), (1, 217), (2, 0), (2, 299)] {
        let rec = record_episode(&ck.actor, ck.env, Some(&AblationMask::new(layer, start, 0)), 5)?;
        let same = vbits(&rec.actions) == vbits(&base.actions)
            && vbits(&rec.rewards) == vbits(&base.rewards)
            && bits(&rec.observations) == bits(&base.observations)
            && bits(&rec.layer1) == bits(&base.layer1)
            && bits(&rec.layer2) == bits(&base.layer2)
            && rec.return_total.to_bits() == base.return_total.to_bits();
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

fn mask_semantics(agents: &Result<Agents, String>, sweeps: &[&Result<Sweep, String>]) -> Outcome {
    let mut leaks = 0;
    let mut checked = 0;
    for s in sweeps {
        match s {
            Ok(s) => {
                leaks += s.leaks;
                checked += s.checked;
            }
            Err(e) => return Outcome::error(e),
        }
    }
    let mut width_zero = Vec::new();
    for env in [EnvId::Cpsu, EnvId::Cpb] {
        match agent(agents, env).map(|ck| width_zero_matches_baseline(ck).map_err(|e| e.to_string())) {
            Ok(Ok(same)) => width_zero.push((env, same)),
            Ok(Err(e)) | Err(e) => return Outcome::error(e),
        }
    }
    let pass = leaks == 0 && checked > 0 && width_zero.iter().all(|(_, s)| *s);
    Outcome::new(
        pass,
        format!(
            "{checked} ablated episodes checked, {leaks} timesteps with a non-zero clamped unit; width-0 mask bitwise equal to baseline: {}",
            width_zero
                .iter()
                .map(|(e, s)| format!("{e} {}", if *s { "yes" } else { "no" }))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn embedding_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, n) = (300, 40);
    let u = Matrix::from_fn(t, 2, |_, _| rng.random_range(-3.0..3.0));
    let v = Matrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
    let offset: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let m = Matrix::from_fn(t, n, |i, j| u.get(i, 0) * v.get(0, j) + u.get(i, 1) * v.get(1, j) + offset[j]);
    let recon_err = PcaModel::fit(&m)
        .and_then(|model| {
            let e = pca_embed(&m)?;
            model.reconstruct(&e.points)
        })
        .map(|r| {
            r.as_slice()
                .iter()
                .zip(m.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });

    let (per, dim) = (60, 50);
    let centers: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
    let labels: Vec<usize> = (0..2 * per).map(|i| i / per).collect();
    let data = Matrix::from_fn(2 * per, dim, |i, j| centers[labels[i]][j] + rng.random_range(-1.0..1.0));
    let sil = neighbor_embed(&data, &NeighborConfig::default()).and_then(|e| silhouette(&e.points, &labels));

    match (recon_err, sil) {
        (Ok(err), Ok(s)) => Outcome::new(
            err <= PCA_TOL && s >= SILHOUETTE_MIN,
            format!(
                "rank-2 {t}x{n} reconstruction max error {err:.1e} (tol {PCA_TOL:.0e}); two 50-D clusters, 2-D silhouette {s:.3} (need >= {SILHOUETTE_MIN})"
            ),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::error(e),
    }
}

fn main() -> ExitCode {
    let agents = load_agents();
    let cpsu_sweep = agent(&agents, EnvId::Cpsu).and_then(|ck| sweep(ck, 2, &ALLOWED_FRACTIONS));
    let cpb_sweep = agent(&agents, EnvId::Cpb).and_then(|ck| sweep(ck, 1, &ALLOWED_FRACTIONS));

    let training = training_targets(&agents);
    let training_passed = training.pass;
    let results = [
        ("training targets", training),
        ("ablation-plan exactness", plan_exactness()),
        ("degradation trend", degradation_trend(&cpsu_sweep)),
        ("CPB layer-1 robustness", cpb_robustness(&cpb_sweep)),
        ("numerics suite", numerics_suite()),
        ("determinism", determinism()),
        ("two-state property", two_state(&agents, training_passed)),
        ("mask semantics", mask_semantics(&agents, &[&cpsu_sweep, &cpb_sweep])),
        ("embedding sanity", embedding_sanity()),
    ];
    let mut passed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("{:<13} {}. {name}: {}", o.label, i + 1, o.detail);
        passed += usize::from(o.pass);
    }
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
