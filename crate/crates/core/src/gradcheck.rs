//! Whole-network gradient checks: every backward pass of the actor and
//! critic, and their composition in the policy update, against central
//! differences at random parameter points.
//!
//! Points where some pre-relu value sits within [`KINK_MARGIN`] of zero are
//! redrawn, since a finite-difference step could cross the kink there.
//! Coordinates whose analytic gradient is below [`MIN_GRADIENT`] are left
//! out of the relative comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{
    actor_backward, actor_forward_batch, clamp_window, critic_action_gradient, critic_backward,
    critic_forward_batch, init_params_with_sizes, AblationMask, ActorParams, CriticParams, ParamSet,
};
use crate::numerics::{affine_batch, finite_diff_check, layer_norm_batch, relu_in_place, Matrix, LAYER_NORM_EPS};

pub const STEP: f64 = 1e-5;
pub const MIN_GRADIENT: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;

const SIZES: (usize, usize) = (12, 9);
const OBS_DIM: usize = 5;
const BATCH: usize = 3;
const MAX_DRAWS: usize = 1000;

/// Worst relative error per check over all points.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub points: usize,
    /// Actor parameters, loss = sum of actions; a third of the points run
    /// with a clamp window in layer 1 and a third in layer 2.
    pub actor: f64,
    pub critic: f64,
    /// Critic with respect to its action input.
    pub critic_action: f64,
    /// Actor parameters through the critic: loss = sum q(s, μ(s)).
    pub actor_through_critic: f64,
    /// Clamped units whose layer-norm gain or bias received a gradient.
    pub clamp_leaks: usize,
    /// Fraction of coordinates large enough to compare, lowest over checks.
    pub min_coverage: f64,
    /// Points redrawn because they sat on a relu kink.
    pub redrawn: usize,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.actor
            .max(self.critic)
            .max(self.critic_action)
            .max(self.actor_through_critic)
    }
}

fn flat<P: ParamSet>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn with_flat<P: ParamSet>(p: &P, v: &[f64]) -> P {
    let mut out = p.clone();
    let mut at = 0;
    for t in out.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&v[at..at + n]);
        at += n;
    }
    out
}

/// Relative error over the comparable coordinates and the share of
/// coordinates that were comparable.
fn compare(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| grad[i].abs() >= MIN_GRADIENT).collect();
    if idx.is_empty() {
        return Err(Error::Numeric("gradient check: no coordinate above the threshold".into()));
    }
    let sub: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    let err = finite_diff_check(
        |s| {
            let mut full = x.to_vec();
            for (k, &i) in idx.iter().enumerate() {
                full[i] = s[k];
            }
            f(&full)
        },
        &sub,
        &g,
        STEP,
    )?;
    Ok((err, idx.len() as f64 / x.len() as f64))
}

fn jitter<P: ParamSet>(p: &P, rng: &mut ChaCha8Rng) -> P {
    let v: Vec<f64> = flat(p).iter().map(|w| w + rng.random_range(-0.3..0.3)).collect();
    with_flat(p, &v)
}

fn random_batch(rng: &mut ChaCha8Rng, cols: usize) -> Matrix {
    Matrix::from_fn(BATCH, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn off_kink(y: &Matrix) -> bool {
    y.as_slice().iter().all(|v| v.abs() > KINK_MARGIN)
}

fn pre_relu(w: &Matrix, b: &[f64], gain: &[f64], bias: &[f64], x: &Matrix) -> Matrix {
    let z = affine_batch(w, b, x).expect("shapes fixed by construction");
    layer_norm_batch(&z, gain, bias, LAYER_NORM_EPS).expect("shapes fixed by construction").0
}

fn actor_off_kink(p: &ActorParams, obs: &Matrix, mask: Option<&AblationMask>) -> bool {
    let y1 = pre_relu(&p.l1.weight, &p.l1.bias, &p.ln1.gain, &p.ln1.bias, obs);
    let mut h1 = y1.clone();
    relu_in_place(&mut h1);
    clamp_window(&mut h1, mask, 1);
    let y2 = pre_relu(&p.l2.weight, &p.l2.bias, &p.ln2.gain, &p.ln2.bias, &h1);
    off_kink(&y1) && off_kink(&y2)
}

fn critic_off_kink(p: &CriticParams, obs: &Matrix, action: &Matrix) -> bool {
    let y1 = pre_relu(&p.l1.weight, &p.l1.bias, &p.ln1.gain, &p.ln1.bias, obs);
    let mut joint = Matrix::zeros(obs.rows(), p.l2.in_dim());
    for r in 0..obs.rows() {
        let row = joint.row_mut(r);
        let (h, a) = row.split_at_mut(y1.cols());
        for (dst, &v) in h.iter_mut().zip(y1.row(r)) {
            *dst = v.max(0.0);
        }
        a.copy_from_slice(action.row(r));
    }
    let y2 = pre_relu(&p.l2.weight, &p.l2.bias, &p.ln2.gain, &p.ln2.bias, &joint);
    off_kink(&y1) && off_kink(&y2)
}

fn actor_sum(p: &ActorParams, obs: &Matrix, mask: Option<&AblationMask>, scale: f64) -> f64 {
    actor_forward_batch(p, obs, mask, scale)
        .expect("shapes fixed by construction")
        .action
        .as_slice()
        .iter()
        .sum()
}

fn critic_sum(p: &CriticParams, obs: &Matrix, action: &Matrix) -> f64 {
    critic_forward_batch(p, obs, action)
        .expect("shapes fixed by construction")
        .q
        .iter()
        .sum()
}

struct Sampler {
    rng: ChaCha8Rng,
    redrawn: usize,
}

impl Sampler {
    fn draw<T>(&mut self, mut f: impl FnMut(&mut ChaCha8Rng) -> Option<T>) -> Result<T> {
        for k in 0..MAX_DRAWS {
            if let Some(t) = f(&mut self.rng) {
                self.redrawn += k;
                return Ok(t);
            }
        }
        Err(Error::Numeric(format!("gradient check: no kink-free point in {MAX_DRAWS} draws")))
    }
}

/// Runs every check at `points` random points on small networks
/// (`5 → 12 → 9 → action`).
pub fn check_network_gradients(points: usize, seed: u64) -> Result<GradientReport> {
    let mut report = GradientReport {
        points,
        actor: 0.0,
        critic: 0.0,
        critic_action: 0.0,
        actor_through_critic: 0.0,
        clamp_leaks: 0,
        min_coverage: 1.0,
        redrawn: 0,
    };
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        redrawn: 0,
    };
    let (a1, c1) = init_params_with_sizes(seed, OBS_DIM, 1, SIZES);
    let (_, c2) = init_params_with_sizes(seed.wrapping_add(1), OBS_DIM, 2, SIZES);
    let ones = vec![1.0; BATCH];
    let ones_m = Matrix::new(BATCH, 1, ones.clone())?;

    for k in 0..points {
        // actor alone, with and without a clamp window
        let mask = match k % 3 {
            0 => None,
            1 => Some(AblationMask::new(1, k % 8, 4)),
            _ => Some(AblationMask::new(2, k % 6, 3)),
        };
        let scale = s.rng.random_range(0.5..3.0);
        let (p, obs) = s.draw(|rng| {
            let p = jitter(&a1, rng);
            let obs = random_batch(rng, OBS_DIM);
            actor_off_kink(&p, &obs, mask.as_ref()).then_some((p, obs))
        })?;
        let trace = actor_forward_batch(&p, &obs, mask.as_ref(), scale)?;
        let g = actor_backward(&p, &trace, &ones_m, scale)?;
        if let Some(m) = &mask {
            // weights into a clamped unit still shift the layer-norm
            // statistics of its neighbours; only its own gain and bias are cut
            let ln = if m.layer == 1 { &g.ln1 } else { &g.ln2 };
            report.clamp_leaks += (m.start..m.start + m.width)
                .filter(|&j| ln.gain[j] != 0.0 || ln.bias[j] != 0.0)
                .count();
        }
        let (err, cov) = compare(|v| actor_sum(&with_flat(&p, v), &obs, mask.as_ref(), scale), &flat(&p), &flat(&g))?;
        report.actor = report.actor.max(err);
        report.min_coverage = report.min_coverage.min(cov);

        // critic parameters and action input, two-dimensional action
        let (c, obs, act) = s.draw(|rng| {
            let c = jitter(&c2, rng);
            let obs = random_batch(rng, OBS_DIM);
            let act = random_batch(rng, 2);
            critic_off_kink(&c, &obs, &act).then_some((c, obs, act))
        })?;
        let trace = critic_forward_batch(&c, &obs, &act)?;
        let (g, d_action) = critic_backward(&c, &trace, &ones)?;
        let (err, cov) = compare(|v| critic_sum(&with_flat(&c, v), &obs, &act), &flat(&c), &flat(&g))?;
        report.critic = report.critic.max(err);
        report.min_coverage = report.min_coverage.min(cov);
        let d_only = critic_action_gradient(&c, &trace, &ones)?;
        let (err, _) = compare(
            |v| critic_sum(&c, &obs, &Matrix::new(BATCH, 2, v.to_vec()).expect("fixed shape")),
            act.as_slice(),
            d_action.as_slice(),
        )?;
        let (err_only, _) = compare(
            |v| critic_sum(&c, &obs, &Matrix::new(BATCH, 2, v.to_vec()).expect("fixed shape")),
            act.as_slice(),
            d_only.as_slice(),
        )?;
        report.critic_action = report.critic_action.max(err).max(err_only);

        // policy update: the critic's action gradient chained into the actor
        let scale = s.rng.random_range(0.5..3.0);
        let (a, c, obs) = s.draw(|rng| {
            let a = jitter(&a1, rng);
            let c = jitter(&c1, rng);
            let obs = random_batch(rng, OBS_DIM);
            let act = actor_forward_batch(&a, &obs, None, scale).ok()?.action;
            (actor_off_kink(&a, &obs, None) && critic_off_kink(&c, &obs, &act)).then_some((a, c, obs))
        })?;
        let at = actor_forward_batch(&a, &obs, None, scale)?;
        let ct = critic_forward_batch(&c, &obs, &at.action)?;
        let d_action = critic_action_gradient(&c, &ct, &ones)?;
        let g = actor_backward(&a, &at, &d_action, scale)?;
        let (err, cov) = compare(
            |v| {
                let act = actor_forward_batch(&with_flat(&a, v), &obs, None, scale)
                    .expect("shapes fixed by construction")
                    .action;
                critic_sum(&c, &obs, &act)
            },
            &flat(&a),
            &flat(&g),
        )?;
        report.actor_through_critic = report.actor_through_critic.max(err);
        report.min_coverage = report.min_coverage.min(cov);
    }
    report.redrawn = s.redrawn;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_central_differences() {
        let r = check_network_gradients(100, 7).unwrap();
        assert!(r.actor < 1e-5, "{r:?}");
        assert!(r.critic < 1e-5, "{r:?}");
        assert!(r.critic_action < 1e-5, "{r:?}");
        assert!(r.actor_through_critic < 1e-5, "{r:?}");
        assert_eq!(r.clamp_leaks, 0);
        // a check over a handful of coordinates would prove little
        assert!(r.min_coverage > 0.25, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (a, _) = init_params_with_sizes(1, OBS_DIM, 1, SIZES);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = jitter(&a, &mut rng);
        let obs = random_batch(&mut rng, OBS_DIM);
        let trace = actor_forward_batch(&a, &obs, None, 1.0).unwrap();
        let ones = Matrix::new(BATCH, 1, vec![1.0; BATCH]).unwrap();
        // gradient for the wrong action scale
        let g = actor_backward(&a, &trace, &ones, 1.5).unwrap();
        let (err, _) = compare(|v| actor_sum(&with_flat(&a, v), &obs, None, 1.0), &flat(&a), &flat(&g)).unwrap();
        assert!(err > 0.1, "{err}");
    }
}
