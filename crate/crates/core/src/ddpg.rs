//! Deep deterministic policy gradient: replay buffer, Ornstein-Uhlenbeck
//! exploration, Adam-optimized actor and critic with soft-updated targets,
//! and noise-free evaluation rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::EpisodeRecord;
use crate::checkpoint::{AdamState, Checkpoint};
use crate::env::{self, EnvId, EnvSpec, Transition};
use crate::error::{config_err, Error, Result};
use crate::net::{
    actor_backward, actor_forward, actor_forward_batch, critic_action_gradient, critic_backward,
    critic_forward_batch, init_params_with_sizes, soft_update, AblationMask, ActorParams, ParamSet,
    LAYER1_UNITS, LAYER2_UNITS,
};
use crate::numerics::{adam_update, AdamConfig, Matrix};

const STREAM_EXPLORATION: u64 = 1;
const STREAM_REPLAY: u64 = 2;
const STREAM_RESETS: u64 = 3;
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000;

/// Ornstein-Uhlenbeck process, discretized as
/// `x ← x + θ(μ − x)dt + σ√dt·N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuState {
    pub x: Vec<f64>,
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub dt: f64,
}

impl OuState {
    pub fn new(dim: usize, theta: f64, sigma: f64, mu: f64, dt: f64) -> Result<Self> {
        if theta < 0.0 || sigma < 0.0 || dt <= 0.0 {
            return config_err("OU process needs θ ≥ 0, σ ≥ 0 and dt > 0");
        }
        Ok(Self {
            x: vec![mu; dim],
            theta,
            sigma,
            mu,
            dt,
        })
    }

    pub fn reset(&mut self) {
        self.x.fill(self.mu);
    }
}

/// One OU step; the updated `x` is the noise sample.
pub fn ou_step(s: &OuState, rng: &mut impl Rng) -> (Vec<f64>, OuState) {
    let mut next = s.clone();
    let diffusion = s.sigma * s.dt.sqrt();
    for x in &mut next.x {
        let n: f64 = rng.sample(StandardNormal);
        *x += s.theta * (s.mu - *x) * s.dt + diffusion * n;
    }
    (next.x.clone(), next)
}

/// Fixed-capacity FIFO of transitions stored as flat arrays.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_obs: Vec<f64>,
    dones: Vec<bool>,
    len: usize,
    cursor: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_obs: Matrix,
    pub dones: Vec<bool>,
    pub indices: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            action_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_obs: Vec::new(),
            dones: Vec::new(),
            len: 0,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim
            || t.next_obs.len() != self.obs_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::Dimension("transition does not match replay shape".into()));
        }
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.dones.push(t.done);
            self.len += 1;
        } else {
            let i = self.cursor;
            self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.obs);
            self.actions[i * self.action_dim..(i + 1) * self.action_dim].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(&t.next_obs);
            self.dones[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.len).then(|| Transition {
            obs: self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            action: self.actions[i * self.action_dim..(i + 1) * self.action_dim].to_vec(),
            reward: self.rewards[i],
            next_obs: self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].to_vec(),
            done: self.dones[i],
        })
    }

    /// Uniform sample with replacement over the current contents.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        if self.len == 0 || batch_size == 0 {
            return config_err("cannot sample from an empty replay buffer");
        }
        let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.len)).collect();
        let gather = |src: &[f64], width: usize| {
            let mut out = Vec::with_capacity(batch_size * width);
            for &i in &indices {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            out
        };
        Ok(Batch {
            obs: Matrix::new(batch_size, self.obs_dim, gather(&self.obs, self.obs_dim))?,
            actions: Matrix::new(batch_size, self.action_dim, gather(&self.actions, self.action_dim))?,
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_obs: Matrix::new(batch_size, self.obs_dim, gather(&self.next_obs, self.obs_dim))?,
            dones: indices.iter().map(|&i| self.dones[i]).collect(),
            indices,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: EnvId,
    pub total_steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub ou_mu: f64,
    pub ou_dt: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    pub hidden: (usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Cpsu,
            total_steps: 800_000,
            batch_size: 64,
            gamma: 0.99,
            tau: 0.001,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            ou_mu: 0.0,
            ou_dt: 1.0,
            warmup_steps: 1000,
            eval_every: 10_000,
            eval_episodes: 5,
            replay_capacity: 1_000_000,
            hidden: (LAYER1_UNITS, LAYER2_UNITS),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_env(env: EnvId) -> Self {
        Self {
            env,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return config_err(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return config_err(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return config_err("batch size and replay capacity must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return config_err("evaluation cadence and episode count must be positive");
        }
        if self.hidden.0 == 0 || self.hidden.1 == 0 {
            return config_err("hidden layers must be non-empty");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return config_err("learning rates must be positive");
        }
        if self.ou_theta < 0.0 || self.ou_sigma < 0.0 || self.ou_dt <= 0.0 {
            return config_err("OU parameters must be non-negative (dt positive)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters and optimizer state after the last step.
    pub checkpoint: Checkpoint,
    /// Snapshot taken at the evaluation with the highest mean return.
    pub best: Option<(CurvePoint, Checkpoint)>,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    /// The best snapshot, falling back to the final checkpoint.
    pub fn best_checkpoint(&self) -> &Checkpoint {
        self.best.as_ref().map_or(&self.checkpoint, |(_, c)| c)
    }

    pub fn best_return(&self) -> Option<f64> {
        self.best.as_ref().map(|(p, _)| p.mean)
    }
}

pub fn initial_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    let spec = env::spec(cfg.env);
    let (actor, critic) = init_params_with_sizes(cfg.seed, spec.obs_dim, spec.action_dim, cfg.hidden);
    Checkpoint {
        env: cfg.env,
        seed: cfg.seed,
        actor_target: actor.clone(),
        critic_target: critic.clone(),
        actor_opt: AdamState::zeros_like(&actor),
        critic_opt: AdamState::zeros_like(&critic),
        actor,
        critic,
    }
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the `i`-th evaluation episode derived from `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Seeds used for the periodic evaluations during training.
pub fn training_eval_seed(train_seed: u64) -> u64 {
    train_seed.wrapping_add(EVAL_SEED_OFFSET)
}

struct Learner<'a> {
    cfg: &'a TrainConfig,
    spec: EnvSpec,
    actor_adam: AdamConfig,
    critic_adam: AdamConfig,
}

impl Learner<'_> {
    fn update(&self, ck: &mut Checkpoint, batch: &Batch) -> Result<f64> {
        let scale = self.spec.action_high;
        let b = batch.rewards.len();

        let next_actions = actor_forward_batch(&ck.actor_target, &batch.next_obs, None, scale)?.action;
        let next_q = critic_forward_batch(&ck.critic_target, &batch.next_obs, &next_actions)?.q;
        let targets: Vec<f64> = (0..b)
            .map(|i| {
                let cont = if batch.dones[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + self.cfg.gamma * cont * next_q[i]
            })
            .collect();

        let trace = critic_forward_batch(&ck.critic, &batch.obs, &batch.actions)?;
        let mut loss = 0.0;
        let d_q: Vec<f64> = trace
            .q
            .iter()
            .zip(&targets)
            .map(|(q, y)| {
                loss += (q - y) * (q - y);
                2.0 * (q - y) / b as f64
            })
            .collect();
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "critic loss diverged at optimizer step {}",
                ck.critic_opt.step + 1
            )));
        }
        let (critic_grads, _) = critic_backward(&ck.critic, &trace, &d_q)?;
        ck.critic_opt.apply(&mut ck.critic, &critic_grads, &self.critic_adam)?;

        let actor_trace = actor_forward_batch(&ck.actor, &batch.obs, None, scale)?;
        let policy_q = critic_forward_batch(&ck.critic, &batch.obs, &actor_trace.action)?;
        let d_q = vec![-1.0 / b as f64; b];
        let d_action = critic_action_gradient(&ck.critic, &policy_q, &d_q)?;
        let actor_grads = actor_backward(&ck.actor, &actor_trace, &d_action, scale)?;
        ck.actor_opt.apply(&mut ck.actor, &actor_grads, &self.actor_adam)?;

        soft_update(&mut ck.critic_target, &ck.critic, self.cfg.tau)?;
        soft_update(&mut ck.actor_target, &ck.actor, self.cfg.tau)?;
        Ok(loss)
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(cfg, |_| {})
}

/// Runs DDPG for `cfg.total_steps` environment steps. `progress` is called
/// after every periodic evaluation. Deterministic in `cfg`.
pub fn train_with_progress(
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = env::spec(cfg.env);
    let mut ck = initial_checkpoint(cfg);
    let learner = Learner {
        cfg,
        spec,
        actor_adam: AdamConfig::with_lr(cfg.lr_actor),
        critic_adam: AdamConfig::with_lr(cfg.lr_critic),
    };
    let mut explore_rng = seeded_stream(cfg.seed, STREAM_EXPLORATION);
    let mut replay_rng = seeded_stream(cfg.seed, STREAM_REPLAY);
    let mut reset_rng = seeded_stream(cfg.seed, STREAM_RESETS);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, spec.obs_dim, spec.action_dim);
    let mut noise = OuState::new(spec.action_dim, cfg.ou_theta, cfg.ou_sigma, cfg.ou_mu, cfg.ou_dt)?;

    let (mut state, mut obs) = env::reset(cfg.env, reset_rng.random());
    let mut curve = Vec::new();
    let mut best: Option<(CurvePoint, Checkpoint)> = None;
    let eval_seed = training_eval_seed(cfg.seed);

    for step in 0..cfg.total_steps {
        let action: Vec<f64> = if step < cfg.warmup_steps {
            (0..spec.action_dim)
                .map(|_| explore_rng.random_range(spec.action_low..=spec.action_high))
                .collect()
        } else {
            let greedy = actor_forward(&ck.actor, &obs, None, spec.action_high)?.action;
            let (n, next) = ou_step(&noise, &mut explore_rng);
            noise = next;
            greedy
                .iter()
                .zip(&n)
                .map(|(a, e)| (a + e * spec.action_high).clamp(spec.action_low, spec.action_high))
                .collect()
        };
        let r = env::step(&state, &action)?;
        replay.push(&Transition {
            obs: obs.clone(),
            action,
            reward: r.reward,
            next_obs: r.obs.clone(),
            done: r.terminated,
        })?;
        if r.done {
            let (s, o) = env::reset(cfg.env, reset_rng.random());
            state = s;
            obs = o;
            noise.reset();
        } else {
            state = r.state;
            obs = r.obs;
        }

        if step >= cfg.warmup_steps && replay.len() >= cfg.batch_size {
            let batch = replay.sample(cfg.batch_size, &mut replay_rng)?;
            learner.update(&mut ck, &batch)?;
        }

        if (step + 1) % cfg.eval_every == 0 {
            let returns = evaluate_returns(&ck.actor, cfg.env, None, cfg.eval_episodes, eval_seed)?;
            let point = CurvePoint {
                step: step + 1,
                mean: returns.iter().sum::<f64>() / returns.len() as f64,
                min: returns.iter().copied().fold(f64::INFINITY, f64::min),
                max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            progress(&point);
            if best.as_ref().is_none_or(|(b, _)| point.mean > b.mean) {
                best = Some((point, ck.clone()));
            }
            curve.push(point);
        }
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        best,
        curve,
    })
}

/// Greedy rollout returning only the episode return.
pub fn rollout_return(
    actor: &ActorParams,
    env_id: EnvId,
    mask: Option<&AblationMask>,
    seed: u64,
) -> Result<f64> {
    let scale = env::spec(env_id).action_high;
    let (mut state, mut obs) = env::reset(env_id, seed);
    let mut total = 0.0;
    loop {
        let action = actor_forward(actor, &obs, mask, scale)?.action;
        let r = env::step(&state, &action)?;
        total += r.reward;
        if r.done {
            return Ok(total);
        }
        state = r.state;
        obs = r.obs;
    }
}

pub fn evaluate_returns(
    actor: &ActorParams,
    env_id: EnvId,
    mask: Option<&AblationMask>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|i| rollout_return(actor, env_id, mask, episode_seed(seed, i)))
        .collect()
}

/// Records one noise-free episode: actions, rewards, observations and the
/// post-clamp activations of both hidden layers at every step. The mask is
/// held fixed for the whole episode.
pub fn record_episode(
    actor: &ActorParams,
    env_id: EnvId,
    mask: Option<&AblationMask>,
    seed: u64,
) -> Result<EpisodeRecord> {
    let spec = env::spec(env_id);
    let (n1, n2) = actor.hidden_sizes();
    let (mut state, mut obs) = env::reset(env_id, seed);
    let mut actions = Vec::with_capacity(spec.horizon);
    let mut rewards = Vec::with_capacity(spec.horizon);
    let mut observations = Vec::with_capacity(spec.horizon * spec.obs_dim);
    let mut layer1 = Vec::with_capacity(spec.horizon * n1);
    let mut layer2 = Vec::with_capacity(spec.horizon * n2);
    loop {
        let snap = actor_forward(actor, &obs, mask, spec.action_high)?;
        let r = env::step(&state, &snap.action)?;
        observations.extend_from_slice(&obs);
        layer1.extend_from_slice(&snap.layer1);
        layer2.extend_from_slice(&snap.layer2);
        actions.push(snap.action[0]);
        rewards.push(r.reward);
        if r.done {
            break;
        }
        state = r.state;
        obs = r.obs;
    }
    let t = actions.len();
    EpisodeRecord::new(
        env_id,
        mask.copied().unwrap_or(AblationMask::baseline(1)),
        seed,
        actions,
        rewards,
        Matrix::new(t, spec.obs_dim, observations)?,
        Matrix::new(t, n1, layer1)?,
        Matrix::new(t, n2, layer2)?,
    )
}

/// Noise-free evaluation of `episodes` episodes with seeds derived from
/// `seed`, recording full activation traces.
pub fn evaluate(
    actor: &ActorParams,
    env_id: EnvId,
    mask: Option<&AblationMask>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    (0..episodes)
        .map(|i| record_episode(actor, env_id, mask, episode_seed(seed, i)))
        .collect()
}

impl<P: ParamSet> AdamState<P> {
    pub fn apply(&mut self, params: &mut P, grads: &P, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let g = grads.tensors();
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            adam_update(p, g.data, m, v, self.step, cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{critic_forward_batch, CriticParams};

    fn tiny_config(env: EnvId, steps: u64) -> TrainConfig {
        TrainConfig {
            env,
            total_steps: steps,
            batch_size: 16,
            warmup_steps: 100,
            eval_every: 200,
            eval_episodes: 2,
            replay_capacity: 5000,
            hidden: (16, 12),
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = OuState {
            x: vec![1.0],
            theta: 0.15,
            sigma: 0.0,
            mu: 0.0,
            dt: 1.0,
        };
        let (n, next) = ou_step(&s, &mut rng);
        assert!((n[0] - 0.85).abs() < 1e-15);
        assert_eq!(next.x, n);
        let s = OuState {
            x: vec![0.3],
            mu: 0.3,
            ..s
        };
        assert_eq!(ou_step(&s, &mut rng).0, vec![0.3]);
        assert!(OuState::new(1, -0.1, 0.2, 0.0, 1.0).is_err());
    }

    #[test]
    fn ou_long_run_mean_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut s = OuState::new(1, 0.15, 0.2, 0.5, 1.0).unwrap();
        for _ in 0..1000 {
            s = ou_step(&s, &mut rng).1;
        }
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, next) = ou_step(&s, &mut rng);
            xs.push(x[0]);
            s = next;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // exact AR(1) stationary variance of the discretization
        let phi = 1.0 - 0.15;
        let stationary_var = 0.04 / (1.0 - phi * phi);
        assert!((var / stationary_var - 1.0).abs() < 0.1, "var {var} vs {stationary_var}");
        // effective sample size shrinks by (1 + φ)/(1 − φ) under autocorrelation
        let se = (stationary_var / n as f64 * (1.0 + phi) / (1.0 - phi)).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    fn transition(k: usize) -> Transition {
        Transition {
            obs: vec![k as f64; 3],
            action: vec![-(k as f64)],
            reward: k as f64 * 0.5,
            next_obs: vec![k as f64 + 1.0; 3],
            done: k % 7 == 0,
        }
    }

    #[test]
    fn replay_is_fifo_and_bounded() {
        let mut rb = ReplayBuffer::new(5, 3, 1);
        for k in 0..12 {
            rb.push(&transition(k)).unwrap();
            assert!(rb.len() <= rb.capacity());
        }
        assert_eq!(rb.len(), 5);
        let mut rewards: Vec<f64> = (0..5).map(|i| rb.get(i).unwrap().reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![3.5, 4.0, 4.5, 5.0, 5.5]);
        assert!(rb.push(&Transition { obs: vec![0.0], ..transition(0) }).is_err());
        let batch = rb.sample(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (row, &i) in batch.indices.iter().enumerate() {
            assert_eq!(batch.obs.row(row), rb.get(i).unwrap().obs.as_slice());
        }
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut rb = ReplayBuffer::new(8, 3, 1);
        for k in 0..8 {
            rb.push(&transition(k)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 8];
        let draws = 80_000;
        for _ in 0..draws / 16 {
            for i in rb.sample(16, &mut rng).unwrap().indices {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 99.9% quantile is 24.32
        assert!(chi2 < 24.32, "chi-square {chi2}");
    }

    #[test]
    fn zero_steps_returns_the_initial_parameters() {
        let cfg = tiny_config(EnvId::Psu, 0);
        let out = train(&cfg).unwrap();
        assert_eq!(out.checkpoint, initial_checkpoint(&cfg));
        assert!(out.curve.is_empty());
        assert!(out.best.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config(EnvId::Cpb, 600);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 3);
        assert_ne!(a.checkpoint.actor, initial_checkpoint(&cfg).actor);
        assert_eq!(a.checkpoint.actor_opt.step, 500);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.total_steps, 800_000);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&cfg).is_err());
    }

    fn mean_q(critic: &CriticParams, actor: &ActorParams, obs: &Matrix, scale: f64) -> f64 {
        let a = actor_forward_batch(actor, obs, None, scale).unwrap().action;
        let q = critic_forward_batch(critic, obs, &a).unwrap().q;
        q.iter().sum::<f64>() / q.len() as f64
    }

    #[test]
    fn actor_step_ascends_the_critic() {
        let (actor, mut critic) = init_params_with_sizes(8, 5, 1, (32, 24));
        // a critic with non-trivial action dependence
        for w in critic.out.weight.as_mut_slice() {
            *w *= 100.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = Matrix::from_fn(32, 5, |_, _| rng.random_range(-1.0..1.0));
        let before = mean_q(&critic, &actor, &obs, 1.0);
        let trace = actor_forward_batch(&actor, &obs, None, 1.0).unwrap();
        let q = critic_forward_batch(&critic, &obs, &trace.action).unwrap();
        let d_a = critic_action_gradient(&critic, &q, &vec![-1.0 / 32.0; 32]).unwrap();
        let grads = actor_backward(&actor, &trace, &d_a, 1.0).unwrap();
        let mut updated = actor.clone();
        let mut opt = AdamState::zeros_like(&actor);
        opt.apply(&mut updated, &grads, &AdamConfig::with_lr(1e-3)).unwrap();
        let after = mean_q(&critic, &updated, &obs, 1.0);
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn evaluation_is_noise_free_and_mask_aware() {
        let cfg = tiny_config(EnvId::Cpsu, 0);
        let ck = initial_checkpoint(&cfg);
        let a = evaluate(&ck.actor, EnvId::Cpsu, None, 2, 10).unwrap();
        let b = evaluate(&ck.actor, EnvId::Cpsu, Some(&AblationMask::baseline(2)), 2, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.actions, y.actions);
            assert_eq!(x.layer1, y.layer1);
            assert_eq!(x.return_total, y.return_total);
        }
        assert_eq!(a[0].len(), 1000);
        let returns = evaluate_returns(&ck.actor, EnvId::Cpsu, None, 2, 10).unwrap();
        assert_eq!(returns, vec![a[0].return_total, a[1].return_total]);

        let mask = AblationMask::new(1, 4, 6);
        let masked = evaluate(&ck.actor, EnvId::Cpsu, Some(&mask), 1, 10).unwrap();
        for t in 0..masked[0].len() {
            assert!(masked[0].layer1.row(t)[4..10].iter().all(|&v| v == 0.0));
        }
    }
}
