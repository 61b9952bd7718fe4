//! Cart-pole swing-up, pendulum swing-up and cart-pole balance.
//!
//! All three share one reset/step protocol. Angles are measured from the
//! upright position, and observations encode them as `(cos θ, sin θ)`.
//! Cart-pole observations are `[x, ẋ, cos θ, sin θ, θ̇]`, pendulum
//! observations are `[cos θ, sin θ, θ̇]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Cpsu,
    Psu,
    Cpb,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::Cpsu, EnvId::Psu, EnvId::Cpb];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Cpsu => "cpsu",
            EnvId::Psu => "psu",
            EnvId::Cpb => "cpb",
        }
    }

    /// Stable numeric tag used in checkpoints.
    pub fn tag(self) -> u32 {
        match self {
            EnvId::Cpsu => 0,
            EnvId::Psu => 1,
            EnvId::Cpb => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(EnvId::Cpsu),
            1 => Ok(EnvId::Psu),
            2 => Ok(EnvId::Cpb),
            other => Err(Error::Config(format!("unknown environment tag {other}"))),
        }
    }

    pub fn spec(self) -> EnvSpec {
        spec(self)
    }

    pub fn has_swing_up(self) -> bool {
        matches!(self, EnvId::Cpsu | EnvId::Psu)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpsu" => Ok(EnvId::Cpsu),
            "psu" => Ok(EnvId::Psu),
            "cpb" => Ok(EnvId::Cpb),
            other => Err(Error::Config(format!(
                "unknown environment '{other}' (expected cpsu, psu or cpb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub horizon: usize,
    pub dt: f64,
}

pub fn spec(env_id: EnvId) -> EnvSpec {
    match env_id {
        EnvId::Cpsu | EnvId::Cpb => EnvSpec {
            env_id,
            obs_dim: 5,
            action_dim: 1,
            action_low: -1.0,
            action_high: 1.0,
            horizon: 1000,
            dt: cart_pole::DT,
        },
        EnvId::Psu => EnvSpec {
            env_id,
            obs_dim: 3,
            action_dim: 1,
            action_low: -pendulum::MAX_TORQUE,
            action_high: pendulum::MAX_TORQUE,
            horizon: 200,
            dt: pendulum::DT,
        },
    }
}

mod cart_pole {
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE_SCALE: f64 = 10.0;
    pub const DT: f64 = 0.02;
    pub const RAIL_LIMIT: f64 = 2.4;
    pub const BALANCE_ANGLE_LIMIT: f64 = 0.2;
    pub const RESET_NOISE: f64 = 0.05;
}

pub mod pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Physics {
    CartPole {
        x: f64,
        x_dot: f64,
        theta: f64,
        theta_dot: f64,
    },
    Pendulum {
        theta: f64,
        theta_dot: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub env_id: EnvId,
    pub physics: Physics,
    pub step_count: usize,
}

impl EnvState {
    pub fn theta(&self) -> f64 {
        match self.physics {
            Physics::CartPole { theta, .. } | Physics::Pendulum { theta, .. } => theta,
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.physics {
            Physics::CartPole {
                x,
                x_dot,
                theta,
                theta_dot,
            } => vec![x, x_dot, theta.cos(), theta.sin(), theta_dot],
            Physics::Pendulum { theta, theta_dot } => vec![theta.cos(), theta.sin(), theta_dot],
        }
    }

    fn is_finite(&self) -> bool {
        match self.physics {
            Physics::CartPole {
                x,
                x_dot,
                theta,
                theta_dot,
            } => x.is_finite() && x_dot.is_finite() && theta.is_finite() && theta_dot.is_finite(),
            Physics::Pendulum { theta, theta_dot } => theta.is_finite() && theta_dot.is_finite(),
        }
    }
}

/// Transition stored in replay. `done` marks true terminations only, not
/// the horizon cut-off.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode is over, either by failure or by reaching the horizon.
    pub done: bool,
    /// Episode ended by failure (CPB only); bootstrapping stops here.
    pub terminated: bool,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

pub fn reset(env_id: EnvId, seed: u64) -> (EnvState, Vec<f64>) {
    reset_scaled(env_id, seed, 1.0)
}

/// Reset with the initial-state noise multiplied by `noise_scale`; a scale
/// of 0 gives the nominal initial state.
pub fn reset_scaled(env_id: EnvId, seed: u64, noise_scale: f64) -> (EnvState, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |amp: f64| noise_scale * rng.random_range(-amp..=amp);
    let physics = match env_id {
        EnvId::Cpsu => Physics::CartPole {
            x: noise(cart_pole::RESET_NOISE),
            x_dot: noise(cart_pole::RESET_NOISE),
            theta: PI + noise(cart_pole::RESET_NOISE),
            theta_dot: noise(cart_pole::RESET_NOISE),
        },
        EnvId::Cpb => Physics::CartPole {
            x: noise(cart_pole::RESET_NOISE),
            x_dot: noise(cart_pole::RESET_NOISE),
            theta: noise(cart_pole::RESET_NOISE),
            theta_dot: noise(cart_pole::RESET_NOISE),
        },
        EnvId::Psu => Physics::Pendulum {
            theta: noise(PI),
            theta_dot: noise(1.0),
        },
    };
    let state = EnvState {
        env_id,
        physics,
        step_count: 0,
    };
    let obs = state.observation();
    (state, obs)
}

/// Advances one integration step with semi-implicit Euler.
pub fn step(state: &EnvState, action: &[f64]) -> Result<StepResult> {
    let spec = spec(state.env_id);
    if action.len() != spec.action_dim {
        return Err(Error::Dimension(format!(
            "action has length {}, expected {}",
            action.len(),
            spec.action_dim
        )));
    }
    if !action[0].is_finite() {
        return Err(Error::Numeric("non-finite action".into()));
    }
    let u = action[0].clamp(spec.action_low, spec.action_high);
    let mut terminated = false;
    let (physics, reward) = match state.physics {
        Physics::CartPole {
            x,
            x_dot,
            theta,
            theta_dot,
        } => {
            use cart_pole::*;
            let total_mass = CART_MASS + POLE_MASS;
            let pole_moment = POLE_MASS * HALF_LENGTH;
            let force = FORCE_SCALE * u;
            let (sin, cos) = theta.sin_cos();
            let temp = (force + pole_moment * theta_dot * theta_dot * sin) / total_mass;
            let mut theta_acc = (GRAVITY * sin - cos * temp)
                / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
            let mut x_acc = temp - pole_moment * theta_acc * cos / total_mass;
            // A cart resting against a rail stop and pushed into it stays put:
            // the stop takes the force and the pole swings about a fixed pivot.
            if x.abs() >= RAIL_LIMIT && x_dot == 0.0 && x_acc * x > 0.0 {
                x_acc = 0.0;
                theta_acc = GRAVITY * sin / (HALF_LENGTH * 4.0 / 3.0);
            }

            let mut x_dot = x_dot + spec.dt * x_acc;
            let mut x = x + spec.dt * x_dot;
            let theta_dot = theta_dot + spec.dt * theta_acc;
            let theta = theta + spec.dt * theta_dot;
            let off_rail = x.abs() > RAIL_LIMIT;
            if off_rail {
                x = x.clamp(-RAIL_LIMIT, RAIL_LIMIT);
                x_dot = 0.0;
            }
            let reward = match state.env_id {
                EnvId::Cpb => {
                    terminated = off_rail || theta.abs() > BALANCE_ANGLE_LIMIT;
                    1.0
                }
                _ => theta.cos(),
            };
            (
                Physics::CartPole {
                    x,
                    x_dot,
                    theta,
                    theta_dot,
                },
                reward,
            )
        }
        Physics::Pendulum { theta, theta_dot } => {
            use pendulum::*;
            let wrapped = wrap_angle(theta);
            let reward = -(wrapped * wrapped + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
            let theta_acc = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin()
                + 3.0 / (MASS * LENGTH * LENGTH) * u;
            let theta_dot = (theta_dot + spec.dt * theta_acc).clamp(-MAX_SPEED, MAX_SPEED);
            let theta = theta + spec.dt * theta_dot;
            (Physics::Pendulum { theta, theta_dot }, reward)
        }
    };
    let next = EnvState {
        env_id: state.env_id,
        physics,
        step_count: state.step_count + 1,
    };
    if !next.is_finite() || !reward.is_finite() {
        return Err(Error::Numeric(format!(
            "{} state became non-finite at step {}",
            state.env_id, next.step_count
        )));
    }
    let done = terminated || next.step_count >= spec.horizon;
    Ok(StepResult {
        obs: next.observation(),
        state: next,
        reward,
        done,
        terminated,
    })
}
