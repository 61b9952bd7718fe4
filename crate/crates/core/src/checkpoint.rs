//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "ABLSCOPE"
//! version  u32 LE   (1)
//! env tag  u32 LE
//! seed     u64 LE
//! tensors  until end of file, each:
//!          name length u32 LE, UTF-8 name, rank u32 LE, dims u32 LE each,
//!          payload f64 LE in row-major order
//! ```
//!
//! Tensors appear in a fixed order: actor, critic, actor target, critic
//! target, then the Adam moments and step counters of both optimizers.
//! Loading checks every name and shape against that order; any mismatch
//! rejects the whole file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::env::{self, EnvId};
use crate::error::{Error, Result};
use crate::net::{ActorParams, CriticParams, ParamSet};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"ABLSCOPE";
pub const VERSION: u32 = 1;

/// Adam first and second moments plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamSet> AdamState<P> {
    pub fn zeros_like(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: EnvId,
    pub seed: u64,
    pub actor: ActorParams,
    pub critic: CriticParams,
    pub actor_target: ActorParams,
    pub critic_target: CriticParams,
    pub actor_opt: AdamState<ActorParams>,
    pub critic_opt: AdamState<CriticParams>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_params<P: ParamSet>(out: &mut Vec<u8>, prefix: &str, params: &P) {
    for t in params.tensors() {
        put_tensor(out, &format!("{prefix}.{}", t.name), &t.dims, t.data);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected_name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if name != expected_name {
            return Err(corrupt(format!("expected tensor '{expected_name}', found '{name}'")));
        }
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(corrupt(format!("tensor '{name}' has unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| corrupt(format!("tensor '{name}' is too large")))?;
            dims.push(d);
        }
        let payload = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| corrupt(format!("tensor '{name}' is too large")))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    fn params<P>(
        &mut self,
        prefix: &str,
        names: &[&str],
        build: impl FnOnce(Vec<(Vec<usize>, Vec<f64>)>) -> Result<P>,
    ) -> Result<P> {
        let tensors = names
            .iter()
            .map(|n| self.tensor(&format!("{prefix}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        build(tensors).map_err(|e| corrupt(format!("{prefix}: {e}")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let (dims, data) = self.tensor(name)?;
        if dims != [1] {
            return Err(corrupt(format!("'{name}' should hold one value")));
        }
        Ok(data[0])
    }
}

fn same_shapes<P: ParamSet>(a: &P, b: &P) -> bool {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .all(|(x, y)| x.dims == y.dims)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = 4 * self.actor.num_params() + 4 * self.critic.num_params();
        let mut out = Vec::with_capacity(24 + 8 * n + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.env.tag().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_params(&mut out, "actor", &self.actor);
        put_params(&mut out, "critic", &self.critic);
        put_params(&mut out, "actor_target", &self.actor_target);
        put_params(&mut out, "critic_target", &self.critic_target);
        put_params(&mut out, "actor_adam_m", &self.actor_opt.m);
        put_params(&mut out, "actor_adam_v", &self.actor_opt.v);
        put_params(&mut out, "critic_adam_m", &self.critic_opt.m);
        put_params(&mut out, "critic_adam_v", &self.critic_opt.v);
        put_tensor(&mut out, "actor_adam_step", &[1], &[self.actor_opt.step as f64]);
        put_tensor(&mut out, "critic_adam_step", &[1], &[self.critic_opt.step as f64]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic, not an ablscope checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let env = EnvId::from_tag(r.u32()?).map_err(|e| corrupt(e.to_string()))?;
        let seed = r.u64()?;
        let names: Vec<&str> = [
            "w1", "b1", "ln1_gain", "ln1_bias", "w2", "b2", "ln2_gain", "ln2_bias", "w_out", "b_out",
        ]
        .to_vec();
        let actor = r.params("actor", &names, ActorParams::from_tensors)?;
        let critic = r.params("critic", &names, CriticParams::from_tensors)?;
        let actor_target = r.params("actor_target", &names, ActorParams::from_tensors)?;
        let critic_target = r.params("critic_target", &names, CriticParams::from_tensors)?;
        let actor_m = r.params("actor_adam_m", &names, ActorParams::from_tensors)?;
        let actor_v = r.params("actor_adam_v", &names, ActorParams::from_tensors)?;
        let critic_m = r.params("critic_adam_m", &names, CriticParams::from_tensors)?;
        let critic_v = r.params("critic_adam_v", &names, CriticParams::from_tensors)?;
        let actor_step = r.scalar("actor_adam_step")?;
        let critic_step = r.scalar("critic_adam_step")?;
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let spec = env::spec(env);
        if actor.obs_dim() != spec.obs_dim || actor.action_dim() != spec.action_dim {
            return Err(corrupt(format!("actor shape does not fit environment {env}")));
        }
        if critic.obs_dim() != spec.obs_dim
            || critic.l1.out_dim() != actor.l1.out_dim()
            || critic.action_dim() != spec.action_dim
        {
            return Err(corrupt(format!("critic shape does not fit environment {env}")));
        }
        if !(same_shapes(&actor, &actor_target)
            && same_shapes(&actor, &actor_m)
            && same_shapes(&actor, &actor_v)
            && same_shapes(&critic, &critic_target)
            && same_shapes(&critic, &critic_m)
            && same_shapes(&critic, &critic_v))
        {
            return Err(corrupt("target or optimizer tensors differ in shape from the networks"));
        }
        let step = |v: f64| -> Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                Ok(v as u64)
            } else {
                Err(corrupt(format!("invalid optimizer step {v}")))
            }
        };
        Ok(Self {
            env,
            seed,
            actor,
            critic,
            actor_target,
            critic_target,
            actor_opt: AdamState {
                m: actor_m,
                v: actor_v,
                step: step(actor_step)?,
            },
            critic_opt: AdamState {
                m: critic_m,
                v: critic_v,
                step: step(critic_step)?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
