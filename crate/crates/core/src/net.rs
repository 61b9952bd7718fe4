//! Actor and critic networks.
//!
//! Both networks have two hidden layers (400 and 300 units by default), each
//! computed as `relu(layer_norm(W x + b))`. The critic receives the action
//! only at its second hidden layer. The actor's forward pass optionally takes
//! an [`AblationMask`] that clamps a contiguous window of post-relu
//! activations in one layer to exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::numerics::{
    affine_backward, affine_batch, layer_norm_backward, layer_norm_batch, relu_backward,
    relu_in_place, tanh_backward, LayerNormCache, Matrix, LAYER_NORM_EPS,
};

pub const LAYER1_UNITS: usize = 400;
pub const LAYER2_UNITS: usize = 300;
pub const OUTPUT_INIT_RANGE: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn uniform(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, bound: f64) -> Self {
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    fn fan_in(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Self {
        Self::uniform(rng, out_dim, in_dim, 1.0 / (in_dim as f64).sqrt())
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    fn identity(n: usize) -> Self {
        Self {
            gain: vec![1.0; n],
            bias: vec![0.0; n],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: vec![0.0; self.gain.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Borrowed view of one named tensor of a parameter set.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed, ordered collection of named tensors. Gradients and optimizer
/// moments use the same type as the parameters they belong to.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn linear_refs<'a>(
    out: &mut Vec<TensorRef<'a>>,
    w_name: &'static str,
    b_name: &'static str,
    l: &'a Linear,
) {
    out.push(TensorRef {
        name: w_name,
        dims: vec![l.weight.rows(), l.weight.cols()],
        data: l.weight.as_slice(),
    });
    out.push(TensorRef {
        name: b_name,
        dims: vec![l.bias.len()],
        data: &l.bias,
    });
}

fn ln_refs<'a>(
    out: &mut Vec<TensorRef<'a>>,
    g_name: &'static str,
    b_name: &'static str,
    ln: &'a LayerNormParams,
) {
    out.push(TensorRef {
        name: g_name,
        dims: vec![ln.gain.len()],
        data: &ln.gain,
    });
    out.push(TensorRef {
        name: b_name,
        dims: vec![ln.bias.len()],
        data: &ln.bias,
    });
}

struct TensorCursor(std::vec::IntoIter<(Vec<usize>, Vec<f64>)>);

impl TensorCursor {
    fn next(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        self.0
            .next()
            .ok_or_else(|| crate::error::Error::Dimension("missing tensor".into()))
    }

    fn matrix(&mut self, cols: Option<usize>) -> Result<Matrix> {
        let (dims, data) = self.next()?;
        if dims.len() != 2 || cols.is_some_and(|c| c != dims[1]) {
            return dim_err(format!("unexpected weight dims {dims:?}"));
        }
        Matrix::new(dims[0], dims[1], data)
    }

    fn vector(&mut self, len: usize) -> Result<Vec<f64>> {
        let (dims, data) = self.next()?;
        if dims != [len] {
            return dim_err(format!("expected a vector of {len}, got {dims:?}"));
        }
        Ok(data)
    }
}

macro_rules! two_layer_params {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub l1: Linear,
            pub ln1: LayerNormParams,
            pub l2: Linear,
            pub ln2: LayerNormParams,
            pub out: Linear,
        }

        impl ParamSet for $name {
            fn tensors(&self) -> Vec<TensorRef<'_>> {
                let mut out = Vec::with_capacity(10);
                linear_refs(&mut out, "w1", "b1", &self.l1);
                ln_refs(&mut out, "ln1_gain", "ln1_bias", &self.ln1);
                linear_refs(&mut out, "w2", "b2", &self.l2);
                ln_refs(&mut out, "ln2_gain", "ln2_bias", &self.ln2);
                linear_refs(&mut out, "w_out", "b_out", &self.out);
                out
            }

            fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
                vec![
                    self.l1.weight.as_mut_slice(),
                    &mut self.l1.bias,
                    &mut self.ln1.gain,
                    &mut self.ln1.bias,
                    self.l2.weight.as_mut_slice(),
                    &mut self.l2.bias,
                    &mut self.ln2.gain,
                    &mut self.ln2.bias,
                    self.out.weight.as_mut_slice(),
                    &mut self.out.bias,
                ]
            }

            fn zeros_like(&self) -> Self {
                Self {
                    l1: self.l1.zeros_like(),
                    ln1: self.ln1.zeros_like(),
                    l2: self.l2.zeros_like(),
                    ln2: self.ln2.zeros_like(),
                    out: self.out.zeros_like(),
                }
            }
        }

        impl $name {
            pub fn hidden_sizes(&self) -> (usize, usize) {
                (self.l1.out_dim(), self.l2.out_dim())
            }

            pub fn obs_dim(&self) -> usize {
                self.l1.in_dim()
            }

            /// Rebuilds a parameter set from tensors in [`ParamSet::tensors`]
            /// order, checking each shape.
            pub fn from_tensors(tensors: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
                if tensors.len() != 10 {
                    return dim_err(format!("expected 10 tensors, got {}", tensors.len()));
                }
                let mut t = TensorCursor(tensors.into_iter());
                let w1 = t.matrix(None)?;
                let b1 = t.vector(w1.rows())?;
                let ln1_gain = t.vector(w1.rows())?;
                let ln1_bias = t.vector(w1.rows())?;
                let w2 = t.matrix(None)?;
                let b2 = t.vector(w2.rows())?;
                let ln2_gain = t.vector(w2.rows())?;
                let ln2_bias = t.vector(w2.rows())?;
                let w_out = t.matrix(Some(w2.rows()))?;
                let b_out = t.vector(w_out.rows())?;
                Ok(Self {
                    l1: Linear { weight: w1, bias: b1 },
                    ln1: LayerNormParams { gain: ln1_gain, bias: ln1_bias },
                    l2: Linear { weight: w2, bias: b2 },
                    ln2: LayerNormParams { gain: ln2_gain, bias: ln2_bias },
                    out: Linear { weight: w_out, bias: b_out },
                })
            }
        }
    };
}

two_layer_params!(ActorParams, "Actor parameters; the output layer maps to `action_dim`.");
two_layer_params!(
    CriticParams,
    "Critic parameters; the second layer takes `[h1, action]` and the output is a scalar."
);

impl ActorParams {
    pub fn action_dim(&self) -> usize {
        self.out.out_dim()
    }
}

impl CriticParams {
    pub fn action_dim(&self) -> usize {
        self.l2.in_dim() - self.l1.out_dim()
    }
}

/// Contiguous window of clamped units in one actor layer. A width of zero
/// is the intact network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationMask {
    pub layer: usize,
    pub start: usize,
    pub width: usize,
}

impl AblationMask {
    pub fn new(layer: usize, start: usize, width: usize) -> Self {
        Self { layer, start, width }
    }

    pub fn baseline(layer: usize) -> Self {
        Self::new(layer, 0, 0)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.width
    }

    pub fn contains(&self, unit: usize) -> bool {
        unit >= self.start && unit < self.end()
    }

    pub fn validate(&self, layer_sizes: (usize, usize)) -> Result<()> {
        let size = match self.layer {
            1 => layer_sizes.0,
            2 => layer_sizes.1,
            other => return config_err(format!("ablation layer must be 1 or 2, got {other}")),
        };
        if self.end() > size {
            return config_err(format!(
                "ablation window {}..{} exceeds layer {} size {size}",
                self.start,
                self.end(),
                self.layer
            ));
        }
        Ok(())
    }
}

pub(crate) fn clamp_window(m: &mut Matrix, mask: Option<&AblationMask>, layer: usize) {
    if let Some(mask) = mask.filter(|m| m.layer == layer && !m.is_empty()) {
        for r in 0..m.rows() {
            m.row_mut(r)[mask.start..mask.end()].fill(0.0);
        }
    }
}

/// Post-clamp activations of both hidden layers and the action for one
/// observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot {
    pub layer1: Vec<f64>,
    pub layer2: Vec<f64>,
    pub action: Vec<f64>,
}

/// Everything the actor backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ActorTrace {
    pub input: Matrix,
    ln1: LayerNormCache,
    pub h1: Matrix,
    ln2: LayerNormCache,
    pub h2: Matrix,
    squashed: Matrix,
    pub action: Matrix,
}

pub fn actor_forward_batch(
    p: &ActorParams,
    obs: &Matrix,
    mask: Option<&AblationMask>,
    action_scale: f64,
) -> Result<ActorTrace> {
    if let Some(mask) = mask {
        mask.validate(p.hidden_sizes())?;
    }
    let z1 = affine_batch(&p.l1.weight, &p.l1.bias, obs)?;
    let (mut h1, ln1) = layer_norm_batch(&z1, &p.ln1.gain, &p.ln1.bias, LAYER_NORM_EPS)?;
    relu_in_place(&mut h1);
    clamp_window(&mut h1, mask, 1);
    let z2 = affine_batch(&p.l2.weight, &p.l2.bias, &h1)?;
    let (mut h2, ln2) = layer_norm_batch(&z2, &p.ln2.gain, &p.ln2.bias, LAYER_NORM_EPS)?;
    relu_in_place(&mut h2);
    clamp_window(&mut h2, mask, 2);
    let mut squashed = affine_batch(&p.out.weight, &p.out.bias, &h2)?;
    for v in squashed.as_mut_slice() {
        *v = v.tanh();
    }
    let mut action = squashed.clone();
    for v in action.as_mut_slice() {
        *v *= action_scale;
    }
    Ok(ActorTrace {
        input: obs.clone(),
        ln1,
        h1,
        ln2,
        h2,
        squashed,
        action,
    })
}

/// Parameter gradients of `sum(d_action ⊙ action)`. Clamped units carry no
/// gradient because their recorded output is zero.
pub fn actor_backward(
    p: &ActorParams,
    trace: &ActorTrace,
    d_action: &Matrix,
    action_scale: f64,
) -> Result<ActorParams> {
    if d_action.shape() != trace.action.shape() {
        return dim_err("actor_backward: d_action shape differs from action");
    }
    let mut d = d_action.clone();
    for v in d.as_mut_slice() {
        *v *= action_scale;
    }
    tanh_backward(&mut d, &trace.squashed);
    let g_out = affine_backward(&p.out.weight, &trace.h2, &d)?;
    let mut d_h2 = g_out.d_input;
    relu_backward(&mut d_h2, &trace.h2);
    let g_ln2 = layer_norm_backward(&d_h2, &trace.ln2, &p.ln2.gain)?;
    let g_l2 = affine_backward(&p.l2.weight, &trace.h1, &g_ln2.d_input)?;
    let mut d_h1 = g_l2.d_input;
    relu_backward(&mut d_h1, &trace.h1);
    let g_ln1 = layer_norm_backward(&d_h1, &trace.ln1, &p.ln1.gain)?;
    let g_l1 = affine_backward(&p.l1.weight, &trace.input, &g_ln1.d_input)?;
    Ok(ActorParams {
        l1: Linear {
            weight: g_l1.d_weight,
            bias: g_l1.d_bias,
        },
        ln1: LayerNormParams {
            gain: g_ln1.d_gain,
            bias: g_ln1.d_bias,
        },
        l2: Linear {
            weight: g_l2.d_weight,
            bias: g_l2.d_bias,
        },
        ln2: LayerNormParams {
            gain: g_ln2.d_gain,
            bias: g_ln2.d_bias,
        },
        out: Linear {
            weight: g_out.d_weight,
            bias: g_out.d_bias,
        },
    })
}

pub fn actor_forward(
    p: &ActorParams,
    obs: &[f64],
    mask: Option<&AblationMask>,
    action_scale: f64,
) -> Result<ActivationSnapshot> {
    if obs.len() != p.obs_dim() {
        return dim_err(format!("observation has length {}, actor expects {}", obs.len(), p.obs_dim()));
    }
    let input = Matrix::new(1, obs.len(), obs.to_vec())?;
    let trace = actor_forward_batch(p, &input, mask, action_scale)?;
    Ok(ActivationSnapshot {
        layer1: trace.h1.row(0).to_vec(),
        layer2: trace.h2.row(0).to_vec(),
        action: trace.action.row(0).to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct CriticTrace {
    input: Matrix,
    ln1: LayerNormCache,
    h1: Matrix,
    joint: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
    pub q: Vec<f64>,
}

pub fn critic_forward_batch(p: &CriticParams, obs: &Matrix, action: &Matrix) -> Result<CriticTrace> {
    if obs.rows() != action.rows() {
        return dim_err("critic: observation and action batch sizes differ");
    }
    if p.l2.in_dim() != p.l1.out_dim() + action.cols() {
        return dim_err(format!(
            "critic: layer 2 takes {} inputs, got {} + {}",
            p.l2.in_dim(),
            p.l1.out_dim(),
            action.cols()
        ));
    }
    let z1 = affine_batch(&p.l1.weight, &p.l1.bias, obs)?;
    let (mut h1, ln1) = layer_norm_batch(&z1, &p.ln1.gain, &p.ln1.bias, LAYER_NORM_EPS)?;
    relu_in_place(&mut h1);
    let width = p.l2.in_dim();
    let mut joint = Matrix::zeros(obs.rows(), width);
    for r in 0..obs.rows() {
        let row = joint.row_mut(r);
        row[..h1.cols()].copy_from_slice(h1.row(r));
        row[h1.cols()..].copy_from_slice(action.row(r));
    }
    let z2 = affine_batch(&p.l2.weight, &p.l2.bias, &joint)?;
    let (mut h2, ln2) = layer_norm_batch(&z2, &p.ln2.gain, &p.ln2.bias, LAYER_NORM_EPS)?;
    relu_in_place(&mut h2);
    let q = affine_batch(&p.out.weight, &p.out.bias, &h2)?.into_vec();
    Ok(CriticTrace {
        input: obs.clone(),
        ln1,
        h1,
        joint,
        ln2,
        h2,
        q,
    })
}

fn critic_second_layer_grad(p: &CriticParams, trace: &CriticTrace, d_q: &[f64]) -> Result<Matrix> {
    if d_q.len() != trace.q.len() {
        return dim_err("critic backward: d_q length differs from batch");
    }
    let d = Matrix::new(d_q.len(), 1, d_q.to_vec())?;
    let mut d_h2 = Matrix::zeros(d.rows(), p.out.in_dim());
    crate::numerics::gemm(
        d.rows(),
        1,
        p.out.in_dim(),
        d.as_slice(),
        false,
        p.out.weight.as_slice(),
        false,
        0.0,
        d_h2.as_mut_slice(),
    );
    relu_backward(&mut d_h2, &trace.h2);
    Ok(d_h2)
}

/// Parameter gradients of `sum(d_q ⊙ q)` plus the gradient with respect to
/// the action input.
pub fn critic_backward(
    p: &CriticParams,
    trace: &CriticTrace,
    d_q: &[f64],
) -> Result<(CriticParams, Matrix)> {
    let d = Matrix::new(d_q.len(), 1, d_q.to_vec())?;
    let g_out = affine_backward(&p.out.weight, &trace.h2, &d)?;
    let mut d_h2 = g_out.d_input;
    relu_backward(&mut d_h2, &trace.h2);
    let g_ln2 = layer_norm_backward(&d_h2, &trace.ln2, &p.ln2.gain)?;
    let g_l2 = affine_backward(&p.l2.weight, &trace.joint, &g_ln2.d_input)?;
    let hidden = p.l1.out_dim();
    let batch = d_q.len();
    let mut d_h1 = Matrix::zeros(batch, hidden);
    let mut d_action = Matrix::zeros(batch, p.l2.in_dim() - hidden);
    for r in 0..batch {
        let row = g_l2.d_input.row(r);
        d_h1.row_mut(r).copy_from_slice(&row[..hidden]);
        d_action.row_mut(r).copy_from_slice(&row[hidden..]);
    }
    relu_backward(&mut d_h1, &trace.h1);
    let g_ln1 = layer_norm_backward(&d_h1, &trace.ln1, &p.ln1.gain)?;
    let g_l1 = affine_backward(&p.l1.weight, &trace.input, &g_ln1.d_input)?;
    let grads = CriticParams {
        l1: Linear {
            weight: g_l1.d_weight,
            bias: g_l1.d_bias,
        },
        ln1: LayerNormParams {
            gain: g_ln1.d_gain,
            bias: g_ln1.d_bias,
        },
        l2: Linear {
            weight: g_l2.d_weight,
            bias: g_l2.d_bias,
        },
        ln2: LayerNormParams {
            gain: g_ln2.d_gain,
            bias: g_ln2.d_bias,
        },
        out: Linear {
            weight: g_out.d_weight,
            bias: g_out.d_bias,
        },
    };
    Ok((grads, d_action))
}

/// Gradient of `sum(d_q ⊙ q)` with respect to the action input only; skips
/// every weight gradient.
pub fn critic_action_gradient(p: &CriticParams, trace: &CriticTrace, d_q: &[f64]) -> Result<Matrix> {
    let d_h2 = critic_second_layer_grad(p, trace, d_q)?;
    let g_ln2 = layer_norm_backward(&d_h2, &trace.ln2, &p.ln2.gain)?;
    let hidden = p.l1.out_dim();
    let action_dim = p.l2.in_dim() - hidden;
    let batch = d_q.len();
    let mut d_action = Matrix::zeros(batch, action_dim);
    // only the action columns of W2 are needed
    for r in 0..batch {
        let g = g_ln2.d_input.row(r);
        for a in 0..action_dim {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * p.l2.weight.get(i, hidden + a);
            }
            d_action.set(r, a, acc);
        }
    }
    Ok(d_action)
}

pub fn critic_forward(p: &CriticParams, obs: &[f64], action: &[f64]) -> Result<f64> {
    if obs.len() != p.obs_dim() {
        return dim_err(format!("observation has length {}, critic expects {}", obs.len(), p.obs_dim()));
    }
    let o = Matrix::new(1, obs.len(), obs.to_vec())?;
    let a = Matrix::new(1, action.len(), action.to_vec())?;
    Ok(critic_forward_batch(p, &o, &a)?.q[0])
}

/// Initializes both networks with the default 400/300 hidden layers.
pub fn init_params(seed: u64, obs_dim: usize, action_dim: usize) -> (ActorParams, CriticParams) {
    init_params_with_sizes(seed, obs_dim, action_dim, (LAYER1_UNITS, LAYER2_UNITS))
}

/// Hidden layers use fan-in uniform initialization; output layers draw from
/// `U(-3e-3, 3e-3)`. Layer norms start as the identity.
pub fn init_params_with_sizes(
    seed: u64,
    obs_dim: usize,
    action_dim: usize,
    hidden: (usize, usize),
) -> (ActorParams, CriticParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n1, n2) = hidden;
    let actor = ActorParams {
        l1: Linear::fan_in(&mut rng, n1, obs_dim),
        ln1: LayerNormParams::identity(n1),
        l2: Linear::fan_in(&mut rng, n2, n1),
        ln2: LayerNormParams::identity(n2),
        out: Linear::uniform(&mut rng, action_dim, n2, OUTPUT_INIT_RANGE),
    };
    let critic = CriticParams {
        l1: Linear::fan_in(&mut rng, n1, obs_dim),
        ln1: LayerNormParams::identity(n1),
        l2: Linear::fan_in(&mut rng, n2, n1 + action_dim),
        ln2: LayerNormParams::identity(n2),
        out: Linear::uniform(&mut rng, 1, n2, OUTPUT_INIT_RANGE),
    };
    (actor, critic)
}

/// `target ← τ·source + (1−τ)·target`, elementwise.
pub fn soft_update<P: ParamSet>(target: &mut P, source: &P, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return config_err(format!("soft update rate {tau} outside [0, 1]"));
    }
    let src = source.tensors();
    let dst = target.tensors_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.data.len() != d.len()) {
        return dim_err("soft_update: parameter shapes differ");
    }
    for (s, d) in src.iter().zip(dst) {
        for (dv, sv) in d.iter_mut().zip(s.data) {
            *dv = tau * sv + (1.0 - tau) * *dv;
        }
    }
    Ok(())
}
