//! The task learner MLP, the set mixers, and the composed model.
//!
//! A composed model runs anchor and context through the shared leading
//! layers, pools them with a permutation-invariant mixer at slot `l_mix`,
//! and finishes with the remaining layers. At test time the mixer receives
//! the input as a singleton set and performs no mixing; train and test
//! share one code path, so the two agree bit-for-bit on empty context.

mod checkpoint;
mod mixers;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mixers::{interpolate_reduce, softmax, DeepSetsMixer, LinearReduceMixer, SetMixer, SetTransformerMixer};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ReduceKind, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature width mismatch: anchor has {anchor}, context has {context}")]
    FeatureWidth { anchor: usize, context: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

/// Dropout behavior of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters shared by every variant.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Number of linear layers L in the task learner.
    pub layers: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Dropout rate inside task-learner layers.
    pub dropout: f64,
    /// Attention heads in the set-transformer mixer; must divide `hidden`.
    pub heads: usize,
    /// Reduction for the linear-interpolation mixer.
    pub reduce: ReduceKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 64,
            dropout: 0.5,
            heads: 4,
            reduce: ReduceKind::Max,
        }
    }
}

/// One fully-connected layer.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl LinearLayer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::new(vec![in_dim, out_dim], data).expect("consistent init"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }
}

/// `x · W + b` with the bias broadcast over leading dimensions.
pub(crate) fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    g.add(g.matmul(x, w)?, b)
}

/// The L-layer MLP `f_θ`: input D → H, hidden H → H, head H → 1, with ReLU
/// and dropout after every non-final layer.
#[derive(Clone, Debug)]
pub struct TaskLearner {
    pub layers: Vec<LinearLayer>,
    pub dropout: f64,
    pub input_dim: usize,
    pub hidden: usize,
}

impl TaskLearner {
    pub fn new<R: Rng>(input_dim: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self, NetError> {
        if cfg.layers < 2 {
            return Err(NetError::InvalidConfig(format!(
                "need at least 2 layers, got {}",
                cfg.layers
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(NetError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                cfg.dropout
            )));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let in_dim = if l == 0 { input_dim } else { cfg.hidden };
            let out_dim = if l == cfg.layers - 1 { 1 } else { cfg.hidden };
            layers.push(LinearLayer::new(in_dim, out_dim, rng));
        }
        Ok(Self {
            layers,
            dropout: cfg.dropout,
            input_dim,
            hidden: cfg.hidden,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Prediction and penultimate embedding of one forward pass.
#[derive(Debug)]
pub struct ModelOutput {
    /// Shape `[B, 1, 1]`.
    pub pred: Var,
    /// Shape `[B, 1, H]`: the input to the final layer.
    pub z: Var,
}

/// Either the plain task learner or the learner composed with a mixer.
#[derive(Clone, Debug)]
pub enum Model {
    Plain(TaskLearner),
    Composed(ComposedModel),
}

/// Task learner with a mixer occupying slot `l_mix` (1-based). The one
/// exception is the parameterless linear-interpolation mixer at `l_mix = 1`,
/// which mixes in input space and leaves all layers in place.
#[derive(Clone, Debug)]
pub struct ComposedModel {
    pub learner: TaskLearner,
    pub mixer: SetMixer,
    pub l_mix: usize,
}

impl ComposedModel {
    pub fn new(learner: TaskLearner, mixer: SetMixer, l_mix: usize) -> Result<Self, NetError> {
        let depth = learner.depth();
        if l_mix == 0 || l_mix >= depth {
            return Err(NetError::InvalidConfig(format!(
                "l_mix {l_mix} outside 1..={}",
                depth - 1
            )));
        }
        if l_mix > 1 {
            if let SetMixer::LinearReduce(m) = &mixer {
                if m.head.is_none() {
                    return Err(NetError::InvalidConfig(
                        "interpolation mixer above the input slot needs its linear head".into(),
                    ));
                }
            }
        }
        let expected_in = if l_mix == 1 {
            learner.input_dim
        } else {
            learner.hidden
        };
        if mixer.input_dim() != expected_in {
            return Err(NetError::InvalidConfig(format!(
                "mixer expects input width {}, slot {l_mix} provides {expected_in}",
                mixer.input_dim()
            )));
        }
        Ok(Self {
            learner,
            mixer,
            l_mix,
        })
    }

    /// Whether the mixer replaces the slot's linear layer. False only for
    /// the input-space linear-interpolation mixer.
    pub fn slot_occupied(&self) -> bool {
        !(self.l_mix == 1 && matches!(&self.mixer, SetMixer::LinearReduce(m) if m.head.is_none()))
    }
}

/// Leaf handles for every persistent parameter, in `Model::params` order.
pub struct ModelBinding {
    vars: Vec<Var>,
    theta_end: usize,
    /// Position of each learner layer's (weight, bias) pair among `vars`,
    /// `None` for a layer the composition skips.
    layer_pos: Vec<Option<usize>>,
}

impl ModelBinding {
    pub fn theta(&self) -> &[Var] {
        &self.vars[..self.theta_end]
    }

    pub fn lambda(&self) -> &[Var] {
        &self.vars[self.theta_end..]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, idx: usize) -> (Var, Var) {
        let pos = self.layer_pos[idx].expect("layer in use");
        (self.vars[pos], self.vars[pos + 1])
    }
}

impl Model {
    pub fn learner(&self) -> &TaskLearner {
        match self {
            Model::Plain(l) => l,
            Model::Composed(c) => &c.learner,
        }
    }

    pub fn hidden(&self) -> usize {
        self.learner().hidden
    }

    /// 0-based indices of learner layers the composition actually applies.
    fn used_layers(&self) -> Vec<usize> {
        match self {
            Model::Plain(l) => (0..l.depth()).collect(),
            Model::Composed(c) => {
                if c.slot_occupied() {
                    (0..c.learner.depth()).filter(|&l| l != c.l_mix - 1).collect()
                } else {
                    (0..c.learner.depth()).collect()
                }
            }
        }
    }

    /// Named persistent parameters: the used learner layers (θ) followed by
    /// the mixer parameters (λ).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let learner = self.learner();
        for l in self.used_layers() {
            out.push((format!("learner.layer{l}.weight"), &learner.layers[l].weight));
            out.push((format!("learner.layer{l}.bias"), &learner.layers[l].bias));
        }
        if let Model::Composed(c) = self {
            for (name, t) in c.mixer.params() {
                out.push((format!("mixer.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            Model::Plain(l) => {
                for (li, layer) in l.layers.iter_mut().enumerate() {
                    out.push((format!("learner.layer{li}.weight"), &mut layer.weight));
                    out.push((format!("learner.layer{li}.bias"), &mut layer.bias));
                }
            }
            Model::Composed(c) => {
                let skip = c.slot_occupied().then_some(c.l_mix - 1);
                for (li, layer) in c.learner.layers.iter_mut().enumerate() {
                    if Some(li) == skip {
                        continue;
                    }
                    out.push((format!("learner.layer{li}.weight"), &mut layer.weight));
                    out.push((format!("learner.layer{li}.bias"), &mut layer.bias));
                }
                for (name, t) in c.mixer.params_mut() {
                    out.push((format!("mixer.{name}"), t));
                }
            }
        }
        out
    }

    /// Number of leading entries of `params()` that belong to θ.
    pub fn theta_len(&self) -> usize {
        self.used_layers().len() * 2
    }

    pub fn lambda_len(&self) -> usize {
        self.params().len() - self.theta_len()
    }

    /// Insert every parameter as a leaf of `g`.
    pub fn bind(&self, g: &Graph) -> ModelBinding {
        let learner = self.learner();
        let mut vars = Vec::new();
        let mut layer_pos = vec![None; learner.depth()];
        for l in self.used_layers() {
            layer_pos[l] = Some(vars.len());
            vars.push(g.leaf(learner.layers[l].weight.clone()));
            vars.push(g.leaf(learner.layers[l].bias.clone()));
        }
        let theta_end = vars.len();
        if let Model::Composed(c) = self {
            for (_, t) in c.mixer.params() {
                vars.push(g.leaf(t.clone()));
            }
        }
        ModelBinding {
            vars,
            theta_end,
            layer_pos,
        }
    }

    /// Train-path forward: anchor `x [B,1,D]` with optional context
    /// `[B,m,D]`. Empty or absent context sends the singleton set through
    /// the mixer, which is exactly the test path.
    pub fn forward<R: Rng>(
        &self,
        g: &Graph,
        binding: &ModelBinding,
        x: Var,
        ctx: Option<Var>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput, NetError> {
        let ctx = match ctx {
            Some(c) if g.shape_of(c)[1] > 0 => {
                let xw = *g.shape_of(x).last().unwrap();
                let cw = *g.shape_of(c).last().unwrap();
                if xw != cw {
                    return Err(NetError::FeatureWidth {
                        anchor: xw,
                        context: cw,
                    });
                }
                Some(c)
            }
            _ => None,
        };
        match self {
            Model::Plain(learner) => {
                apply_layers(g, learner, binding, x, 0, learner.depth(), mode, rng)
            }
            Model::Composed(c) => c.forward(g, binding, x, ctx, mode, rng),
        }
    }

    /// Test-path forward on values: eval mode, singleton set, no mixing.
    /// Returns per-row predictions and the `[n,1,H]` penultimate embeddings.
    pub fn predict(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor), NetError> {
        let (n, d) = match x.shape() {
            [n, d] => (*n, *d),
            [n, one, d] if *one == 1 => (*n, *d),
            other => {
                return Err(NetError::InvalidConfig(format!(
                    "predict expects [n, D], got {other:?}"
                )))
            }
        };
        let g = Graph::new();
        let binding = self.bind(&g);
        let xv = g.leaf(x.reshaped(&[n, 1, d])?);
        // Eval mode consumes no randomness.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&g, &binding, xv, None, Mode::Eval, &mut rng)?;
        let pred = g.value(out.pred).data().to_vec();
        Ok((pred, g.value(out.z)))
    }

    /// Save all parameters to a checkpoint file.
    pub fn save(&self, path: &std::path::Path) -> Result<(), NetError> {
        save_checkpoint(path, &self.params())
    }

    /// Overwrite parameters from a checkpoint, matched by name.
    pub fn load(&mut self, path: &std::path::Path) -> Result<(), NetError> {
        let loaded = load_checkpoint(path)?;
        for (name, slot) in self.params_mut() {
            let found = loaded
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| NetError::MissingParam(name.clone()))?;
            if found.1.shape() != slot.shape() {
                return Err(NetError::ParamShape {
                    name,
                    expected: slot.shape().to_vec(),
                    found: found.1.shape().to_vec(),
                });
            }
            *slot = found.1.clone();
        }
        Ok(())
    }
}

use rand::SeedableRng;

impl ComposedModel {
    fn forward<R: Rng>(
        &self,
        g: &Graph,
        binding: &ModelBinding,
        x: Var,
        ctx: Option<Var>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput, NetError> {
        let depth = self.learner.depth();
        if !self.slot_occupied() {
            // Input-space interpolation: mix first, then the whole learner.
            let mixer_vars = binding.lambda();
            let mixed = self.mixer.mix(g, mixer_vars, x, ctx, rng)?;
            return apply_layers(g, &self.learner, binding, mixed, 0, depth, mode, rng);
        }

        // Shared leading layers on anchor and context independently.
        let mut xh = x;
        let mut ch = ctx;
        for l in 0..self.l_mix - 1 {
            let (w, b) = binding.layer(l);
            xh = g.relu(linear(g, xh, w, b)?);
            xh = g.dropout(xh, self.learner.dropout, mode == Mode::Train, rng)?;
            if let Some(c) = ch {
                let enc = g.relu(linear(g, c, w, b)?);
                ch = Some(g.dropout(enc, self.learner.dropout, mode == Mode::Train, rng)?);
            }
        }

        let mixed = self.mixer.mix(g, binding.lambda(), xh, ch, rng)?;
        let mut h = mixed;
        let mut z = if self.l_mix == depth - 1 { Some(mixed) } else { None };
        for slot in self.l_mix + 1..=depth {
            let (w, b) = binding.layer(slot - 1);
            h = linear(g, h, w, b)?;
            if slot < depth {
                h = g.relu(h);
                h = g.dropout(h, self.learner.dropout, mode == Mode::Train, rng)?;
            }
            if slot == depth - 1 {
                z = Some(h);
            }
        }
        Ok(ModelOutput {
            pred: h,
            z: z.expect("penultimate slot visited"),
        })
    }
}

/// Run learner layers `start..end` (0-based), tracking the penultimate
/// activation.
fn apply_layers<R: Rng>(
    g: &Graph,
    learner: &TaskLearner,
    binding: &ModelBinding,
    input: Var,
    start: usize,
    end: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<ModelOutput, NetError> {
    let depth = learner.depth();
    let mut h = input;
    let mut z = None;
    for l in start..end {
        let (w, b) = binding.layer(l);
        h = linear(g, h, w, b)?;
        if l < depth - 1 {
            h = g.relu(h);
            h = g.dropout(h, learner.dropout, mode == Mode::Train, rng)?;
        }
        if l == depth - 2 {
            z = Some(h);
        }
    }
    Ok(ModelOutput {
        pred: h,
        z: z.expect("penultimate layer within range"),
    })
}

#[cfg(test)]
mod tests;
