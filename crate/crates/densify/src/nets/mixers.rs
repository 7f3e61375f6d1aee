//! Permutation-invariant set mixers.
//!
//! All three families take an anchor `[B,1,H']` plus optional context
//! `[B,m,H']` and pool the `(m+1)`-element set (context rows only, for the
//! linear interpolator) into a single `[B,1,·]` representation per row.

use rand::Rng;

use super::{linear, LinearLayer, NetError};
use crate::tensor::{Graph, ReduceKind, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub enum SetMixer {
    DeepSets(DeepSetsMixer),
    SetTransformer(SetTransformerMixer),
    LinearReduce(LinearReduceMixer),
}

/// Per-element encoder φ, sum pooling, post-pool decoder ρ; φ and ρ are
/// single-hidden-layer MLPs of width H.
#[derive(Clone, Debug)]
pub struct DeepSetsMixer {
    pub(crate) phi: [LinearLayer; 2],
    pub(crate) rho: [LinearLayer; 2],
}

/// One multi-head self-attention block over the set, pooling by attention
/// against a single learnable seed, then a linear head H → H.
#[derive(Clone, Debug)]
pub struct SetTransformerMixer {
    wq: Tensor, // [in, H]
    wk: Tensor,
    wv: Tensor,
    wo: LinearLayer, // [H, H]
    seed: Tensor,    // [1, 1, H]
    wk2: Tensor,     // [H, H]
    wv2: Tensor,
    head: LinearLayer, // [H, H]
    heads: usize,
    hidden: usize,
}

/// `f_reduce(α · x + (1 − α) · C)` with α ~ U(0,1) per batch row. The linear
/// head is present exactly when the mixer occupies a slot above the input
/// (the manifold variant); without it there is nothing to train.
#[derive(Clone, Debug)]
pub struct LinearReduceMixer {
    pub reduce: ReduceKind,
    pub(crate) head: Option<LinearLayer>,
    input_dim: usize,
}

impl SetMixer {
    pub fn deep_sets<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        SetMixer::DeepSets(DeepSetsMixer {
            phi: [
                LinearLayer::new(input_dim, hidden, rng),
                LinearLayer::new(hidden, hidden, rng),
            ],
            rho: [
                LinearLayer::new(hidden, hidden, rng),
                LinearLayer::new(hidden, hidden, rng),
            ],
        })
    }

    pub fn set_transformer<R: Rng>(
        input_dim: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        if heads == 0 || hidden % heads != 0 {
            return Err(NetError::InvalidConfig(format!(
                "head count {heads} must divide hidden width {hidden}"
            )));
        }
        let mat = |inp: usize, out: usize, rng: &mut R| {
            let limit = (6.0 / (inp + out) as f64).sqrt();
            Tensor::new(
                vec![inp, out],
                (0..inp * out).map(|_| rng.gen_range(-limit..limit)).collect(),
            )
            .expect("consistent init")
        };
        let seed_limit = 1.0 / (hidden as f64).sqrt();
        let seed = Tensor::new(
            vec![1, 1, hidden],
            (0..hidden).map(|_| rng.gen_range(-seed_limit..seed_limit)).collect(),
        )
        .expect("consistent init");
        Ok(SetMixer::SetTransformer(SetTransformerMixer {
            wq: mat(input_dim, hidden, rng),
            wk: mat(input_dim, hidden, rng),
            wv: mat(input_dim, hidden, rng),
            wo: LinearLayer::new(hidden, hidden, rng),
            seed,
            wk2: mat(hidden, hidden, rng),
            wv2: mat(hidden, hidden, rng),
            head: LinearLayer::new(hidden, hidden, rng),
            heads,
            hidden,
        }))
    }

    pub fn linear_reduce<R: Rng>(
        reduce: ReduceKind,
        input_dim: usize,
        hidden: usize,
        with_head: bool,
        rng: &mut R,
    ) -> Self {
        let head = with_head.then(|| LinearLayer::new(input_dim, hidden, rng));
        SetMixer::LinearReduce(LinearReduceMixer {
            reduce,
            head,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SetMixer::DeepSets(m) => m.phi[0].weight.shape()[0],
            SetMixer::SetTransformer(m) => m.wq.shape()[0],
            SetMixer::LinearReduce(m) => m.input_dim,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            SetMixer::DeepSets(m) => vec![
                ("phi0.weight".into(), &m.phi[0].weight),
                ("phi0.bias".into(), &m.phi[0].bias),
                ("phi1.weight".into(), &m.phi[1].weight),
                ("phi1.bias".into(), &m.phi[1].bias),
                ("rho0.weight".into(), &m.rho[0].weight),
                ("rho0.bias".into(), &m.rho[0].bias),
                ("rho1.weight".into(), &m.rho[1].weight),
                ("rho1.bias".into(), &m.rho[1].bias),
            ],
            SetMixer::SetTransformer(m) => vec![
                ("wq".into(), &m.wq),
                ("wk".into(), &m.wk),
                ("wv".into(), &m.wv),
                ("wo.weight".into(), &m.wo.weight),
                ("wo.bias".into(), &m.wo.bias),
                ("seed".into(), &m.seed),
                ("wk2".into(), &m.wk2),
                ("wv2".into(), &m.wv2),
                ("head.weight".into(), &m.head.weight),
                ("head.bias".into(), &m.head.bias),
            ],
            SetMixer::LinearReduce(m) => match &m.head {
                Some(h) => vec![
                    ("head.weight".into(), &h.weight),
                    ("head.bias".into(), &h.bias),
                ],
                None => vec![],
            },
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            SetMixer::DeepSets(m) => {
                let [p0, p1] = &mut m.phi;
                let [r0, r1] = &mut m.rho;
                vec![
                    ("phi0.weight".into(), &mut p0.weight),
                    ("phi0.bias".into(), &mut p0.bias),
                    ("phi1.weight".into(), &mut p1.weight),
                    ("phi1.bias".into(), &mut p1.bias),
                    ("rho0.weight".into(), &mut r0.weight),
                    ("rho0.bias".into(), &mut r0.bias),
                    ("rho1.weight".into(), &mut r1.weight),
                    ("rho1.bias".into(), &mut r1.bias),
                ]
            }
            SetMixer::SetTransformer(m) => vec![
                ("wq".into(), &mut m.wq),
                ("wk".into(), &mut m.wk),
                ("wv".into(), &mut m.wv),
                ("wo.weight".into(), &mut m.wo.weight),
                ("wo.bias".into(), &mut m.wo.bias),
                ("seed".into(), &mut m.seed),
                ("wk2".into(), &mut m.wk2),
                ("wv2".into(), &mut m.wv2),
                ("head.weight".into(), &mut m.head.weight),
                ("head.bias".into(), &mut m.head.bias),
            ],
            SetMixer::LinearReduce(m) => match &mut m.head {
                Some(h) => vec![
                    ("head.weight".into(), &mut h.weight),
                    ("head.bias".into(), &mut h.bias),
                ],
                None => vec![],
            },
        }
    }

    /// Pool `{x} ∪ C` (or the α-interpolated context, for the linear
    /// variant) into one element per batch row. `vars` are this mixer's
    /// bound parameters in `params()` order.
    pub fn mix<R: Rng>(
        &self,
        g: &Graph,
        vars: &[Var],
        x: Var,
        ctx: Option<Var>,
        rng: &mut R,
    ) -> Result<Var, NetError> {
        match self {
            SetMixer::DeepSets(_) => {
                let set = build_set(g, x, ctx)?;
                let h = g.relu(linear(g, set, vars[0], vars[1])?);
                let h = linear(g, h, vars[2], vars[3])?;
                let pooled = g.reduce(h, 1, ReduceKind::Sum)?;
                let d = g.relu(linear(g, pooled, vars[4], vars[5])?);
                Ok(linear(g, d, vars[6], vars[7])?)
            }
            SetMixer::SetTransformer(m) => m.mix(g, vars, x, ctx),
            SetMixer::LinearReduce(m) => {
                let core = match ctx {
                    None => x,
                    Some(c) => {
                        let b = g.shape_of(x)[0];
                        let alpha = Tensor::new(
                            vec![b, 1, 1],
                            (0..b).map(|_| rng.gen::<f64>()).collect(),
                        )
                        .expect("consistent alpha");
                        interpolate_reduce(g, x, c, &alpha, m.reduce)?
                    }
                };
                match &m.head {
                    None => Ok(core),
                    Some(_) => Ok(linear(g, core, vars[0], vars[1])?),
                }
            }
        }
    }

    /// Linear-interpolation mix with a caller-supplied α (tests force the
    /// endpoints this way).
    pub fn mix_with_alpha(
        &self,
        g: &Graph,
        vars: &[Var],
        x: Var,
        ctx: Var,
        alpha: &Tensor,
    ) -> Result<Var, NetError> {
        let SetMixer::LinearReduce(m) = self else {
            return Err(NetError::InvalidConfig(
                "mix_with_alpha applies to the linear-interpolation mixer".into(),
            ));
        };
        let core = interpolate_reduce(g, x, ctx, alpha, m.reduce)?;
        match &m.head {
            None => Ok(core),
            Some(_) => Ok(linear(g, core, vars[0], vars[1])?),
        }
    }
}

impl SetTransformerMixer {
    fn mix(&self, g: &Graph, vars: &[Var], x: Var, ctx: Option<Var>) -> Result<Var, NetError> {
        let set = build_set(g, x, ctx)?;
        let q = g.matmul(set, vars[0])?;
        let k = g.matmul(set, vars[1])?;
        let v = g.matmul(set, vars[2])?;
        let dh = self.hidden / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = g.slice(q, 2, i * dh, dh)?;
            let ki = g.slice(k, 2, i * dh, dh)?;
            let vi = g.slice(v, 2, i * dh, dh)?;
            let scores = g.scale(g.matmul(qi, g.transpose(ki)?)?, 1.0 / (dh as f64).sqrt());
            let attn = softmax(g, scores, 2)?;
            head_outs.push(g.matmul(attn, vi)?);
        }
        let merged = g.concat(2, &head_outs)?;
        let encoded = linear(g, merged, vars[3], vars[4])?;

        let seed = vars[5];
        let k2 = g.matmul(encoded, vars[6])?;
        let v2 = g.matmul(encoded, vars[7])?;
        let scores = g.scale(
            g.matmul(seed, g.transpose(k2)?)?,
            1.0 / (self.hidden as f64).sqrt(),
        );
        let attn = softmax(g, scores, 2)?;
        let pooled = g.matmul(attn, v2)?;
        Ok(linear(g, pooled, vars[8], vars[9])?)
    }
}

/// `{x} ∪ C` along the set axis; the bare singleton when there is no
/// context.
fn build_set(g: &Graph, x: Var, ctx: Option<Var>) -> Result<Var, TensorError> {
    match ctx {
        Some(c) => g.concat(1, &[x, c]),
        None => Ok(x),
    }
}

/// `f_reduce(α x + (1 − α) C)` over the set axis. Exact at both endpoints:
/// α = 0 reproduces each context element, α = 1 reproduces the anchor.
pub fn interpolate_reduce(
    g: &Graph,
    x: Var,
    ctx: Var,
    alpha: &Tensor,
    kind: ReduceKind,
) -> Result<Var, TensorError> {
    let one_minus = Tensor::new(
        alpha.shape().to_vec(),
        alpha.data().iter().map(|a| 1.0 - a).collect(),
    )?;
    let av = g.leaf(alpha.clone());
    let ov = g.leaf(one_minus);
    let mixed = g.add(g.mul(av, x)?, g.mul(ov, ctx)?)?;
    g.reduce(mixed, 1, kind)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(g: &Graph, x: Var, axis: usize) -> Result<Var, TensorError> {
    let m = g.reduce(x, axis, ReduceKind::Max)?;
    let e = g.exp(g.sub(x, m)?);
    let s = g.reduce(e, axis, ReduceKind::Sum)?;
    g.div(e, s)
}
