//! Cross-channel time-frequency attention.
//!
//! The reference channel is average-pooled over frequency and turned into a
//! per-frame sigmoid mask that modulates the reference itself. Each auxiliary
//! channel is pooled over time into a per-bin mask applied to that modulated
//! reference. The original channels and the masked references are stacked,
//! giving `2M - 1` channels out of `M`.
//!
//! Masks have a single feature and broadcast over all feature planes of a
//! channel, so real and imaginary parts are always gated together.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Axis removed by pooling in a `[C_f, T, F]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    Time,
    Frequency,
}

impl PoolAxis {
    fn index(self) -> usize {
        match self {
            PoolAxis::Time => 1,
            PoolAxis::Frequency => 2,
        }
    }
}

/// `pool -> 1x1 conv -> ReLU -> 1x1 conv -> sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    /// `[hidden, features]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[1, hidden]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Branch {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        Branch {
            w1: Tensor::zeros(&[hidden, features]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// He-scaled weights, zero biases.
    pub fn init<R: Rng + ?Sized>(features: usize, hidden: usize, rng: &mut R) -> Self {
        Branch {
            w1: Tensor::randn(&[hidden, features], rng).scaled((2.0 / features as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[1, hidden], rng).scaled((2.0 / hidden as f64).sqrt()),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn features(&self) -> usize {
        self.w1.shape()[1]
    }

    fn insert_into(&self, set: &mut ParamSet, prefix: &str) -> Result<()> {
        set.insert(format!("{prefix}.w1"), self.w1.clone())?;
        set.insert(format!("{prefix}.b1"), self.b1.clone())?;
        set.insert(format!("{prefix}.w2"), self.w2.clone())?;
        set.insert(format!("{prefix}.b2"), self.b2.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub reference: Branch,
    /// One branch per auxiliary channel, or a single tied branch when `shared`.
    pub aux: Vec<Branch>,
    pub shared: bool,
}

impl AttentionParams {
    fn aux_count(num_mics: usize, shared: bool) -> usize {
        match (num_mics, shared) {
            (0 | 1, _) => 0,
            (_, true) => 1,
            (m, false) => m - 1,
        }
    }

    pub fn zeros(num_mics: usize, features: usize, hidden: usize, shared: bool) -> Self {
        AttentionParams {
            reference: Branch::zeros(features, hidden),
            aux: (0..Self::aux_count(num_mics, shared))
                .map(|_| Branch::zeros(features, hidden))
                .collect(),
            shared,
        }
    }

    pub fn init<R: Rng + ?Sized>(num_mics: usize, features: usize, hidden: usize, shared: bool, rng: &mut R) -> Self {
        let reference = Branch::init(features, hidden, rng);
        let aux = (0..Self::aux_count(num_mics, shared))
            .map(|_| Branch::init(features, hidden, rng))
            .collect();
        AttentionParams { reference, aux, shared }
    }

    /// Adds the tensors under `prefix` (`ref.*`, `aux{m}.*` or `aux.*`).
    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) -> Result<()> {
        self.reference.insert_into(set, &format!("{prefix}ref"))?;
        if self.shared {
            if let Some(b) = self.aux.first() {
                b.insert_into(set, &format!("{prefix}aux"))?;
            }
        } else {
            for (m, b) in self.aux.iter().enumerate() {
                b.insert_into(set, &format!("{prefix}aux{}", m + 1))?;
            }
        }
        Ok(())
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.insert_into(&mut set, "").expect("fresh set");
        set
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BranchVars {
    fn lookup(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(BranchVars {
            w1: bound.var(&format!("{prefix}.w1"))?,
            b1: bound.var(&format!("{prefix}.b1"))?,
            w2: bound.var(&format!("{prefix}.w2"))?,
            b2: bound.var(&format!("{prefix}.b2"))?,
        })
    }
}

/// Graph handles for one attention block; `aux[m]` serves auxiliary channel `m + 1`.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub reference: BranchVars,
    pub aux: Vec<BranchVars>,
}

impl AttentionVars {
    /// Looks up the tensors written by [`AttentionParams::insert_into`].
    pub fn from_bound(bound: &Bound, prefix: &str, num_mics: usize, shared: bool) -> Result<Self> {
        let reference = BranchVars::lookup(bound, &format!("{prefix}ref"))?;
        let aux = if num_mics < 2 {
            Vec::new()
        } else if shared {
            vec![BranchVars::lookup(bound, &format!("{prefix}aux"))?; num_mics - 1]
        } else {
            (1..num_mics)
                .map(|m| BranchVars::lookup(bound, &format!("{prefix}aux{m}")))
                .collect::<Result<_>>()?
        };
        Ok(AttentionVars { reference, aux })
    }
}

/// Pools `x` (`[C_f, T, F]`) over `axis` and maps it to a `(0, 1)` mask of
/// shape `[1, T, 1]` (frequency pooling) or `[1, 1, F]` (time pooling).
pub fn pool_and_process_var(g: &mut Graph, x: Var, axis: PoolAxis, branch: &BranchVars) -> Result<Var> {
    let features = g.value(x).shape().first().copied().unwrap_or(0);
    let expected = g.value(branch.w1).shape()[1];
    if g.value(x).rank() != 3 || features != expected {
        return Err(Error::shape(
            "pool_and_process",
            format!(
                "feature map {:?} vs branch expecting {expected} features",
                g.value(x).shape()
            ),
        ));
    }
    let pooled = g.avg_pool_axis(x, axis.index())?;
    let h = g.conv1x1(pooled, branch.w1, branch.b1)?;
    let h = g.relu(h)?;
    let a = g.conv1x1(h, branch.w2, branch.b2)?;
    g.sigmoid(a)
}

/// Applies the block to `M` channel feature maps, returning `[(2M-1) C_f, T, F]`
/// (channels stacked along the feature axis).
pub fn cross_channel_attention_var(g: &mut Graph, channels: &[Var], params: &AttentionVars) -> Result<Var> {
    let Some((&reference, others)) = channels.split_first() else {
        return Err(Error::shape("cross_channel_attention", "no channels"));
    };
    if others.is_empty() {
        return Ok(reference);
    }
    if params.aux.len() != others.len() {
        return Err(Error::shape(
            "cross_channel_attention",
            format!("{} auxiliary channels but {} branches", others.len(), params.aux.len()),
        ));
    }
    let shape = g.value(reference).shape().to_vec();
    for &c in others {
        if g.value(c).shape() != shape.as_slice() {
            return Err(Error::shape(
                "cross_channel_attention",
                format!("channel {:?} vs reference {shape:?}", g.value(c).shape()),
            ));
        }
    }
    let time_mask = pool_and_process_var(g, reference, PoolAxis::Frequency, &params.reference)?;
    let modified = g.mul(reference, time_mask)?;
    let mut outputs = channels.to_vec();
    for (&c, branch) in others.iter().zip(&params.aux) {
        let freq_mask = pool_and_process_var(g, c, PoolAxis::Time, branch)?;
        outputs.push(g.mul(modified, freq_mask)?);
    }
    g.concat(&outputs)
}

/// Evaluates [`pool_and_process_var`] on plain tensors.
pub fn pool_and_process(channel: &Tensor, axis: PoolAxis, branch: &Branch) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(channel.clone());
    let vars = BranchVars {
        w1: g.input(branch.w1.clone()),
        b1: g.input(branch.b1.clone()),
        w2: g.input(branch.w2.clone()),
        b2: g.input(branch.b2.clone()),
    };
    let out = pool_and_process_var(&mut g, x, axis, &vars)?;
    Ok(g.value(out).clone())
}

/// `[M, C_f, T, F] -> [2M - 1, C_f, T, F]`.
pub fn cross_channel_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let &[m, cf, t, f] = x.shape() else {
        return Err(Error::shape(
            "cross_channel_attention",
            format!("expected [M, C_f, T, F], got {:?}", x.shape()),
        ));
    };
    let mut g = Graph::new();
    let set = params.to_param_set();
    let bound = set.bind(&mut g);
    let vars = AttentionVars::from_bound(&bound, "", m, params.shared)?;
    let plane = cf * t * f;
    let channels: Vec<Var> = (0..m)
        .map(|i| {
            let data = x.data()[i * plane..(i + 1) * plane].to_vec();
            g.input(Tensor::new(vec![cf, t, f], data).expect("sized from shape"))
        })
        .collect();
    let out = cross_channel_attention_var(&mut g, &channels, &vars)?;
    g.value(out).clone().reshape(&[2 * m - 1, cf, t, f])
}
