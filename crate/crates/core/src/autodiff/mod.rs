//! Reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Graph`] is an append-only tape: every [`Graph::apply`] evaluates a
//! primitive eagerly and records it, so nodes are topologically ordered by
//! construction. [`Graph::backward`] walks the tape once in reverse and may
//! only be called once per graph.

mod kernels;

pub(crate) use kernels::sigmoid;
pub use kernels::GROUP_NORM_EPS;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// inputs: x `[Cin, H, W]`, weight `[Cout, Cin]`, bias `[Cout]`
    Conv1x1,
    /// inputs: x `[Cin, H, W]`, weight `[Cout, Cin, 3, 3]`, bias `[Cout]`; zero padding
    Conv3x3,
    /// Mean over one axis, which is kept with size 1.
    AvgPoolAxis {
        axis: usize,
    },
    Relu,
    Sigmoid,
    /// Elementwise product; size-1 axes broadcast.
    Mul,
    /// Elementwise sum; size-1 axes broadcast.
    Add,
    Scale(f64),
    /// Concatenation along axis 0.
    ConcatChannels,
    /// inputs: x `[C, H, W]`, gamma `[C]`, beta `[C]`
    GroupNorm {
        groups: usize,
    },
    /// inputs: x `[in]`, weight `[out, in]`, bias `[out]`
    Linear,
    /// 2x2 average pooling with stride 2.
    Downsample2,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    SliceAxis {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv1x1 => "conv2d_1x1",
            Primitive::Conv3x3 => "conv2d_3x3",
            Primitive::AvgPoolAxis { .. } => "avg_pool_axis",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Mul => "elementwise_mul",
            Primitive::Add => "elementwise_add",
            Primitive::Scale(_) => "scale",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::GroupNorm { .. } => "group_norm",
            Primitive::Linear => "linear",
            Primitive::Downsample2 => "downsample2",
            Primitive::Upsample2 => "upsample2",
            Primitive::SliceAxis { .. } => "slice_axis",
            Primitive::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Conv1x1 | Primitive::Conv3x3 | Primitive::GroupNorm { .. } | Primitive::Linear => Some(3),
            Primitive::Mul | Primitive::Add => Some(2),
            Primitive::ConcatChannels => None,
            _ => Some(1),
        }
    }
}

/// Evaluates a primitive without recording it.
pub fn forward_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(Error::shape(
                prim.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    match prim {
        Primitive::Conv1x1 => kernels::conv1x1(inputs[0], inputs[1], inputs[2]),
        Primitive::Conv3x3 => kernels::conv3x3(inputs[0], inputs[1], inputs[2]),
        Primitive::AvgPoolAxis { axis } => kernels::avg_pool_axis(inputs[0], *axis),
        Primitive::Relu => Ok(inputs[0].map(|v| v.max(0.0))),
        Primitive::Sigmoid => Ok(inputs[0].map(sigmoid)),
        Primitive::Mul => kernels::binary("elementwise_mul", inputs[0], inputs[1], true),
        Primitive::Add => kernels::binary("elementwise_add", inputs[0], inputs[1], false),
        Primitive::Scale(c) => Ok(inputs[0].scaled(*c)),
        Primitive::ConcatChannels => kernels::concat0(inputs),
        Primitive::GroupNorm { groups } => kernels::group_norm(inputs[0], inputs[1], inputs[2], *groups),
        Primitive::Linear => kernels::linear(inputs[0], inputs[1], inputs[2]),
        Primitive::Downsample2 => kernels::downsample2(inputs[0]),
        Primitive::Upsample2 => kernels::upsample2(inputs[0]),
        Primitive::SliceAxis { axis, start, len } => kernels::slice_axis(inputs[0], *axis, *start, *len),
        Primitive::Reshape(shape) => inputs[0].clone().reshape(shape),
    }
}

/// Vector-Jacobian product: gradients for each input given the output cotangent.
fn vjp(prim: &Primitive, inputs: &[&Tensor], output: &Tensor, dy: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    match prim {
        Primitive::Conv1x1 => {
            let (dx, dw, db) = kernels::conv1x1_vjp(inputs[0], inputs[1], dy);
            vec![Some(dx), Some(dw), Some(db)]
        }
        Primitive::Conv3x3 => {
            let (dx, dw, db) = kernels::conv3x3_vjp(inputs[0], inputs[1], dy, need[0]);
            vec![dx, Some(dw), Some(db)]
        }
        Primitive::AvgPoolAxis { axis } => {
            vec![Some(kernels::avg_pool_axis_vjp(inputs[0], *axis, dy))]
        }
        Primitive::Relu => vec![Some(
            dy.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }).unwrap(),
        )],
        Primitive::Sigmoid => vec![Some(dy.zip_map(output, |g, s| g * s * (1.0 - s)).unwrap())],
        Primitive::Mul | Primitive::Add => {
            let mul = matches!(prim, Primitive::Mul);
            kernels::binary_vjp(inputs[0], inputs[1], dy, mul, [need[0], need[1]]).into()
        }
        Primitive::Scale(c) => vec![Some(dy.scaled(*c))],
        Primitive::ConcatChannels => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|x| {
                    let g = dy.data()[offset..offset + x.len()].to_vec();
                    offset += x.len();
                    Some(Tensor::new(x.shape().to_vec(), g).unwrap())
                })
                .collect()
        }
        Primitive::GroupNorm { groups } => {
            let (dx, dg, db) = kernels::group_norm_vjp(inputs[0], inputs[1], *groups, dy);
            vec![Some(dx), Some(dg), Some(db)]
        }
        Primitive::Linear => {
            let (dx, dw, db) = kernels::linear_vjp(inputs[0], inputs[1], dy);
            vec![Some(dx), Some(dw), Some(db)]
        }
        Primitive::Downsample2 => vec![Some(kernels::downsample2_vjp(inputs[0], dy))],
        Primitive::Upsample2 => vec![Some(kernels::upsample2_vjp(inputs[0], dy))],
        Primitive::SliceAxis { axis, start, .. } => {
            vec![Some(kernels::slice_axis_vjp(inputs[0], *axis, *start, dy))]
        }
        Primitive::Reshape(_) => vec![Some(dy.clone().reshape(inputs[0].shape()).unwrap())],
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward_primitive(&prim, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Conv1x1, &[x, w, b])
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Conv3x3, &[x, w, b])
    }

    pub fn avg_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::AvgPoolAxis { axis }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatChannels, xs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(Primitive::GroupNorm { groups }, &[x, gamma, beta])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Linear, &[x, w, b])
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Downsample2, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Upsample2, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::SliceAxis { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    /// Gradient of `<seed, output>` with respect to every [`Graph::param`] leaf.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = vjp(prim, &inputs, &node.value, &dy, &need);
            for ((v, g), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let (Some(g), true) = (g, needed) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .take(output.0 + 1)
            .filter(|(_, n)| n.prim.is_none() && n.requires_grad)
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { by_leaf })
    }
}

/// Gradients keyed by parameter leaf, in creation order.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_leaf: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.by_leaf[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(v, t)| (*v, t))
    }
}
