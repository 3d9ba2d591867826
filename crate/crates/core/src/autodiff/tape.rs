use crate::error::{BggError, Result};
use crate::tensor::{numel, Tensor};

use super::{conv, linalg, nn, shape, spectral};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Exp,
    Silu,
    Tanh,
    Gelu,
}

/// Outer/axis/inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisGeom {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisGeom {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        AxisGeom {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean(Var),
    Unary(Var, Unary),
    Softmax(Var, AxisGeom),
    LogSoftmax(Var, AxisGeom),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        geom: AxisGeom,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Diag(Var, usize),
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    PointwiseConv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    SpectralModulate {
        x: Var,
        w_re: Var,
        w_im: Var,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MulScalar { x, s } => vec![*x, *s],
            Scale(x, _) | Sum(x) | Mean(x) | Unary(x, _) | Softmax(x, _) | LogSoftmax(x, _) => {
                vec![*x]
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            L2Normalize { x, .. } | Reshape(x) | Permute { x, .. } | Narrow { x, .. } => {
                vec![*x]
            }
            Diag(x, _) => vec![*x],
            Concat { parts, .. } => parts.clone(),
            DepthwiseConv2d { x, kernel, bias, .. } | Conv1d { x, kernel, bias } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            PointwiseConv2d { x, w, b } => vec![*x, *w, *b],
            SpectralModulate { x, w_re, w_im } => vec![*x, *w_re, *w_im],
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Gradient buffers during a backward sweep, indexed like the tape.
pub(crate) struct Grads<'a> {
    nodes: &'a [Node],
    slots: &'a mut [Option<Vec<f64>>],
}

impl Grads<'_> {
    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn add(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.slot(v) {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a tensor; it participates in differentiation iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a tensor that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub(crate) fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{name}");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(BggError::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar loss. Leaf gradients are readable via
    /// [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(BggError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Backpropagates an explicit upstream gradient for `target`.
    pub fn backward_with(&mut self, target: Var, seed: &[f64]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(BggError::Usage("backward on an empty tape".into()));
        }
        let target_len = self.nodes[target.0].value.len();
        if seed.len() != target_len {
            return Err(BggError::dim(
                "backward",
                format!("seed has {} values, target has {target_len}", seed.len()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        self.grads[target.0] = Some(seed.to_vec());
        for i in (0..=target.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let mut grads = Grads {
                    nodes: &self.nodes,
                    slots: &mut self.grads,
                };
                backward_node(&self.nodes, node, &g, &mut grads);
            } else {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut Grads) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        } => linalg::matmul_backward(
            val(*a),
            val(*b),
            *a,
            *b,
            g,
            grads,
            (*batch, *a_batched, *b_batched, *m, *k, *n),
        ),
        Op::Linear {
            x,
            w,
            b,
            rows,
            inp,
            out,
        } => linalg::linear_backward(val(*x), val(*w), *x, *w, *b, g, grads, *rows, *inp, *out),
        Op::Add(a, b) => {
            grads.add(*a, g);
            grads.add(*b, g);
        }
        Op::Sub(a, b) => {
            grads.add(*a, g);
            if let Some(gb) = grads.slot(*b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = grads.slot(*a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = grads.slot(*b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grads.slot(*x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += c * s;
                }
            }
        }
        Op::MulScalar { x, s } => {
            let sv = val(*s)[0];
            let vx = val(*x);
            if let Some(gx) = grads.slot(*x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += sv * s;
                }
            }
            if let Some(gs) = grads.slot(*s) {
                gs[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grads.slot(*x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = grads.slot(*x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Unary(x, kind) => nn::unary_backward(*kind, val(*x), &node.value, *x, g, grads),
        Op::Softmax(x, geom) => nn::softmax_backward(&node.value, *geom, *x, g, grads),
        Op::LogSoftmax(x, geom) => nn::log_softmax_backward(&node.value, *geom, *x, g, grads),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => nn::layer_norm_backward(val(*gamma), xhat, rstd, *x, *gamma, *beta, g, grads),
        Op::L2Normalize { x, norms } => nn::l2_normalize_backward(&node.value, norms, *x, g, grads),
        Op::Reshape(x) => grads.add(*x, g),
        Op::Permute { x, perm } => shape::permute_backward(shp(*x), perm, *x, g, grads),
        Op::Narrow { x, geom, start, len } => shape::narrow_backward(*geom, *start, *len, *x, g, grads),
        Op::Concat {
            parts,
            outer,
            inner,
            lens,
        } => shape::concat_backward(parts, *outer, *inner, lens, g, grads),
        Op::Diag(x, n) => {
            if let Some(gx) = grads.slot(*x) {
                for i in 0..*n {
                    gx[i * n + i] += g[i];
                }
            }
        }
        Op::DepthwiseConv2d {
            x,
            kernel,
            bias,
            dilation,
        } => conv::depthwise_backward(
            val(*x),
            shp(*x),
            val(*kernel),
            shp(*kernel)[1],
            *dilation,
            *x,
            *kernel,
            *bias,
            g,
            grads,
        ),
        Op::PointwiseConv2d { x, w, b } => {
            conv::pointwise_backward(val(*x), shp(*x), val(*w), shp(*w)[0], *x, *w, *b, g, grads)
        }
        Op::Conv1d { x, kernel, bias } => conv::conv1d_backward(
            val(*x),
            shp(*x),
            val(*kernel),
            shp(*kernel)[1],
            *x,
            *kernel,
            *bias,
            g,
            grads,
        ),
        Op::SpectralModulate { x, w_re, w_im } => {
            spectral::modulate_backward(val(*x), shp(*x), val(*w_re), val(*w_im), *x, *w_re, *w_im, g, grads)
        }
    }
}
