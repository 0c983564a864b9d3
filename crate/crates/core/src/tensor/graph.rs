use super::kernels::{self, ConvSpec};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)
    }

    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::ZERO {
                    v
                } else {
                    T::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if v > T::ZERO {
                    v
                } else {
                    T::from_f64(slope) * v
                }
            }
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if v > T::ZERO {
                    T::ONE
                } else {
                    T::from_f64(slope)
                }
            }
            Activation::Identity => T::ONE,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    AvgPool {
        x: usize,
        window: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Ln {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Gram {
        x: usize,
    },
    Diff {
        x: usize,
        axis: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat { parts } => parts.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Act { x, .. }
            | Op::Upsample { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Exp { x }
            | Op::Ln { x }
            | Op::Abs { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Gram { x }
            | Op::Diff { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph recording forward values for reverse-mode
/// differentiation.
///
/// Nodes only ever reference earlier nodes, so the graph is acyclic by
/// construction; [`Graph::backward`] still validates this.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant during backward.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op, what: &str) -> Result<Var> {
        let v = self.value(x).map(f);
        self.push(v, op, what)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec,
            },
            "conv2d",
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        self.unary(x, |v| kind.apply(v), Op::Act { x: x.0, kind }, "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_nearest(self.value(x), factor)?;
        self.push(out, Op::Upsample { x: x.0, factor }, "upsample")
    }

    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = kernels::avg_pool(self.value(x), window)?;
        self.push(out, Op::AvgPool { x: x.0, window }, "avg_pool")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&tensors)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            "concat",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a.0, b.0), "mul")
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let c = self.constant(c.clone());
        self.mul(a, c)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        self.unary(x, |v| v * f, Op::Scale { x: x.0, factor }, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(x, |v| v + c, Op::AddScalar { x: x.0 }, "add_scalar")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Scalar::exp, Op::Exp { x: x.0 }, "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Scalar::ln, Op::Ln { x: x.0 }, "ln")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Scalar::abs, Op::Abs { x: x.0 }, "abs")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let m = t.mean();
        self.push(Tensor::scalar(m), Op::Mean { x: x.0 }, "mean")
    }

    /// Per-batch-element Gram matrix of an NCHW feature map.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gram(self.value(x))?;
        self.push(out, Op::Gram { x: x.0 }, "gram")
    }

    /// Forward difference along height (`axis = 2`) or width (`axis = 3`).
    pub fn spatial_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::spatial_diff(self.value(x), axis)?;
        self.push(out, Op::Diff { x: x.0, axis }, "spatial_diff")
    }

    /// `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("root {} is not in the graph", root.0)));
        }
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.op.inputs().iter().any(|&j| j >= i) {
                return Err(Error::Graph(format!(
                    "node {i} references a later node; cycle detected"
                )));
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape().to_vec()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(
                |(i, g)| match (&self.nodes[i].op, self.nodes[i].requires_grad) {
                    (Op::Leaf, true) => g,
                    _ => None,
                },
            )
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) -> Result<()> {
        if !self.nodes[idx].requires_grad {
            return Ok(());
        }
        match grads[idx].as_mut() {
            Some(existing) => existing.add_assign(&g)?,
            None => grads[idx] = Some(g),
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    spec,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    let db = db.reshape(val(*b).shape().to_vec())?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Act { x, kind } => {
                let d = val(*x).zip_map(g, |v, gv| kind.derivative(v) * gv)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Upsample { x, factor } => {
                let d = kernels::upsample_nearest_backward(g, *factor)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::AvgPool { x, window } => {
                let d = kernels::avg_pool_backward(g, *window)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Concat { parts } => {
                let chans: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                let pieces = kernels::split_channels(g, &chans)?;
                for (&p, d) in parts.iter().zip(pieces) {
                    self.accumulate(grads, p, d)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.zip_map(val(*b), |gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, d)?;
                }
                if self.needs(*b) {
                    let d = g.zip_map(val(*a), |gv, av| gv * av)?;
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::Scale { x, factor } => {
                let f = T::from_f64(*factor);
                self.accumulate(grads, *x, g.map(|v| v * f))?;
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone())?,
            Op::Exp { x } => {
                let d = g.zip_map(&node.value, |gv, y| gv * y)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Ln { x } => {
                let d = g.zip_map(val(*x), |gv, xv| gv / xv)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Abs { x } => {
                let d = g.zip_map(val(*x), |gv, xv| {
                    if xv > T::ZERO {
                        gv
                    } else if xv < T::ZERO {
                        -gv
                    } else {
                        T::ZERO
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum { x } => {
                let d = Tensor::full(val(*x).shape().to_vec(), g.data()[0]);
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean { x } => {
                let n = T::from_f64(val(*x).len() as f64);
                let d = Tensor::full(val(*x).shape().to_vec(), g.data()[0] / n);
                self.accumulate(grads, *x, d)?;
            }
            Op::Gram { x } => {
                let d = kernels::gram_backward(val(*x), g)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Diff { x, axis } => {
                let d = kernels::spatial_diff_backward(val(*x).shape(), g, *axis)?;
                self.accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar root with respect to the parameter leaves.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; unreachable parameters get zeros of `like`'s shape.
    pub fn wrt(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
