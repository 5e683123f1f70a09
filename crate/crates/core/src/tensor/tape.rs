use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so gradients can be propagated back through
/// it. Nodes are appended in evaluation order, which is already a topological
/// order; `backward` walks them in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * k).collect())
            .expect("same shape");
        let ng = self.needs(&[Some(a)]);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let ng = self.needs(&[Some(a)]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let t = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let t = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let ng = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = ops::relu(self.value(x));
        let ng = self.needs(&[Some(x)]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (t, argmax) = ops::max_pool2d(self.value(x), size)?;
        let ng = self.needs(&[Some(x)]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.needs(&[Some(x)]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let ng = self.needs(&[Some(logits)]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Clears leaf gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.consumed = false;
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaves the loss does not depend on receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut send = |v: Var, contrib: Vec<f32>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, k) => send(*a, g.iter().map(|v| v * k).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        *geom,
                        &g,
                    );
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    send(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                    for (g, &src) in g.iter().zip(argmax) {
                        dx[src] += g;
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f32;
                    let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= scale;
                    }
                    send(*logits, d);
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])));
            }
        }
        Ok(())
    }
}
