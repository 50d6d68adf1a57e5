//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in creation order, which
//! is already a topological order of the graph. [`Tape::backward`] walks it in
//! reverse and accumulates each node's gradient contributions into its
//! parents.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{split_axis, Float, Tensor};

/// Inputs handed to a node's backward rule.
pub struct BackwardArgs<'a, T: Float> {
    /// Gradient flowing into the node's output.
    pub grad: &'a Tensor<T>,
    /// Values of the parent nodes, in order.
    pub inputs: &'a [Rc<Tensor<T>>],
    /// The node's own forward value.
    pub output: &'a Tensor<T>,
    /// Which parents need a gradient. Rules may skip work for `false` slots.
    pub needs: &'a [bool],
}

/// Maps the output gradient to one optional contribution per parent.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Vec::new(), false, None)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(value), Vec::new(), true, None)
    }

    fn push_node(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push_node(Rc::new(value), ids, requires_grad, backward)
    }

    /// Runs reverse-mode accumulation from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_val.shape(), T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contribs = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(contribs.len(), node.parents.len());
            for ((&p, c), &need) in node.parents.iter().zip(contribs).zip(&needs) {
                let Some(c) = c else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(g) => g.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Batch-norm operating mode.
#[derive(Clone, Copy)]
pub enum BnMode<'a, T: Float> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the supplied running mean and variance.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics (mean, biased variance) from a train-mode pass.
pub struct BnStats<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

// Shape-checked arithmetic returns `Result`, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    /// `[..., P] x [P, Q] -> [..., Q]`; the left operand is viewed as rows.
    pub fn matmul(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w);
        let (a, b) = (self.value(), w.value());
        if b.rank() != 2 || a.channels() != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, p, q) = (a.rows(), b.shape()[0], b.shape()[1]);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = q;
        let out = Tensor::new(&shape, kernels::matmul(a.data(), b.data(), m, p, q))?;
        Ok(self.tape.push(
            out,
            &[self, w],
            Box::new(move |args| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let da = args.needs[0].then(|| {
                    let bt = kernels::transpose(b.data(), p, q);
                    Tensor::new(a.shape(), kernels::matmul(g.data(), &bt, m, q, p)).unwrap()
                });
                let db = args.needs[1].then(|| {
                    let at = kernels::transpose(a.data(), m, p);
                    Tensor::new(b.shape(), kernels::matmul(&at, g.data(), p, m, q)).unwrap()
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched product `[B, N, P] x [B, P, Q] -> [B, N, Q]`.
    pub fn bmm(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]
        {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (bs, n, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = Vec::with_capacity(bs * n * q);
        for i in 0..bs {
            out.extend(kernels::matmul(
                &a.data()[i * n * p..(i + 1) * n * p],
                &b.data()[i * p * q..(i + 1) * p * q],
                n,
                p,
                q,
            ));
        }
        let out = Tensor::new(&[bs, n, q], out)?;
        Ok(self.tape.push(
            out,
            &[self, rhs],
            Box::new(move |args| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let mut da = Vec::with_capacity(a.len());
                let mut db = Vec::with_capacity(b.len());
                for i in 0..bs {
                    let ai = &a.data()[i * n * p..(i + 1) * n * p];
                    let bi = &b.data()[i * p * q..(i + 1) * p * q];
                    let gi = &g.data()[i * n * q..(i + 1) * n * q];
                    if args.needs[0] {
                        let bt = kernels::transpose(bi, p, q);
                        da.extend(kernels::matmul(gi, &bt, n, q, p));
                    }
                    if args.needs[1] {
                        let at = kernels::transpose(ai, n, p);
                        db.extend(kernels::matmul(&at, gi, p, n, q));
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::new(a.shape(), da).unwrap()),
                    args.needs[1].then(|| Tensor::new(b.shape(), db).unwrap()),
                ]
            }),
        ))
    }

    fn zip_with(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, &[self, rhs], backward))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(
            rhs,
            "add",
            |x, y| x + y,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(
            rhs,
            "sub",
            |x, y| x - y,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|v| -v))]),
        )
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(
            rhs,
            "mul",
            |x, y| x * y,
            Box::new(|args| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let prod = |u: &Tensor<T>| {
                    let d = u.data().iter().zip(g.data()).map(|(&x, &y)| x * y).collect();
                    Tensor::new(u.shape(), d).unwrap()
                };
                vec![args.needs[0].then(|| prod(b)), args.needs[1].then(|| prod(a))]
            }),
        )
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape.push(
            out,
            &[self],
            Box::new(move |args| vec![Some(args.grad.map(|v| v * c))]),
        )
    }

    /// Adds `bias[C]` to every row of a `[..., C]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let c = x.channels();
        if b.len() != c {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.tape.push(
            out,
            &[self, bias],
            Box::new(move |args| {
                let g = args.grad;
                let db = args.needs[1].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(args.inputs[1].shape(), acc).unwrap()
                });
                vec![Some(g.clone()), db]
            }),
        ))
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let x = &args.inputs[0];
                let d = x
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
                    .collect();
                vec![Some(Tensor::new(x.shape(), d).unwrap())]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.tape.push(
            out,
            &[self],
            Box::new(|args| {
                let y = args.output;
                let d = y
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                vec![Some(Tensor::new(y.shape(), d).unwrap())]
            }),
        )
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    fn check_axis(x: &Tensor<T>, axis: usize, op: &'static str) -> Result<()> {
        if axis >= x.rank() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Maximum along `axis`. The backward pass routes each gradient to the
    /// first index attaining the maximum.
    pub fn reduce_max(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        Self::check_axis(&x, axis, "reduce_max")?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        let d = x.data();
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let mut best = d[base + i];
                let mut best_l = 0;
                for l in 1..len {
                    let v = d[base + l * inner + i];
                    if v > best {
                        best = v;
                        best_l = l;
                    }
                }
                out.push(best);
                arg.push(best_l);
            }
        }
        let out = Tensor::new(&Self::reduced_shape(x.shape(), axis), out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let mut dx = vec![T::zero(); outer * len * inner];
                let g = args.grad.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let l = arg[o * inner + i];
                        dx[o * len * inner + l * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(Tensor::new(&in_shape, dx).unwrap())]
            }),
        ))
    }

    /// Mean along `axis`, summed in sorted order so the result is independent
    /// of element order along the axis.
    pub fn reduce_mean(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        Self::check_axis(&x, axis, "reduce_mean")?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let n = T::from_usize(len).unwrap();
        let d = x.data();
        let mut buf = vec![T::zero(); len];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = d[base + l * inner + i];
                }
                out.push(kernels::ordered_sum(&mut buf) / n);
            }
        }
        let out = Tensor::new(&Self::reduced_shape(x.shape(), axis), out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] / n;
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, dx).unwrap())]
            }),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s = x.data().iter().fold(T::zero(), |a, &v| a + v);
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(s),
            &[self],
            Box::new(move |args| vec![Some(Tensor::full(&shape, args.grad.item()))]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.as_ref().clone().reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| vec![Some(args.grad.clone().reshape(&in_shape).unwrap())]),
        ))
    }

    /// Per-channel batch normalisation over every non-channel position. Returns
    /// the batch statistics in train mode.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: BnMode<'_, T>,
    ) -> Result<(Var<'t, T>, Option<BnStats<T>>)> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let c = x.channels();
        if gm.len() != c || bt.len() != c {
            return Err(Error::shape("batch_norm", x.shape(), gm.shape()));
        }
        let rows = x.rows();
        let eps = T::of(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let n = T::from_usize(rows).unwrap();
                let mut mean = vec![T::zero(); c];
                for row in x.data().chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in x.data().chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                let stats = BnStats {
                    mean: Tensor::new(&[c], mean.clone())?,
                    var: Tensor::new(&[c], var.clone())?,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", x.shape(), mean.shape()));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gm.data()[ch] * h + bt.data()[ch]);
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let train = stats.is_some();
        let var_node = self.tape.push(
            out,
            &[self, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gm = args.inputs[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] = dgamma[ch] + grow[ch] * hrow[ch];
                        dbeta[ch] = dbeta[ch] + grow[ch];
                    }
                }
                let dx = args.needs[0].then(|| {
                    let mut dx = Vec::with_capacity(g.len());
                    if train {
                        let n = T::from_usize(rows).unwrap();
                        // dgamma/dbeta double as sum(g*xhat) and sum(g).
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let v = gm[ch] * inv_std[ch] / n
                                    * (n * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]);
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in g.chunks(c) {
                            for ch in 0..c {
                                dx.push(grow[ch] * gm[ch] * inv_std[ch]);
                            }
                        }
                    }
                    Tensor::new(args.inputs[0].shape(), dx).unwrap()
                });
                vec![
                    dx,
                    Some(Tensor::new(&[c], dgamma).unwrap()),
                    Some(Tensor::new(&[c], dbeta).unwrap()),
                ]
            }),
        );
        Ok((var_node, stats))
    }

    /// Edge differences: for `x[B, N, D]` and neighbour table `nbrs[B, N, K]`
    /// (indices local to each cloud) returns `out[b, i, k] = x[b, nbrs[b,i,k]] - x[b, i]`.
    pub fn edge_diff(self, nbrs: Rc<Vec<usize>>, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 || nbrs.len() != x.shape()[0] * x.shape()[1] * k {
            return Err(Error::shape("edge_diff", x.shape(), &[nbrs.len(), k]));
        }
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if nbrs.iter().any(|&j| j >= n) {
            return Err(Error::InvalidArgument("neighbour index out of range".into()));
        }
        let mut out = Vec::with_capacity(b * n * k * d);
        let xd = x.data();
        for bi in 0..b {
            for i in 0..n {
                let center = &xd[(bi * n + i) * d..(bi * n + i + 1) * d];
                for kk in 0..k {
                    let j = nbrs[(bi * n + i) * k + kk];
                    let nb = &xd[(bi * n + j) * d..(bi * n + j + 1) * d];
                    out.extend(nb.iter().zip(center).map(|(&p, &q)| p - q));
                }
            }
        }
        let out = Tensor::new(&[b, n, k, d], out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    for i in 0..n {
                        let ci = (bi * n + i) * d;
                        for kk in 0..k {
                            let j = nbrs[(bi * n + i) * k + kk];
                            let cj = (bi * n + j) * d;
                            let go = ((bi * n + i) * k + kk) * d;
                            for ch in 0..d {
                                let v = g[go + ch];
                                dx[cj + ch] = dx[cj + ch] + v;
                                dx[ci + ch] = dx[ci + ch] - v;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, n, d], dx).unwrap())]
            }),
        ))
    }

    /// Repeats `x[B, C]` along a new middle axis: `[B, C] -> [B, m, C]`.
    pub fn tile_mid(self, m: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape("tile_mid", x.shape(), &[m]));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(b * m * c);
        for row in x.data().chunks(c) {
            for _ in 0..m {
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[b, m, c], out)?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); b * c];
                for bi in 0..b {
                    for mi in 0..m {
                        let src = &g[(bi * m + mi) * c..(bi * m + mi + 1) * c];
                        for (d, &v) in dx[bi * c..(bi + 1) * c].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c], dx).unwrap())]
            }),
        ))
    }

    /// Channel gating: `x[B, ..., C] * gates[B, C]`, broadcasting the gates
    /// over every middle axis.
    pub fn scale_channels(self, gates: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gates);
        let (x, gt) = (self.value(), gates.value());
        let b = x.shape()[0];
        let c = x.channels();
        if x.rank() < 2 || gt.shape() != [b, c] {
            return Err(Error::shape("scale_channels", x.shape(), gt.shape()));
        }
        let per = x.len() / b;
        let mut out = x.as_ref().clone();
        for (bi, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let gr = &gt.data()[bi * c..(bi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (o, &s) in row.iter_mut().zip(gr) {
                    *o = *o * s;
                }
            }
        }
        Ok(self.tape.push(
            out,
            &[self, gates],
            Box::new(move |args| {
                let (x, gt, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let mut dx = vec![T::zero(); x.len()];
                let mut dg = vec![T::zero(); b * c];
                for bi in 0..b {
                    let gr = &gt.data()[bi * c..(bi + 1) * c];
                    let xs = &x.data()[bi * per..(bi + 1) * per];
                    let gs = &g.data()[bi * per..(bi + 1) * per];
                    let dxs = &mut dx[bi * per..(bi + 1) * per];
                    let dgr = &mut dg[bi * c..(bi + 1) * c];
                    for ((xr, gr_out), dxr) in xs.chunks(c).zip(gs.chunks(c)).zip(dxs.chunks_mut(c)) {
                        for ch in 0..c {
                            dxr[ch] = gr_out[ch] * gr[ch];
                            dgr[ch] = dgr[ch] + gr_out[ch] * xr[ch];
                        }
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::new(x.shape(), dx).unwrap()),
                    args.needs[1].then(|| Tensor::new(gt.shape(), dg).unwrap()),
                ]
            }),
        ))
    }

    /// Softmax cross-entropy averaged over rows of `[R, C]` logits.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", x.shape(), &[labels.len()]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = T::zero();
        for (row, &lab) in x.data().chunks(c).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let sum = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            let lse = m + sum.ln();
            loss = loss + (lse - row[lab]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let rn = T::from_usize(r).unwrap();
        let labels = labels.to_vec();
        let out = Tensor::scalar(loss / rn);
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |args| {
                let g = args.grad.item() / rn;
                let mut dx = probs.clone();
                for (i, &lab) in labels.iter().enumerate() {
                    dx[i * c + lab] = dx[i * c + lab] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * g);
                vec![Some(Tensor::new(&[r, c], dx).unwrap())]
            }),
        ))
    }
}

/// Concatenates along the last axis. All inputs must agree on leading axes.
pub fn concat_last<'t, T: Float>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let lead = &vals[0].shape()[..vals[0].rank() - 1];
    for v in &vals[1..] {
        if &v.shape()[..v.rank() - 1] != lead {
            return Err(Error::shape("concat_last", vals[0].shape(), v.shape()));
        }
    }
    let widths: Vec<usize> = vals.iter().map(|v| v.channels()).collect();
    let total: usize = widths.iter().sum();
    let rows = vals[0].rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &vals {
            out.extend_from_slice(v.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let out = Tensor::new(&shape, out)?;
    Ok(first.tape.push(
        out,
        parts,
        Box::new(move |args| {
            let g = args.grad.data();
            let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            outs.into_iter()
                .zip(args.inputs)
                .map(|(d, inp)| Some(Tensor::new(inp.shape(), d).unwrap()))
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values_and_slope() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap());
        let y = x.leaky_relu(0.2);
        assert_eq!(y.value().data(), &[-0.2, 3.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.2, 1.0]);
    }

    #[test]
    fn sigmoid_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![0.0, 50.0]).unwrap());
        let y = x.sigmoid();
        assert_eq!(y.value().data()[0], 0.5);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-7);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data()[0], 0.25);
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        assert_eq!(x.reduce_max(0).unwrap().value().data(), &[3.0, 5.0]);
        let y = tape.constant(Tensor::from_rows(&[vec![2.0, 4.0]]));
        let m = y.reduce_mean(1).unwrap();
        assert_eq!(m.value().shape(), &[1]);
        assert_eq!(m.value().data(), &[3.0]);
        assert!(x.reduce_max(2).is_err());
    }

    #[test]
    fn max_tie_routes_to_first_index() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![7.0, 7.0]).unwrap());
        let g = tape.backward(x.reduce_max(0).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let g = tape.backward(x.add(x).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0, 2.0]);
        let tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let g2 = tape2.backward(x2.scale(2.0).sum()).unwrap();
        assert_eq!(g.wrt(x), g2.wrt(x2));
    }

    #[test]
    fn sum_of_sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[5]));
        let g = tape.backward(x.sigmoid().sum()).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x.sigmoid()), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]));
        let l = x.softmax_cross_entropy(&[2]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);

        let y = tape.leaf(Tensor::new(&[1, 4], vec![0.0, 50.0, 0.0, 0.0]).unwrap());
        assert!(y.softmax_cross_entropy(&[1]).unwrap().value().item() < 1e-6);
        assert!(matches!(
            y.softmax_cross_entropy(&[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn batch_norm_symmetric_batch() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let (y, stats) = x.batch_norm(gamma, beta, BnMode::Train).unwrap();
        let want = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (v, s) in y.value().data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - s * want).abs() < 1e-15);
        }
        let stats = stats.unwrap();
        assert_eq!(stats.mean.data(), &[0.0]);
        assert_eq!(stats.var.data(), &[1.0]);
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 5.0, -4.0, 0.5]).unwrap());
        let gamma = tape.leaf(Tensor::zeros(&[2]));
        let beta = tape.leaf(Tensor::new(&[2], vec![0.25, -1.0]).unwrap());
        let (y, _) = x.batch_norm(gamma, beta, BnMode::Train).unwrap();
        for row in y.value().data().chunks(2) {
            assert_eq!(row, &[0.25, -1.0]);
        }
    }

    #[test]
    fn edge_diff_subtracts_center() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap());
        let e = x.edge_diff(Rc::new(vec![1, 0]), 1).unwrap();
        assert_eq!(e.value().shape(), &[1, 2, 1, 3]);
        assert_eq!(&e.value().data()[..3], &[1.0, 2.0, 2.0]);
        assert_eq!(&e.value().data()[3..], &[-1.0, -2.0, -2.0]);
    }

    #[test]
    fn concat_and_split_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = concat_last(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
        let w = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 3.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0, 4.0, 5.0]);
    }
}
