use std::rc::Rc;

use super::cache::SharedInputCache;
use super::element::{gelu, gelu_grad, Element};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    /// `y = x·Wᵀ + b` over the rows of `x`; `saved` is the input copy kept
    /// for the weight gradient.
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        saved: Option<Rc<[T]>>,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBroadcast(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    Gather {
        x: usize,
        index: Rc<[usize]>,
    },
    Concat(Vec<usize>),
    IndexAddCols {
        base: usize,
        delta: usize,
        cols: Rc<[usize]>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        labels: Rc<[usize]>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward/backward cycle.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    cache: Option<SharedInputCache<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_last() {
        Some((&d, rest)) if d > 0 => Ok((numel(rest), d)),
        _ => Err(Error::Shape(format!("expected a non-empty last dimension, got {shape:?}"))),
    }
}

fn matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("expected a matrix, got {shape:?}"))),
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], idx: usize, contribution: Vec<T>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(g, c)| *g += *c),
        slot => *slot = Some(contribution),
    }
}

impl<T: Element> Graph<T> {
    /// A graph whose linear layers share saved inputs through a
    /// [`SharedInputCache`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            cache: Some(SharedInputCache::new()),
        }
    }

    /// A graph where every linear layer keeps its own copy of its input.
    pub fn without_input_cache() -> Self {
        Self {
            cache: None,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_cache(&self) -> Option<&SharedInputCache<T>> {
        self.cache.as_ref()
    }

    /// Number of distinct input buffers currently saved by linear nodes.
    pub fn saved_input_buffers(&self) -> usize {
        let mut ptrs: Vec<*const T> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Linear { saved: Some(s), .. } => Some(s.as_ptr()),
                _ => None,
            })
            .collect();
        ptrs.sort();
        ptrs.dedup();
        ptrs.len()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!("constant {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Constant, false))
    }

    /// A graph leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!("leaf {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    /// Records `t` as a leaf (if it requires grad) or a constant.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&v| T::from_f32(v)).collect();
        let op = if t.requires_grad() { Op::Leaf } else { Op::Constant };
        self.push(t.shape().to_vec(), data, op, t.requires_grad())
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Leaf)
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::NotScalar(self.shape(v).to_vec())),
        }
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, in_dim) = matrix(self.shape(x))?;
        let (out_dim, w_in) = matrix(self.shape(weight))?;
        if w_in != in_dim {
            return Err(Error::Shape(format!(
                "linear input has {in_dim} features but weight expects {w_in}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {out_dim} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); rows * out_dim];
        T::gemm(
            rows,
            in_dim,
            out_dim,
            self.value(x),
            (in_dim as isize, 1),
            self.value(weight),
            (1, in_dim as isize),
            T::zero(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            out.chunks_exact_mut(out_dim)
                .for_each(|row| row.iter_mut().zip(bv).for_each(|(o, b)| *o += *b));
        }
        // The input is only needed again for the weight gradient.
        let saved = if self.requires_grad(weight) {
            Some(match &mut self.cache {
                Some(cache) => cache.register(&self.nodes[x.0].value),
                None => Rc::from(self.nodes[x.0].value.as_slice()),
            })
        } else {
            None
        };
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            vec![rows, out_dim],
            out,
            Op::Linear {
                input: x.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                saved,
            },
            rg,
        ))
    }

    /// Batched matrix product of `[G, m, k]` with `[G, k, n]` (or `[G, n, k]`
    /// when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = match *self.shape(a) {
            [g, m, k] => (g, m, k),
            ref s => return Err(Error::Shape(format!("bmm lhs must be 3-D, got {s:?}"))),
        };
        let (gb, kb, n) = match (trans_b, self.shape(b)) {
            (false, &[g, k, n]) => (g, k, n),
            (true, &[g, n, k]) => (g, k, n),
            (_, s) => return Err(Error::Shape(format!("bmm rhs must be 3-D, got {s:?}"))),
        };
        if gb != g || kb != k {
            return Err(Error::Shape(format!(
                "bmm operands {:?} x {:?} (trans_b={trans_b}) do not conform",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for grp in 0..g {
            T::gemm(
                m,
                k,
                n,
                &av[grp * m * k..(grp + 1) * m * k],
                (k as isize, 1),
                &bv[grp * k * n..(grp + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[grp * m * n..(grp + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a: a.0, b: b.0, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, s), rg)
    }

    /// `a + b` where `b` is tiled cyclically over `a`'s buffer.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if nb == 0 || na % nb != 0 {
            return Err(Error::Shape(format!(
                "cannot tile {:?} over {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, x)| *x + bv[i % nb]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBroadcast(a.0, b.0), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&z| T::from_f64(gelu(z.as_f64()))).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a.0), rg)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = last_dim(self.shape(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer norm affine params must be [{d}]")));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(rows * d);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::from_f64(1.0 / d as f64);
        for row in xv.chunks_exact(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = (var + T::from_f64(eps)).sqrt().recip();
            for j in 0..d {
                out.push((row[j] - mu) * r * gv[j] + bv[j]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = last_dim(self.shape(x))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x.0), rg))
    }

    /// `out[i] = x[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return Err(Error::Shape(format!(
                "gather shape {shape:?} needs {} indices, got {}",
                numel(&shape),
                index.len()
            )));
        }
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range {}", xv.len())));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Gather { x: x.0, index }, rg))
    }

    /// Concatenates along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat trailing dims differ: {s:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat(parts.iter().map(|v| v.0).collect()), rg))
    }

    /// `base` with `delta[:, j]` added into column `cols[j]`.
    pub fn index_add_cols(&mut self, base: Var, delta: Var, cols: Rc<[usize]>) -> Result<Var> {
        let (rows, n) = matrix(self.shape(base))?;
        let (drows, k) = matrix(self.shape(delta))?;
        if drows != rows || k != cols.len() || cols.iter().any(|&c| c >= n) {
            return Err(Error::Shape(format!(
                "index_add_cols: base {:?}, delta {:?}, {} columns",
                self.shape(base),
                self.shape(delta),
                cols.len()
            )));
        }
        let mut out = self.value(base).to_vec();
        let dv = self.value(delta);
        for r in 0..rows {
            for (j, &c) in cols.iter().enumerate() {
                out[r * n + c] += dv[r * k + j];
            }
        }
        let rg = self.rg(&[base, delta]);
        Ok(self.push(
            vec![rows, n],
            out,
            Op::IndexAddCols {
                base: base.0,
                delta: delta.0,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x.0), rg)
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = matrix(self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &label) in lv.chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = total / T::from_f64(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: Rc::from(labels),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients of every graph-participating node become available through
    /// [`Graph::grad`]. Saved inputs and the shared-input cache are released
    /// afterwards, so a graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::NoGraph);
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        for node in &mut self.nodes {
            if let Op::Linear { saved, .. } = &mut node.op {
                *saved = None;
            }
        }
        if let Some(cache) = &mut self.cache {
            cache.clear();
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |j: usize| nodes[j].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Linear {
                input,
                weight,
                bias,
                saved,
            } => {
                let (rows, in_dim) = (nodes[*input].shape[0], nodes[*input].shape[1]);
                let out_dim = node.shape[1];
                if rg(*input) {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    T::gemm(
                        rows,
                        out_dim,
                        in_dim,
                        gy,
                        (out_dim as isize, 1),
                        &nodes[*weight].value,
                        (in_dim as isize, 1),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *input, dx);
                }
                if rg(*weight) {
                    let x = saved.as_deref().expect("saved input released before backward");
                    let mut dw = vec![T::zero(); out_dim * in_dim];
                    T::gemm(
                        out_dim,
                        rows,
                        in_dim,
                        gy,
                        (1, out_dim as isize),
                        x,
                        (in_dim as isize, 1),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    let mut db = vec![T::zero(); out_dim];
                    for row in gy.chunks_exact(out_dim) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += *g);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (g, m, k) = (nodes[*a].shape[0], nodes[*a].shape[1], nodes[*a].shape[2]);
                let n = node.shape[2];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if rg(*a) {
                    let mut da = vec![T::zero(); g * m * k];
                    let bt_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for grp in 0..g {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gy[grp * m * n..(grp + 1) * m * n],
                            (n as isize, 1),
                            &bv[grp * k * n..(grp + 1) * k * n],
                            bt_strides,
                            T::zero(),
                            &mut da[grp * m * k..(grp + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); g * k * n];
                    for grp in 0..g {
                        let ga = &gy[grp * m * n..(grp + 1) * m * n];
                        let sa = &av[grp * m * k..(grp + 1) * m * k];
                        let out = &mut db[grp * k * n..(grp + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, ga, (1, n as isize), sa, (k as isize, 1), T::zero(), out);
                        } else {
                            T::gemm(k, m, n, sa, (1, k as isize), ga, (n as isize, 1), T::zero(), out);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if rg(*a) {
                    accumulate(grads, *a, gy.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, gy.iter().zip(av).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, gy.iter().map(|g| *g * *s).collect());
            }
            Op::AddBroadcast(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if rg(*b) {
                    let nb = nodes[*b].value.len();
                    let mut db = vec![T::zero(); nb];
                    gy.iter().enumerate().for_each(|(i, g)| db[i % nb] += *g);
                    accumulate(grads, *b, db);
                }
            }
            Op::Gelu(a) => {
                let dx = gy
                    .iter()
                    .zip(&nodes[*a].value)
                    .map(|(g, &z)| *g * T::from_f64(gelu_grad(z.as_f64())))
                    .collect();
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *node.shape.last().expect("layer norm output has a last dim");
                let xv = &nodes[*x].value;
                let gv = &nodes[*gamma].value;
                let inv_d = T::from_f64(1.0 / d as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, grow)) in xv.chunks_exact(d).zip(gy.chunks_exact(d)).enumerate() {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().expect("softmax output has a last dim");
                let mut dx = Vec::with_capacity(gy.len());
                for (y, g) in node.value.chunks_exact(d).zip(gy.chunks_exact(d)) {
                    let dot: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
                    dx.extend(y.iter().zip(g).map(|(y, g)| *y * (*g - dot)));
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                index.iter().zip(gy).for_each(|(&i, g)| dx[i] += *g);
                accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if rg(p) {
                        accumulate(grads, p, gy[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::IndexAddCols { base, delta, cols } => {
                if rg(*base) {
                    accumulate(grads, *base, gy.to_vec());
                }
                if rg(*delta) {
                    let n = node.shape[1];
                    let k = cols.len();
                    let mut dd = Vec::with_capacity(gy.len() / n * k);
                    for row in gy.chunks_exact(n) {
                        dd.extend(cols.iter().map(|&c| row[c]));
                    }
                    accumulate(grads, *delta, dd);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, gy.to_vec()),
            Op::Sum(x) => {
                let len = nodes[*x].value.len();
                accumulate(grads, *x, vec![gy[0]; len]);
            }
            Op::Mean(x) => {
                let len = nodes[*x].value.len();
                accumulate(grads, *x, vec![gy[0] / T::from_f64(len as f64); len]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[*logits].shape[1];
                let scale = gy[0] / T::from_f64(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1], vec![3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // loss = sum(W·x) → dL/dW = outer(1, x)
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = g.leaf(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![1], vec![1.0]).unwrap();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn constant_loss_has_no_graph() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1], vec![1.0]).unwrap();
        let loss = g.sum(x);
        assert!(matches!(g.backward(loss), Err(Error::NoGraph)));
    }

    #[test]
    fn repeated_leaf_accumulates() {
        // x used three times: loss = x + 2x + x·x  → 3 + 2x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1], vec![1.5]).unwrap();
        let two_x = g.scale(x, 2.0);
        let xx = g.mul(x, x).unwrap();
        let a = g.add(x, two_x).unwrap();
        let b = g.add(a, xx).unwrap();
        let loss = g.sum(b);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn gelu_of_zero_is_zero() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let y = g.gelu(z);
        assert_eq!(g.value(y), &[0.0; 4]);
    }

    #[test]
    fn cache_is_empty_after_backward() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = g.leaf(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.input_cache().unwrap().len(), 1);
        g.backward(loss).unwrap();
        assert!(g.input_cache().unwrap().is_empty());
        assert_eq!(g.saved_input_buffers(), 0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.constant(vec![2, 2], vec![1.0]).is_err());
        let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let w = g.leaf(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(g.linear(x, w, None).is_err());
    }
}
