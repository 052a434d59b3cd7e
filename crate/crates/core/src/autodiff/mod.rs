//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! nodes in execution order, so node ids are already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use kernels::bilinear_taps;
pub use ops::permute_index;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Gelu,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_shared: bool,
        b_shared: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Upsample2x {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, usize)>,
    counters: BTreeMap<&'static str, u64>,
    track_params: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            counters: BTreeMap::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters do not require gradients.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Load parameter `id` from `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let v = self.leaf(store.tensor(id).clone(), self.track_params);
        self.params.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn count(&mut self, tag: &'static str, macs: u64) {
        *self.counters.entry(tag).or_insert(0) += macs;
    }

    /// Multiply-accumulate count recorded under `tag`.
    pub fn macs(&self, tag: &str) -> u64 {
        self.counters.get(tag).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> &BTreeMap<&'static str, u64> {
        &self.counters
    }

    /// Per-parameter gradients, summed over every load of the parameter.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; n_params];
        for &(v, id) in &self.params {
            let Some(g) = self.grad(v) else { continue };
            match &mut out[id] {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. Populates gradients on every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }
}

/// Gradient slot for `v`, allocated on first use.
fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], v: Var, len: usize) -> &'g mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_str: Vec<usize>,
    b_str: Vec<usize>,
    mode: BroadcastMode,
}

enum BroadcastMode {
    Same,
    SuffixB(usize),
    SuffixA(usize),
    General,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for d in 0..rank {
            let (x, y) = (pa[d], pb[d]);
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
            out_shape.push(x.max(y));
        }
        let bstr = |p: &[usize]| {
            let s = crate::tensor::strides(p);
            p.iter()
                .zip(s)
                .map(|(&d, st)| if d == 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let is_suffix = |p: &[usize]| {
            let first = p.iter().position(|&d| d != 1).unwrap_or(rank);
            p[first..] == out_shape[first..]
        };
        let mode = if pa == pb {
            BroadcastMode::Same
        } else if pa == out_shape && is_suffix(&pb) {
            BroadcastMode::SuffixB(nb)
        } else if pb == out_shape && is_suffix(&pa) {
            BroadcastMode::SuffixA(na)
        } else {
            BroadcastMode::General
        };
        Ok(Self {
            a_str: bstr(&pa),
            b_str: bstr(&pb),
            out_shape,
            mode,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        match self.mode {
            BroadcastMode::Same => (0..n).for_each(|o| f(o, o, o)),
            BroadcastMode::SuffixB(nb) => (0..n).for_each(|o| f(o, o, o % nb)),
            BroadcastMode::SuffixA(na) => (0..n).for_each(|o| f(o, o % na, o)),
            BroadcastMode::General => {
                let rank = self.out_shape.len();
                let last = self.out_shape[rank - 1];
                let (la, lb) = (self.a_str[rank - 1], self.b_str[rank - 1]);
                let mut idx = vec![0usize; rank - 1];
                let (mut oa, mut ob) = (0usize, 0usize);
                for r in 0..n / last {
                    let base = r * last;
                    for j in 0..last {
                        f(base + j, oa + j * la, ob + j * lb);
                    }
                    for d in (0..rank - 1).rev() {
                        idx[d] += 1;
                        oa += self.a_str[d];
                        ob += self.b_str[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        oa -= self.a_str[d] * self.out_shape[d];
                        ob -= self.b_str[d] * self.out_shape[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.7978845608;
pub(crate) const GELU_A: f64 = 0.044715;

impl<T: Real> Tape<T> {
    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let plan = Broadcast::new(self.shape(a), self.shape(b))
                    .expect("shapes validated in forward");
                let (av, bv) = (self.val(a), self.val(b));
                if self.rg(a) {
                    let da = slot(grads, a, av.len());
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => plan.for_each(|o, ia, _| da[ia] += g[o]),
                        BinaryKind::Mul => plan.for_each(|o, ia, ib| da[ia] += g[o] * bv[ib]),
                        BinaryKind::Div => plan.for_each(|o, ia, ib| da[ia] += g[o] / bv[ib]),
                    }
                }
                if self.rg(b) {
                    let db = slot(grads, b, bv.len());
                    match kind {
                        BinaryKind::Add => plan.for_each(|o, _, ib| db[ib] += g[o]),
                        BinaryKind::Sub => plan.for_each(|o, _, ib| db[ib] -= g[o]),
                        BinaryKind::Mul => plan.for_each(|o, ia, ib| db[ib] += g[o] * av[ia]),
                        BinaryKind::Div => plan.for_each(|o, ia, ib| {
                            let bb = bv[ib];
                            db[ib] -= g[o] * av[ia] / (bb * bb)
                        }),
                    }
                }
            }
            Op::Unary { kind, x } => {
                let x = *x;
                if !self.rg(x) {
                    return;
                }
                let xv = self.val(x);
                let yv = node.value.data();
                let dx = slot(grads, x, xv.len());
                match *kind {
                    UnaryKind::Gelu => {
                        let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                        let half = T::from_f64(0.5);
                        let three = T::from_f64(3.0);
                        for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                            let t = (c * (xi + a * xi * xi * xi)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * a * xi * xi);
                            *d += gv * (half * (T::one() + t) + half * xi * dt);
                        }
                    }
                    UnaryKind::Relu => {
                        for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                            if xi > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                            *d += gv * y * (T::one() - y);
                        }
                    }
                    UnaryKind::Log => {
                        for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                            *d += gv / xi;
                        }
                    }
                    UnaryKind::Exp => {
                        for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                            *d += gv * y;
                        }
                    }
                    UnaryKind::Scale(s) => {
                        let s = T::from_f64(s);
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d += gv * s;
                        }
                    }
                    UnaryKind::AddScalar(_) => {
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
                        for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                            if xi >= lo && xi <= hi {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_shared,
                b_shared,
            } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let (av, bv) = (self.val(a), self.val(b));
                if self.rg(a) {
                    let da = slot(grads, a, av.len());
                    for bi in 0..*batch {
                        let ao = if *a_shared { 0 } else { bi * m * k };
                        let bo = if *b_shared { 0 } else { bi * k * n };
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut da[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(b) {
                    let db = slot(grads, b, bv.len());
                    for bi in 0..*batch {
                        let ao = if *a_shared { 0 } else { bi * m * k };
                        let bo = if *b_shared { 0 } else { bi * k * n };
                        kernels::gemm_tn(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let x = *x;
                if !self.rg(x) {
                    return;
                }
                let y = node.value.data();
                let dx = slot(grads, x, y.len());
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let mut s = T::zero();
                        for t in 0..*len {
                            let p = base + t * inner;
                            s += g[p] * y[p];
                        }
                        for t in 0..*len {
                            let p = base + t * inner;
                            dx[p] += y[p] * (g[p] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = self.val(x);
                let gv = self.val(gamma);
                let c = gv.len();
                let rows = xv.len() / c;
                let cf = T::from_usize(c);
                if self.rg(gamma) || self.rg(beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            let p = r * c + j;
                            let xh = (xv[p] - mean[r]) * rstd[r];
                            dg[j] += g[p] * xh;
                            db[j] += g[p];
                        }
                    }
                    if self.rg(gamma) {
                        add_into(slot(grads, gamma, c), &dg);
                    }
                    if self.rg(beta) {
                        add_into(slot(grads, beta, c), &db);
                    }
                }
                if self.rg(x) {
                    let dx = slot(grads, x, xv.len());
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let p = r * c + j;
                            let dxh = g[p] * gv[j];
                            s1 += dxh;
                            s2 += dxh * (xv[p] - mu) * rs;
                        }
                        let (m1, m2) = (s1 / cf, s2 / cf);
                        for j in 0..c {
                            let p = r * c + j;
                            let xh = (xv[p] - mu) * rs;
                            dx[p] += rs * (g[p] * gv[j] - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let shape = self.shape(x);
                let (bsz, ch) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let cg = ch / groups;
                let xv = self.val(x);
                let gv = self.val(gamma);
                if self.rg(gamma) || self.rg(beta) {
                    let mut dg = vec![T::zero(); ch];
                    let mut db = vec![T::zero(); ch];
                    for b in 0..bsz {
                        for c in 0..ch {
                            let s = b * groups + c / cg;
                            let base = (b * ch + c) * hw;
                            for p in base..base + hw {
                                dg[c] += g[p] * (xv[p] - mean[s]) * rstd[s];
                                db[c] += g[p];
                            }
                        }
                    }
                    if self.rg(gamma) {
                        add_into(slot(grads, gamma, ch), &dg);
                    }
                    if self.rg(beta) {
                        add_into(slot(grads, beta, ch), &db);
                    }
                }
                if self.rg(x) {
                    let dx = slot(grads, x, xv.len());
                    let nf = T::from_usize(cg * hw);
                    for b in 0..bsz {
                        for gi in 0..groups {
                            let s = b * groups + gi;
                            let (mu, rs) = (mean[s], rstd[s]);
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in gi * cg..(gi + 1) * cg {
                                let base = (b * ch + c) * hw;
                                for p in base..base + hw {
                                    let dxh = g[p] * gv[c];
                                    s1 += dxh;
                                    s2 += dxh * (xv[p] - mu) * rs;
                                }
                            }
                            let (m1, m2) = (s1 / nf, s2 / nf);
                            for c in gi * cg..(gi + 1) * cg {
                                let base = (b * ch + c) * hw;
                                for p in base..base + hw {
                                    let xh = (xv[p] - mu) * rs;
                                    dx[p] += rs * (g[p] * gv[c] - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let (x, w, k) = (*x, *w, *k);
                let xs = self.shape(x);
                let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(w)[0];
                let hw = h * wd;
                let ck = cin * k * k;
                let xv = self.val(x);
                let wv = self.val(w);
                if let Some(bias) = *b {
                    if self.rg(bias) {
                        let db = slot(grads, bias, cout);
                        for bi in 0..bsz {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (bi * cout + o) * hw;
                                *d += g[base..base + hw].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let need_w = self.rg(w);
                let need_x = self.rg(x);
                let mut cols = vec![T::zero(); ck * hw];
                let mut dw = if need_w { vec![T::zero(); cout * ck] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                for bi in 0..bsz {
                    let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                    let xb = &xv[bi * cin * hw..(bi + 1) * cin * hw];
                    if need_w {
                        if k == 1 {
                            kernels::gemm_nt(gb, xb, &mut dw, cout, hw, ck);
                        } else {
                            kernels::im2col(xb, cin, h, wd, k, &mut cols);
                            kernels::gemm_nt(gb, &cols, &mut dw, cout, hw, ck);
                        }
                    }
                    if need_x {
                        let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                        if k == 1 {
                            kernels::gemm_tn(wv, gb, dxb, cout, ck, hw);
                        } else {
                            cols.fill(T::zero());
                            kernels::gemm_tn(wv, gb, &mut cols, cout, ck, hw);
                            kernels::col2im(&cols, cin, h, wd, k, dxb);
                        }
                    }
                }
                if need_w {
                    add_into(slot(grads, w, cout * ck), &dw);
                }
                if need_x {
                    add_into(slot(grads, x, xv.len()), &dx);
                }
            }
            Op::Gather { x, index } => {
                let x = *x;
                if !self.rg(x) {
                    return;
                }
                let dx = slot(grads, x, self.val(x).len());
                for (o, &src) in index.iter().enumerate() {
                    dx[src] += g[o];
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.rg(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            Op::Concat {
                inputs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if self.rg(v) {
                        let dv = slot(grads, v, outer * sz * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + sz) * inner];
                            add_into(&mut dv[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    }
                    off += sz;
                }
            }
            Op::Upsample2x { x } => {
                let x = *x;
                if !self.rg(x) {
                    return;
                }
                let xs = self.shape(x).to_vec();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
                let dx = slot(grads, x, planes * h * w);
                for p in 0..planes {
                    let src = &mut dx[p * h * w..(p + 1) * h * w];
                    let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::from_f64(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::from_f64(fx);
                            let gv = gp[oy * 2 * w + ox];
                            let one = T::one();
                            src[y0 * w + x0] += gv * (one - fy) * (one - fx);
                            src[y0 * w + x1] += gv * (one - fy) * fx;
                            src[y1 * w + x0] += gv * fy * (one - fx);
                            src[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.rg(x) {
                    let n = self.val(x).len();
                    let dx = slot(grads, x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                let x = *x;
                if self.rg(x) {
                    let n = self.val(x).len();
                    let gm = g[0] / T::from_usize(n);
                    let dx = slot(grads, x, n);
                    for d in dx.iter_mut() {
                        *d += gm;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
