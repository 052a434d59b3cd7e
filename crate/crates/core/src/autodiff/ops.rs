use std::sync::Arc;

use super::{kernels, BinaryKind, Broadcast, Op, Tape, UnaryKind, Var, GELU_A, GELU_C};
use crate::error::{Error, Result};
use crate::tensor::{strides, Real, Tensor};

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![T::zero(); plan.numel()];
        match kind {
            BinaryKind::Add => plan.for_each(|o, ia, ib| out[o] = av[ia] + bv[ib]),
            BinaryKind::Sub => plan.for_each(|o, ia, ib| out[o] = av[ia] - bv[ib]),
            BinaryKind::Mul => plan.for_each(|o, ia, ib| out[o] = av[ia] * bv[ib]),
            BinaryKind::Div => plan.for_each(|o, ia, ib| out[o] = av[ia] / bv[ib]),
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(plan.out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = self.val(x);
        let out: Vec<T> = match kind {
            UnaryKind::Gelu => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                xv.iter()
                    .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
                    .collect()
            }
            UnaryKind::Relu => xv.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryKind::Sigmoid => xv
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect(),
            UnaryKind::Log => xv.iter().map(|&v| v.ln()).collect(),
            UnaryKind::Exp => xv.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Scale(s) => {
                let s = T::from_f64(s);
                xv.iter().map(|&v| v * s).collect()
            }
            UnaryKind::AddScalar(s) => {
                let s = T::from_f64(s);
                xv.iter().map(|&v| v + s).collect()
            }
            UnaryKind::Clamp(lo, hi) => {
                let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
                xv.iter().map(|&v| v.max(lo).min(hi)).collect()
            }
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Unary { kind, x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::AddScalar(s), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. A rank-2 operand is
    /// shared across the other operand's batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_inner(a, b, None)
    }

    /// [`Tape::matmul`] that also adds its multiply-accumulate count to the
    /// counter named `tag`.
    pub fn matmul_tagged(&mut self, a: Var, b: Var, tag: &'static str) -> Result<Var> {
        self.matmul_inner(a, b, Some(tag))
    }

    fn matmul_inner(&mut self, a: Var, b: Var, tag: Option<&'static str>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape(format!("matmul {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let a_shared = ba.iter().product::<usize>() == 1 && bb.len() > ba.len();
        let b_shared = bb.iter().product::<usize>() == 1 && !a_shared;
        let batch_dims: Vec<usize> = if a_shared {
            bb.to_vec()
        } else if b_shared || ba == bb {
            ba.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch: usize = batch_dims.iter().product();
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if a_shared { 0 } else { bi * m * k };
            let bo = if b_shared { 0 } else { bi * k * n };
            kernels::gemm_nn(
                &av[ao..ao + m * k],
                &bv[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        if let Some(tag) = tag {
            self.count(tag, (batch * m * k * n) as u64);
        }
        let mut shape = batch_dims;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_shared,
            b_shared,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Numerically stable softmax along `axis`. `-inf` entries get weight 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.val(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mut mx = T::neg_infinity();
                for t in 0..len {
                    mx = mx.max(xv[base + t * inner]);
                }
                let mut s = T::zero();
                for t in 0..len {
                    let p = base + t * inner;
                    let e = (xv[p] - mx).exp();
                    out[p] = e;
                    s += e;
                }
                for t in 0..len {
                    out[base + t * inner] /= s;
                }
            }
        }
        let rg = self.rg(x);
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("nonempty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm over {shape:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let rows = xv.len() / c;
        let cf = T::from_usize(c);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Group normalization of a `[B, C, ...]` map with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::shape(format!("group_norm({groups} groups) on {shape:?}")));
        }
        let (bsz, ch) = (shape[0], shape[1]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape(format!("group_norm affine for {ch} channels")));
        }
        let hw: usize = shape[2..].iter().product();
        let cg = ch / groups;
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let nf = T::from_usize(cg * hw);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(bsz * groups);
        let mut rstd = Vec::with_capacity(bsz * groups);
        for b in 0..bsz {
            for gi in 0..groups {
                let span = &xv[(b * ch + gi * cg) * hw..(b * ch + (gi + 1) * cg) * hw];
                let mu = span.iter().copied().sum::<T>() / nf;
                let var = span.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                let rs = T::one() / (var + eps).sqrt();
                for c in gi * cg..(gi + 1) * cg {
                    let base = (b * ch + c) * hw;
                    for p in base..base + hw {
                        out[p] = (xv[p] - mu) * rs * gv[c] + bv[c];
                    }
                }
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Stride-1 cross-correlation with "same" padding. Kernels must be
    /// 1x1 or 3x3.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d input {xs:?}, weight {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || !(k == 1 || k == 3) {
            return Err(Error::config(format!(
                "unsupported conv kernel {}x{}; only 1x1 and 3x3",
                ws[2], ws[3]
            )));
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        if ws[1] != cin {
            return Err(Error::shape(format!("conv2d input {xs:?}, weight {ws:?}")));
        }
        if let Some(bias) = b {
            if self.shape(bias) != [cout] {
                return Err(Error::shape(format!("conv2d bias {:?}", self.shape(bias))));
            }
        }
        let hw = h * wd;
        let ck = cin * k * k;
        let (xv, wv) = (self.val(x), self.val(w));
        let mut out = vec![T::zero(); bsz * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ck * hw] };
        for bi in 0..bsz {
            let xb = &xv[bi * cin * hw..(bi + 1) * cin * hw];
            let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            if let Some(bias) = b {
                let bv = self.val(bias);
                for (o, &bo) in bv.iter().enumerate() {
                    ob[o * hw..(o + 1) * hw].fill(bo);
                }
            }
            if k == 1 {
                kernels::gemm_nn(wv, xb, ob, cout, ck, hw);
            } else {
                kernels::im2col(xb, cin, h, wd, k, &mut cols);
                kernels::gemm_nn(wv, &cols, ob, cout, ck, hw);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|v| self.rg(v));
        let op = Op::Conv2d { x, w, b, k };
        Ok(self.push(Tensor::new(vec![bsz, cout, h, wd], out)?, op, rg))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xv = self.val(x);
        if n != index.len() {
            return Err(Error::shape(format!(
                "gather of {} indices into {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", xv.len())));
        }
        let out: Vec<T> = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorder axes so output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let index = permute_index(&shape, perm)?;
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.gather(x, Arc::new(index), out_shape)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::shape(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                out.extend_from_slice(&self.val(v)[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer,
            sizes,
            inner,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Bilinear 2x upsample of `[B, C, H, W]` (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("upsample2x expects NCHW, got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ty, tx) = (kernels::bilinear_taps(h), kernels::bilinear_taps(w));
        let xv = self.val(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        let one = T::one();
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let top = src[y0 * w + x0] * (one - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (one - fx) + src[y1 * w + x1] * fx;
                    dst[oy * 2 * w + ox] = top * (one - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(x);
        let shape = vec![xs[0], xs[1], 2 * h, 2 * w];
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2x { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.val(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }
}

/// Source offsets realizing `permute(shape, perm)` as a gather.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
    }
    let in_str = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_str[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(index)
}
