//! Hierarchical shifted-window transformer encoder.
//!
//! Token sequences are `[B, N, C]` with `N = grid * grid` in row-major grid
//! order. Windows are `[B * nW, M * M, C]`, ordered by batch, window row,
//! window column.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, StageSpec};
use crate::error::{Error, Result};
use crate::nn::{tokens_to_map, Builder, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Gather offsets for `roll(x, -shift)` followed by window partition of a
/// `[B, grid, grid, C]` token grid.
pub fn partition_index(batch: usize, grid: usize, channels: usize, window: usize, shift: usize) -> Vec<usize> {
    let nw = grid / window;
    let mut idx = Vec::with_capacity(batch * grid * grid * channels);
    for b in 0..batch {
        for wy in 0..nw {
            for wx in 0..nw {
                for iy in 0..window {
                    for ix in 0..window {
                        let y = (wy * window + iy + shift) % grid;
                        let x = (wx * window + ix + shift) % grid;
                        let base = ((b * grid + y) * grid + x) * channels;
                        idx.extend(base..base + channels);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`partition_index`].
pub fn reverse_index(batch: usize, grid: usize, channels: usize, window: usize, shift: usize) -> Vec<usize> {
    let fwd = partition_index(batch, grid, channels, window, shift);
    let mut inv = vec![0; fwd.len()];
    for (slot, &src) in fwd.iter().enumerate() {
        inv[src] = slot;
    }
    inv
}

fn check_window(grid: usize, window: usize) -> Result<()> {
    if window == 0 || grid % window != 0 {
        return Err(Error::config(format!(
            "grid {grid} is not divisible by window {window}"
        )));
    }
    Ok(())
}

/// `[B, N, C]` tokens to `[B * nW, M*M, C]` windows, after a cyclic shift of
/// `(-shift, -shift)`.
pub fn window_partition<T: Real>(t: &mut Tape<T>, x: Var, grid: usize, window: usize, shift: usize) -> Result<Var> {
    check_window(grid, window)?;
    let s = t.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid * grid {
        return Err(Error::shape(format!("window_partition: {s:?} is not a {grid}x{grid} grid")));
    }
    let (b, c) = (s[0], s[2]);
    let nw = (grid / window).pow(2);
    let idx = partition_index(b, grid, c, window, shift);
    t.gather(x, Arc::new(idx), vec![b * nw, window * window, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Real>(t: &mut Tape<T>, w: Var, batch: usize, grid: usize, window: usize, shift: usize) -> Result<Var> {
    check_window(grid, window)?;
    let c = *t.shape(w).last().expect("rank 3");
    let idx = reverse_index(batch, grid, c, window, shift);
    t.gather(w, Arc::new(idx), vec![batch, grid * grid, c])
}

/// Additive `0 / -inf` mask for shifted windows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub windows: usize,
    pub size: usize,
    masked: Vec<bool>,
}

impl AttentionMask {
    pub fn is_masked(&self, w: usize, i: usize, j: usize) -> bool {
        self.masked[(w * self.size + i) * self.size + j]
    }

    pub fn masked_count(&self, w: usize) -> usize {
        let n = self.size * self.size;
        self.masked[w * n..(w + 1) * n].iter().filter(|&&m| m).count()
    }

    pub fn value(&self, w: usize, i: usize, j: usize) -> f64 {
        if self.is_masked(w, i, j) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    /// Broadcastable `[1, nW, 1, M*M, M*M]` tensor.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .masked
            .iter()
            .map(|&m| if m { T::neg_infinity() } else { T::zero() })
            .collect();
        Tensor::new(vec![1, self.windows, 1, self.size, self.size], data).expect("consistent mask")
    }
}

/// Region label of every token of an `h x w` grid before the shift. Each
/// axis splits into `[0, s)`, `[s, n - M + s)`, `[n - M + s, n)`.
pub fn region_labels(h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if shift == 0 || i < shift {
            0
        } else if i < n - window + shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(band(y, h) * 3 + band(x, w));
        }
    }
    labels
}

/// Mask for windows of the `(-shift, -shift)`-rolled grid: token pairs from
/// different pre-shift regions cannot attend to each other.
pub fn build_shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<AttentionMask> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::config(format!("{h}x{w} grid is not divisible by window {window}")));
    }
    let labels = region_labels(h, w, window, shift);
    let (nwy, nwx) = (h / window, w / window);
    let size = window * window;
    let mut masked = Vec::with_capacity(nwy * nwx * size * size);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let win: Vec<usize> = (0..size)
                .map(|i| {
                    let y = (wy * window + i / window + shift) % h;
                    let x = (wx * window + i % window + shift) % w;
                    labels[y * w + x]
                })
                .collect();
            for &li in &win {
                for &lj in &win {
                    masked.push(li != lj);
                }
            }
        }
    }
    Ok(AttentionMask {
        windows: nwy * nwx,
        size,
        masked,
    })
}

/// Index of every `(i, j)` token pair of an `M x M` window into the
/// `(2M-1)^2` relative-offset table.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) + window - 1 - (j / window);
            let dx = (i % window) + window - 1 - (j % window);
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Learned per-head bias indexed by relative offset.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: usize,
    pub window: usize,
    pub heads: usize,
    index: Arc<Vec<usize>>,
}

impl RelPosBias {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, window: usize, heads: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let table = b.weight("rel_pos_table", &[span * span, heads])?;
        let rel = relative_position_index(window);
        let mut index = Vec::with_capacity(heads * rel.len());
        for h in 0..heads {
            index.extend(rel.iter().map(|&r| r * heads + h));
        }
        Ok(Self {
            table,
            window,
            heads,
            index: Arc::new(index),
        })
    }

    /// `[1, heads, M*M, M*M]` bias.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>) -> Result<Var> {
        let table = t.param(ps, self.table);
        let n = self.window * self.window;
        t.gather(table, self.index.clone(), vec![1, self.heads, n, n])
    }
}

/// Multi-head self-attention inside each window, with relative position
/// bias and an optional shift mask.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub bias: RelPosBias,
    pub heads: usize,
}

impl WindowAttention {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, window: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide {dim} channels")));
        }
        Ok(Self {
            q: b.linear("q", dim, dim, true)?,
            k: b.linear("k", dim, dim, true)?,
            v: b.linear("v", dim, dim, true)?,
            proj: b.linear("proj", dim, dim, true)?,
            bias: RelPosBias::build(b, window, heads)?,
            heads,
        })
    }

    /// `windows`: `[B * nW, M*M, C]`; `mask`: `[1, nW, 1, M*M, M*M]`.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        ps: &ParamStore<T>,
        windows: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let s = t.shape(windows).to_vec();
        let (bw, n, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, c / self.heads);
        let q = self.q.forward(t, ps, windows)?;
        let q = t.reshape(q, &[bw, n, h, d])?;
        let q = t.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(t, ps, windows)?;
        let k = t.reshape(k, &[bw, n, h, d])?;
        let kt = t.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(t, ps, windows)?;
        let v = t.reshape(v, &[bw, n, h, d])?;
        let v = t.permute(v, &[0, 2, 1, 3])?;

        let scores = t.matmul_tagged(q, kt, "attn_score")?;
        let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
        let bias = self.bias.forward(t, ps)?;
        let mut scores = t.add(scores, bias)?;
        if let Some(mask) = mask {
            let nw = t.shape(mask)[1];
            let r = t.reshape(scores, &[bw / nw, nw, h, n, n])?;
            let r = t.add(r, mask)?;
            scores = t.reshape(r, &[bw, h, n, n])?;
        }
        let attn = t.softmax(scores, 3)?;
        let out = t.matmul_tagged(attn, v, "attn_aggregate")?;
        let out = t.permute(out, &[0, 2, 1, 3])?;
        let out = t.reshape(out, &[bw, n, c])?;
        self.proj.forward(t, ps, out)
    }
}

/// `Z = Z + (S)W-MSA(LN(Z)); Z = Z + MLP(LN(Z))`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
    mask: Option<AttentionMask>,
}

impl SwinBlock {
    /// Even `index` builds a plain windowed block, odd a shifted one.
    pub fn build<T: Real>(b: &mut Builder<'_, T>, spec: &StageSpec, index: usize, cfg: &ModelConfig) -> Result<Self> {
        let c = spec.channels;
        let shift = if index % 2 == 1 { spec.shift } else { 0 };
        let mask = if shift > 0 {
            Some(build_shift_mask(spec.grid, spec.grid, spec.window, shift)?)
        } else {
            None
        };
        Ok(Self {
            norm1: b.layer_norm("norm1", c, cfg.ln_eps)?,
            attn: WindowAttention::build(&mut b.sub("attn"), c, spec.window, spec.heads)?,
            norm2: b.layer_norm("norm2", c, cfg.ln_eps)?,
            mlp: Mlp::build(b, "mlp", c, cfg.mlp_ratio)?,
            grid: spec.grid,
            window: spec.window,
            shift,
            mask,
        })
    }

    pub fn mask(&self) -> Option<&AttentionMask> {
        self.mask.as_ref()
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let batch = t.shape(x)[0];
        let h = self.norm1.forward(t, ps, x)?;
        let w = window_partition(t, h, self.grid, self.window, self.shift)?;
        let mask = self.mask.as_ref().map(|m| t.constant(m.tensor()));
        let a = self.attn.forward(t, ps, w, mask)?;
        let a = window_reverse(t, a, batch, self.grid, self.window, self.shift)?;
        let x = t.add(x, a)?;
        let h = self.norm2.forward(t, ps, x)?;
        let h = self.mlp.forward(t, ps, h)?;
        t.add(x, h)
    }
}

/// Non-overlapping `P x P` patches, linearly projected then normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(Self {
            proj: b.linear("proj", cfg.in_channels * p * p, cfg.embed_dim, true)?,
            norm: b.layer_norm("norm", cfg.embed_dim, cfg.ln_eps)?,
            patch: p,
        })
    }

    /// `[B, Cin, H, W]` image to `[B, (H/P)(W/P), C]` tokens.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let p = self.patch;
        if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::config(format!(
                "image {s:?} is not divisible into {p}x{p} patches"
            )));
        }
        let (b, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
        let r = t.reshape(x, &[b, c, gh, p, gw, p])?;
        let r = t.permute(r, &[0, 2, 4, 1, 3, 5])?;
        let r = t.reshape(r, &[b, gh * gw, c * p * p])?;
        let z = self.proj.forward(t, ps, r)?;
        self.norm.forward(t, ps, z)
    }
}

/// 2x2 neighborhood concat, LayerNorm, `4C -> 2C` linear.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            norm: b.layer_norm("norm", 4 * dim, eps)?,
            reduce: b.linear("reduction", 4 * dim, 2 * dim, false)?,
        })
    }

    /// Gather offsets producing `[B, (g/2)^2, 4C]`; neighbors ordered
    /// (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
    pub fn neighborhood_index(batch: usize, grid: usize, c: usize) -> Vec<usize> {
        let half = grid / 2;
        let mut idx = Vec::with_capacity(batch * grid * grid * c);
        for b in 0..batch {
            for y in 0..half {
                for x in 0..half {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let base = ((b * grid + 2 * y + dy) * grid + 2 * x + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        idx
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, x: Var, grid: usize) -> Result<Var> {
        let s = t.shape(x).to_vec();
        if grid % 2 != 0 || s.len() != 3 || s[1] != grid * grid {
            return Err(Error::config(format!(
                "patch merge needs an even grid, got {grid} for tokens {s:?}"
            )));
        }
        let (b, c) = (s[0], s[2]);
        let idx = Self::neighborhood_index(b, grid, c);
        let m = t.gather(x, Arc::new(idx), vec![b, grid * grid / 4, 4 * c])?;
        let m = self.norm.forward(t, ps, m)?;
        self.reduce.forward(t, ps, m)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
    pub spec: StageSpec,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

/// Per-stage tokens `Z_s` and their `[B, C_s, H_s, W_s]` skip maps.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Vec<Var>,
    pub skips: Vec<Var>,
}

impl Encoder {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let embed = PatchEmbed::build(&mut b.sub("patch_embed"), cfg)?;
        let mut stages = Vec::new();
        for (s, spec) in cfg.stages().into_iter().enumerate() {
            let mut sb = b.sub(&format!("stage{}", s + 1));
            let merge = if s == 0 {
                None
            } else {
                Some(PatchMerge::build(&mut sb.sub("merge"), spec.channels / 2, cfg.ln_eps)?)
            };
            let blocks = (0..spec.depth)
                .map(|i| SwinBlock::build(&mut sb.sub(&format!("block{i}")), &spec, i, cfg))
                .collect::<Result<_>>()?;
            stages.push(EncoderStage { merge, blocks, spec });
        }
        Ok(Self { embed, stages })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, image: Var) -> Result<Encoded> {
        let mut z = self.embed.forward(t, ps, image)?;
        let mut tokens = Vec::with_capacity(self.stages.len());
        let mut skips = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                z = m.forward(t, ps, z, self.stages[s - 1].spec.grid)?;
            }
            for blk in &stage.blocks {
                z = blk.forward(t, ps, z)?;
            }
            tokens.push(z);
            skips.push(tokens_to_map(t, z, stage.spec.grid, stage.spec.grid)?);
        }
        Ok(Encoded { tokens, skips })
    }
}

/// Score plus aggregation MACs of windowed self-attention over one stage:
/// `2 * B * N * M^2 * C`.
pub fn window_attention_macs(batch: usize, grid: usize, window: usize, channels: usize) -> u64 {
    2 * (batch * grid * grid * window * window * channels) as u64
}
