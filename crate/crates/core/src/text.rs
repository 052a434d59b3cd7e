//! Text embeddings and text-guided fusion.
//!
//! Embeddings come from a CTXE file or from a deterministic stub; either way
//! they enter the tape as constants, so only the projector and fusion blocks
//! ever train.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::binio::{put_f32s, put_str, put_u32, Reader};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CTXE_MAGIC: &[u8; 4] = b"CTXE";
pub const CTXE_VERSION: u32 = 1;

/// Trim, lowercase, collapse runs of whitespace to one space.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `(0, 1]`, from the top 53 bits.
    fn next_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
    }

    /// Box-Muller pair.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open();
        let u2 = self.next_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        (r * th.cos(), r * th.sin())
    }
}

/// Pooled prompt embedding; its token form is `[1, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub prompt: String,
    pub pooled: Vec<f64>,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.pooled.len()
    }

    pub fn tokens<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, self.dim()], &self.pooled).expect("consistent shape")
    }
}

/// Stack embeddings into a `[B, 1, dim]` text-token batch.
pub fn text_batch<T: Real>(embs: &[&TextEmbedding]) -> Result<Tensor<T>> {
    let dim = embs.first().map(|e| e.dim()).unwrap_or(0);
    if embs.iter().any(|e| e.dim() != dim) {
        return Err(Error::shape("text embeddings of different widths in one batch"));
    }
    let data: Vec<f64> = embs.iter().flat_map(|e| e.pooled.iter().copied()).collect();
    Tensor::from_f64(vec![embs.len(), 1, dim], &data)
}

/// Deterministic unit-norm stand-in for a frozen text encoder.
pub fn stub_encode(prompt: &str, dim: usize, seed: u64) -> Result<TextEmbedding> {
    let norm = normalize_prompt(prompt);
    if norm.is_empty() {
        return Err(Error::Usage("empty prompt".into()));
    }
    if dim == 0 {
        return Err(Error::config("text_dim must be positive"));
    }
    let mut rng = SplitMix64(fnv1a64(norm.as_bytes()) ^ seed);
    let mut v = Vec::with_capacity(dim + 1);
    while v.len() < dim {
        let (a, b) = rng.normal_pair();
        v.push(a);
        v.push(b);
    }
    v.truncate(dim);
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= len);
    Ok(TextEmbedding {
        prompt: norm,
        pooled: v,
    })
}

/// Prompt -> raw embedding map backed by CTXE data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    records: Vec<(String, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[(String, Vec<f32>)] {
        &self.records
    }

    /// Adds a record under the normalized prompt.
    pub fn insert(&mut self, prompt: &str, values: Vec<f32>) -> Result<()> {
        let key = normalize_prompt(prompt);
        if key.is_empty() {
            return Err(Error::Usage("empty prompt".into()));
        }
        if values.len() != self.dim {
            return Err(Error::shape(format!(
                "embedding for {key:?} has {} values, table dim is {}",
                values.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Usage(format!("duplicate prompt {key:?}")));
        }
        self.index.insert(key.clone(), self.records.len());
        self.records.push((key, values));
        Ok(())
    }

    pub fn get(&self, prompt: &str) -> Option<&[f32]> {
        self.index
            .get(&normalize_prompt(prompt))
            .map(|&i| self.records[i].1.as_slice())
    }

    /// Looks up `prompt`, failing with the closest stored keys.
    pub fn resolve(&self, prompt: &str) -> Result<TextEmbedding> {
        let key = normalize_prompt(prompt);
        match self.index.get(&key) {
            Some(&i) => Ok(TextEmbedding {
                prompt: key,
                pooled: self.records[i].1.iter().map(|&v| v as f64).collect(),
            }),
            None => Err(Error::Resolution {
                nearest: self.nearest(&key, 3),
                prompt: key,
            }),
        }
    }

    pub fn nearest(&self, key: &str, k: usize) -> Vec<String> {
        let mut scored: Vec<(usize, &str)> = self
            .records
            .iter()
            .map(|(p, _)| (edit_distance(key, p), p.as_str()))
            .collect();
        scored.sort();
        scored.into_iter().take(k).map(|(_, p)| p.to_string()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CTXE_MAGIC);
        put_u32(&mut out, CTXE_VERSION);
        put_u32(&mut out, self.records.len() as u32);
        put_u32(&mut out, self.dim as u32);
        for (p, v) in &self.records {
            put_str(&mut out, p);
            put_f32s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "CTXE");
        r.magic(CTXE_MAGIC)?;
        let at = r.pos();
        let version = r.u32()?;
        if version != CTXE_VERSION {
            return Err(Error::format(at, format!("unsupported CTXE version {version}")));
        }
        let count = r.u32()? as usize;
        let at = r.pos();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::format(at, "embedding dim is 0"));
        }
        let mut table = Self::new(dim);
        for _ in 0..count {
            let at = r.pos();
            let prompt = r.string()?;
            let values = r.f32s(dim)?;
            if prompt != normalize_prompt(&prompt) {
                return Err(Error::format(at, format!("prompt {prompt:?} is not normalized")));
            }
            table
                .insert(&prompt, values)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        r.finish()?;
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (ca != cb) as usize)
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Where prompt embeddings come from.
#[derive(Clone, Debug)]
pub enum TextSource {
    Stub { dim: usize, seed: u64 },
    File { table: Arc<EmbeddingTable>, l2_normalize: bool },
}

impl TextSource {
    pub fn dim(&self) -> usize {
        match self {
            TextSource::Stub { dim, .. } => *dim,
            TextSource::File { table, .. } => table.dim(),
        }
    }

    pub fn resolve(&self, prompt: &str) -> Result<TextEmbedding> {
        match self {
            TextSource::Stub { dim, seed } => stub_encode(prompt, *dim, *seed),
            TextSource::File { table, l2_normalize } => {
                let mut e = table.resolve(prompt)?;
                if *l2_normalize {
                    let len = e.pooled.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if len > 0.0 {
                        e.pooled.iter_mut().for_each(|x| *x /= len);
                    }
                }
                Ok(e)
            }
        }
    }
}

/// `W_t: D_t -> D_v` plus one `D_v -> C_s` adapter per fusion width.
#[derive(Clone, Debug)]
pub struct TextProjector {
    pub w_t: Linear,
    pub adapters: Vec<Linear>,
}

impl TextProjector {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, text_dim: usize, visual_dim: usize, widths: &[usize]) -> Result<Self> {
        let w_t = b.linear("w_t", text_dim, visual_dim, false)?;
        let adapters = widths
            .iter()
            .enumerate()
            .map(|(s, &c)| b.linear(&format!("adapter{}", s + 1), visual_dim, c, false))
            .collect::<Result<_>>()?;
        Ok(Self { w_t, adapters })
    }

    /// `[B, 1, D_t]` text tokens to `[B, 1, C_s]`.
    pub fn project<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, text: Var, stage: usize) -> Result<Var> {
        let z = self.w_t.forward(t, ps, text)?;
        let adapter = self
            .adapters
            .get(stage)
            .ok_or_else(|| Error::config(format!("no text adapter for stage {}", stage + 1)))?;
        adapter.forward(t, ps, z)
    }
}

/// Heads for a cross-attention block at width `c`: `c / 32` rounded down to a
/// divisor of `c`, at least one.
pub fn cross_attention_heads(c: usize) -> usize {
    (1..=(c / 32).max(1)).rev().find(|h| c % h == 0).unwrap_or(1)
}

/// Vision queries attend to text keys/values, then
/// `Z' = LN(Z + attn)`, `Z'' = Z' + MLP(LN(Z'))`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

/// Block output plus the `[B, heads, N, T]` attention weights.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionOutput {
    pub tokens: Var,
    pub weights: Var,
}

impl CrossAttention {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            q: b.linear("q", dim, dim, true)?,
            k: b.linear("k", dim, dim, true)?,
            v: b.linear("v", dim, dim, true)?,
            proj: b.linear("proj", dim, dim, true)?,
            norm1: b.layer_norm("norm1", dim, cfg.ln_eps)?,
            norm2: b.layer_norm("norm2", dim, cfg.ln_eps)?,
            mlp: Mlp::build(b, "mlp", dim, cfg.mlp_ratio)?,
            heads: cross_attention_heads(dim),
        })
    }

    /// `z`: `[B, N, C]`; `text`: `[B, T, C]`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, z: Var, text: Var) -> Result<CrossAttentionOutput> {
        let zs = t.shape(z).to_vec();
        let ts = t.shape(text).to_vec();
        if zs.len() != 3 || ts.len() != 3 || zs[0] != ts[0] || zs[2] != ts[2] {
            return Err(Error::shape(format!(
                "cross-attention: vision {zs:?} and text {ts:?} must be [B, N, C] and [B, T, C]"
            )));
        }
        let (b, n, c, nt) = (zs[0], zs[1], zs[2], ts[1]);
        let (h, d) = (self.heads, c / self.heads);
        let q = self.q.forward(t, ps, z)?;
        let q = t.reshape(q, &[b, n, h, d])?;
        let q = t.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(t, ps, text)?;
        let k = t.reshape(k, &[b, nt, h, d])?;
        let kt = t.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(t, ps, text)?;
        let v = t.reshape(v, &[b, nt, h, d])?;
        let v = t.permute(v, &[0, 2, 1, 3])?;
        let scores = t.matmul_tagged(q, kt, "xattn_score")?;
        let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = t.softmax(scores, 3)?;
        let mixed = t.matmul_tagged(weights, v, "xattn_aggregate")?;
        let mixed = t.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = t.reshape(mixed, &[b, n, c])?;
        let attn = self.proj.forward(t, ps, mixed)?;
        let r = t.add(z, attn)?;
        let z1 = self.norm1.forward(t, ps, r)?;
        let h2 = self.norm2.forward(t, ps, z1)?;
        let h2 = self.mlp.forward(t, ps, h2)?;
        let tokens = t.add(z1, h2)?;
        Ok(CrossAttentionOutput { tokens, weights })
    }
}

/// Concatenation baseline: text broadcast to every token, `[Z, text]`, then a
/// `2C -> C` linear.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub reduce: Linear,
}

impl ConcatFusion {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            reduce: b.linear("reduce", 2 * dim, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, z: Var, text: Var) -> Result<Var> {
        let zs = t.shape(z).to_vec();
        let ts = t.shape(text).to_vec();
        if ts.len() != 3 || ts[0] != zs[0] || ts[1] != 1 || ts[2] != zs[2] {
            return Err(Error::shape(format!(
                "concat fusion: text {ts:?} does not match tokens {zs:?}"
            )));
        }
        let (b, n, c) = (zs[0], zs[1], zs[2]);
        let mut idx = Vec::with_capacity(b * n * c);
        for bi in 0..b {
            for _ in 0..n {
                idx.extend(bi * c..(bi + 1) * c);
            }
        }
        let tiled = t.gather(text, Arc::new(idx), vec![b, n, c])?;
        let cat = t.concat(&[z, tiled], 2)?;
        self.reduce.forward(t, ps, cat)
    }
}

#[derive(Clone, Debug)]
pub enum StageFusion {
    CrossAttention(CrossAttention),
    Concat(ConcatFusion),
}

impl StageFusion {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(if cfg.use_cross_attention {
            StageFusion::CrossAttention(CrossAttention::build(&mut b.sub("xattn"), dim, cfg)?)
        } else {
            StageFusion::Concat(ConcatFusion::build(&mut b.sub("concat"), dim)?)
        })
    }

    /// Fused tokens, plus attention weights in cross-attention mode.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, z: Var, text: Var) -> Result<(Var, Option<Var>)> {
        match self {
            StageFusion::CrossAttention(x) => {
                let o = x.forward(t, ps, z, text)?;
                Ok((o.tokens, Some(o.weights)))
            }
            StageFusion::Concat(c) => Ok((c.forward(t, ps, z, text)?, None)),
        }
    }
}

/// Projector plus one fusion block per encoder stage.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub projector: TextProjector,
    pub stages: Vec<StageFusion>,
}

#[derive(Clone, Debug, Default)]
pub struct Guided {
    pub tokens: Vec<Var>,
    pub weights: Vec<Option<Var>>,
}

impl Guidance {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let widths: Vec<usize> = (0..cfg.num_stages()).map(|s| cfg.stage_channels(s)).collect();
        let projector = TextProjector::build(&mut b.sub("text_proj"), cfg.text_dim, cfg.visual_dim(), &widths)?;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(s, &c)| StageFusion::build(&mut b.sub(&format!("stage{}", s + 1)), c, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { projector, stages })
    }

    /// Fuse the projected text into every stage's tokens.
    pub fn apply<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, tokens: &[Var], text: Var) -> Result<Guided> {
        let mut out = Guided::default();
        for (s, (&z, fusion)) in tokens.iter().zip(&self.stages).enumerate() {
            let txt = self.projector.project(t, ps, text, s)?;
            let (z, w) = fusion.forward(t, ps, z, txt)?;
            out.tokens.push(z);
            out.weights.push(w);
        }
        Ok(out)
    }
}

/// Guided tokens; with no guidance the inputs are returned as they are.
pub fn apply_guidance<T: Real>(
    t: &mut Tape<T>,
    ps: &ParamStore<T>,
    guidance: Option<&Guidance>,
    tokens: &[Var],
    text: Option<Var>,
) -> Result<Guided> {
    match (guidance, text) {
        (Some(g), Some(text)) => g.apply(t, ps, tokens, text),
        (Some(_), None) => Err(Error::Usage("text guidance is on but no text was given".into())),
        (None, _) => Ok(Guided {
            tokens: tokens.to_vec(),
            weights: vec![None; tokens.len()],
        }),
    }
}
