//! PatchExpand / ConvFuse decoder and segmentation head.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Builder, Conv2d, GroupNorm, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::text::{StageFusion, TextProjector};

/// `C -> 2C` linear, each token's vector rearranged into a 2x2 block of
/// `C/2` channels, then LayerNorm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl PatchExpand {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, eps: f64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::config(format!("patch expand needs even channels, got {dim}")));
        }
        Ok(Self {
            expand: b.linear("expand", dim, 2 * dim, false)?,
            norm: b.layer_norm("norm", dim / 2, eps)?,
            dim,
        })
    }

    /// `[B, g*g, C]` to `[B, 4*g*g, C/2]`.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, y: Var, grid: usize) -> Result<Var> {
        let s = t.shape(y).to_vec();
        if s.len() != 3 || s[1] != grid * grid || s[2] != self.dim {
            return Err(Error::shape(format!(
                "patch expand: tokens {s:?} do not match grid {grid} x {grid} with {} channels",
                self.dim
            )));
        }
        let (b, half) = (s[0], self.dim / 2);
        let e = self.expand.forward(t, ps, y)?;
        let e = t.reshape(e, &[b, grid, grid, 2, 2, half])?;
        let e = t.permute(e, &[0, 1, 3, 2, 4, 5])?;
        let e = t.reshape(e, &[b, 4 * grid * grid, half])?;
        self.norm.forward(t, ps, e)
    }
}

/// `[S, U]` channel concat, then two conv3x3 + GroupNorm + ReLU layers.
#[derive(Clone, Debug)]
pub struct ConvFuse {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
}

impl ConvFuse {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv1: b.conv("conv1", 2 * dim, dim, 3)?,
            norm1: b.group_norm("norm1", dim, eps)?,
            conv2: b.conv("conv2", dim, dim, 3)?,
            norm2: b.group_norm("norm2", dim, eps)?,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, skip: Var, up: Var) -> Result<Var> {
        let x = t.concat(&[skip, up], 1)?;
        let x = self.conv1.forward(t, ps, x)?;
        let x = self.norm1.forward(t, ps, x)?;
        let x = t.relu(x);
        let x = self.conv2.forward(t, ps, x)?;
        let x = self.norm2.forward(t, ps, x)?;
        Ok(t.relu(x))
    }
}

/// ConvFuse, or plain addition when the block is ablated. The ablated form
/// keeps its parameters so every variant shares one checkpoint layout.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub conv: ConvFuse,
    pub enabled: bool,
}

impl Fuse {
    /// `skip`, `up`: `[B, C, h, w]` maps.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, skip: Var, up: Var) -> Result<Var> {
        let (a, b) = (t.shape(skip).to_vec(), t.shape(up).to_vec());
        if a != b {
            return Err(Error::shape(format!("fuse: skip {a:?} and upsampled {b:?} differ")));
        }
        if self.enabled {
            self.conv.forward(t, ps, skip, up)
        } else {
            t.add(skip, up)
        }
    }
}

/// One decoder level: expand from the coarser grid, fuse with the skip.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub expand: PatchExpand,
    pub fuse: Fuse,
    /// Cross-attention after fusion, only with decoder guidance on.
    pub guidance: Option<StageFusion>,
    /// Encoder stage whose skip map feeds this level.
    pub stage: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub bottleneck: Fuse,
    pub levels: Vec<DecoderLevel>,
    pub final_expands: Vec<PatchExpand>,
    pub head: Conv2d,
    /// Grid of the coarsest stage.
    pub grid: usize,
}

/// Token shapes along the decoder, coarsest first, plus the head output.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub chain: Vec<Vec<usize>>,
    pub logits: Var,
}

impl Decoder {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let stages = cfg.stages();
        let last = stages.len() - 1;
        let bottleneck = Fuse {
            conv: ConvFuse::build(&mut b.sub("bottleneck"), stages[last].channels, cfg.ln_eps)?,
            enabled: cfg.use_convfuse,
        };
        let mut levels = Vec::new();
        for s in (0..last).rev() {
            let c = stages[s].channels;
            let mut lb = b.sub(&format!("level{}", s + 1));
            let expand = PatchExpand::build(&mut lb.sub("expand"), 2 * c, cfg.ln_eps)?;
            let fuse = Fuse {
                conv: ConvFuse::build(&mut lb.sub("fuse"), c, cfg.ln_eps)?,
                enabled: cfg.use_convfuse,
            };
            let guidance = if cfg.decoder_guidance && cfg.use_text {
                Some(StageFusion::build(&mut lb.sub("guidance"), c, cfg)?)
            } else {
                None
            };
            levels.push(DecoderLevel {
                expand,
                fuse,
                guidance,
                stage: s,
            });
        }
        let mut c = stages[0].channels;
        let mut final_expands = Vec::new();
        for i in 0..cfg.final_expands() {
            final_expands.push(PatchExpand::build(&mut b.sub(&format!("final{}", i + 1)), c, cfg.ln_eps)?);
            c /= 2;
        }
        let head = b.conv("head", c, 1, 1)?;
        Ok(Self {
            bottleneck,
            levels,
            final_expands,
            head,
            grid: stages[last].grid,
        })
    }

    /// `tokens`: guided stage tokens; `skips`: encoder skip maps. Returns
    /// `[B, 1, H, W]` logits.
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        ps: &ParamStore<T>,
        tokens: &[Var],
        skips: &[Var],
        text: Option<(&TextProjector, Var)>,
    ) -> Result<Decoded> {
        let last = tokens.len() - 1;
        let mut grid = self.grid;
        let mut chain = Vec::new();
        let z = tokens_to_map(t, tokens[last], grid, grid)?;
        let fused = self.bottleneck.forward(t, ps, skips[last], z)?;
        let mut y = map_to_tokens(t, fused)?;
        chain.push(t.shape(y).to_vec());
        for level in &self.levels {
            let u = level.expand.forward(t, ps, y, grid)?;
            grid *= 2;
            let u = tokens_to_map(t, u, grid, grid)?;
            let skip = tokens_to_map(t, tokens[level.stage], grid, grid)?;
            let f = level.fuse.forward(t, ps, skip, u)?;
            y = map_to_tokens(t, f)?;
            if let (Some(g), Some((proj, text))) = (&level.guidance, text) {
                let txt = proj.project(t, ps, text, level.stage)?;
                y = g.forward(t, ps, y, txt)?.0;
            }
            chain.push(t.shape(y).to_vec());
        }
        for e in &self.final_expands {
            y = e.forward(t, ps, y, grid)?;
            grid *= 2;
            chain.push(t.shape(y).to_vec());
        }
        let y0 = tokens_to_map(t, y, grid, grid)?;
        let up = t.upsample2x(y0)?;
        let logits = self.head.forward(t, ps, up)?;
        Ok(Decoded { chain, logits })
    }
}
