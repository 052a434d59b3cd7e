//! The full text-guided U-Net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::swin::{Encoded, Encoder};
use crate::tensor::Real;
use crate::text::{apply_guidance, Guidance, Guided};

/// Module layout; parameter values live in a separate [`ParamStore`] so the
/// same layout drives 32- and 64-bit runs.
#[derive(Clone, Debug)]
pub struct SwinTextUNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub guidance: Option<Guidance>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub encoded: Encoded,
    pub guided: Guided,
    /// Decoder token shapes, bottleneck first.
    pub chain: Vec<Vec<usize>>,
    /// `[B, 1, H, W]`.
    pub logits: Var,
    pub probs: Var,
}

impl SwinTextUNet {
    /// Layout plus freshly initialized parameters. Initialization depends only
    /// on `cfg` and `seed`.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut rng, cfg.init_std);
        let encoder = Encoder::build(&mut b.sub("encoder"), cfg)?;
        let guidance = if cfg.use_text {
            Some(Guidance::build(&mut b.sub("guidance"), cfg)?)
        } else {
            None
        };
        let decoder = Decoder::build(&mut b.sub("decoder"), cfg)?;
        let model = Self {
            cfg: cfg.clone(),
            encoder,
            guidance,
            decoder,
        };
        Ok((model, ps))
    }

    /// Layout only, for loading parameters from a checkpoint.
    pub fn layout(cfg: &ModelConfig) -> Result<(Self, Vec<(String, Vec<usize>)>)> {
        let (m, ps) = Self::new::<f32>(cfg, 0)?;
        let shapes = ps.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        Ok((m, shapes))
    }

    /// `image`: `[B, C_in, H, W]`; `text`: `[B, 1, D_t]`, required when text
    /// guidance is on and ignored otherwise.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, ps: &ParamStore<T>, image: Var, text: Option<Var>) -> Result<ModelOutput> {
        let s = t.shape(image).to_vec();
        let h = self.cfg.image_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != h || s[3] != h {
            return Err(Error::shape(format!(
                "model expects [B, {}, {h}, {h}] images, got {s:?}",
                self.cfg.in_channels
            )));
        }
        let encoded = self.encoder.forward(t, ps, image)?;
        if let (Some(_), Some(txt)) = (&self.guidance, text) {
            let ts = t.shape(txt).to_vec();
            if ts != [s[0], 1, self.cfg.text_dim] {
                return Err(Error::shape(format!(
                    "text tokens {ts:?}, expected [{}, 1, {}]",
                    s[0], self.cfg.text_dim
                )));
            }
        }
        let guided = apply_guidance(t, ps, self.guidance.as_ref(), &encoded.tokens, text)?;
        let text_ctx = match (&self.guidance, text) {
            (Some(g), Some(txt)) => Some((&g.projector, txt)),
            _ => None,
        };
        let decoded = self
            .decoder
            .forward(t, ps, &guided.tokens, &encoded.skips, text_ctx)?;
        let probs = t.sigmoid(decoded.logits);
        Ok(ModelOutput {
            encoded,
            guided,
            chain: decoded.chain,
            logits: decoded.logits,
            probs,
        })
    }
}

/// Parameter counts grouped by top-level module.
pub fn param_breakdown<T: Real>(ps: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for p in ps.iter() {
        let group = p.name.split('.').next().unwrap_or("").to_string();
        let n = p.value.numel();
        match out.iter_mut().find(|(g, _)| *g == group) {
            Some((_, c)) => *c += n,
            None => out.push((group, n)),
        }
    }
    out
}
