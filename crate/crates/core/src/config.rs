//! Run configuration and its flat `key: value` document form.
//!
//! ```text
//! # toy model
//! image_size: 64
//! embed_dim: 16
//! depths: 2, 2, 2, 2
//! use_text: false
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One encoder stage, derived from [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    /// Side of the square token grid.
    pub grid: usize,
    /// Effective window side, `min(window, grid)`.
    pub window: usize,
    /// Cyclic shift used by odd blocks; zero when the window covers the grid.
    pub shift: usize,
}

impl StageSpec {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    /// Text alignment width; 0 means the last stage's channel count.
    pub visual_dim: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub use_text: bool,
    pub use_cross_attention: bool,
    pub use_convfuse: bool,
    pub decoder_guidance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            window: 7,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
            text_dim: 512,
            visual_dim: 0,
            ln_eps: 1e-5,
            init_std: 0.02,
            use_text: true,
            use_cross_attention: true,
            use_convfuse: true,
            decoder_guidance: false,
        }
    }
}

impl ModelConfig {
    /// 64x64 inputs, four stages on grids 16, 8, 4, 2.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            window: 4,
            embed_dim: 16,
            heads: vec![1, 2, 4, 8],
            text_dim: 64,
            ..Self::default()
        }
    }

    /// 16x16 inputs, three stages on grids 4, 2, 1; small enough for
    /// exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            window: 2,
            embed_dim: 4,
            depths: vec![2, 2, 2],
            heads: vec![1, 1, 2],
            mlp_ratio: 2,
            text_dim: 6,
            init_std: 0.5,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn visual_dim(&self) -> usize {
        if self.visual_dim == 0 {
            self.stage_channels(self.num_stages() - 1)
        } else {
            self.visual_dim
        }
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        let g1 = self.image_size / self.patch_size.max(1);
        (0..self.num_stages())
            .map(|s| {
                let grid = g1 >> s;
                let window = self.window.min(grid);
                StageSpec {
                    channels: self.stage_channels(s),
                    depth: self.depths[s],
                    heads: self.heads[s],
                    grid,
                    window,
                    shift: if window == grid { 0 } else { window / 2 },
                }
            })
            .collect()
    }

    /// Number of PatchExpand steps after the stage-1 fusion that bring the
    /// decoder to half the input resolution.
    pub fn final_expands(&self) -> usize {
        self.patch_size.trailing_zeros() as usize - 1
    }

    /// Depth variant: truncate (fewer stages) or append stages with halved
    /// patch size (more stages), relative to the current layout.
    pub fn with_stages(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("stages must be at least 1"));
        }
        while self.depths.len() > n {
            self.depths.pop();
            self.heads.pop();
        }
        while self.depths.len() < n {
            if self.patch_size <= 2 {
                return Err(Error::config(format!(
                    "cannot add stage {}: patch size {} cannot be halved further",
                    self.depths.len() + 1,
                    self.patch_size
                )));
            }
            self.patch_size /= 2;
            let last = *self.heads.last().unwrap_or(&1);
            self.depths.push(2);
            self.heads.push(last * 2);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages();
        if s == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.heads.len() != s {
            return Err(Error::config(format!(
                "depths has {s} entries but heads has {}",
                self.heads.len()
            )));
        }
        if self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return Err(Error::config(format!(
                "patch_size {} must be a power of two >= 2",
                self.patch_size
            )));
        }
        let unit = self.patch_size << (s - 1);
        if self.image_size == 0 || self.image_size % unit != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size*2^(stages-1) = {}*2^{} = {unit}",
                self.image_size,
                self.patch_size,
                s - 1
            )));
        }
        if self.window == 0 || self.embed_dim == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("window, embed_dim, in_channels and mlp_ratio must be positive"));
        }
        if self.text_dim == 0 {
            return Err(Error::config("text_dim must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be > 0"));
        }
        for (i, st) in self.stages().iter().enumerate() {
            if st.depth == 0 || st.depth % 2 != 0 {
                return Err(Error::config(format!(
                    "stage {} depth {} must be even and positive",
                    i + 1,
                    st.depth
                )));
            }
            if st.heads == 0 || st.channels % st.heads != 0 {
                return Err(Error::config(format!(
                    "stage {} heads {} must divide channels {}",
                    i + 1,
                    st.heads,
                    st.channels
                )));
            }
            if st.grid % st.window != 0 {
                return Err(Error::config(format!(
                    "stage {} grid {} is not divisible by effective window {} (window {})",
                    i + 1,
                    st.grid,
                    st.window,
                    self.window
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if self.lambda_dice + self.lambda_ce <= 0.0 {
            return Err(Error::config("lambda_dice + lambda_ce must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-6,
            warmup_frac: 0.1,
            epochs: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_frac * self.epochs as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate_deg: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate_deg: 15.0,
            intensity_min: 0.9,
            intensity_max: 1.1,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation.
    pub fn none() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotate_deg: 0.0,
            intensity_min: 1.0,
            intensity_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Apply augmentation to training batches.
    pub augment: bool,
    /// L2-normalize embeddings read from a CTXE file.
    pub normalize_loaded_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seed: 0,
            augment: true,
            normalize_loaded_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_frac) {
            return Err(Error::config("warmup_frac must be in [0, 1)"));
        }
        if self.schedule.min_lr > self.schedule.lr {
            return Err(Error::config("min_lr must not exceed lr"));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_config(&text)
    }

    /// Canonical document; `parse_config(c.to_document()) == c`.
    pub fn to_document(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("window", m.window.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depths", list(&m.depths));
        kv("heads", list(&m.heads));
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("text_dim", m.text_dim.to_string());
        kv("visual_dim", m.visual_dim.to_string());
        kv("ln_eps", fmt_f(m.ln_eps));
        kv("init_std", fmt_f(m.init_std));
        kv("use_text", m.use_text.to_string());
        kv("use_cross_attention", m.use_cross_attention.to_string());
        kv("use_convfuse", m.use_convfuse.to_string());
        kv("decoder_guidance", m.decoder_guidance.to_string());
        kv("lambda_dice", fmt_f(self.loss.lambda_dice));
        kv("lambda_ce", fmt_f(self.loss.lambda_ce));
        kv("loss_eps", fmt_f(self.loss.eps));
        kv("lr", fmt_f(self.schedule.lr));
        kv("min_lr", fmt_f(self.schedule.min_lr));
        kv("warmup_frac", fmt_f(self.schedule.warmup_frac));
        kv("epochs", self.schedule.epochs.to_string());
        kv("weight_decay", fmt_f(self.optim.weight_decay));
        kv("beta1", fmt_f(self.optim.beta1));
        kv("beta2", fmt_f(self.optim.beta2));
        kv("adam_eps", fmt_f(self.optim.eps));
        kv("batch_size", self.train.batch_size.to_string());
        kv("seed", self.train.seed.to_string());
        kv("augment", self.train.augment.to_string());
        kv(
            "normalize_loaded_embeddings",
            self.train.normalize_loaded_embeddings.to_string(),
        );
        kv("hflip_p", fmt_f(self.augment.hflip_p));
        kv("vflip_p", fmt_f(self.augment.vflip_p));
        kv("rotate_deg", fmt_f(self.augment.rotate_deg));
        kv("intensity_min", fmt_f(self.augment.intensity_min));
        kv("intensity_max", fmt_f(self.augment.intensity_max));
        s
    }

    /// Name of the ablation variant these flags select.
    pub fn variant_name(&self) -> &'static str {
        variant_name(&self.model)
    }
}

pub fn variant_name(m: &ModelConfig) -> &'static str {
    if !m.use_text {
        "w/o Text Guidance"
    } else if !m.use_convfuse {
        "w/o ConvFuse"
    } else if !m.use_cross_attention {
        "w/o Cross-Attention"
    } else {
        "Full SwinTextUNet"
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::config(format!("{key}: expected a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(Error::config(format!("{key}: must be finite")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|x| parse_usize(key, x.trim()))
        .collect()
}

/// Parse a flat `key: value` document over the defaults. Unknown keys are
/// errors. `stages: N` is applied last as a depth variant.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut stages = None;
    let mut seen = std::collections::HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line
            .split_once(':')
            .or_else(|| line.split_once('='))
            .ok_or_else(|| Error::config(format!("line {}: expected `key: value`", lineno + 1)))?;
        let (key, val) = (key.trim(), val.trim().trim_matches('"'));
        if !seen.insert(key.to_string()) {
            return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
        let m = &mut c.model;
        match key {
            "image_size" => m.image_size = parse_usize(key, val)?,
            "in_channels" => m.in_channels = parse_usize(key, val)?,
            "patch_size" => m.patch_size = parse_usize(key, val)?,
            "window" => m.window = parse_usize(key, val)?,
            "embed_dim" => m.embed_dim = parse_usize(key, val)?,
            "depths" => m.depths = parse_list(key, val)?,
            "heads" => m.heads = parse_list(key, val)?,
            "mlp_ratio" => m.mlp_ratio = parse_usize(key, val)?,
            "text_dim" => m.text_dim = parse_usize(key, val)?,
            "visual_dim" => m.visual_dim = parse_usize(key, val)?,
            "ln_eps" => m.ln_eps = parse_f64(key, val)?,
            "init_std" => m.init_std = parse_f64(key, val)?,
            "use_text" => m.use_text = parse_bool(key, val)?,
            "use_cross_attention" => m.use_cross_attention = parse_bool(key, val)?,
            "use_convfuse" => m.use_convfuse = parse_bool(key, val)?,
            "decoder_guidance" => m.decoder_guidance = parse_bool(key, val)?,
            "stages" => stages = Some(parse_usize(key, val)?),
            "lambda_dice" => c.loss.lambda_dice = parse_f64(key, val)?,
            "lambda_ce" => c.loss.lambda_ce = parse_f64(key, val)?,
            "loss_eps" => c.loss.eps = parse_f64(key, val)?,
            "lr" => c.schedule.lr = parse_f64(key, val)?,
            "min_lr" => c.schedule.min_lr = parse_f64(key, val)?,
            "warmup_frac" => c.schedule.warmup_frac = parse_f64(key, val)?,
            "epochs" => c.schedule.epochs = parse_usize(key, val)?,
            "weight_decay" => c.optim.weight_decay = parse_f64(key, val)?,
            "beta1" => c.optim.beta1 = parse_f64(key, val)?,
            "beta2" => c.optim.beta2 = parse_f64(key, val)?,
            "adam_eps" => c.optim.eps = parse_f64(key, val)?,
            "batch_size" => c.train.batch_size = parse_usize(key, val)?,
            "seed" => c.train.seed = parse_usize(key, val)? as u64,
            "augment" => c.train.augment = parse_bool(key, val)?,
            "normalize_loaded_embeddings" => {
                c.train.normalize_loaded_embeddings = parse_bool(key, val)?
            }
            "hflip_p" => c.augment.hflip_p = parse_f64(key, val)?,
            "vflip_p" => c.augment.vflip_p = parse_f64(key, val)?,
            "rotate_deg" => c.augment.rotate_deg = parse_f64(key, val)?,
            "intensity_min" => c.augment.intensity_min = parse_f64(key, val)?,
            "intensity_max" => c.augment.intensity_max = parse_f64(key, val)?,
            _ => {
                return Err(Error::config(format!(
                    "line {}: unknown key {key:?}",
                    lineno + 1
                )))
            }
        }
    }
    if let Some(n) = stages {
        c.model = c.model.with_stages(n)?;
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.model.image_size, 224);
        assert_eq!(c.model.patch_size, 4);
        assert_eq!(c.model.window, 7);
        assert_eq!(c.model.embed_dim, 96);
        assert_eq!((c.loss.lambda_dice, c.loss.lambda_ce), (1.0, 1.0));
        assert_eq!(c.schedule.lr, 1e-4);
        assert_eq!(c.optim.weight_decay, 1e-2);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.schedule.epochs, 100);
    }

    #[test]
    fn indivisible_image_size_rejected_with_constraint() {
        let err = parse_config("image_size: 60").unwrap_err().to_string();
        assert!(err.contains("60") && err.contains("32"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("use_txt: false").unwrap_err().to_string();
        assert!(err.contains("use_txt"), "{err}");
    }

    #[test]
    fn ablation_flags_round_trip() {
        let c = parse_config("use_text: false").unwrap();
        assert!(!c.model.use_text);
        assert_eq!(c.variant_name(), "w/o Text Guidance");
        assert_eq!(parse_config(&c.to_document()).unwrap(), c);
    }

    #[test]
    fn stage_variants() {
        let s3 = parse_config("stages: 3").unwrap();
        assert_eq!(s3.model.depths, vec![2, 2, 6]);
        let grids: Vec<_> = s3.model.stages().iter().map(|s| s.grid).collect();
        assert_eq!(grids, vec![56, 28, 14]);

        let s5 = parse_config("stages: 5").unwrap();
        assert_eq!(s5.model.patch_size, 2);
        let grids: Vec<_> = s5.model.stages().iter().map(|s| s.grid).collect();
        assert_eq!(grids, vec![112, 56, 28, 14, 7]);
        assert_eq!(s5.model.final_expands(), 0);
    }

    #[test]
    fn effective_window_and_shift() {
        let c = ModelConfig::default();
        let st = c.stages();
        assert_eq!(st[0].window, 7);
        assert_eq!(st[0].shift, 3);
        assert_eq!(st[3].grid, 7);
        assert_eq!(st[3].shift, 0);
    }

    #[test]
    fn window_must_divide_grid() {
        let err = parse_config("image_size: 64\nwindow: 3").unwrap_err().to_string();
        assert!(err.contains("effective window"), "{err}");
    }
}
