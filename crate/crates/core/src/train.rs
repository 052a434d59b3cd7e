//! The training loop, evaluation and metric logging.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::augment;
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::loss::hybrid_loss;
use crate::metrics::{Confusion, MeanMetrics};
use crate::model::SwinTextUNet;
use crate::optim::{lr_at, AdamW};
use crate::params::ParamStore;
use crate::synth::SegSample;
use crate::tensor::Tensor;
use crate::text::{TextEmbedding, TextSource};

/// One sample ready for the model: planes in `[0, 1]` at model resolution.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub text: usize,
}

/// Examples plus the distinct prompt embeddings they reference.
#[derive(Clone, Debug, Default)]
pub struct PreparedSet {
    pub size: usize,
    pub examples: Vec<Example>,
    pub embeddings: Vec<TextEmbedding>,
}

impl PreparedSet {
    /// Resolves every prompt up front and resizes to `size`.
    pub fn new(samples: &[SegSample], source: &TextSource, size: usize) -> Result<Self> {
        let mut set = PreparedSet {
            size,
            ..Default::default()
        };
        for s in samples {
            let emb = source.resolve(&s.prompt)?;
            let text = match set.embeddings.iter().position(|e| e.prompt == emb.prompt) {
                Some(i) => i,
                None => {
                    set.embeddings.push(emb);
                    set.embeddings.len() - 1
                }
            };
            let (w, h) = (s.image.width, s.image.height);
            let mut image = s.image.to_unit();
            let mut mask: Vec<f32> = s.mask.to_mask().iter().map(|&b| b as u8 as f32).collect();
            if (w, h) != (size, size) {
                image = resize_bilinear(&image, h, w, size, size);
                mask = resize_bilinear(&mask, h, w, size, size)
                    .into_iter()
                    .map(|v| (v >= 0.5) as u8 as f32)
                    .collect();
            }
            set.examples.push(Example {
                name: s.name.clone(),
                image,
                mask,
                text,
            });
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// `[B, C, H, W]` images (gray replicated over channels), `[B, 1, H, W]`
/// masks and `[B, 1, D_t]` text tokens.
pub fn make_batch(
    set: &PreparedSet,
    planes: &[(&[f32], &[f32], usize)],
    channels: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let b = planes.len();
    let n = set.size * set.size;
    let mut img = Vec::with_capacity(b * channels * n);
    let mut msk = Vec::with_capacity(b * n);
    let mut txt = Vec::new();
    for &(i, m, t) in planes {
        for _ in 0..channels {
            img.extend_from_slice(i);
        }
        msk.extend_from_slice(m);
        txt.extend(set.embeddings[t].pooled.iter().map(|&v| v as f32));
    }
    let d = set.embeddings.first().map_or(0, |e| e.dim());
    Ok((
        Tensor::new(vec![b, channels, set.size, set.size], img)?,
        Tensor::new(vec![b, 1, set.size, set.size], msk)?,
        Tensor::new(vec![b, 1, d], txt)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "epoch,split,loss,dice,iou,lr";

pub fn csv_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{},{}", r.epoch, r.split, r.loss, r.dice, r.iou, r.lr)
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", csv_row(r));
    }
    s
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
    pub per_image: Vec<Confusion>,
    /// `[H*W]` probability planes, one per example.
    pub probs: Vec<Vec<f32>>,
}

/// Inference over a prepared set, without augmentation.
pub fn evaluate(model: &SwinTextUNet, ps: &ParamStore<f32>, cfg: &RunConfig, set: &PreparedSet) -> Result<Evaluation> {
    let mut loss_sum = 0.0;
    let mut means = MeanMetrics::default();
    let mut per_image = Vec::new();
    let mut probs = Vec::new();
    let n = set.size * set.size;
    for chunk in set.examples.chunks(cfg.train.batch_size) {
        let planes: Vec<(&[f32], &[f32], usize)> =
            chunk.iter().map(|e| (e.image.as_slice(), e.mask.as_slice(), e.text)).collect();
        let (img, msk, txt) = make_batch(set, &planes, model.cfg.in_channels)?;
        let mut t = Tape::inference();
        let x = t.constant(img);
        let y = t.constant(msk);
        let text = model.cfg.use_text.then(|| t.constant(txt));
        let out = model.forward(&mut t, ps, x, text)?;
        let l = hybrid_loss(&mut t, out.probs, y, &cfg.loss)?;
        loss_sum += t.value(l.total).item() as f64 * chunk.len() as f64;
        let p = t.value(out.probs).data();
        for (i, e) in chunk.iter().enumerate() {
            let plane = &p[i * n..(i + 1) * n];
            let c = Confusion::from_probs(
                &plane.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &e.mask.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            )?;
            means.push(&c);
            per_image.push(c);
            probs.push(plane.to_vec());
        }
    }
    Ok(Evaluation {
        loss: loss_sum / set.len().max(1) as f64,
        dice: means.dice(),
        iou: means.iou(),
        per_image,
        probs,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SwinTextUNet,
    pub params: ParamStore<f32>,
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were saved as `best.stun`.
    pub best_epoch: usize,
}

/// Seed for per-(epoch, sample) randomness, independent of batch order.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Runs the configured schedule. With `out`, writes `metrics.csv` after each
/// epoch plus `last.stun` and `best.stun` (best validation Dice, or lowest
/// training loss without a validation set).
pub fn train(
    cfg: &RunConfig,
    train_set: &PreparedSet,
    val_set: Option<&PreparedSet>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let m = &cfg.model;
    if train_set.size != m.image_size {
        return Err(Error::config(format!(
            "data prepared at {} but the model expects {}",
            train_set.size, m.image_size
        )));
    }
    if m.use_text {
        if let Some(e) = train_set.embeddings.first() {
            if e.dim() != m.text_dim {
                return Err(Error::config(format!(
                    "text embeddings have dim {}, config text_dim is {}",
                    e.dim(),
                    m.text_dim
                )));
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let (model, mut ps) = SwinTextUNet::new::<f32>(m, cfg.train.seed)?;
    let mut opt = AdamW::new(&ps, cfg.optim.clone());
    let mut records = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0);
    let seed = cfg.train.seed;
    let doc = cfg.to_document();

    for epoch in 0..cfg.schedule.epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sample_rng(seed, epoch, usize::MAX >> 32));
        let mut loss_sum = 0.0;
        let mut means = MeanMetrics::default();
        for batch in order.chunks(cfg.train.batch_size) {
            let planes: Vec<(Vec<f32>, Vec<f32>, usize)> = batch
                .iter()
                .map(|&i| {
                    let e = &train_set.examples[i];
                    if cfg.train.augment {
                        let mut rng = sample_rng(seed, epoch, i);
                        let (a, b) = augment(&e.image, &e.mask, train_set.size, &cfg.augment, &mut rng);
                        (a, b, e.text)
                    } else {
                        (e.image.clone(), e.mask.clone(), e.text)
                    }
                })
                .collect();
            let refs: Vec<(&[f32], &[f32], usize)> =
                planes.iter().map(|(a, b, t)| (a.as_slice(), b.as_slice(), *t)).collect();
            let (img, msk, txt) = make_batch(train_set, &refs, m.in_channels)?;
            let mut t = Tape::new();
            let x = t.constant(img);
            let y = t.constant(msk);
            let text = m.use_text.then(|| t.constant(txt));
            let o = model.forward(&mut t, &ps, x, text)?;
            let l = hybrid_loss(&mut t, o.probs, y, &cfg.loss)?;
            let lv = t.value(l.total).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {lv} at epoch {epoch}; last good weights are in last.stun"
                )));
            }
            loss_sum += lv * batch.len() as f64;
            let n = train_set.size * train_set.size;
            let p = t.value(o.probs).data();
            for (k, (_, mask, _)) in planes.iter().enumerate() {
                let c = Confusion::from_probs(
                    &p[k * n..(k + 1) * n].iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    &mask.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                )?;
                means.push(&c);
            }
            t.backward(l.total)?;
            let grads = t.param_grads(ps.len());
            opt.update(&mut ps, &grads, lr)?;
        }
        let rec = EpochRecord {
            epoch,
            split: "train",
            loss: loss_sum / train_set.len() as f64,
            dice: means.dice(),
            iou: means.iou(),
            lr,
        };
        on_epoch(&rec);
        let mut score = -rec.loss;
        records.push(rec);
        if let Some(v) = val_set.filter(|v| !v.is_empty()) {
            let ev = evaluate(&model, &ps, cfg, v)?;
            let rec = EpochRecord {
                epoch,
                split: "val",
                loss: ev.loss,
                dice: ev.dice,
                iou: ev.iou,
                lr,
            };
            on_epoch(&rec);
            score = rec.dice;
            records.push(rec);
        }
        let improved = score > best.0;
        if improved {
            best = (score, epoch);
        }
        if let Some(dir) = out {
            let ck = Checkpoint::from_params(&ps, doc.clone());
            ck.save(&dir.join("last.stun"))?;
            if improved {
                ck.save(&dir.join("best.stun"))?;
            }
            fs::write(dir.join("metrics.csv"), metrics_csv(&records))?;
        }
    }
    Ok(TrainOutcome {
        model,
        params: ps,
        records,
        best_epoch: best.1,
    })
}
