//! Synthetic text-conditioned segmentation data.
//!
//! Every image holds blobs in some of its four quadrants; the prompt names a
//! subset of them and the mask covers only the named ones. The unnamed blobs
//! look the same, so the mask cannot be recovered from the image alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const BACKGROUND: f64 = 0.15;
pub const BLOB_AMPLITUDE: f64 = 0.7;
pub const NOISE: f64 = 0.04;
/// Foreground rule on the rendered image, inside prompted quadrants.
pub const MASK_LEVEL: u8 = 128;

/// Quadrants in image coordinates (left = smaller column index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper left lung",
            Quadrant::UpperRight => "upper right lung",
            Quadrant::LowerLeft => "lower left lung",
            Quadrant::LowerRight => "lower right lung",
        }
    }

    pub fn is_left(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::LowerLeft)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Quadrant::UpperLeft | Quadrant::UpperRight)
    }

    /// Quadrant containing pixel `(y, x)` of a `size x size` image.
    pub fn of(y: usize, x: usize, size: usize) -> Quadrant {
        match (y < size / 2, x < size / 2) {
            (true, true) => Quadrant::UpperLeft,
            (true, false) => Quadrant::UpperRight,
            (false, true) => Quadrant::LowerLeft,
            (false, false) => Quadrant::LowerRight,
        }
    }
}

const COUNTS: [&str; 4] = ["one", "two", "three", "four"];

/// Report-style prompt naming `quadrants` (sorted, nonempty).
pub fn prompt_for(quadrants: &[Quadrant]) -> String {
    let left = quadrants.iter().any(|q| q.is_left());
    let right = quadrants.iter().any(|q| !q.is_left());
    let side = if left && right { "bilateral" } else { "unilateral" };
    let n = quadrants.len();
    let areas = if n == 1 { "area" } else { "areas" };
    let names: Vec<&str> = quadrants.iter().map(|q| q.phrase()).collect();
    let list = match names.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(", ")),
        _ => names.join(""),
    };
    format!("{side} pulmonary infection, {} infected {areas}, {list}", COUNTS[n - 1])
}

/// Quadrants named by a prompt built with [`prompt_for`].
pub fn quadrants_in_prompt(prompt: &str) -> Vec<Quadrant> {
    let p = prompt.to_lowercase();
    Quadrant::ALL.into_iter().filter(|q| p.contains(q.phrase())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample {
    pub name: String,
    pub image: GrayImage,
    pub mask: GrayImage,
    pub prompt: String,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    quadrant: Quadrant,
    cy: f64,
    cx: f64,
    sigma: f64,
}

/// One sample; identical for identical `(size, seed, index)`.
pub fn synth_sample(size: usize, seed: u64, index: usize) -> Result<SegSample> {
    if size < 32 || size % 2 != 0 {
        return Err(Error::config(format!("synthetic images need an even size >= 32, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let half = size as f64 / 2.0;

    let mut occupied: Vec<Quadrant> = Quadrant::ALL.into_iter().filter(|_| rng.random_bool(0.75)).collect();
    if occupied.is_empty() {
        occupied.push(Quadrant::ALL[rng.random_range(0..4)]);
    }
    let mut prompted: Vec<Quadrant> = occupied.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if prompted.is_empty() {
        prompted.push(occupied[rng.random_range(0..occupied.len())]);
    }

    // Blob cores (where the blob can cross the mask level) stay inside
    // their own quadrant: core radius < 1.3 sigma < margin.
    let blobs: Vec<Blob> = occupied
        .iter()
        .map(|&q| {
            let sigma = rng.random_range(size as f64 / 14.0..size as f64 / 9.0);
            let margin = 1.5 * sigma;
            let oy = if q.is_upper() { 0.0 } else { half };
            let ox = if q.is_left() { 0.0 } else { half };
            Blob {
                quadrant: q,
                cy: oy + rng.random_range(margin..half - margin),
                cx: ox + rng.random_range(margin..half - margin),
                sigma,
            }
        })
        .collect();

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let g = blobs
                .iter()
                .map(|b| {
                    let r2 = (py - b.cy).powi(2) + (px - b.cx).powi(2);
                    (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                })
                .fold(0.0, f64::max);
            let noise = rng.random_range(-NOISE..NOISE);
            let v = (BACKGROUND + BLOB_AMPLITUDE * g + noise).clamp(0.0, 1.0);
            let byte = (v * 255.0).round() as u8;
            image.push(byte);
            let on = byte >= MASK_LEVEL && prompted.contains(&Quadrant::of(y, x, size));
            mask.push(if on { 255 } else { 0 });
        }
    }
    debug_assert!(blobs.iter().all(|b| occupied.contains(&b.quadrant)));
    Ok(SegSample {
        name: format!("s{index:05}"),
        image: GrayImage::new(size, size, image)?,
        mask: GrayImage::new(size, size, mask)?,
        prompt: prompt_for(&prompted),
    })
}

/// `n` samples split 70/15/15 into train/val/test by index.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<(Split, SegSample)>> {
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    (0..n)
        .map(|i| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok((split, synth_sample(size, seed, i)?))
        })
        .collect()
}

/// `n` samples of one split, with no split bookkeeping.
pub fn synth_set(n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    (0..n).map(|i| synth_sample(size, seed, i)).collect()
}

/// Prompt-reading oracle: threshold the image inside the named quadrants.
pub fn oracle_mask(image: &GrayImage, prompt: &str) -> Vec<bool> {
    let named = quadrants_in_prompt(prompt);
    let n = image.width;
    image
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| p >= MASK_LEVEL && named.contains(&Quadrant::of(i / n, i % n, n)))
        .collect()
}
