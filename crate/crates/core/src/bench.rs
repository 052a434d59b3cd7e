//! Instrumented global vs windowed self-attention cost.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::gradcheck::randn;
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::swin::{window_partition, WindowAttention};

/// Counted score + aggregation MACs of one forward pass, and its mean wall
/// time in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionCost {
    pub macs: u64,
    pub millis: f64,
}

/// One attention layer over a `grid x grid` token map with windows of side
/// `window`. `window == grid` is plain global attention.
pub fn attention_cost(grid: usize, window: usize, channels: usize, heads: usize, repeat: usize) -> Result<AttentionCost> {
    let mut ps = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let attn = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng, 0.02), channels, window, heads)?;
    let x = randn(&[1, grid * grid, channels], 1).cast::<f32>();
    let mut macs = 0;
    let start = Instant::now();
    for _ in 0..repeat.max(1) {
        let mut t = Tape::inference();
        let v = t.constant(x.clone());
        let w = window_partition(&mut t, v, grid, window, 0)?;
        attn.forward(&mut t, &ps, w, None)?;
        macs = t.macs("attn_score") + t.macs("attn_aggregate");
    }
    Ok(AttentionCost {
        macs,
        millis: start.elapsed().as_secs_f64() * 1e3 / repeat.max(1) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub grid: usize,
    pub window: usize,
    pub channels: usize,
    pub global: AttentionCost,
    pub windowed: AttentionCost,
}

pub const BENCH_CSV_HEADER: &str = "grid,window,channels,global_macs,windowed_macs,mac_ratio,global_ms,windowed_ms";

impl BenchRow {
    /// Windowed over global MACs; `M^2 / (H W)` in theory.
    pub fn ratio(&self) -> f64 {
        self.windowed.macs as f64 / self.global.macs as f64
    }

    /// True when `windowed / global == M^2 / (grid^2)` holds in integers.
    pub fn ratio_is_exact(&self) -> bool {
        let (m2, hw) = ((self.window * self.window) as u128, (self.grid * self.grid) as u128);
        self.windowed.macs as u128 * hw == self.global.macs as u128 * m2
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3}",
            self.grid,
            self.window,
            self.channels,
            self.global.macs,
            self.windowed.macs,
            self.ratio(),
            self.global.millis,
            self.windowed.millis
        )
    }
}

pub fn bench(grid: usize, window: usize, channels: usize, heads: usize, repeat: usize) -> Result<BenchRow> {
    Ok(BenchRow {
        grid,
        window,
        channels,
        global: attention_cost(grid, grid, channels, heads, repeat)?,
        windowed: attention_cost(grid, window, channels, heads, repeat)?,
    })
}
