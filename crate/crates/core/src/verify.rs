//! Property suites behind `swintext verify`: finite-difference gradient
//! checks, brute-force attention oracles, and loss/metric identities.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bench::bench;
use crate::config::{LossConfig, ModelConfig, StageSpec};
use crate::decoder::{ConvFuse, PatchExpand};
use crate::error::{Error, Result};
use crate::gradcheck::{randn, weighted_sum, GradCheck, GradCheckReport};
use crate::loss::{ce_loss, dice_loss, hybrid_loss};
use crate::metrics::dice_iou;
use crate::model::SwinTextUNet;
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::swin::{build_shift_mask, window_partition, window_reverse, PatchEmbed, PatchMerge, SwinBlock, WindowAttention};
use crate::tensor::Tensor;
use crate::text::{ConcatFusion, CrossAttention, TextProjector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    AttentionOracle,
    Metrics,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "attention-oracle" => Ok(Suite::AttentionOracle),
            "metrics" => Ok(Suite::Metrics),
            "all" => Ok(Suite::All),
            _ => Err(Error::Usage(format!(
                "unknown suite {s:?}; expected gradcheck, attention-oracle, metrics or all"
            ))),
        }
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Outcome of one property. `max_err` is the worst value seen over all
/// seeds; `passed` means it stayed within `tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub suite: &'static str,
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Property {
    fn within(suite: &'static str, name: impl Into<String>, max_err: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: max_err <= tolerance,
            max_err,
            tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<18} {:<40} max_err {:.3e} (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_err,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Seeds per property.
    pub seeds: u64,
    /// Added to every analytic gradient; nonzero values must make the
    /// gradient suite fail.
    pub perturb: f64,
    /// Also check every entry of the micro model once.
    pub exhaustive_model: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            perturb: 0.0,
            exhaustive_model: true,
        }
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Property>> {
    let mut out = Vec::new();
    if suite.includes(Suite::Gradcheck) {
        out.extend(gradcheck_suite(opts)?);
    }
    if suite.includes(Suite::AttentionOracle) {
        out.extend(attention_suite(opts)?);
    }
    if suite.includes(Suite::Metrics) {
        out.extend(metrics_suite(opts)?);
    }
    Ok(out)
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type InputFn = fn(u64) -> Vec<Tensor<f64>>;

/// Every differentiable tape operation with seed-dependent shapes.
pub fn op_catalogue() -> Vec<(&'static str, OpFn, InputFn)> {
    vec![
        ("add", |t, v| t.add(v[0], v[1]), |s| {
            let c = 2 + s as usize % 3;
            vec![randn(&[2, 3, c], s), randn(&[c], s + 1)]
        }),
        ("sub", |t, v| t.sub(v[0], v[1]), |s| vec![randn(&[2, 1, 3], s), randn(&[4, 1], s + 1)]),
        ("mul", |t, v| t.mul(v[0], v[1]), |s| vec![randn(&[3, 4], s), randn(&[3, 1], s + 1)]),
        ("div", |t, v| {
            let d = t.mul(v[1], v[1])?;
            let d = t.add_scalar(d, 1.0);
            t.div(v[0], d)
        }, |s| vec![randn(&[5], s), randn(&[5], s + 1)]),
        ("scale", |t, v| Ok(t.scale(v[0], -1.7)), |s| vec![randn(&[4], s)]),
        ("add_scalar", |t, v| Ok(t.add_scalar(v[0], 0.3)), |s| vec![randn(&[4], s)]),
        ("gelu", |t, v| Ok(t.gelu(v[0])), |s| vec![randn(&[7], s)]),
        ("relu", |t, v| Ok(t.relu(v[0])), |s| vec![randn(&[7], s)]),
        ("sigmoid", |t, v| Ok(t.sigmoid(v[0])), |s| vec![randn(&[7], s)]),
        ("log", |t, v| {
            let y = t.mul(v[0], v[0])?;
            let y = t.add_scalar(y, 0.5);
            Ok(t.log(y))
        }, |s| vec![randn(&[6], s)]),
        ("exp", |t, v| Ok(t.exp(v[0])), |s| vec![randn(&[6], s)]),
        ("clamp", |t, v| Ok(t.clamp(v[0], -0.5, 0.5)), |s| vec![randn(&[6], s)]),
        ("matmul", |t, v| t.matmul(v[0], v[1]), |s| {
            let k = 1 + s as usize % 4;
            vec![randn(&[2, 3, k], s), randn(&[k, 2], s + 1)]
        }),
        ("matmul_batched", |t, v| t.matmul(v[0], v[1]), |s| {
            let k = 1 + s as usize % 4;
            vec![randn(&[2, 3, k], s), randn(&[2, k, 2], s + 1)]
        }),
        ("softmax", |t, v| t.softmax(v[0], 1), |s| vec![randn(&[2, 1 + s as usize % 4, 3], s)]),
        ("layer_norm", |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), |s| {
            let c = 2 + s as usize % 5;
            vec![randn(&[3, c], s), randn(&[c], s + 1), randn(&[c], s + 2)]
        }),
        ("group_norm", |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5), |s| {
            let c = 2 * (1 + s as usize % 3);
            vec![randn(&[2, c, 2, 3], s), randn(&[c], s + 1), randn(&[c], s + 2)]
        }),
        ("conv2d_3x3", |t, v| t.conv2d(v[0], v[1], Some(v[2])), |s| {
            let (ci, co) = (1 + s as usize % 3, 1 + (s as usize / 3) % 3);
            vec![randn(&[2, ci, 3, 4], s), randn(&[co, ci, 3, 3], s + 1), randn(&[co], s + 2)]
        }),
        ("conv2d_1x1", |t, v| t.conv2d(v[0], v[1], None), |s| {
            vec![randn(&[1, 3, 2, 2], s), randn(&[2, 3, 1, 1], s + 1)]
        }),
        ("gather", |t, v| t.gather(v[0], Arc::new(vec![0, 0, 2, 1, 2, 2]), vec![2, 3]), |s| vec![randn(&[3], s)]),
        ("reshape", |t, v| t.reshape(v[0], &[6, 2]), |s| vec![randn(&[3, 4], s)]),
        ("permute", |t, v| t.permute(v[0], &[2, 0, 1]), |s| vec![randn(&[2, 3, 4], s)]),
        ("transpose", |t, v| t.transpose(v[0]), |s| vec![randn(&[2, 3, 4], s)]),
        ("concat", |t, v| t.concat(&[v[0], v[1]], 1), |s| vec![randn(&[2, 1, 3], s), randn(&[2, 2, 3], s + 1)]),
        ("upsample2x", |t, v| t.upsample2x(v[0]), |s| vec![randn(&[1, 2, 2 + s as usize % 3, 3], s)]),
        ("sum", |t, v| Ok(t.sum(v[0])), |s| vec![randn(&[2, 3], s)]),
        ("mean", |t, v| Ok(t.mean(v[0])), |s| vec![randn(&[4], s)]),
    ]
}

const GRAD_TOL: f64 = 1e-4;

fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradcheck_suite(opts: &VerifyOptions) -> Result<Vec<Property>> {
    let gc = GradCheck::default().with_tolerance(GRAD_TOL).with_perturbation(opts.perturb);
    let mut out = Vec::new();
    for (name, op, make) in op_catalogue() {
        let mut reports = Vec::new();
        for seed in 0..opts.seeds {
            reports.push(gc.run(name, &make(seed), |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, seed)
            })?);
        }
        out.push(Property::within("gradcheck", format!("op/{name}"), worst(&reports), GRAD_TOL));
    }

    let sampled = gc.clone().with_max_entries(16);
    let mut layer = |name: &str, f: &dyn Fn(u64) -> Result<GradCheckReport>| -> Result<()> {
        let mut reports = Vec::new();
        for seed in 0..opts.seeds {
            reports.push(f(seed)?);
        }
        out.push(Property::within("gradcheck", format!("layer/{name}"), worst(&reports), GRAD_TOL));
        Ok(())
    };
    let cfg = ModelConfig::micro();
    layer("window_attention_shifted", &|seed| {
        let mut ps = ParamStore::new();
        let attn = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), 4, 2, 2)?;
        let mask = build_shift_mask(4, 4, 2, 1)?;
        sampled.run_with_params("window_attention", &ps, &[randn(&[1, 16, 4], seed)], |t, ps, v| {
            let w = window_partition(t, v[0], 4, 2, 1)?;
            let m = t.constant(mask.tensor());
            let y = attn.forward(t, ps, w, Some(m))?;
            let y = window_reverse(t, y, 1, 4, 2, 1)?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("swin_block", &|seed| {
        let spec = StageSpec { channels: 4, depth: 2, heads: 2, grid: 4, window: 2, shift: 1 };
        let mut ps = ParamStore::new();
        let blk = SwinBlock::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), &spec, 1, &cfg)?;
        sampled.run_with_params("swin_block", &ps, &[randn(&[1, 16, 4], seed)], |t, ps, v| {
            let y = blk.forward(t, ps, v[0])?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("patch_embed", &|seed| {
        let c = ModelConfig { image_size: 8, patch_size: 2, embed_dim: 4, in_channels: 2, ..cfg.clone() };
        let mut ps = ParamStore::new();
        let pe = PatchEmbed::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), &c)?;
        sampled.run_with_params("patch_embed", &ps, &[randn(&[1, 2, 8, 8], seed)], |t, ps, v| {
            let y = pe.forward(t, ps, v[0])?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("patch_merge", &|seed| {
        let mut ps = ParamStore::new();
        let pm = PatchMerge::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), 3, 1e-5)?;
        sampled.run_with_params("patch_merge", &ps, &[randn(&[2, 16, 3], seed)], |t, ps, v| {
            let y = pm.forward(t, ps, v[0], 4)?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("patch_expand", &|seed| {
        let mut ps = ParamStore::new();
        let pe = PatchExpand::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.5), 6, 1e-5)?;
        sampled.run_with_params("patch_expand", &ps, &[randn(&[2, 4, 6], seed)], |t, ps, v| {
            let y = pe.forward(t, ps, v[0], 2)?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("conv_fuse", &|seed| {
        let mut ps = ParamStore::new();
        let cf = ConvFuse::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.4), 4, 1e-5)?;
        let ins = [randn(&[1, 4, 3, 3], seed), randn(&[1, 4, 3, 3], seed + 1)];
        sampled.run_with_params("conv_fuse", &ps, &ins, |t, ps, v| {
            let y = cf.forward(t, ps, v[0], v[1])?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("text_projector", &|seed| {
        let mut ps = ParamStore::new();
        let tp = TextProjector::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.5), 5, 3, &[2, 4])?;
        sampled.run_with_params("text_projector", &ps, &[randn(&[2, 1, 5], seed)], |t, ps, v| {
            let y = tp.project(t, ps, v[0], 1)?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("cross_attention", &|seed| {
        let mut ps = ParamStore::new();
        let xa = CrossAttention::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.4), 4, &cfg)?;
        let ins = [randn(&[2, 3, 4], seed), randn(&[2, 1, 4], seed + 1)];
        sampled.run_with_params("cross_attention", &ps, &ins, |t, ps, v| {
            let y = xa.forward(t, ps, v[0], v[1])?;
            weighted_sum(t, y.tokens, seed)
        })
    })?;
    layer("concat_fusion", &|seed| {
        let mut ps = ParamStore::new();
        let cf = ConcatFusion::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.4), 3)?;
        let ins = [randn(&[2, 4, 3], seed), randn(&[2, 1, 3], seed + 1)];
        sampled.run_with_params("concat_fusion", &ps, &ins, |t, ps, v| {
            let y = cf.forward(t, ps, v[0], v[1])?;
            weighted_sum(t, y, seed)
        })
    })?;
    layer("hybrid_loss", &|seed| {
        let y = binary_target(&[2, 1, 4, 4], seed + 7);
        gc.run("hybrid_loss", &[randn(&[2, 1, 4, 4], seed)], |t, v| {
            let p = t.sigmoid(v[0]);
            let y = t.constant(y.clone());
            Ok(hybrid_loss(t, p, y, &LossConfig::default())?.total)
        })
    })?;

    // The micro model is initialized wide (std 0.5) and is strongly curved;
    // a smaller step keeps the central-difference truncation error (which
    // scales with step^2) well under the tolerance.
    let model_gc = gc.clone().with_step(1e-6);
    let model_sampled = model_gc.clone().with_max_entries(16);
    let variants = [
        ("micro_model", cfg.clone()),
        ("micro_model/concat", ModelConfig { use_cross_attention: false, ..cfg.clone() }),
        ("micro_model/no_text", ModelConfig { use_text: false, ..cfg.clone() }),
        ("micro_model/decoder_guidance", ModelConfig { decoder_guidance: true, ..cfg.clone() }),
    ];
    for (name, mcfg) in variants {
        let mut reports = Vec::new();
        for seed in 0..opts.seeds {
            reports.push(model_gradcheck(&mcfg, seed, &model_sampled)?);
        }
        out.push(Property::within("gradcheck", name, worst(&reports), GRAD_TOL));
    }
    if opts.exhaustive_model {
        let r = model_gradcheck(&cfg, 1000, &model_gc)?;
        out.push(Property::within(
            "gradcheck",
            format!("micro_model/all_{}_entries", r.checked),
            r.max_rel_err,
            GRAD_TOL,
        ));
    }

    // The checker itself must catch a wrong gradient.
    let r = GradCheck::default().with_perturbation(1e-3).run("self_test", &[randn(&[3, 3], 1)], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    })?;
    out.push(Property {
        suite: "gradcheck",
        name: "self_test/perturbed_gradient_detected".into(),
        max_err: r.max_rel_err,
        tolerance: GRAD_TOL,
        passed: !r.passed(),
    });
    Ok(out)
}

fn binary_target(shape: &[usize], seed: u64) -> Tensor<f64> {
    let v: Vec<f64> = randn(shape, seed).to_f64_vec().iter().map(|&x| (x > 0.0) as u8 as f64).collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("consistent shape")
}

/// Hybrid loss of the 16x16 micro model against image, every parameter and
/// the input image.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, gc: &GradCheck) -> Result<GradCheckReport> {
    let (m, ps) = SwinTextUNet::new::<f64>(cfg, seed)?;
    let s = cfg.image_size;
    let img = randn(&[1, cfg.in_channels, s, s], seed + 1);
    let target = binary_target(&[1, 1, s, s], seed + 2);
    let txt = randn(&[1, 1, cfg.text_dim], seed + 3);
    gc.run_with_params("micro_model", &ps, &[img], |t, ps, v| {
        let text = cfg.use_text.then(|| t.constant(txt.clone()));
        let y = t.constant(target.clone());
        let o = m.forward(t, ps, v[0], text)?;
        Ok(hybrid_loss(t, o.probs, y, &LossConfig::default())?.total)
    })
}

/// Plain loops over one sequence `x: [n, c]`:
/// `proj(softmax(q k^T / sqrt(d) + bias) v)`, keys restricted by `allowed`.
#[allow(clippy::too_many_arguments)]
pub fn naive_window_attention(
    x: &[f64],
    n: usize,
    c: usize,
    ps: &ParamStore<f64>,
    attn: &WindowAttention,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let heads = attn.heads;
    let lin = |id: usize, b: Option<usize>, inp: &[f64]| -> Vec<f64> {
        let w = ps.tensor(id).data();
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for o in 0..c {
                let mut acc = b.map_or(0.0, |b| ps.tensor(b).data()[o]);
                for i in 0..c {
                    acc += inp[t * c + i] * w[i * c + o];
                }
                out[t * c + o] = acc;
            }
        }
        out
    };
    let q = lin(attn.q.w, attn.q.b, x);
    let k = lin(attn.k.w, attn.k.b, x);
    let v = lin(attn.v.w, attn.v.b, x);
    let d = c / heads;
    let mut mixed = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let dot: f64 = (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum();
                    dot / (d as f64).sqrt() + bias(h, i, j)
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (&j, l) in keys.iter().zip(&logits) {
                let a = (l - m).exp() / z;
                for e in 0..d {
                    mixed[i * c + h * d + e] += a * v[j * c + h * d + e];
                }
            }
        }
    }
    lin(attn.proj.w, attn.proj.b, &mixed)
}

/// Shifted-window attention on a `grid x grid` map against the oracle in
/// which each token attends to every token of its own pre-shift region,
/// inside its window. Returns the max abs difference.
pub fn shifted_window_oracle_diff(grid: usize, window: usize, channels: usize, heads: usize, seed: u64) -> Result<f64> {
    let shift = window / 2;
    let mut ps = ParamStore::new();
    let attn = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), channels, window, heads)?;
    let batch = 2;
    let n = grid * grid;
    let x = randn(&[batch, n, channels], 100 + seed);
    let mask = build_shift_mask(grid, grid, window, shift)?;
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = window_partition(&mut t, v, grid, window, shift)?;
    let m = t.constant(mask.tensor());
    let y = attn.forward(&mut t, &ps, w, Some(m))?;
    let y = window_reverse(&mut t, y, batch, grid, window, shift)?;
    let got = t.value(y).data();

    // Shifted window index of an original coordinate, and its region band.
    let win_of = |p: usize| ((p + grid - shift) % grid) / window;
    let band = |p: usize| (p >= shift) as usize + (p >= grid - window + shift) as usize;
    let same = |i: usize, j: usize| {
        let (yi, xi, yj, xj) = (i / grid, i % grid, j / grid, j % grid);
        (win_of(yi), win_of(xi)) == (win_of(yj), win_of(xj)) && (band(yi), band(xi)) == (band(yj), band(xj))
    };
    let table = ps.tensor(attn.bias.table).data();
    let span = 2 * window - 1;
    // Inside one region no offset wraps, so original coordinates give the
    // in-window offsets.
    let bias = |h: usize, i: usize, j: usize| {
        let dy = (i / grid) as isize - (j / grid) as isize + window as isize - 1;
        let dx = (i % grid) as isize - (j % grid) as isize + window as isize - 1;
        table[(dy as usize * span + dx as usize) * heads + h]
    };
    let mut diff: f64 = 0.0;
    for b in 0..batch {
        let xb = &x.data()[b * n * channels..(b + 1) * n * channels];
        let want = naive_window_attention(xb, n, channels, &ps, &attn, same, bias);
        for (a, w) in got[b * n * channels..(b + 1) * n * channels].iter().zip(&want) {
            diff = diff.max((a - w).abs());
        }
    }
    Ok(diff)
}

/// A window covering the whole grid, with the relative bias zeroed, against
/// plain global attention.
pub fn global_attention_oracle_diff(grid: usize, channels: usize, heads: usize, seed: u64) -> Result<f64> {
    let mut ps = ParamStore::new();
    let attn = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.3), channels, grid, heads)?;
    ps.tensor_mut(attn.bias.table).data_mut().fill(0.0);
    let n = grid * grid;
    let x = randn(&[1, n, channels], seed + 1);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = window_partition(&mut t, v, grid, grid, 0)?;
    let y = attn.forward(&mut t, &ps, w, None)?;
    let want = naive_window_attention(x.data(), n, channels, &ps, &attn, |_, _| true, |_, _, _| 0.0);
    Ok(t.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// With one text token every softmax row is `[1.0]`. Returns the largest
/// `|w - 1|` and the largest output change when the query/key weights are
/// redrawn (both must be exactly 0).
pub fn single_token_cross_attention(seed: u64) -> Result<(f64, f64)> {
    let cfg = ModelConfig::micro();
    let mut ps = ParamStore::new();
    let xa = CrossAttention::build(&mut Builder::new(&mut ps, &mut rng(seed), 0.5), 8, &cfg)?;
    let z = randn(&[2, 9, 8], seed + 1);
    let txt = randn(&[2, 1, 8], seed + 2);
    let run = |ps: &ParamStore<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut t = Tape::new();
        let (zv, tv) = (t.constant(z.clone()), t.constant(txt.clone()));
        let o = xa.forward(&mut t, ps, zv, tv)?;
        Ok((t.value(o.tokens).clone(), t.value(o.weights).clone()))
    };
    let (a, w) = run(&ps)?;
    let dev = w.to_f64_vec().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let mut r = rng(seed + 3);
    for id in [xa.q.w, xa.k.w] {
        ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let (b, _) = run(&ps)?;
    Ok((dev, a.max_abs_diff(&b)))
}

/// Micro model with `W_t` zeroed: max abs difference between the outputs
/// for two different prompts.
pub fn zeroed_text_projection_diff(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::micro();
    let (m, mut ps) = SwinTextUNet::new::<f64>(&cfg, seed)?;
    let w = m.guidance.as_ref().expect("text guidance on").projector.w_t.w;
    ps.tensor_mut(w).data_mut().fill(0.0);
    let img = randn(&[1, 3, 16, 16], seed + 1);
    let run = |txt: u64| -> Result<Tensor<f64>> {
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let text = t.constant(randn(&[1, 1, cfg.text_dim], txt));
        let o = m.forward(&mut t, &ps, x, Some(text))?;
        Ok(t.value(o.probs).clone())
    };
    Ok(run(seed + 10)?.max_abs_diff(&run(seed + 11)?))
}

fn attention_suite(opts: &VerifyOptions) -> Result<Vec<Property>> {
    let mut out = Vec::new();
    let worst = |f: &dyn Fn(u64) -> Result<f64>| -> Result<f64> {
        let mut m: f64 = 0.0;
        for seed in 0..opts.seeds {
            m = m.max(f(seed)?);
        }
        Ok(m)
    };
    out.push(Property::within(
        "attention-oracle",
        "shifted_window_8x8_M4",
        worst(&|s| shifted_window_oracle_diff(8, 4, 8, 2, s))?,
        1e-10,
    ));
    out.push(Property::within(
        "attention-oracle",
        "shifted_window_12x12_M4",
        worst(&|s| shifted_window_oracle_diff(12, 4, 6, 3, s))?,
        1e-10,
    ));
    out.push(Property::within(
        "attention-oracle",
        "full_window_equals_global",
        worst(&|s| global_attention_oracle_diff(4, 8, 2, s))?,
        1e-10,
    ));
    let mut dev: f64 = 0.0;
    let mut qk: f64 = 0.0;
    for s in 0..opts.seeds {
        let (a, b) = single_token_cross_attention(s)?;
        dev = dev.max(a);
        qk = qk.max(b);
    }
    out.push(Property::within("attention-oracle", "cross_attention_weights_exactly_1", dev, 0.0));
    out.push(Property::within("attention-oracle", "cross_attention_ignores_query_key", qk, 0.0));
    out.push(Property::within(
        "attention-oracle",
        "zeroed_text_projection_prompt_independent",
        worst(&zeroed_text_projection_diff)?,
        0.0,
    ));
    for (grid, window) in [(56, 7), (8, 4), (16, 4), (8, 8)] {
        let row = bench(grid, window, 8, 1, 1)?;
        let name = format!("mac_ratio_{grid}x{grid}_M{window}={}/{}", window * window, grid * grid);
        let err = (row.ratio() - (window * window) as f64 / (grid * grid) as f64).abs();
        out.push(Property {
            suite: "attention-oracle",
            name,
            max_err: err,
            tolerance: 0.0,
            passed: row.ratio_is_exact(),
        });
    }
    Ok(out)
}

fn metrics_suite(opts: &VerifyOptions) -> Result<Vec<Property>> {
    let mut out = Vec::new();
    let mut r = rng(11);
    let (mut ident, mut sym, mut selfm): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 * opts.seeds.max(1) {
        let n = r.random_range(1..300);
        let (pa, pb) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let a: Vec<bool> = (0..n).map(|_| r.random_bool(pa)).collect();
        let b: Vec<bool> = (0..n).map(|_| r.random_bool(pb)).collect();
        let (d, j) = dice_iou(&a, &b)?;
        let (d2, j2) = dice_iou(&b, &a)?;
        let (d3, j3) = dice_iou(&a, &a)?;
        ident = ident.max((d - 2.0 * j / (1.0 + j)).abs());
        sym = sym.max((d - d2).abs()).max((j - j2).abs());
        selfm = selfm.max((d3 - 1.0).abs()).max((j3 - 1.0).abs());
    }
    out.push(Property::within("metrics", "dice_equals_2iou_over_1_plus_iou", ident, 1e-12));
    out.push(Property::within("metrics", "dice_iou_symmetric", sym, 0.0));
    out.push(Property::within("metrics", "dice_iou_self_is_one", selfm, 0.0));

    let (mut ce, mut dl, mut dec): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..opts.seeds {
        let mut t = Tape::<f64>::new();
        let y = binary_target(&[2, 1, 5, 5], seed);
        let yv = t.constant(y.clone());
        let half = t.constant(Tensor::full(&[2, 1, 5, 5], 0.5));
        let c = ce_loss(&mut t, half, yv)?;
        ce = ce.max((t.value(c).item() - std::f64::consts::LN_2).abs());
        let perfect = t.constant(y);
        let d = dice_loss(&mut t, perfect, yv, 1e-6)?;
        dl = dl.max(t.value(d).item().abs());
        let z = t.constant(randn(&[2, 1, 5, 5], seed + 50));
        let p = t.sigmoid(z);
        let (ld, lc) = (0.25 + seed as f64 * 0.1, 1.5);
        let h = hybrid_loss(&mut t, p, yv, &LossConfig { lambda_dice: ld, lambda_ce: lc, eps: 1e-6 })?;
        let want = ld * t.value(h.dice).item() + lc * t.value(h.ce).item();
        dec = dec.max((t.value(h.total).item() - want).abs());
    }
    out.push(Property::within("metrics", "ce_at_one_half_is_ln2", ce, 1e-9));
    out.push(Property::within("metrics", "perfect_prediction_dice_loss", dl, 1e-9));
    out.push(Property::within("metrics", "hybrid_is_weighted_sum", dec, 0.0));
    Ok(out)
}
