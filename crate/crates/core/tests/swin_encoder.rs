use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swintext::config::{ModelConfig, StageSpec};
use swintext::gradcheck::{randn, weighted_sum, GradCheck};
use swintext::nn::Builder;
use swintext::swin::{
    build_shift_mask, region_labels, relative_position_index, window_partition, window_reverse,
    Encoder, PatchEmbed, PatchMerge, SwinBlock, WindowAttention,
};
use swintext::{Error, ParamStore, Tape, Tensor};

fn attention(dim: usize, window: usize, heads: usize, std: f64, seed: u64) -> (ParamStore<f64>, WindowAttention) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng, std), dim, window, heads).unwrap();
    (ps, attn)
}

fn toy() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        embed_dim: 16,
        window: 4,
        heads: vec![1, 2, 4, 8],
        ..ModelConfig::default()
    }
}

/// Plain loops over one sequence: softmax(q k^T / sqrt(d) + bias) v, where
/// `allowed(i, j)` restricts the keys and `bias(h, i, j)` is added.
fn naive_attention(
    x: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    ps: &ParamStore<f64>,
    attn: &WindowAttention,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let lin = |id: usize, b: Option<usize>, inp: &[f64], cin: usize, cout: usize| -> Vec<f64> {
        let w = ps.tensor(id).data();
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| ps.tensor(b).data()[o]);
                for i in 0..cin {
                    acc += inp[t * cin + i] * w[i * cout + o];
                }
                out[t * cout + o] = acc;
            }
        }
        out
    };
    let q = lin(attn.q.w, attn.q.b, x, c, c);
    let k = lin(attn.k.w, attn.k.b, x, c, c);
    let v = lin(attn.v.w, attn.v.b, x, c, c);
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
    lin(attn.proj.w, attn.proj.b, &mixed, c, c)
}

#[test]
fn partition_round_trip_is_exact() {
    for shift in [0, 2] {
        let x = randn(&[2, 64, 5], 3 + shift as u64);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let w = window_partition(&mut t, v, 8, 4, shift).unwrap();
        assert_eq!(t.shape(w), &[8, 16, 5]);
        let back = window_reverse(&mut t, w, 2, 8, 4, shift).unwrap();
        assert_eq!(t.value(back).data(), x.data());
    }
}

#[test]
fn window_counts() {
    let mut t = Tape::<f32>::new();
    let v = t.constant(Tensor::zeros(&[1, 56 * 56, 1]));
    let w = window_partition(&mut t, v, 56, 7, 0).unwrap();
    assert_eq!(t.shape(w), &[64, 49, 1]);
    let v = t.constant(Tensor::zeros(&[1, 36, 1]));
    assert!(matches!(window_partition(&mut t, v, 6, 4, 0), Err(Error::Config(_))));
}

#[test]
fn unshifted_mask_is_all_zero() {
    let m = build_shift_mask(8, 8, 4, 0).unwrap();
    assert_eq!(m.windows, 4);
    assert!((0..4).all(|w| m.masked_count(w) == 0));
}

#[test]
fn shifted_mask_matches_brute_force_labels() {
    let (g, win, s) = (8, 4, 2);
    let m = build_shift_mask(g, g, win, s).unwrap();
    // Independent labeling: a token at original (y, x) belongs to band
    // (y < s, s <= y < g - win + s, y >= g - win + s) on each axis.
    let band = |v: usize| (v >= s) as usize + (v >= g - win + s) as usize;
    for w in 0..4 {
        let (wy, wx) = (w / 2, w % 2);
        let label = |i: usize| {
            let y = (wy * win + i / win + s) % g;
            let x = (wx * win + i % win + s) % g;
            (band(y), band(x))
        };
        let mut expect = 0;
        for i in 0..16 {
            for j in 0..16 {
                let masked = label(i) != label(j);
                expect += masked as usize;
                assert_eq!(m.is_masked(w, i, j), masked);
                assert_eq!(m.is_masked(w, i, j), m.is_masked(w, j, i));
            }
            assert!(!m.is_masked(w, i, i));
        }
        assert_eq!(m.masked_count(w), expect);
    }
    // The last window wraps both axes: four 2x2 regions, 256 - 4 * 16 masked.
    assert_eq!(m.masked_count(3), 256 - 4 * 16);
    assert_eq!(m.masked_count(0), 0);
    assert_eq!(m.masked_count(1), 256 - 2 * 64);
    assert_eq!(region_labels(8, 8, 4, 0), vec![0; 64]);
}

#[test]
fn relative_index_covers_table() {
    let idx = relative_position_index(3);
    assert_eq!(idx.len(), 81);
    assert_eq!(*idx.iter().max().unwrap(), 24);
    // Diagonal pairs all share the zero offset at the table center.
    assert!((0..9).all(|i| idx[i * 9 + i] == 12));
}

#[test]
fn full_window_equals_global_attention() {
    let (g, c, heads) = (4, 8, 2);
    let (ps, attn) = attention(c, g, heads, 0.3, 7);
    // Relative bias zeroed so the window path reduces to plain attention.
    let mut ps = ps;
    ps.tensor_mut(attn.bias.table).data_mut().fill(0.0);
    let x = randn(&[1, g * g, c], 11);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = window_partition(&mut t, v, g, g, 0).unwrap();
    let out = attn.forward(&mut t, &ps, w, None).unwrap();
    let want = naive_attention(x.data(), g * g, c, heads, &ps, &attn, |_, _| true, |_, _, _| 0.0);
    let got = t.value(out).data();
    let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10, "max abs diff {diff}");
}

#[test]
fn shifted_window_equals_per_region_oracle() {
    let (g, win, s, c, heads) = (8, 4, 2, 8, 2);
    for seed in 0..5 {
        let (ps, attn) = attention(c, win, heads, 0.3, seed);
        let x = randn(&[2, g * g, c], 100 + seed);
        let mask = build_shift_mask(g, g, win, s).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let w = window_partition(&mut t, v, g, win, s).unwrap();
        let m = t.constant(mask.tensor());
        let out = attn.forward(&mut t, &ps, w, Some(m)).unwrap();
        let out = window_reverse(&mut t, out, 2, g, win, s).unwrap();
        let got = t.value(out).data();

        let band = |v: usize| (v >= s) as usize + (v >= g - win + s) as usize;
        let table = ps.tensor(attn.bias.table).data();
        let span = 2 * win - 1;
        let mut max_diff: f64 = 0.0;
        for b in 0..2 {
            let xb = &x.data()[b * g * g * c..(b + 1) * g * g * c];
            let same_region = |i: usize, j: usize| {
                (band(i / g), band(i % g)) == (band(j / g), band(j % g))
            };
            // Within one pre-shift region offsets never wrap, so original
            // coordinates give the same relative offsets as the window.
            let bias = |h: usize, i: usize, j: usize| {
                let dy = (i / g) as isize - (j / g) as isize + win as isize - 1;
                let dx = (i % g) as isize - (j % g) as isize + win as isize - 1;
                table[(dy as usize * span + dx as usize) * heads + h]
            };
            let want = naive_attention(xb, g * g, c, heads, &ps, &attn, same_region, bias);
            let gb = &got[b * g * g * c..(b + 1) * g * g * c];
            for (a, w) in gb.iter().zip(&want) {
                max_diff = max_diff.max((a - w).abs());
            }
        }
        assert!(max_diff <= 1e-10, "seed {seed}: max abs diff {max_diff}");
    }
}

#[test]
fn single_token_windows_return_projected_values() {
    let (ps, attn) = attention(4, 1, 1, 0.5, 2);
    let x = randn(&[1, 4, 4], 5);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = window_partition(&mut t, v, 2, 1, 0).unwrap();
    let out = attn.forward(&mut t, &ps, w, None).unwrap();
    let want = naive_attention(x.data(), 4, 4, 1, &ps, &attn, |i, j| i == j, |_, _, _| 0.0);
    let diff = t.value(out).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn heads_must_divide_channels() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = WindowAttention::build(&mut Builder::new(&mut ps, &mut rng, 0.02), 10, 2, 3);
    assert!(matches!(r, Err(Error::Config(_))));
}

fn block(shift_index: usize, std: f64) -> (ParamStore<f64>, SwinBlock) {
    let spec = StageSpec {
        channels: 8,
        depth: 2,
        heads: 2,
        grid: 8,
        window: 4,
        shift: 2,
    };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let blk = SwinBlock::build(&mut Builder::new(&mut ps, &mut rng, std), &spec, shift_index, &ModelConfig::default()).unwrap();
    (ps, blk)
}

#[test]
fn zero_weight_block_passes_input_through() {
    for idx in [0, 1] {
        let (ps, blk) = block(idx, 0.0);
        assert_eq!(blk.mask().is_some(), idx == 1);
        let x = randn(&[2, 64, 8], 1);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = blk.forward(&mut t, &ps, v).unwrap();
        assert_eq!(t.value(y).data(), x.data());
    }
}

#[test]
fn block_gradcheck() {
    for idx in [0, 1] {
        let (ps, blk) = block(idx, 0.3);
        let x = randn(&[1, 64, 8], 4);
        let r = GradCheck::default()
            .with_max_entries(24)
            .run_with_params("swin_block", &ps, &[x], |t, ps, v| {
                let y = blk.forward(t, ps, v[0])?;
                weighted_sum(t, y, 1)
            })
            .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn patch_embed_shapes_and_constant_images() {
    let cfg = toy();
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pe = PatchEmbed::build(&mut Builder::new(&mut ps, &mut rng, 0.1), &cfg).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[2, 3, 64, 64], 0.3));
    let z = pe.forward(&mut t, &ps, x).unwrap();
    assert_eq!(t.shape(z), &[2, 256, 16]);
    let d = t.value(z).data();
    assert!(d.chunks(16).all(|tok| tok == &d[..16]));
    let bad = t.constant(Tensor::zeros(&[1, 3, 30, 30]));
    assert!(matches!(pe.forward(&mut t, &ps, bad), Err(Error::Config(_))));
}

#[test]
fn patch_merge_shapes_and_order() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pm = PatchMerge::build(&mut Builder::new(&mut ps, &mut rng, 0.1), 16, 1e-5).unwrap();
    let mut t = Tape::new();
    let x = t.constant(randn(&[1, 256, 16], 0));
    let y = pm.forward(&mut t, &ps, x, 16).unwrap();
    assert_eq!(t.shape(y), &[1, 64, 32]);
    let odd = t.constant(randn(&[1, 9, 16], 0));
    assert!(matches!(pm.forward(&mut t, &ps, odd, 3), Err(Error::Config(_))));
    // Neighbor order: (0,0), (1,0), (0,1), (1,1) as (row, col).
    let idx = PatchMerge::neighborhood_index(1, 4, 1);
    assert_eq!(&idx[..4], &[0, 4, 1, 5]);
}

#[test]
fn toy_encoder_shapes_and_determinism() {
    let cfg = toy();
    let mut ps = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::build(&mut Builder::new(&mut ps, &mut rng, 0.02), &cfg).unwrap();
    let img = randn(&[2, 3, 64, 64], 1).cast::<f32>();
    let run = || {
        let mut t = Tape::inference();
        let x = t.constant(img.clone());
        let e = enc.forward(&mut t, &ps, x).unwrap();
        let shapes: Vec<Vec<usize>> = e.tokens.iter().map(|&z| t.shape(z).to_vec()).collect();
        let skips: Vec<Vec<usize>> = e.skips.iter().map(|&z| t.shape(z).to_vec()).collect();
        let last = t.value(*e.tokens.last().unwrap()).clone();
        (shapes, skips, last)
    };
    let (shapes, skips, a) = run();
    assert_eq!(shapes, vec![vec![2, 256, 16], vec![2, 64, 32], vec![2, 16, 64], vec![2, 4, 128]]);
    assert_eq!(skips, vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 128, 2, 2]]);
    let (_, _, b) = run();
    assert_eq!(a.data(), b.data());
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = ModelConfig {
        image_size: 32,
        embed_dim: 8,
        window: 4,
        depths: vec![2, 2],
        heads: vec![1, 2],
        ..ModelConfig::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::build(&mut Builder::new(&mut ps, &mut rng, 0.1), &cfg).unwrap();
    let a = randn(&[1, 3, 32, 32], 1);
    let b = randn(&[1, 3, 32, 32], 2);
    let cat = |x: &Tensor<f64>, y: &Tensor<f64>| {
        Tensor::new(vec![2, 3, 32, 32], [x.data(), y.data()].concat()).unwrap()
    };
    let out = |img: Tensor<f64>| {
        let mut t = Tape::inference();
        let x = t.constant(img);
        let e = enc.forward(&mut t, &ps, x).unwrap();
        t.value(e.tokens[1]).data().to_vec()
    };
    let ab = out(cat(&a, &b));
    let ba = out(cat(&b, &a));
    let half = ab.len() / 2;
    assert_eq!(&ab[..half], &ba[half..]);
    assert_eq!(&ab[half..], &ba[..half]);
}
