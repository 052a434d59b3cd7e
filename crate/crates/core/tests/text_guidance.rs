use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swintext::config::ModelConfig;
use swintext::gradcheck::{randn, weighted_sum, GradCheck};
use swintext::nn::Builder;
use swintext::text::{
    apply_guidance, cross_attention_heads, edit_distance, fnv1a64, normalize_prompt, stub_encode,
    text_batch, ConcatFusion, CrossAttention, EmbeddingTable, SplitMix64, TextProjector, TextSource,
};
use swintext::{Error, ParamStore, Tape, Tensor};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn normalization_rule() {
    assert_eq!(normalize_prompt("  Upper   LEFT\tLung \n"), "upper left lung");
    assert_eq!(normalize_prompt("   "), "");
}

#[test]
fn hash_reference_values() {
    // Published FNV-1a 64 and splitmix64 test vectors.
    assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    let mut r = SplitMix64(0);
    assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
    assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
}

#[test]
fn stub_is_deterministic_and_unit_norm() {
    let a = stub_encode("upper left lung", 512, 0).unwrap();
    let b = stub_encode("  Upper Left  Lung", 512, 0).unwrap();
    assert_eq!(a, b);
    for dim in [1, 7, 512] {
        let e = stub_encode("x", dim, 3).unwrap();
        let n: f64 = e.pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
        assert_eq!(e.dim(), dim);
    }
    assert_ne!(stub_encode("x", 8, 1).unwrap(), stub_encode("x", 8, 2).unwrap());
    assert!(matches!(stub_encode(" \t", 8, 0), Err(Error::Usage(_))));
}

#[test]
fn distinct_prompts_get_distinct_stubs() {
    let l = "upper left";
    let r = "upper right";
    assert_ne!(fnv1a64(l.as_bytes()), fnv1a64(r.as_bytes()));
    let a = stub_encode(l, 512, 0).unwrap();
    let b = stub_encode(r, 512, 0).unwrap();
    assert!(cos(&a.pooled, &b.pooled) < 0.999);
}

fn sample_table(dim: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dim);
    for (i, p) in ["upper left lung", "upper right lung", "lower left lung"].iter().enumerate() {
        let v: Vec<f32> = (0..dim).map(|j| (i * dim + j) as f32 * 0.25 - 3.0).collect();
        t.insert(p, v).unwrap();
    }
    t
}

#[test]
fn ctxe_round_trip_is_bit_exact() {
    let t = sample_table(512);
    let bytes = t.to_bytes();
    assert_eq!(&bytes[..4], b"CTXE");
    assert_eq!(bytes.len(), 16 + 3 * 4 + 15 + 16 + 15 + 3 * 512 * 4);
    let back = EmbeddingTable::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.dim(), 512);
    assert!(back.records().iter().all(|(_, v)| v.len() == 512));
    let e = back.resolve("Upper Right Lung").unwrap();
    assert_eq!(e.pooled[0], 512.0 * 0.25 - 3.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.ctxe");
    t.write(&path).unwrap();
    assert_eq!(EmbeddingTable::read(&path).unwrap(), t);
}

#[test]
fn ctxe_rejects_corruption_with_offsets() {
    let bytes = sample_table(4).to_bytes();
    match EmbeddingTable::from_bytes(&[]) {
        Err(Error::Format { offset: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(EmbeddingTable::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(EmbeddingTable::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    match EmbeddingTable::from_bytes(&bytes[..bytes.len() - 3]) {
        Err(Error::Format { offset, message }) => {
            assert!(message.contains("truncated"), "{message}");
            assert_eq!(offset, bytes.len() - 16);
        }
        other => panic!("{other:?}"),
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(EmbeddingTable::from_bytes(&extra), Err(Error::Format { .. })));
}

#[test]
fn unknown_prompt_lists_nearest_keys() {
    let t = sample_table(4);
    match t.resolve("upper left lungs") {
        Err(Error::Resolution { prompt, nearest }) => {
            assert_eq!(prompt, "upper left lungs");
            assert_eq!(nearest[0], "upper left lung");
            assert_eq!(nearest.len(), 3);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(edit_distance("kitten", "sitting"), 3);
    let mut dup = sample_table(4);
    assert!(dup.insert("UPPER LEFT LUNG", vec![0.0; 4]).is_err());
}

#[test]
fn file_source_can_normalize() {
    let t = std::sync::Arc::new(sample_table(4));
    let raw = TextSource::File { table: t.clone(), l2_normalize: false };
    let unit = TextSource::File { table: t, l2_normalize: true };
    let a = raw.resolve("upper left lung").unwrap();
    let b = unit.resolve("upper left lung").unwrap();
    assert_eq!(a.pooled[0], -3.0);
    let n: f64 = b.pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-12);
    assert_eq!(TextSource::Stub { dim: 9, seed: 0 }.dim(), 9);
}

fn projector(dt: usize, dv: usize, widths: &[usize], std: f64) -> (ParamStore<f64>, TextProjector) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = TextProjector::build(&mut Builder::new(&mut ps, &mut rng, std), dt, dv, widths).unwrap();
    (ps, p)
}

fn set_identity(ps: &mut ParamStore<f64>, id: usize) {
    let t = ps.tensor_mut(id);
    let n = t.shape()[0];
    let d = t.data_mut();
    d.fill(0.0);
    for i in 0..n {
        d[i * n + i] = 1.0;
    }
}

#[test]
fn identity_and_zero_projection() {
    let (mut ps, p) = projector(5, 5, &[5], 0.2);
    set_identity(&mut ps, p.w_t.w);
    set_identity(&mut ps, p.adapters[0].w);
    let x = randn(&[2, 1, 5], 3);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = p.project(&mut t, &ps, v, 0).unwrap();
    assert_eq!(t.value(y).data(), x.data());

    ps.tensor_mut(p.w_t.w).data_mut().fill(0.0);
    let y = p.project(&mut t, &ps, v, 0).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    assert!(p.project(&mut t, &ps, v, 1).is_err());
    let bad = t.constant(randn(&[2, 1, 4], 3));
    assert!(matches!(p.project(&mut t, &ps, bad, 0), Err(Error::Shape(_))));
}

#[test]
fn projection_gradcheck() {
    let (ps, p) = projector(6, 4, &[3, 5], 0.5);
    for seed in 0..4 {
        let x = randn(&[2, 1, 6], seed);
        let r = GradCheck::default()
            .run_with_params("project_text", &ps, &[x], |t, ps, v| {
                let a = p.project(t, ps, v[0], (seed % 2) as usize)?;
                weighted_sum(t, a, seed)
            })
            .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

fn xattn(dim: usize, std: f64, seed: u64) -> (ParamStore<f64>, CrossAttention) {
    let cfg = ModelConfig::default();
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = CrossAttention::build(&mut Builder::new(&mut ps, &mut rng, std), dim, &cfg).unwrap();
    // Nonzero biases and affine terms so the oracle below sees every term.
    for id in 0..ps.len() {
        if ps.name(id).ends_with("bias") || ps.name(id).contains("norm") {
            let r = randn(ps.tensor(id).shape(), 50 + id as u64);
            ps.tensor_mut(id).data_mut().copy_from_slice(r.data());
        }
    }
    (ps, x)
}

#[test]
fn head_rule() {
    assert_eq!(cross_attention_heads(16), 1);
    assert_eq!(cross_attention_heads(96), 3);
    assert_eq!(cross_attention_heads(768), 24);
    assert_eq!(cross_attention_heads(100), 2);
}

/// Row-wise `x W + b` over `[n, cin]`.
fn lin(ps: &ParamStore<f64>, l: &swintext::nn::Linear, x: &[f64], cin: usize) -> Vec<f64> {
    let w = ps.tensor(l.w).data();
    let cout = w.len() / cin;
    let n = x.len() / cin;
    let mut out = vec![0.0; n * cout];
    for r in 0..n {
        for o in 0..cout {
            let mut acc = l.b.map_or(0.0, |b| ps.tensor(b).data()[o]);
            for i in 0..cin {
                acc += x[r * cin + i] * w[i * cout + o];
            }
            out[r * cout + o] = acc;
        }
    }
    out
}

fn ln(ps: &ParamStore<f64>, n: &swintext::nn::LayerNorm, x: &[f64], c: usize) -> Vec<f64> {
    let g = ps.tensor(n.gamma).data();
    let b = ps.tensor(n.beta).data();
    x.chunks(c)
        .flat_map(|row| {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            let r = 1.0 / (v + n.eps).sqrt();
            row.iter().enumerate().map(move |(i, x)| (x - m) * r * g[i] + b[i]).collect::<Vec<_>>()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608 * (x + 0.044715 * x * x * x)).tanh())
}

#[test]
fn single_text_token_attention_is_the_value_vector() {
    let (c, n) = (64, 9);
    for seed in 0..3 {
        let (ps, blk) = xattn(c, 0.2, seed);
        assert_eq!(blk.heads, 2);
        let z = randn(&[1, n, c], 10 + seed);
        let txt = randn(&[1, 1, c], 20 + seed);
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let tv = t.constant(txt.clone());
        let out = blk.forward(&mut t, &ps, zv, tv).unwrap();
        assert_eq!(t.shape(out.weights), &[1, 2, n, 1]);
        assert!(t.value(out.weights).data().iter().all(|&w| w == 1.0));

        // Oracle that never forms Q or K: every token receives V W_O + b_O.
        let v = lin(&ps, &blk.v, txt.data(), c);
        let a = lin(&ps, &blk.proj, &v, c);
        let pre: Vec<f64> = z.data().iter().enumerate().map(|(i, x)| x + a[i % c]).collect();
        let z1 = ln(&ps, &blk.norm1, &pre, c);
        let h = ln(&ps, &blk.norm2, &z1, c);
        let h: Vec<f64> = lin(&ps, &blk.mlp.fc1, &h, c).into_iter().map(gelu).collect();
        let h = lin(&ps, &blk.mlp.fc2, &h, 4 * c);
        let want: Vec<f64> = z1.iter().zip(&h).map(|(a, b)| a + b).collect();
        let diff = t.value(out.tokens).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max abs diff {diff}");
    }
}

#[test]
fn zero_value_and_mlp_output_leave_layer_norm_of_input() {
    let c = 16;
    let (mut ps, blk) = xattn(c, 0.2, 4);
    for id in [blk.v.w, blk.v.b.unwrap(), blk.proj.b.unwrap(), blk.mlp.fc2.w, blk.mlp.fc2.b.unwrap()] {
        ps.tensor_mut(id).data_mut().fill(0.0);
    }
    let z = randn(&[2, 5, c], 1);
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let tv = t.constant(randn(&[2, 1, c], 2));
    let out = blk.forward(&mut t, &ps, zv, tv).unwrap();
    let want = ln(&ps, &blk.norm1, z.data(), c);
    let diff = t.value(out.tokens).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn cross_attention_gradcheck_vision_and_text() {
    for seed in 0..3 {
        let (ps, blk) = xattn(8, 0.4, seed);
        let z = randn(&[2, 4, 8], seed);
        let txt = randn(&[2, 1, 8], 100 + seed);
        let r = GradCheck::default()
            .with_max_entries(24)
            .run_with_params("cross_attention", &ps, &[z, txt], |t, ps, v| {
                let o = blk.forward(t, ps, v[0], v[1])?;
                weighted_sum(t, o.tokens, seed)
            })
            .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn cross_attention_macs_scale_with_tokens_and_channels() {
    for (b, n, c) in [(1, 16, 32), (2, 64, 64), (3, 4, 96)] {
        let (ps, blk) = xattn(c, 0.02, 0);
        let mut t = Tape::inference();
        let z = t.constant(Tensor::<f64>::zeros(&[b, n, c]));
        let txt = t.constant(Tensor::zeros(&[b, 1, c]));
        blk.forward(&mut t, &ps, z, txt).unwrap();
        assert_eq!(t.macs("xattn_score"), (b * n * c) as u64);
        assert_eq!(t.macs("xattn_aggregate"), (b * n * c) as u64);
    }
}

#[test]
fn concat_mode_matches_cross_attention_shape() {
    let mut ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cat = ConcatFusion::build(&mut Builder::new(&mut ps, &mut rng, 0.1), 8).unwrap();
    let (ps2, blk) = xattn(8, 0.1, 0);
    let mut t = Tape::new();
    let z = t.constant(randn(&[2, 6, 8], 0));
    let txt = t.constant(randn(&[2, 1, 8], 1));
    let a = cat.forward(&mut t, &ps, z, txt).unwrap();
    let b = blk.forward(&mut t, &ps2, z, txt).unwrap();
    assert_eq!(t.shape(a), t.shape(b.tokens));
    let r = GradCheck::default()
        .run_with_params("concat", &ps, &[randn(&[2, 3, 8], 4), randn(&[2, 1, 8], 5)], |t, ps, v| {
            let o = cat.forward(t, ps, v[0], v[1])?;
            weighted_sum(t, o, 2)
        })
        .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn no_guidance_is_identity() {
    let mut t = Tape::<f64>::new();
    let ps = ParamStore::new();
    let toks = vec![t.constant(randn(&[1, 4, 2], 0)), t.constant(randn(&[1, 1, 4], 1))];
    let g = apply_guidance(&mut t, &ps, None, &toks, None).unwrap();
    assert_eq!(g.tokens, toks);
    assert!(g.weights.iter().all(Option::is_none));
}

#[test]
fn text_batch_stacks_embeddings() {
    let a = stub_encode("a", 4, 0).unwrap();
    let b = stub_encode("b", 4, 0).unwrap();
    let t: Tensor<f64> = text_batch(&[&a, &b]).unwrap();
    assert_eq!(t.shape(), &[2, 1, 4]);
    assert_eq!(&t.data()[4..], b.pooled.as_slice());
    let c = stub_encode("c", 5, 0).unwrap();
    assert!(text_batch::<f64>(&[&a, &c]).is_err());
}
