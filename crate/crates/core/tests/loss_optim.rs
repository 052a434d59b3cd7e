use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swintext::augment::{augment, hflip, rotate, vflip};
use swintext::config::{AugmentConfig, LossConfig, OptimConfig, ScheduleConfig};
use swintext::gradcheck::{randn, GradCheck};
use swintext::loss::{ce_loss, dice_loss, hybrid_loss};
use swintext::metrics::{dice_iou, Confusion, MeanMetrics};
use swintext::optim::{lr_at, AdamW};
use swintext::{Error, ParamStore, Tape, Tensor};

fn scalar(t: &Tape<f64>, v: swintext::Var) -> f64 {
    t.value(v).to_f64_vec()[0]
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

#[test]
fn dice_iou_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let n = rng.random_range(1..400);
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = random_mask(&mut rng, n, pa);
        let b = random_mask(&mut rng, n, pb);
        let (d, j) = dice_iou(&a, &b).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12, "pair {i}: dice {d} iou {j}");
        let (d2, j2) = dice_iou(&b, &a).unwrap();
        assert_eq!((d, j), (d2, j2));
        assert_eq!(dice_iou(&a, &a).unwrap(), (1.0, 1.0));
    }
}

#[test]
fn metric_conventions() {
    assert_eq!(dice_iou(&[false; 5], &[false; 5]).unwrap(), (1.0, 1.0));
    assert_eq!(dice_iou(&[true, false], &[false, true]).unwrap(), (0.0, 0.0));
    // tp=1 fp=1 fn=1 -> dice 2/4, iou 1/3
    let (d, j) = dice_iou(&[true, true, false], &[true, false, true]).unwrap();
    assert_eq!((d, j), (0.5, 1.0 / 3.0));
    let c = Confusion::from_probs(&[0.5, 0.49, 0.9], &[1.0, 1.0, 0.0]).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
    assert!(matches!(dice_iou(&[true], &[true, false]), Err(Error::Shape(_))));
    let mut m = MeanMetrics::default();
    m.push(&Confusion { tp: 1, fp: 0, fn_: 0 });
    m.push(&Confusion { tp: 0, fp: 1, fn_: 0 });
    assert_eq!(m.dice(), 0.5);
}

#[test]
fn cross_entropy_at_one_half_is_ln2() {
    let mut t = Tape::<f64>::new();
    let p = t.constant(Tensor::full(&[2, 1, 4, 4], 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = (0..32).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let y = t.constant(Tensor::from_f64(vec![2, 1, 4, 4], &y).unwrap());
    let ce = ce_loss(&mut t, p, y).unwrap();
    assert!((scalar(&t, ce) - std::f64::consts::LN_2).abs() <= 1e-9);
}

#[test]
fn perfect_prediction_has_near_zero_dice_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y: Vec<f64> = (0..64).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let mut t = Tape::<f64>::new();
    let p = t.constant(Tensor::from_f64(vec![1, 1, 8, 8], &y).unwrap());
    let yv = t.constant(Tensor::from_f64(vec![1, 1, 8, 8], &y).unwrap());
    let d = dice_loss(&mut t, p, yv, 1e-6).unwrap();
    assert!(scalar(&t, d).abs() <= 1e-9);
    // Both empty: the eps terms make the ratio exactly 1.
    let z = t.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let d = dice_loss(&mut t, z, z, 1e-6).unwrap();
    assert_eq!(scalar(&t, d), 0.0);
}

#[test]
fn dice_and_ce_match_direct_formulas() {
    let p = [0.9, 0.2, 0.6, 0.05];
    let y = [1.0, 0.0, 1.0, 1.0];
    let mut t = Tape::<f64>::new();
    let pv = t.constant(Tensor::from_f64(vec![4], &p).unwrap());
    let yv = t.constant(Tensor::from_f64(vec![4], &y).unwrap());
    let d = dice_loss(&mut t, pv, yv, 1e-6).unwrap();
    let c = ce_loss(&mut t, pv, yv).unwrap();
    let inter: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
    let want_d = 1.0 - (2.0 * inter + 1e-6) / (p.iter().sum::<f64>() + y.iter().sum::<f64>() + 1e-6);
    let want_c = -p.iter().zip(&y).map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / 4.0;
    assert!((scalar(&t, d) - want_d).abs() < 1e-14);
    assert!((scalar(&t, c) - want_c).abs() < 1e-14);
}

#[test]
fn hybrid_is_weighted_sum_of_terms() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(randn(&[1, 1, 6, 6], 1));
    let p = t.sigmoid(z);
    let y: Vec<f64> = randn(&[36], 2).to_f64_vec().iter().map(|&v| (v > 0.0) as u8 as f64).collect();
    let y = t.constant(Tensor::from_f64(vec![1, 1, 6, 6], &y).unwrap());
    for (ld, lc) in [(1.0, 1.0), (0.3, 2.5), (0.0, 1.0), (1.0, 0.0)] {
        let cfg = LossConfig { lambda_dice: ld, lambda_ce: lc, eps: 1e-6 };
        let h = hybrid_loss(&mut t, p, y, &cfg).unwrap();
        let want = ld * scalar(&t, h.dice) + lc * scalar(&t, h.ce);
        assert_eq!(scalar(&t, h.total), want);
    }
    let cfg = LossConfig { lambda_dice: 0.0, lambda_ce: 0.0, eps: 1e-6 };
    assert!(matches!(hybrid_loss(&mut t, p, y, &cfg), Err(Error::Config(_))));
    let short = t.constant(Tensor::zeros(&[1, 1, 6, 5]));
    assert!(matches!(hybrid_loss(&mut t, p, short, &LossConfig::default()), Err(Error::Shape(_))));
}

#[test]
fn hybrid_loss_gradcheck_wrt_logits() {
    for seed in 0..4 {
        let y: Vec<f64> = randn(&[50], 100 + seed).to_f64_vec().iter().map(|&v| (v > 0.3) as u8 as f64).collect();
        let y = Tensor::from_f64(vec![2, 1, 5, 5], &y).unwrap();
        let r = GradCheck::default()
            .run("hybrid_loss", &[randn(&[2, 1, 5, 5], seed)], |t, v| {
                let p = t.sigmoid(v[0]);
                let yv = t.constant(y.clone());
                Ok(hybrid_loss(t, p, yv, &LossConfig::default())?.total)
            })
            .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

fn scalar_store(v: f64) -> (ParamStore<f64>, usize) {
    let mut ps = ParamStore::new();
    let id = ps.insert("p", Tensor::from_f64(vec![1], &[v]).unwrap()).unwrap();
    (ps, id)
}

#[test]
fn adamw_zero_grad_without_decay_is_noop() {
    let (mut ps, id) = scalar_store(0.75);
    let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(&ps, cfg);
    for _ in 0..10 {
        opt.update(&mut ps, &[Some(Tensor::zeros(&[1]))], 1e-2).unwrap();
    }
    assert_eq!(ps.tensor(id).to_f64_vec(), vec![0.75]);
    // No gradient at all: skipped even with decay.
    let mut opt = AdamW::new(&ps, OptimConfig::default());
    opt.update(&mut ps, &[None], 1e-2).unwrap();
    assert_eq!(ps.tensor(id).to_f64_vec(), vec![0.75]);
}

#[test]
fn adamw_first_step_has_magnitude_lr() {
    for g in [3.0, -0.02, 250.0] {
        let (mut ps, id) = scalar_store(1.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&ps, cfg.clone());
        opt.update(&mut ps, &[Some(Tensor::from_f64(vec![1], &[g]).unwrap())], 1e-3).unwrap();
        let want = 1.0 - 1e-3 * g / (g.abs() + cfg.eps);
        assert!((ps.tensor(id).to_f64_vec()[0] - want).abs() < 1e-15);
    }
}

#[test]
fn adamw_decay_is_decoupled() {
    // With a zero gradient only the decay term acts: p <- p (1 - lr wd).
    let (mut ps, id) = scalar_store(2.0);
    let mut opt = AdamW::new(&ps, OptimConfig { weight_decay: 0.1, ..Default::default() });
    opt.update(&mut ps, &[Some(Tensor::zeros(&[1]))], 0.5).unwrap();
    assert_eq!(ps.tensor(id).to_f64_vec(), vec![2.0 * (1.0 - 0.05)]);
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let (mut ps, id) = scalar_store(1.0);
    let mut opt = AdamW::new(&ps, OptimConfig { weight_decay: 0.0, ..Default::default() });
    let mut steps = 0;
    while steps < 2000 {
        let p = ps.tensor(id).to_f64_vec()[0];
        if p.abs() < 1e-3 {
            break;
        }
        opt.update(&mut ps, &[Some(Tensor::from_f64(vec![1], &[2.0 * p]).unwrap())], 1e-2).unwrap();
        steps += 1;
    }
    let p = ps.tensor(id).to_f64_vec()[0];
    assert!(p.abs() < 1e-3, "p = {p} after {steps} steps");
}

#[test]
fn adamw_nan_gradient_aborts_before_any_update() {
    let mut ps = ParamStore::<f64>::new();
    let a = ps.insert("encoder.a", Tensor::full(&[2], 1.0)).unwrap();
    let b = ps.insert("decoder.head.w", Tensor::full(&[2], 1.0)).unwrap();
    let mut opt = AdamW::new(&ps, OptimConfig::default());
    let grads = vec![
        Some(Tensor::full(&[2], 1.0)),
        Some(Tensor::from_f64(vec![2], &[0.0, f64::NAN]).unwrap()),
    ];
    match opt.update(&mut ps, &grads, 1e-2) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("decoder.head.w"), "{msg}"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert_eq!(ps.tensor(a).to_f64_vec(), vec![1.0, 1.0]);
    assert_eq!(ps.tensor(b).to_f64_vec(), vec![1.0, 1.0]);
    assert_eq!(opt.step, 0);
}

#[test]
fn schedule_boundaries() {
    let s = ScheduleConfig { lr: 1e-3, min_lr: 1e-5, warmup_frac: 0.1, epochs: 101 };
    let w = s.warmup_epochs();
    assert_eq!(w, 10);
    assert_eq!(lr_at(0, &s), 0.0);
    assert!((lr_at(5, &s) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_at(w, &s), s.lr);
    assert!((lr_at(100, &s) - s.min_lr).abs() <= 1e-12);
    // Cosine phase spans epochs 10..=100; its midpoint is 55.
    assert!((lr_at(55, &s) - (s.lr + s.min_lr) / 2.0).abs() <= 1e-12);
    let mut prev = f64::INFINITY;
    for e in w..101 {
        let lr = lr_at(e, &s);
        assert!(lr <= prev);
        prev = lr;
    }
    let one = ScheduleConfig { epochs: 1, warmup_frac: 0.0, ..s };
    assert_eq!(lr_at(0, &one), one.min_lr);
}

fn plane(seed: u64, n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let msk = (0..n * n).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
    (img, msk)
}

#[test]
fn augment_identity_config_changes_nothing() {
    let (img, msk) = plane(1, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = augment(&img, &msk, 12, &AugmentConfig::none(), &mut rng);
    assert_eq!((a, b), (img, msk));
}

#[test]
fn flips_are_involutions_and_rotation_by_zero_is_identity() {
    let (img, _) = plane(2, 9);
    let mut x = img.clone();
    hflip(&mut x, 9);
    assert_ne!(x, img);
    assert_eq!(x[0], img[8]);
    hflip(&mut x, 9);
    assert_eq!(x, img);
    vflip(&mut x, 9);
    assert_eq!(x[0], img[8 * 9]);
    vflip(&mut x, 9);
    assert_eq!(x, img);
    assert_eq!(rotate(&img, 9, 0.0, true), img);
    let r = rotate(&img, 9, 90.0, true);
    // A quarter turn about the center is a pure index permutation.
    let mut a = r.clone();
    let mut b = img.clone();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn augmented_masks_stay_binary_and_aligned() {
    let (img, msk) = plane(3, 16);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = augment(&img, &msk, 16, &AugmentConfig::default(), &mut rng);
        assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The mask moves with the image: feeding the mask as the image
        // under the same draw must reproduce the mask up to interpolation.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a2, b2) = augment(&msk, &msk, 16, &AugmentConfig { intensity_min: 1.0, intensity_max: 1.0, ..Default::default() }, &mut rng);
        assert_eq!(b2, b);
        let agree = a2.iter().zip(&b2).filter(|(x, y)| (**x >= 0.5) == (**y >= 0.5)).count();
        assert!(agree as f64 / 256.0 > 0.8, "seed {seed}: {agree}");
    }
}
