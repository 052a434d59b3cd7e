use std::sync::Arc;

use swintext::checkpoint::Checkpoint;
use swintext::config::{ModelConfig, RunConfig};
use swintext::synth::synth_set;
use swintext::text::{EmbeddingTable, TextSource};
use swintext::train::{evaluate, train, PreparedSet, CSV_HEADER};
use swintext::Error;

fn micro_run(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::micro();
    cfg.schedule.lr = 3e-3;
    cfg.schedule.min_lr = 1e-5;
    cfg.schedule.epochs = epochs;
    cfg.train.batch_size = 3;
    cfg.train.seed = seed;
    cfg
}

fn micro_sets() -> (PreparedSet, PreparedSet) {
    let src = TextSource::Stub { dim: 6, seed: 0 };
    let tr = PreparedSet::new(&synth_set(7, 32, 1).unwrap(), &src, 16).unwrap();
    let va = PreparedSet::new(&synth_set(3, 32, 2).unwrap(), &src, 16).unwrap();
    (tr, va)
}

#[test]
fn same_seed_gives_identical_csv_and_checkpoints() {
    let (tr, va) = micro_sets();
    let cfg = micro_run(4, 3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&cfg, &tr, Some(&va), Some(d.path()), |_| {}).unwrap();
    }
    for f in ["metrics.csv", "last.stun", "best.stun"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let csv = std::fs::read_to_string(dirs[0].path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("0,train,") && lines[2].starts_with("0,val,"));

    let other = tempfile::tempdir().unwrap();
    train(&micro_run(5, 3), &tr, Some(&va), Some(other.path()), |_| {}).unwrap();
    assert_ne!(
        std::fs::read(other.path().join("last.stun")).unwrap(),
        std::fs::read(dirs[0].path().join("last.stun")).unwrap()
    );
}

#[test]
fn augmentation_is_also_deterministic() {
    let (tr, _) = micro_sets();
    let mut cfg = micro_run(1, 2);
    cfg.train.augment = true;
    let a = train(&cfg, &tr, None, None, |_| {}).unwrap();
    let b = train(&cfg, &tr, None, None, |_| {}).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn training_reduces_loss_and_restores_from_checkpoint() {
    let (tr, va) = micro_sets();
    let cfg = micro_run(0, 12);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let out = train(&cfg, &tr, Some(&va), Some(dir.path()), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, out.records);
    let train_rows: Vec<_> = out.records.iter().filter(|r| r.split == "train").collect();
    assert!(train_rows.last().unwrap().loss < train_rows[0].loss);
    assert_eq!(train_rows[0].lr, 0.0);

    // last.stun holds the final weights; evaluation from it matches.
    let ck = Checkpoint::load(&dir.path().join("last.stun")).unwrap();
    let (_, mut ps) = swintext::model::SwinTextUNet::new::<f32>(&cfg.model, 99).unwrap();
    ck.restore(&mut ps).unwrap();
    let a = evaluate(&out.model, &out.params, &cfg, &va).unwrap();
    let b = evaluate(&out.model, &ps, &cfg, &va).unwrap();
    assert_eq!(a.probs, b.probs);
    assert_eq!(swintext::config::parse_config(&ck.config).unwrap(), cfg);

    let best = out.records.iter().filter(|r| r.split == "val").max_by(|x, y| x.dice.total_cmp(&y.dice)).unwrap();
    assert!(out.records.iter().any(|r| r.split == "val" && r.epoch == out.best_epoch && r.dice == best.dice));
}

#[test]
fn text_embeddings_are_frozen() {
    let (tr, _) = micro_sets();
    let before = tr.embeddings.clone();
    train(&micro_run(0, 2), &tr, None, None, |_| {}).unwrap();
    assert_eq!(tr.embeddings, before);
    let src = TextSource::Stub { dim: 6, seed: 0 };
    for e in &before {
        assert_eq!(src.resolve(&e.prompt).unwrap(), *e);
    }
}

#[test]
fn unresolvable_prompt_fails_before_training() {
    let samples = synth_set(5, 32, 3).unwrap();
    let mut table = EmbeddingTable::new(6);
    table.insert(&samples[0].prompt, vec![0.5; 6]).unwrap();
    let src = TextSource::File { table: Arc::new(table), l2_normalize: false };
    let missing = samples.iter().find(|s| s.prompt != samples[0].prompt).unwrap();
    match PreparedSet::new(&samples, &src, 16) {
        Err(Error::Resolution { prompt, nearest }) => {
            assert_eq!(prompt, missing.prompt);
            assert_eq!(nearest, vec![samples[0].prompt.clone()]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let (tr, _) = micro_sets();
    let empty = PreparedSet { size: 16, ..Default::default() };
    assert!(matches!(train(&micro_run(0, 1), &empty, None, None, |_| {}), Err(Error::Dataset(_))));
    let mut cfg = micro_run(0, 1);
    cfg.model.text_dim = 8;
    assert!(matches!(train(&cfg, &tr, None, None, |_| {}), Err(Error::Config(_))));
    let mut cfg = micro_run(0, 1);
    cfg.model.image_size = 32;
    assert!(matches!(train(&cfg, &tr, None, None, |_| {}), Err(Error::Config(_))));
}

#[test]
fn divergent_training_aborts_with_a_pointer_to_last_good_weights() {
    let (tr, _) = micro_sets();
    let mut cfg = micro_run(0, 6);
    cfg.schedule.lr = 1e30;
    cfg.schedule.min_lr = 1e30;
    cfg.schedule.warmup_frac = 0.0;
    cfg.optim.weight_decay = 0.0;
    match train(&cfg, &tr, None, None, |_| {}) {
        Err(Error::NonFinite(m)) => assert!(m.contains("last.stun") || m.contains("gradient"), "{m}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.records)),
    }
}
