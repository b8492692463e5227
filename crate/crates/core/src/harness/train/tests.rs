use super::*;
use crate::data::Section;
use crate::harness::{decode_checkpoint, encode_checkpoint, read_metrics, RecordKind};
use crate::meta::Toggles;

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(
        r#"
        name = "tiny"
        [dataset]
        source = "synthetic"
        image_size = 8
        n_way = 2
        k_shot = 1
        q_targets = 2
        eval_tasks = 4
        split = [6, 3, 3]
        rotations = false
        [dataset.synth]
        n_classes = 12
        instances = 6
        [network]
        backbone = { kind = "conv", layers = 2, filters = 4, kernel = 3, stride = 2, padding = 1 }
        [meta]
        inner_steps = 2
        task_batch = 1
        da_switch_epoch = 1
        msl_horizon = 2.0
        [run]
        epochs = 2
        iterations_per_epoch = 3
        seeds = [5]
        keep_checkpoints = "all"
        "#,
    )
    .unwrap();
    c.run.out_dir = out.to_path_buf();
    c
}

fn without_timing(mut recs: Vec<MetricsRecord>) -> Vec<MetricsRecord> {
    for r in &mut recs {
        r.wall_ms = None;
    }
    recs
}

#[test]
fn bookkeeping_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let summary = run_training(&cfg, None, None, &mut Silent).unwrap();
    let seed = &summary.seeds[0];
    let recs = read_metrics(&seed.metrics_file).unwrap();
    assert_eq!(
        recs.iter()
            .filter(|r| r.kind == RecordKind::Iteration)
            .count(),
        6
    );
    assert_eq!(
        recs.iter().filter(|r| r.kind == RecordKind::Epoch).count(),
        2
    );
    let sd = seed_dir(&cfg, 5);
    let ckpts = std::fs::read_dir(&sd)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ckpt")
        .count();
    assert_eq!(ckpts, 2);
    // fewer than three epochs: no ensemble test
    assert_eq!(seed.epochs_completed, 2);
    assert!(seed.test_accuracy.is_none());
    assert!(seed.ms_per_iter_first_order.is_some() && seed.ms_per_iter_second_order.is_some());
    assert!(cfg.run.out_dir.join("tiny/summary.json").exists());
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = tiny_config(a.path());
    ca.run.epochs = 3;
    let mut cb = ca.clone();
    cb.run.out_dir = b.path().to_path_buf();
    let sa = run_training(&ca, None, None, &mut Silent).unwrap();
    let sb = run_training(&cb, None, None, &mut Silent).unwrap();
    let ra = without_timing(read_metrics(&sa.seeds[0].metrics_file).unwrap());
    let rb = without_timing(read_metrics(&sb.seeds[0].metrics_file).unwrap());
    assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
    assert_eq!(sa.seeds[0].test_accuracy, sb.seeds[0].test_accuracy);
    assert!(sa.seeds[0].top3_epochs.is_some());
    // checkpoints differ only in the embedded output directory
    let ck = |c: &ExperimentConfig| {
        load_checkpoint::<f32>(&epoch_checkpoint_path(&seed_dir(c, 5), 2), None)
            .unwrap()
            .0
    };
    let (ka, kb) = (ck(&ca), ck(&cb));
    assert_eq!(
        (ka.state, ka.history, ka.rng, ka.config_digest),
        (kb.state, kb.history, kb.rng, kb.config_digest)
    );
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = Arc::new(TaskData::prepare(&cfg).unwrap());
    let val = Arc::new(data.eval_set(&cfg, Section::Val).unwrap());

    let mut straight = Trainer::<f32>::new(&cfg, data.clone(), val.clone(), 5).unwrap();
    let mut want = Vec::new();
    for _ in 0..5 {
        let mut m = straight.step().unwrap();
        m.wall_ms = 0.0;
        want.push(m);
        if straight.at_epoch_end() {
            straight.end_epoch().unwrap();
        }
    }

    let mut first = Trainer::<f32>::new(&cfg, data.clone(), val.clone(), 5).unwrap();
    let mut got = Vec::new();
    for _ in 0..2 {
        let mut m = first.step().unwrap();
        m.wall_ms = 0.0;
        got.push(m);
    }
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let (ck, status) = load_checkpoint::<f32>(&path, Some(&cfg)).unwrap();
    assert_eq!(status, DigestStatus::Match);
    let mut resumed = Trainer::resume(&cfg, data, val, ck).unwrap();
    for _ in 0..3 {
        let mut m = resumed.step().unwrap();
        m.wall_ms = 0.0;
        got.push(m);
        if resumed.at_epoch_end() {
            resumed.end_epoch().unwrap();
        }
    }
    assert_eq!(got, want);
    assert_eq!(resumed.state(), straight.state());
    assert_eq!(resumed.history(), straight.history());
}

#[test]
fn checkpoint_round_trip_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = Arc::new(TaskData::prepare(&cfg).unwrap());
    let val = Arc::new(data.eval_set(&cfg, Section::Val).unwrap());
    let mut t = Trainer::<f64>::new(&cfg, data, val, 5).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    t.end_epoch().unwrap();
    let ck = t.checkpoint();
    let bytes = encode_checkpoint(&ck);
    assert_eq!(decode_checkpoint::<f64>(&bytes).unwrap(), ck);
    assert!(matches!(
        decode_checkpoint::<f32>(&bytes),
        Err(Error::Checkpoint { offset: 12, .. })
    ));

    for cut in [5, 40, bytes.len() / 2, bytes.len() - 1] {
        match decode_checkpoint::<f64>(&bytes[..cut]) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
            other => panic!("truncation at {cut} gave {other:?}"),
        }
    }
    let mut flipped = bytes.clone();
    let at = bytes.len() - 100;
    flipped[at] ^= 0x40;
    assert!(matches!(
        decode_checkpoint::<f64>(&flipped),
        Err(Error::Checkpoint { .. })
    ));

    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let mut edited = cfg.clone();
    edited.meta.lr_max = 0.002;
    let (_, status) = load_checkpoint::<f64>(&path, Some(&edited)).unwrap();
    assert!(matches!(status, DigestStatus::Mismatch { .. }));
    let mut moved = cfg.clone();
    moved.run.out_dir = PathBuf::from("/elsewhere");
    assert_eq!(
        load_checkpoint::<f64>(&path, Some(&moved)).unwrap().1,
        DigestStatus::Match
    );
}

#[test]
fn training_batches_only_use_training_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.meta.task_batch = 8;
    let data = Arc::new(TaskData::prepare(&cfg).unwrap());
    let val = Arc::new(data.eval_set(&cfg, Section::Val).unwrap());
    let mut t = Trainer::<f32>::new(&cfg, data.clone(), val.clone(), 1).unwrap();
    for _ in 0..200 {
        for ep in t.sample_batch().unwrap() {
            assert!(ep
                .classes
                .iter()
                .all(|&c| data.split.by_class[c] == Section::Train));
        }
    }
    for ep in val.iter() {
        assert!(ep
            .classes
            .iter()
            .all(|&c| data.split.by_class[c] == Section::Val));
    }
    let again = data.eval_set(&cfg, Section::Val).unwrap();
    assert_eq!(
        again.iter().map(|e| e.task_id).collect::<Vec<_>>(),
        val.iter().map(|e| e.task_id).collect::<Vec<_>>()
    );
}

#[test]
fn divergence_ends_only_that_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.meta.toggles = Toggles::NONE;
    cfg.meta.inner_lr = 1e300;
    cfg.run.seeds = vec![1, 2];
    let summary = run_training(&cfg, None, None, &mut Silent).unwrap();
    assert_eq!(summary.seeds.len(), 2);
    assert!(summary.all_diverged());
    for s in &summary.seeds {
        assert_eq!(s.diverged_at, Some((0, 0)));
        let recs = read_metrics(&s.metrics_file).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].kind, RecordKind::Diverged);
    }
}

#[test]
fn identical_checkpoints_ensemble_like_a_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = Arc::new(TaskData::prepare(&cfg).unwrap());
    let val = Arc::new(data.eval_set(&cfg, Section::Val).unwrap());
    let mut t = Trainer::<f32>::new(&cfg, data, val.clone(), 3).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    let single = t.evaluate_on(&val).unwrap();
    let ens = test_with_ensemble::<f32>(&[path.clone(), path.clone(), path], &val, None).unwrap();
    assert_eq!(single.accuracy, ens.accuracy);
    assert_eq!(single.per_episode, ens.per_episode);
    assert_eq!(t.evaluate_on(&val).unwrap(), single);
}

#[test]
fn missing_omniglot_root_is_a_data_error() {
    let mut cfg = ExperimentConfig::preset("omniglot-desk").unwrap();
    cfg.dataset.root = None;
    assert!(matches!(TaskData::prepare(&cfg), Err(Error::Ingest { .. })));
}
