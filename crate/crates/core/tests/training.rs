mod common;

use common::{dataset, memorisation_set, memorise_config, tiny_config, tree_bytes};
use ltcx_core::datakit::DatasetManifest;
use ltcx_core::ensemble::Branch;
use ltcx_core::imbalance::crt_resample;
use ltcx_core::losses::LossConfig;
use ltcx_core::rng::derive_seed;
use ltcx_core::training::{crt_retrain, evaluate_loss, train, Checkpoint, TrainConfig, TrainError};

#[test]
fn memorises_ten_samples_within_200_steps() {
    let (m, images, part) = dataset(200, 3, 0.5, 1);
    let small = memorisation_set(&m, 10);
    let out = train(&small, &images, &part, Branch::All, &memorise_config()).unwrap();
    let loss = evaluate_loss(&out.final_network, &small.records, &images, &LossConfig::default()).unwrap();
    assert!(loss < 0.05, "final train loss {loss}");
}

#[test]
fn identical_seeds_give_identical_parameters_and_files() {
    let (m, images, part) = dataset(120, 4, 1.0, 2);
    let cfg = TrainConfig { epochs: 2, ..tiny_config() };
    let a = train(&m, &images, &part, Branch::All, &cfg).unwrap();
    let b = train(&m, &images, &part, Branch::All, &cfg).unwrap();
    assert_eq!(a.final_network, b.final_network);
    assert_eq!(a.checkpoint, b.checkpoint);
    let dir = tempfile::tempdir().unwrap();
    a.checkpoint.save(dir.path().join("a")).unwrap();
    b.checkpoint.save(dir.path().join("b")).unwrap();
    assert_eq!(tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));

    // chunked gradient reduction does not depend on the thread count
    let c = train(&m, &images, &part, Branch::All, &TrainConfig { workers: 3, ..cfg.clone() }).unwrap();
    assert_eq!(a.final_network, c.final_network);

    let d = train(&m, &images, &part, Branch::All, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.final_network, d.final_network);
}

#[test]
fn head_branch_emits_nine_logits_on_nineteen_classes() {
    let (m, images, part) = dataset(400, 19, 1.0, 3);
    assert_eq!(part.head_indices.len(), 9);
    let cfg = TrainConfig { max_steps: Some(2), ..tiny_config() };
    for (branch, k) in [(Branch::Head, 9), (Branch::Tail, 11), (Branch::All, 19)] {
        let out = train(&m, &images, &part, branch, &cfg).unwrap();
        assert_eq!(out.checkpoint.network.num_classes(), k);
        let img = images.load(&m.records[0].image_ref).unwrap();
        assert_eq!(out.checkpoint.network.logits(&img).unwrap().len(), k);
        assert_eq!(out.checkpoint.branch, branch);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (m, images, part) = dataset(120, 4, 1.0, 4);
    let out = train(&m, &images, &part, Branch::Tail, &TrainConfig { epochs: 2, ..tiny_config() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    out.checkpoint.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    assert_eq!(loaded.epoch, out.checkpoint.epoch);
    assert_eq!(loaded.history, out.checkpoint.history);
    loaded.save(&second).unwrap();
    assert_eq!(tree_bytes(&first), tree_bytes(&second));
    let again = Checkpoint::load(&second).unwrap();
    assert_eq!(again, loaded);
}

#[test]
fn tampered_config_is_rejected_on_load() {
    let (m, images, part) = dataset(120, 4, 1.0, 4);
    let out = train(&m, &images, &part, Branch::All, &TrainConfig { max_steps: Some(1), ..tiny_config() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.checkpoint.save(dir.path()).unwrap();
    let path = dir.path().join("model.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"batch_size\": 8", "\"batch_size\": 9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(TrainError::Config(_))));
}

#[test]
fn crt_retrains_five_heads_on_a_frozen_backbone() {
    let (m, images, part) = dataset(200, 4, 1.0, 5);
    let cfg = TrainConfig { epochs: 2, ..tiny_config() };
    let base = train(&m, &images, &part, Branch::All, &cfg).unwrap().checkpoint;
    let manifests: Vec<DatasetManifest> = (0..5).map(|s| crt_resample(&m, 0.7, s).unwrap()).collect();
    let retrained = crt_retrain(&base, &manifests, &images, &cfg).unwrap();
    assert_eq!(retrained.len(), 5);
    for (i, cp) in retrained.iter().enumerate() {
        assert_eq!(cp.network.backbone, base.network.backbone, "backbone moved in run {i}");
        let mut init = base.network.decoder.clone();
        init.reinitialize(derive_seed(cfg.seed, &[b"crt", &(i as u64).to_le_bytes()]));
        assert_ne!(cp.network.decoder, init, "head did not move in run {i}");
        assert!(!cp.config.train_backbone);
    }
    assert_ne!(retrained[0].network.decoder, retrained[1].network.decoder);
    assert!(matches!(crt_retrain(&base, &[], &images, &cfg), Err(TrainError::Config(_))));
}

#[test]
fn frozen_backbone_stays_bit_identical() {
    let (m, images, part) = dataset(120, 4, 1.0, 6);
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let base = train(&m, &images, &part, Branch::All, &cfg).unwrap();
    let frozen = ltcx_core::training::train_network(
        base.final_network.clone(),
        &m,
        &images,
        Branch::All,
        &TrainConfig { train_backbone: false, ..cfg },
    )
    .unwrap();
    assert_eq!(frozen.final_network.backbone, base.final_network.backbone);
    assert_ne!(frozen.final_network.decoder, base.final_network.decoder);
}

#[test]
fn one_batch_loss_is_non_increasing_over_five_steps() {
    let mut passed = 0;
    for seed in 0..5 {
        let (m, images, part) = dataset(60, 3, 0.5, 10 + seed);
        let batch = memorisation_set(&m, 8);
        let cfg = TrainConfig { batch_size: 8, epochs: 6, augment: false, seed, ..tiny_config() };
        let out = train(&batch, &images, &part, Branch::All, &cfg).unwrap();
        let losses: Vec<f64> = out.checkpoint.history.iter().map(|h| h.train_loss).collect();
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            passed += 1;
        }
    }
    assert!(passed >= 4, "only {passed}/5 seeds non-increasing");
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let (m, images, part) = dataset(120, 4, 1.0, 7);
    let cfg = TrainConfig { learning_rate: 1e300, epochs: 5, augment: false, ..tiny_config() };
    match train(&m, &images, &part, Branch::All, &cfg) {
        Err(TrainError::NonFinite { epoch, batch, loss }) => {
            assert!(epoch >= 1 && batch >= 1);
            assert_eq!(loss, "bce");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
