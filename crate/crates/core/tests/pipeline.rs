use bi_clstm::checkpoint::Checkpoint;
use bi_clstm::data::{extract_patch, load_cube, normalize, save_cube, stratified_split, synth_cube, SplitSpec};
use bi_clstm::metrics::{evaluate, render_map};
use bi_clstm::model::{predict, ModelConfig};
use bi_clstm::train::{train, train_with_state, TrainConfig};

#[test]
fn synth_train_checkpoint_resume() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth_cube(3, 16, 16, 4, 8, 8.0).unwrap();
    let path = dir.path().join("scene.hsc");
    save_cube(&raw, &path).unwrap();
    let raw = load_cube(&path).unwrap();

    let split = stratified_split(&raw, &SplitSpec::fraction(0.2, 4)).unwrap();
    let (cube, stats) = normalize(&raw, &split.train).unwrap();
    let config = ModelConfig {
        hidden_channels: 3,
        ..ModelConfig::new(4, 3)
    };
    let samples: Vec<_> = split
        .train
        .iter()
        .map(|&(i, j)| extract_patch(&cube, i, j, 8, 1).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, optimizer, report) = train(config.clone(), &samples, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.final_loss().unwrap().is_finite());

    let ck_path = dir.path().join("m.bck");
    Checkpoint {
        model: model.clone(),
        norm: Some(stats.clone()),
        optimizer: Some(optimizer.clone()),
        meta: serde_json::json!({ "note": "pipeline" }),
    }
    .save(&ck_path)
    .unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.norm.as_ref(), Some(&stats));
    assert_eq!(ck.model.tensors(), model.tensors());

    let reloaded = ck.norm.unwrap().apply(&raw).unwrap();
    assert_eq!(
        render_map(&reloaded, &ck.model, true).unwrap(),
        render_map(&cube, &model, true).unwrap()
    );
    let a = evaluate(&cube, &model, &split.test).unwrap();
    let b = evaluate(&reloaded, &ck.model, &split.test).unwrap();
    assert_eq!(a, b);
    for s in &samples[..3] {
        assert_eq!(predict(s, &ck.model).unwrap().1, predict(s, &model).unwrap().1);
    }

    // Resuming continues the optimizer's step count.
    let mut resumed = ck.model;
    let (state, more) = train_with_state(&mut resumed, &samples, &cfg, ck.optimizer).unwrap();
    assert!(state.step > optimizer.step);
    assert!(more.final_loss().unwrap().is_finite());
    assert_ne!(resumed.tensors(), model.tensors());
}
