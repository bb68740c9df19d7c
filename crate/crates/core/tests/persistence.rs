use cssr::data::{uniform_points, Dataset, DatasetManifest};
use cssr::harness::{
    load_checkpoint, report_for, run_unknown_inference_pipeline, save_checkpoint, score_dataset, train, Checkpoint,
    TrainConfig,
};
use cssr::head::HeadMode;
use cssr::Error;

fn small_run() -> (cssr::harness::Model, cssr::scoring::ScoreStats, Dataset, Dataset) {
    let data = DatasetManifest::four_gaussians(60, 3).load().unwrap();
    let mut config = TrainConfig::gaussian_2d(HeadMode::Cssr, 4, 3);
    config.epochs = 3;
    config.scoring.weights = [1.0, 1.0, 1.0];
    let (mut model, _) = train::<f64>(&config, &data).unwrap();
    let bg = Dataset::new(vec![2], uniform_points(100, -6.0, 6.0, 4).concat(), vec![0; 100], 4).unwrap();
    let out = run_unknown_inference_pipeline(&mut model, &data, &data, &bg, None).unwrap();
    (model, out.stats, data, bg)
}

#[test]
fn save_load_save_is_byte_identical_and_metrics_survive() {
    let (mut model, stats, data, bg) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.cssr");
    let second = dir.path().join("b.cssr");
    save_checkpoint(&model, Some(&stats), &first).unwrap();
    let (mut loaded, loaded_stats) = load_checkpoint::<f64>(&first).unwrap();
    let loaded_stats = loaded_stats.expect("stats stored");
    assert_eq!(loaded_stats, stats);
    save_checkpoint(&loaded, Some(&loaded_stats), &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let score = |m: &mut cssr::harness::Model, s: &cssr::scoring::ScoreStats| {
        let mut r = score_dataset(m, s, &data, true).unwrap();
        r.extend(score_dataset(m, s, &bg, false).unwrap());
        let (report, aurocs) = report_for(&r, s, None).unwrap();
        (r, report, aurocs)
    };
    let before = score(&mut model, &stats);
    let after = score(&mut loaded, &loaded_stats);
    assert_eq!(before.0, after.0);
    assert_eq!(before.1, after.1);
    assert_eq!(before.2, after.2);
}

#[test]
fn corrupt_files_report_offsets() {
    let (model, stats, _, _) = small_run();
    let bytes = Checkpoint::from_model(&model, Some(&stats)).to_bytes().unwrap();

    let cut = &bytes[..bytes.len() - 3];
    match Checkpoint::from_bytes(cut) {
        Err(Error::Format { message, .. }) => {
            assert!(message.contains("expected 8 bytes, 5 remain"), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

    let mut newer = bytes.clone();
    newer[5] = 9;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Format { offset: 5, .. })));

    let mut longer = bytes;
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format { .. })));
}

#[test]
fn mismatched_configuration_is_named() {
    let (model, _, _, _) = small_run();
    let ckpt = Checkpoint::from_model(&model, None);
    let mut expected = model.config().clone();
    expected.head.latent_dim += 1;
    match ckpt.check_config(&expected) {
        Err(Error::Mismatch { field, .. }) => assert_eq!(field, "head.latent_dim"),
        other => panic!("{other:?}"),
    }
    ckpt.check_config(model.config()).unwrap();

    // parameters of the wrong shape are rejected naming the tensor
    let mut wrong = ckpt.clone();
    wrong.config.backbone.feature_dim = 4;
    match wrong.to_model::<f64>() {
        Err(Error::Mismatch { field, .. }) => assert!(field.starts_with("backbone"), "{field}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}
