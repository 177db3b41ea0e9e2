//! End-to-end use of the public API: synthesize, train briefly, checkpoint,
//! restore, and predict.

use hazeforge::io::{write_split, Manifest, RunConfig};
use hazeforge::losses::Preset;
use hazeforge::training::{Sample, Trainer};
use hazeforge::{Error, Tensor};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        "[data]\nscenes = 3\ndraws_per_image = 2\n\n[train]\nimage_size = 32\ndepth = 3\nbatch_size = 2\nstage1_iters = 2\nstage2_iters = 2\n",
    )
    .unwrap();
    cfg.preset = Some(Preset::IL2PerT);
    cfg
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let data = cfg.synthesize::<f64>().unwrap();
    write_split(dir.path(), "train", &data.train, &data.sampling).unwrap();
    let train = Manifest::load(&dir.path().join("train.manifest"))
        .unwrap()
        .load_samples::<f64>()
        .unwrap();

    let mut tr = Trainer::<f64>::new(cfg.train_config()).unwrap();
    tr.run_stage1(&train).unwrap();
    tr.run_stage2(&train).unwrap();
    let ckpt = dir.path().join("model.htf");
    tr.save_checkpoint(&ckpt).unwrap();
    let mut back = Trainer::<f64>::load_checkpoint(&ckpt).unwrap();

    let s = Sample::from(&data.test[0]);
    let batch = s.hazy.clone().reshape(&[1, 3, 32, 32]).unwrap();
    let (t0, j0) = tr.predict(&batch).unwrap();
    let (t1, j1) = back.predict(&batch).unwrap();
    assert_eq!(t0, t1);
    assert_eq!(j0, j1);
    assert!(j0.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn single_precision_pipeline_runs() {
    let cfg = tiny();
    let data = cfg.synthesize::<f32>().unwrap();
    let train: Vec<Sample<f32>> = data.train.iter().map(Sample::from).collect();
    let mut tr = Trainer::<f32>::new(cfg.train_config()).unwrap();
    let recs = tr.run_stage1(&train).unwrap();
    assert!(recs.iter().all(|r| r.total.is_finite()));
    let (t, _) = tr.predict(&Tensor::full(&[1, 3, 32, 32], 0.5f32)).unwrap();
    assert_eq!(t.shape(), &[1, 1, 32, 32]);
}

#[test]
fn missing_checkpoint_is_reported_by_path() {
    let err = Trainer::<f64>::load_checkpoint(std::path::Path::new("absent.htf"))
        .err()
        .unwrap();
    assert!(matches!(err, Error::MissingFile(p) if p.ends_with("absent.htf")));
}
