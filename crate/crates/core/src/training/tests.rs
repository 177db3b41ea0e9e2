use super::*;
use crate::dataset::{generate_dataset, procedural_scene, HazeSampling};
use crate::losses::Preset;

fn data(n: usize, size: usize) -> Vec<Sample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<_> = (0..n)
        .map(|i| procedural_scene(&format!("s{i}"), size, &mut rng))
        .collect();
    let cfg = HazeSampling {
        per_image_draws: 1,
        seed: 3,
        ..Default::default()
    };
    generate_dataset(&pairs, &cfg)
        .unwrap()
        .iter()
        .map(Sample::from)
        .collect()
}

fn cfg(preset: Preset) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        image_size: 32,
        depth: 3,
        scale: 0.125,
        stage1_iters: 3,
        stage2_iters: 3,
        seed: 5,
        loss: preset.weights(),
        ..Default::default()
    }
}

#[test]
fn batches_are_seeded_per_iteration() {
    assert_eq!(batch_indices(10, 4, 1, 1, 7), batch_indices(10, 4, 1, 1, 7));
    assert_ne!(batch_indices(10, 4, 1, 1, 7), batch_indices(10, 4, 1, 2, 7));
    let b = batch_indices(10, 4, 1, 1, 3);
    let mut sorted = b.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 4);
    assert_eq!(batch_indices(2, 5, 1, 1, 1).len(), 5);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        image_size: 48,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        scale: 0.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    let text = toml::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(
        toml::from_str::<TrainConfig>(&text).unwrap(),
        TrainConfig::default()
    );
}

#[test]
fn l2_preset_never_touches_discriminator() {
    let d = data(4, 32);
    let mut tr = Trainer::<f64>::new(cfg(Preset::TL2)).unwrap();
    let before = tr.discriminator.clone();
    let gen_before = tr.generator.clone();
    let recs = tr.run_stage1(&d).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(tr.discriminator, before);
    assert_eq!(tr.opt_d.step, 0);
    assert_ne!(tr.generator, gen_before);
    assert!(recs
        .iter()
        .all(|r| r.adversarial == 0.0 && r.gradient == 0.0));
    assert_eq!(tr.trainable_groups(1), vec!["generator"]);

    let csv = loss_csv(&recs);
    assert_eq!(csv.lines().count(), recs.len() + 1);
    assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
}

#[test]
fn adversarial_preset_alternates_updates() {
    let d = data(4, 32);
    let mut tr = Trainer::<f64>::new(cfg(Preset::TL2GGan)).unwrap();
    let recs = tr.run_stage1(&d).unwrap();
    assert_eq!(tr.opt_d.step, 3);
    assert_eq!(tr.opt_g.step, 3);
    assert!(recs.iter().all(|r| r.adversarial > 0.0 && r.gradient > 0.0));
    assert_eq!(tr.trainable_groups(1), vec!["discriminator", "generator"]);
}

#[test]
fn no_transmission_preset_excludes_generator() {
    let d = data(4, 32);
    let mut tr = Trainer::<f64>::new(cfg(Preset::IL2NoT)).unwrap();
    assert_eq!(tr.trainable_groups(2), vec!["dehazer"]);
    assert!(tr.run_stage1(&d).unwrap().is_empty());
    assert!(tr.step_stage1(&d).is_err());
    let gen = tr.generator.clone();
    tr.run_stage2(&d).unwrap();
    assert_eq!(tr.generator, gen);
    assert_eq!(tr.opt_g.step, 0);
    assert_eq!(tr.opt_h.step, 3);
}

#[test]
fn dehazing_loss_reaches_generator() {
    let d = data(4, 32);
    let mut c = cfg(Preset::IL2PerT);
    c.stage2_t_weight = 0.0;
    let mut tr = Trainer::<f64>::new(c).unwrap();
    let gen = tr.generator.clone();
    let r = tr.step_stage2(&d).unwrap();
    assert!(r.perceptual > 0.0);
    let moved = tr
        .generator
        .params
        .iter()
        .zip(&gen.params)
        .filter(|(a, b)| a.value != b.value)
        .count();
    assert!(
        moved > 0,
        "generator received no gradient from the dehazing loss"
    );
}

#[test]
fn identical_runs_are_bit_identical() {
    let d = data(4, 32);
    let run = || {
        let mut tr = Trainer::<f64>::new(cfg(Preset::IL2PerT)).unwrap();
        let mut recs = tr.run_stage1(&d).unwrap();
        recs.extend(tr.run_stage2(&d).unwrap());
        (recs, tr.generator, tr.dehazer)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(4, 32);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.htf");

    let mut full = Trainer::<f64>::new(cfg(Preset::IL2PerT)).unwrap();
    full.step_stage1(&d).unwrap();
    full.step_stage1(&d).unwrap();
    full.save_checkpoint(&ck).unwrap();
    let next = full.step_stage1(&d).unwrap();

    let mut resumed = Trainer::<f64>::load_checkpoint(&ck).unwrap();
    assert_eq!(resumed.stage1_done, 2);
    let again = resumed.step_stage1(&d).unwrap();
    assert_eq!(next, again);
    assert_eq!(full.generator, resumed.generator);
    assert_eq!(full.opt_g, resumed.opt_g);
    assert_eq!(full.discriminator, resumed.discriminator);
}

#[test]
fn stage_two_starts_from_stage_one_weights() {
    let d = data(4, 32);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("stage1.htf");
    let mut tr = Trainer::<f64>::new(cfg(Preset::IL2T)).unwrap();
    tr.run_stage1(&d).unwrap();
    tr.save_checkpoint(&ck).unwrap();
    let bytes = std::fs::read(&ck).unwrap();
    let loaded = Trainer::<f64>::load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.generator, tr.generator);
    assert_eq!(loaded.stage1_done, 3);
    assert_eq!(loaded.stage2_done, 0);
    loaded.save_checkpoint(&ck).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), bytes);
}

#[test]
fn failure_paths() {
    let mut d = data(2, 32);
    let mut tr = Trainer::<f64>::new(cfg(Preset::TL2)).unwrap();
    assert!(matches!(
        Trainer::<f64>::load_checkpoint(Path::new("/nonexistent/ck.htf")),
        Err(Error::MissingFile(_))
    ));
    let small = data(2, 16);
    assert!(matches!(tr.step_stage1(&small), Err(Error::Dimension(_))));
    assert!(tr.step_stage1(&[]).is_err());
    d[0].hazy.data_mut()[0] = f64::NAN;
    d[1].hazy.data_mut()[0] = f64::NAN;
    let before = tr.generator.clone();
    assert!(matches!(tr.step_stage1(&d), Err(Error::NonFinite(_))));
    assert_eq!(tr.generator, before);
}

#[test]
fn predict_shapes_and_ranges() {
    let d = data(2, 32);
    let mut tr = Trainer::<f64>::new(cfg(Preset::IL2T)).unwrap();
    let hazy = Tensor::stack(&[&d[0].hazy, &d[1].hazy]).unwrap();
    let (t, j) = tr.predict(&hazy).unwrap();
    assert_eq!(t.shape(), &[2, 1, 32, 32]);
    assert_eq!(j.shape(), &[2, 3, 32, 32]);
    assert!(t.min_value() >= 0.0 && t.max_value() <= 1.0);
    assert!(j.min_value() >= 0.0 && j.max_value() <= 1.0);
}

#[test]
fn smoothing_endpoints() {
    let recs: Vec<LossRecord> = (1..=6)
        .map(|i| LossRecord {
            iter: i,
            total: 0.0,
            euclidean: i as f64,
            adversarial: 0.0,
            gradient: 0.0,
            perceptual: 0.0,
        })
        .collect();
    assert_eq!(smoothed_endpoints(&recs, 2), Some((1.5, 5.5)));
    assert_eq!(smoothed_endpoints(&recs, 7), None);
}

#[test]
fn ablation_grid_tables_and_partial_results() {
    let d = data(4, 32);
    let base = cfg(Preset::TL2);
    let res = run_ablation_grid(&base, &Preset::ALL, &d, &d[..2]).unwrap();
    assert!(res.failure.is_none());
    assert_eq!(res.entries.len(), 6);
    assert!(res.entry(Preset::TL2).unwrap().stage2.is_empty());
    assert_eq!(res.entry(Preset::IL2PerT).unwrap().stage2.len(), 3);
    let table = res.image_table();
    let header = table.lines().next().unwrap();
    assert!(header.contains("Input") && header.trim_end().ends_with("Target"));
    for p in ["I-L2-noT", "I-L2-T", "I-L2-Per-T"] {
        assert!(header.contains(p));
    }
    assert!(table.lines().nth(1).unwrap().trim_end().ends_with("1.0000"));
    assert!(res.transmission_table().contains("T-L2-G-GAN"));

    let mut bad = d.clone();
    for s in &mut bad {
        s.hazy.data_mut()[0] = f64::NAN;
    }
    let res = run_ablation_grid(&base, &[Preset::TL2, Preset::IL2NoT], &bad, &d[..2]).unwrap();
    assert!(res.entries.is_empty());
    assert_eq!(res.failure.as_ref().unwrap().0, Preset::TL2);
    assert!(res.summary().contains("aborted at T-L2"));

    assert!(run_ablation_grid(&base, &[Preset::TL2], &d, &[]).is_err());
}
