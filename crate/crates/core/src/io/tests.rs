use super::*;
use crate::losses::Preset;
use std::path::PathBuf;

#[test]
fn half_gray_quantizes_to_neighbours() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.png");
    save_image(&Tensor::<f64>::full(&[3, 5, 7], 0.5), &p).unwrap();
    let back = load_image::<f64>(&p).unwrap();
    assert_eq!(back.shape(), &[3, 5, 7]);
    assert!(back
        .data()
        .iter()
        .all(|&v| v == 127.0 / 255.0 || v == 128.0 / 255.0));
}

#[test]
fn round_trip_within_quantization_and_black_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    let black = Tensor::<f64>::zeros(&[3, 4, 4]);
    save_image(&black, &p).unwrap();
    assert_eq!(load_image::<f64>(&p).unwrap(), black);

    let x = Tensor::<f64>::from_fn(&[3, 6, 5], |k| (k as f64 * 0.137).fract());
    save_image(&x, &p).unwrap();
    let y = load_image::<f64>(&p).unwrap();
    let worst = x.zip_map(&y, |a, b| (a - b).abs()).unwrap().max_value();
    assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
}

#[test]
fn gray_maps_replicate_channels() {
    let t = Tensor::<f64>::from_fn(&[1, 3, 3], |k| k as f64 / 8.0);
    let img = decode_png::<f64>(&encode_png(&t).unwrap(), "t").unwrap();
    for c in 0..3 {
        assert_eq!(img.data()[c * 9 + 8], 1.0);
    }
}

#[test]
fn corrupt_or_unwritable_images_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let good = encode_png(&Tensor::<f64>::full(&[3, 4, 4], 0.3)).unwrap();
    let mut bad = good.clone();
    bad[1] = b'X';
    let p = dir.path().join("bad.png");
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_image::<f64>(&p), Err(Error::Format(_))));
    std::fs::write(&p, &good[..good.len() / 2]).unwrap();
    assert!(matches!(load_image::<f64>(&p), Err(Error::Format(_))));

    let out = dir.path().join("never.png");
    assert!(save_image(&Tensor::<f64>::zeros(&[2, 4, 4]), &out).is_err());
    assert!(!out.exists());
    assert!(matches!(
        load_image::<f64>(&dir.path().join("absent.png")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn contact_sheet_layout() {
    let a = Tensor::<f64>::zeros(&[3, 4, 3]);
    let t = Tensor::<f64>::full(&[1, 4, 2], 0.5);
    let s = contact_sheet(&[&a, &t, &a]).unwrap();
    assert_eq!(s.shape(), &[3, 4, 3 + 2 + 2 + 2 + 3]);
    assert_eq!(s.data()[3], 1.0);
    assert_eq!(s.data()[2 * 4 * 12 + 5], 0.5);
    assert!(contact_sheet(&[&a, &Tensor::<f64>::zeros(&[3, 5, 3])]).is_err());
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.scenes = 3;
    c.data.draws_per_image = 2;
    c.train.image_size = 32;
    c.train.depth = 3;
    c
}

#[test]
fn manifest_round_trip_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let data = cfg.synthesize::<f64>().unwrap();
    assert_eq!(data.train.len() + data.test.len(), 6);
    assert_eq!(data.test.len(), 2);
    let m = write_split(dir.path(), "test", &data.test, &data.sampling).unwrap();
    let path = dir.path().join("test.manifest");
    let loaded = Manifest::load(&path).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.header.count, 2);
    assert_eq!(loaded.header.split, "test");
    assert_eq!(
        loaded.to_text().unwrap(),
        std::fs::read_to_string(&path).unwrap()
    );

    let samples = loaded.load_samples::<f64>().unwrap();
    for (s, orig) in samples.iter().zip(&data.test) {
        assert_eq!(&s.transmission, orig.transmission.tensor());
        let err = s
            .hazy
            .zip_map(&orig.hazy, |a, b| (a - b).abs())
            .unwrap()
            .max_value();
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
    let r = &loaded.records[0];
    assert_eq!(r.beta, data.test[0].params.beta);

    std::fs::remove_file(dir.path().join(&r.hazy_path)).unwrap();
    assert!(matches!(Manifest::load(&path), Err(Error::MissingFile(_))));
}

#[test]
fn manifest_rejects_malformed_text() {
    let base = PathBuf::from(".");
    let head = "# hazeforge-manifest split=test seed=1 count=2 airlight=0.5:1.2 beta=0.4:1.6";
    let rec = "a,c.png,d.htf,h.png,t.htf,1,1,1,0.5";
    assert!(Manifest::parse(&format!("{head}\n{rec}\n{rec}\n"), &base).is_err());
    assert!(Manifest::parse(&format!("{head}\n{rec}\n"), &base).is_err());
    assert!(Manifest::parse(&format!("{head}\na,c.png\nb,c.png\n"), &base).is_err());
    assert!(Manifest::parse("id,clear\n", &base).is_err());
    let ok = format!("{head}\n{rec}\n{}\n", rec.replacen('a', "b", 1));
    assert_eq!(Manifest::parse(&ok, &base).unwrap().records.len(), 2);
}

#[test]
fn synthesis_is_deterministic_and_split_by_source() {
    let cfg = small_config();
    let a = cfg.synthesize::<f64>().unwrap();
    let b = cfg.synthesize::<f64>().unwrap();
    assert_eq!(
        a.test.iter().map(|s| &s.hazy).collect::<Vec<_>>(),
        b.test.iter().map(|s| &s.hazy).collect::<Vec<_>>()
    );
    for t in &a.test {
        assert!(a.train.iter().all(|s| s.source_id != t.source_id));
    }
}

#[test]
fn config_round_trip_and_unknown_fields() {
    let mut cfg = small_config();
    cfg.data.source = Some("pairs".into());
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert!(matches!(
        RunConfig::from_toml("bogus = 1"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::from_toml("[train]\nbatch_size = 0"),
        Err(Error::Config(_))
    ));
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn preset_sets_loss_weights() {
    let mut cfg = RunConfig::from_toml("preset = \"T-L2\"").unwrap();
    assert_eq!(cfg.train_config().loss, Preset::TL2.weights());
    cfg.preset = None;
    cfg.train.loss.lambda_p = 0.25;
    assert_eq!(cfg.train_config().loss.lambda_p, 0.25);
}

/// Each field: the default, then the file value, then the flag value wins.
#[test]
fn precedence_flag_over_file_over_default() {
    type Get = fn(&RunConfig) -> String;
    let cases: Vec<(&str, Overrides, Get)> = vec![
        (
            "preset = \"T-L2-G\"",
            Overrides {
                preset: Some(Preset::IL2T),
                ..Default::default()
            },
            |c| format!("{:?}", c.preset),
        ),
        (
            "[train]\nseed = 5",
            Overrides {
                seed: Some(9),
                ..Default::default()
            },
            |c| c.train.seed.to_string(),
        ),
        (
            "[data]\nseed = 5",
            Overrides {
                data_seed: Some(9),
                ..Default::default()
            },
            |c| c.data.seed.to_string(),
        ),
        (
            "[data]\nscenes = 5",
            Overrides {
                scenes: Some(9),
                ..Default::default()
            },
            |c| c.data.scenes.to_string(),
        ),
        (
            "[train]\nimage_size = 128",
            Overrides {
                image_size: Some(256),
                ..Default::default()
            },
            |c| c.train.image_size.to_string(),
        ),
        (
            "[train]\nbatch_size = 5",
            Overrides {
                batch_size: Some(9),
                ..Default::default()
            },
            |c| c.train.batch_size.to_string(),
        ),
        (
            "[train]\nstage1_iters = 5",
            Overrides {
                stage1_iters: Some(9),
                ..Default::default()
            },
            |c| c.train.stage1_iters.to_string(),
        ),
        (
            "[train]\nstage2_iters = 5",
            Overrides {
                stage2_iters: Some(9),
                ..Default::default()
            },
            |c| c.train.stage2_iters.to_string(),
        ),
        (
            "[train]\nscale = 0.25",
            Overrides {
                scale: Some(0.5),
                ..Default::default()
            },
            |c| c.train.scale.to_string(),
        ),
        (
            "[train.adam]\nlr = 0.001",
            Overrides {
                lr: Some(0.0005),
                ..Default::default()
            },
            |c| c.train.adam.lr.to_string(),
        ),
        (
            "[paths]\ndataset = \"f\"",
            Overrides {
                dataset: Some("x".into()),
                ..Default::default()
            },
            |c| c.paths.dataset.display().to_string(),
        ),
        (
            "[paths]\noutput = \"f\"",
            Overrides {
                output: Some("x".into()),
                ..Default::default()
            },
            |c| c.paths.output.display().to_string(),
        ),
    ];
    for (file, flags, get) in cases {
        let default = get(&RunConfig::default());
        let mut cfg = RunConfig::from_toml(file).unwrap();
        let from_file = get(&cfg);
        assert_ne!(from_file, default, "{file}");
        cfg.apply(&Overrides::default()).unwrap();
        assert_eq!(get(&cfg), from_file, "{file}");
        cfg.apply(&flags).unwrap();
        let from_flag = get(&cfg);
        assert_ne!(from_flag, from_file, "{file}");
        let mut plain = RunConfig::default();
        plain.apply(&flags).unwrap();
        assert_eq!(get(&plain), from_flag, "{file}");
    }
}

#[test]
fn invalid_override_is_rejected() {
    let mut cfg = RunConfig::default();
    let flags = Overrides {
        image_size: Some(48),
        ..Default::default()
    };
    assert!(matches!(cfg.apply(&flags), Err(Error::Config(_))));
}
