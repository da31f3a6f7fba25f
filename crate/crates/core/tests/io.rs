use dapass_core::config::{echo_config, load_config, TrainConfig};
use dapass_core::io::*;
use dapass_core::panosynth::{gen_target, Domain, SceneSpec, Split};
use dapass_core::segnet::{ModelConfig, SegModel, Variant};
use dapass_core::Error;
use dapass_tensor::Tensor;

fn model(variant: Variant, seed: u64) -> SegModel<f32> {
    SegModel::new(
        ModelConfig {
            variant,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(Variant::B1Toy, 7);
    let cfg = TrainConfig::default().to_toml().unwrap();
    save_checkpoint(&Checkpoint::from_model(&m, "source", 1500, Some(cfg.clone())), &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.meta.tag, "source");
    assert_eq!(back.meta.iteration, 1500);
    assert_eq!(back.meta.config.as_deref(), Some(cfg.as_str()));
    let restored = back.into_model().unwrap();
    assert_eq!(restored.params(), m.params());
    let x = Tensor::from_fn([1, 3, 32, 64], |i| (i % 17) as f32 / 17.0);
    assert_eq!(restored.infer(&x).unwrap(), m.infer(&x).unwrap());
}

#[test]
fn f64_checkpoints_round_trip() {
    let m = SegModel::<f64>::new(ModelConfig::default(), 2).unwrap();
    let bytes = encode_checkpoint(&Checkpoint::from_model(&m, "x", 0, None)).unwrap();
    assert_eq!(decode_checkpoint::<f64>(&bytes).unwrap().snapshot.params, *m.params());
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format(_))));
}

#[test]
fn any_flipped_byte_is_rejected() {
    let m = model(Variant::B1Toy, 1);
    let bytes = encode_checkpoint(&Checkpoint::from_model(&m, "t", 3, None)).unwrap();
    assert_eq!(&bytes[..4], b"DPSS");
    let body = bytes.len() - 4;
    for at in [6, 40, body / 2, body - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        match decode_checkpoint::<f32>(&bad) {
            Err(Error::Crc { offset, .. }) => assert_eq!(offset, body),
            other => panic!("byte {at}: expected CRC error, got {other:?}"),
        }
    }
    // Truncation shifts the CRC window and is caught too.
    assert!(decode_checkpoint::<f32>(&bytes[..body]).is_err());
}

#[test]
fn unknown_version_is_rejected() {
    let m = model(Variant::B1Toy, 1);
    let mut bytes = encode_checkpoint(&Checkpoint::from_model(&m, "t", 0, None)).unwrap();
    bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
    let err = decode_checkpoint::<f32>(&bytes).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");
    bytes[0] = b'X';
    assert!(decode_checkpoint::<f32>(&bytes).unwrap_err().to_string().contains("magic"));
}

#[test]
fn variant_mismatch_names_first_tensor() {
    let small = model(Variant::B1Toy, 1);
    let mut big = model(Variant::B2Toy, 1);
    let bytes = encode_checkpoint(&Checkpoint::from_model(&small, "b1", 0, None)).unwrap();
    let ckpt = decode_checkpoint::<f32>(&bytes).unwrap();
    let before = big.params().clone();
    match big.restore(&ckpt.snapshot) {
        Err(Error::ParamShape { name, .. }) => assert_eq!(name, "encoder.0.conv.weight"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    assert_eq!(big.params(), &before);
}

#[test]
fn empty_config_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert_eq!(cfg.pcgd.top_p, 10.0);
    assert_eq!(cfg.pcgd.tau, 600);
    assert_eq!(cfg.pcgd.top_k, 15);
    assert_eq!(cfg.cram.scale, 2);
    assert_eq!(cfg.cram.lambda_d, 0.3);
    assert!(cfg.train.base_lr > 0.0);
    assert_eq!(cfg.train.poly_power, 0.9);
    assert_eq!(cfg.train.weight_decay, 1e-4);
    assert_eq!(cfg.train.adam_eps, 1e-8);
    assert_eq!(cfg.train.total_iters, 1200);
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "[pcgd]\ntop_p = 0.0\n",
        "[pcgd]\ntop_p = 120.0\n",
        "[pcgd]\ntop_k_typo = 3\n",
        "learning_rate = 1.0\n",
        "[train]\nbase_lr = \"fast\"\n",
        "[train]\nbase_lr = -1.0\n",
        "[cram]\nscale = 0\n",
    ] {
        assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))), "accepted {text:?}");
    }
}

#[test]
fn echoed_config_reloads_equal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::from_toml("seed = 4\n[pcgd]\ntop_p = 15.0\ntau = 800\n[train]\ntotal_iters = 1600\n").unwrap();
    echo_config(&cfg, dir.path()).unwrap();
    assert_eq!(load_config(&dir.path().join("config.toml")).unwrap(), cfg);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let samples = gen_target(&spec, Split::Val, 5).unwrap();
    let split = split_dir(dir.path(), Domain::Target, Split::Val);
    assert!(split.ends_with("target-val"));
    write_split(&split, &samples).unwrap();
    let manifest = read_manifest(&split).unwrap();
    assert_eq!(manifest.len(), 5);
    let back = read_split(&split).unwrap();
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
    // Unlabelled reading works with the label files gone.
    std::fs::remove_dir_all(split.join("labels")).unwrap();
    let imgs = read_unlabeled(&split).unwrap();
    assert_eq!(imgs.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>());
    assert!(read_label_store(&split).is_err());
}

#[test]
fn comparison_image_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let s = &gen_target(&spec, Split::Val, 1).unwrap()[0];
    let path = dir.path().join("cmp.ppm");
    write_comparison(&path, &s.label, &s.label).unwrap();
    let img = image::open(&path).unwrap();
    assert_eq!((img.width() as usize, img.height() as usize), (2 * s.label.w, s.label.h));
}
