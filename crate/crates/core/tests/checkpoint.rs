mod common;

use polyglot_core::checkpoint::{config_hash, Checkpoint, VERSION};
use polyglot_core::continual::{apply_strategy, StrategyKind};
use polyglot_core::frontend;
use polyglot_core::model::{Model, ModelConfig, TaskId};
use polyglot_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained_model() -> Model<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = Model::new(ModelConfig::desk(), StrategyKind::Adapters, &mut rng).unwrap();
    apply_strategy(&mut m, TaskId(1), StrategyKind::Adapters, &mut rng).unwrap();
    apply_strategy(&mut m, TaskId(2), StrategyKind::Adapters, &mut rng).unwrap();
    m
}

fn features(m: &Model<f32>) -> Vec<u32> {
    let w = common::short_tones(&[1, 0, 3]);
    let z = frontend::extract(&m.params, &m.config().frontend, &w, 1e-5).unwrap();
    z.frames.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn roundtrip_is_byte_identical() {
    let m = trained_model();
    let ck = Checkpoint::from_model(&m, 42, serde_json::json!({"note": "x"}));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes, Some(&config_hash(m.config())), false).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.manifest.step, 42);
    let restored = back.into_model().unwrap();
    assert_eq!(features(&restored), features(&m));
    assert_eq!(restored, m);
}

#[test]
fn file_roundtrip() {
    let m = trained_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&m, 0, serde_json::Value::Null).save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path, None, false).unwrap();
    assert_eq!(back.params, m.params);
}

#[test]
fn corrupt_payload_names_the_record() {
    let m = trained_model();
    let bytes = Checkpoint::from_model(&m, 0, serde_json::Value::Null).to_bytes().unwrap();
    let name = "encoder.mask_embedding";
    let at = bytes.windows(name.len()).position(|w| w == name.as_bytes()).unwrap();
    let mut bad = bytes.clone();
    // Past the name, dtype, rank, one dim and payload length: inside the payload.
    bad[at + name.len() + 1 + 4 + 8 + 8 + 3] ^= 0x40;
    match Checkpoint::<f32>::from_bytes(&bad, None, false) {
        Err(Error::Checksum(r)) => assert_eq!(r, name),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncation_and_version_are_rejected() {
    let m = trained_model();
    let bytes = Checkpoint::from_model(&m, 0, serde_json::Value::Null).to_bytes().unwrap();
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut], None, false), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::<f32>::from_bytes(&v, None, false), Err(Error::Version { .. })));
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes, None, false), Err(Error::Manifest(_))));
}

#[test]
fn config_hash_mismatch_unless_forced() {
    let m = trained_model();
    let bytes = Checkpoint::from_model(&m, 0, serde_json::Value::Null).to_bytes().unwrap();
    let other = config_hash(&ModelConfig::full());
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes, Some(&other), false), Err(Error::ConfigHash { .. })));
    assert!(Checkpoint::<f32>::from_bytes(&bytes, Some(&other), true).is_ok());
}

#[test]
fn mismatched_preset_is_a_shape_error() {
    let m = trained_model();
    let ck = Checkpoint::from_model(&m, 0, serde_json::Value::Null);
    ck.check_shapes(m.config()).unwrap();
    let mut wider = ModelConfig::desk();
    wider.encoder.model_dim = 96;
    assert!(matches!(ck.check_shapes(&wider), Err(Error::Dimension { .. })));
}
