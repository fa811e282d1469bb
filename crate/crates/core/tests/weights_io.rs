use std::fs;

use morphscope::weights::{load_weights, save_weights, validate_schema, PositionalMode, ViTConfig, WeightBundle};
use morphscope::Error;
use serde_json::Value;

/// Small geometry whose tensors are all whole multiples of 64 bytes.
fn aligned_config(depth: usize) -> ViTConfig {
    ViTConfig {
        image_side: 8,
        patch_side: 4,
        hidden_dim: 16,
        depth,
        heads: 2,
        mlp_dim: 32,
        ..ViTConfig::default()
    }
}

fn header_end(bytes: &[u8]) -> usize {
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    (12 + len).div_ceil(64) * 64
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = WeightBundle::random(&aligned_config(3), 11).unwrap();
    let a = dir.path().join("a.msw");
    let b = dir.path().join("b.msw");
    save_weights(&bundle, &a).unwrap();
    let loaded = load_weights(&a).unwrap();
    assert_eq!(loaded.config, bundle.config);
    for name in bundle.names() {
        let (x, y) = (bundle.get(name).unwrap(), loaded.get(name).unwrap());
        assert_eq!(x.shape(), y.shape(), "{name}");
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb, "{name}");
    }
    save_weights(&loaded, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(loaded.fingerprint(), bundle.fingerprint());
}

#[test]
fn repeated_saves_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = WeightBundle::random(&aligned_config(2), 5).unwrap();
    let a = dir.path().join("a.msw");
    let b = dir.path().join("b.msw");
    save_weights(&bundle, &a).unwrap();
    save_weights(&bundle, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn file_size_is_header_plus_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let config = aligned_config(2);
    let bundle = WeightBundle::random(&config, 1).unwrap();
    let path = dir.path().join("w.msw");
    save_weights(&bundle, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    // Shape sum from the schema, independent of the bundle.
    let params: usize = config.schema().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(params, config.parameter_count());
    assert_eq!(bytes.len(), header_end(&bytes) + 4 * params);
}

#[test]
fn sinusoidal_bundle_round_trips_without_positions() {
    let dir = tempfile::tempdir().unwrap();
    let config = ViTConfig { positional_mode: PositionalMode::Sinusoidal, final_layer_norm: false, ..aligned_config(1) };
    let bundle = WeightBundle::random(&config, 2).unwrap();
    assert!(!bundle.contains("pos_embed") && !bundle.contains("final_ln.gamma"));
    let path = dir.path().join("w.msw");
    save_weights(&bundle, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap().len(), bundle.len());
}

#[test]
fn bad_magic_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.msw");
    save_weights(&WeightBundle::random(&aligned_config(1), 0).unwrap(), &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Format(_))));
}

#[test]
fn truncated_payload_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.msw");
    save_weights(&WeightBundle::random(&aligned_config(1), 0).unwrap(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Corruption(_))));
    fs::write(&path, &bytes[..7]).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Corruption(_))));
}

#[test]
fn missing_last_tensor_is_schema_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.msw");
    save_weights(&WeightBundle::random(&aligned_config(24), 3).unwrap(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut header: Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    let tensors = header["tensors"].as_array_mut().unwrap();
    let before = tensors.len();
    tensors.retain(|t| t["name"] != "blocks.23.mlp.fc2.weight");
    assert_eq!(tensors.len(), before - 1);

    let json = serde_json::to_vec(&header).unwrap();
    let mut out = b"MSW1".to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(out.len().div_ceil(64) * 64, 0);
    out.extend_from_slice(&bytes[header_end(&bytes)..]);
    fs::write(&path, out).unwrap();

    match load_weights(&path) {
        Err(Error::Schema(msg)) => assert!(msg.contains("blocks.23.mlp.fc2.weight"), "{msg}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn empty_bundle_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let empty = WeightBundle::new(aligned_config(1));
    assert!(save_weights(&empty, dir.path().join("w.msw")).is_err());
    assert!(!dir.path().join("w.msw").exists());
}

#[test]
fn random_bundles_validate_for_many_geometries() {
    for (side, patch, hidden, heads, mlp) in [(8, 4, 8, 1, 8), (12, 4, 12, 3, 24), (16, 8, 32, 4, 64)] {
        for mode in [PositionalMode::Learned, PositionalMode::Sinusoidal] {
            for final_ln in [true, false] {
                let c = ViTConfig {
                    image_side: side,
                    patch_side: patch,
                    hidden_dim: hidden,
                    depth: 2,
                    heads,
                    mlp_dim: mlp,
                    positional_mode: mode,
                    final_layer_norm: final_ln,
                    ..ViTConfig::default()
                };
                let b = WeightBundle::random(&c, 9).unwrap();
                assert!(validate_schema(&b, &c).is_valid(), "{c:?}");
            }
        }
    }
}
