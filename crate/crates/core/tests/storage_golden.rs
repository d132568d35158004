use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use selagg_core::storage::{self, AnyTensor, Bundle, BundleItem, Dtype, StorageError};
use selagg_core::tensor::Tensor;
use selagg_core::vit::{self, ViTConfig};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn expected() -> BTreeMap<String, Value> {
    let text = fs::read_to_string(fixtures().join("golden/expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn values_f64(t: &AnyTensor) -> Vec<f64> {
    match t {
        AnyTensor::F32(t) => t.data().iter().map(|&x| x as f64).collect(),
        AnyTensor::F64(t) => t.data().to_vec(),
        AnyTensor::I64(t) => t.data().iter().map(|&x| x as f64).collect(),
    }
}

#[test]
fn golden_records_decode_to_expected_values() {
    for (name, exp) in expected() {
        let path = fixtures().join(format!("golden/{name}.satf"));
        let t = storage::read_any(&path).unwrap();
        let dtype: Dtype = serde_json::from_value(exp["dtype"].clone()).unwrap();
        let dims: Vec<usize> = serde_json::from_value(exp["dims"].clone()).unwrap();
        assert_eq!(t.dtype(), dtype, "{name}");
        assert_eq!(t.dims(), dims.as_slice(), "{name}");
        let want: Vec<String> = serde_json::from_value(exp["values"].clone()).unwrap();
        match &t {
            AnyTensor::I64(it) => {
                let want: Vec<i64> = want.iter().map(|s| s.parse().unwrap()).collect();
                assert_eq!(it.data(), want.as_slice(), "{name}");
            }
            _ => {
                let want: Vec<f64> = want.iter().map(|s| s.parse().unwrap()).collect();
                let got = values_f64(&t);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.to_bits(), w.to_bits(), "{name}: {g} vs {w}");
                }
            }
        }
        assert_eq!(
            storage::payload_checksum(&t),
            exp["checksum"].as_str().unwrap(),
            "{name}"
        );
        let header = exp["header_len"].as_u64().unwrap() as usize;
        assert_eq!(storage::header_len(dims.len()), header);
    }
}

#[test]
fn golden_records_reencode_byte_identically() {
    for name in expected().keys() {
        let path = fixtures().join(format!("golden/{name}.satf"));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(storage::read_any(&path).unwrap().encode(), bytes, "{name}");
    }
}

#[test]
fn f32_2x3_has_23_byte_header() {
    let bytes = fs::read(fixtures().join("golden/f32_2x3.satf")).unwrap();
    assert_eq!(bytes.len(), 23 + 6 * 4);
    assert_eq!(&bytes[0..4], b"SATF");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes[5], 0);
    assert_eq!(bytes[6], 2);
    assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 3);
    assert_eq!(f32::from_le_bytes(bytes[23..27].try_into().unwrap()), 1.0);
}

#[test]
fn malformed_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read(fixtures().join("golden/f32_2x3.satf")).unwrap();
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("magic", [b"SATX".as_slice(), &good[4..]].concat()),
        ("version", [&good[..4], &[2u8], &good[5..]].concat()),
        ("dtype", [&good[..5], &[9u8], &good[6..]].concat()),
        ("short", good[..good.len() - 1].to_vec()),
        ("long", [good.as_slice(), &[0u8]].concat()),
        ("header", good[..10].to_vec()),
    ];
    for (what, bytes) in cases {
        let p = dir.path().join(format!("{what}.satf"));
        fs::write(&p, bytes).unwrap();
        let err = storage::read_any(&p).unwrap_err();
        let ok = match what {
            "magic" => matches!(err, StorageError::BadMagic { .. }),
            "version" => matches!(err, StorageError::BadVersion { .. }),
            "dtype" => matches!(err, StorageError::BadDtype { .. }),
            _ => matches!(
                err,
                StorageError::Truncated { .. } | StorageError::PayloadMismatch { .. }
            ),
        };
        assert!(ok, "{what}: {err}");
    }
}

#[test]
fn huge_declared_dims_fail_without_allocating() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = b"SATF".to_vec();
    bytes.extend([1, 0, 2]);
    bytes.extend(u64::MAX.to_le_bytes());
    bytes.extend(u64::MAX.to_le_bytes());
    let p = dir.path().join("huge.satf");
    fs::write(&p, bytes).unwrap();
    assert!(storage::read_any(&p).is_err());
}

#[test]
fn exported_bundle_loads_with_matching_checksums() {
    let dir = fixtures().join("bridge_vit");
    let bundle = storage::load_bundle(&dir).unwrap();
    assert_eq!(bundle.kind, "weights");
    assert!(bundle.tensors.keys().all(|k| !k.ends_with("attn.q.bias")));
    let (cfg, params, decoder) = storage::load_vit(&dir).unwrap();
    assert!(decoder.is_none());
    assert_eq!(cfg.num_patches(), 6);
    assert!(params.blocks.iter().all(|b| b.q.bias.is_none()));
}

#[test]
fn exported_bundle_with_tampered_payload_fails_checksum() {
    let src = fixtures().join("bridge_vit");
    let tmp = tempfile::tempdir().unwrap();
    let dst = tmp.path().join("b");
    fs::create_dir(&dst).unwrap();
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
    let target = dst.join("cls_token.satf");
    let mut bytes = fs::read(&target).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&target, bytes).unwrap();
    match storage::load_bundle(&dst) {
        Err(StorageError::Checksum { name, .. }) => assert_eq!(name, "cls_token"),
        other => panic!("expected checksum failure, got {other:?}"),
    }
}

#[test]
fn toolkit_forward_matches_reference_encoder() {
    let (cfg, params, _) = storage::load_vit(&fixtures().join("bridge_vit")).unwrap();
    let refs = fixtures().join("bridge_reference");
    for i in 0..3 {
        let image = storage::read_tensor(&refs.join(format!("image_{i}.satf"))).unwrap();
        let want_tokens = storage::read_any(&refs.join(format!("tokens_{i}.satf"))).unwrap();
        let want_attn = storage::read_any(&refs.join(format!("attention_{i}.satf"))).unwrap();
        let z0 = vit::embed(&vit::patchify(&image, cfg.patch_size).unwrap(), &params).unwrap();
        let (out, attn) = vit::vit_forward(&z0, &params, &cfg, true, None).unwrap();
        let attn = attn.unwrap();
        assert_eq!(out.tokens.dims(), want_tokens.dims());
        assert_eq!(attn.maps.dims(), want_attn.dims());
        let max_diff = |got: &[f32], want: &[f64]| {
            got.iter()
                .zip(want)
                .map(|(&g, &w)| (g as f64 - w).abs())
                .fold(0.0, f64::max)
        };
        let dt = max_diff(out.tokens.data(), &values_f64(&want_tokens));
        let da = max_diff(attn.maps.data(), &values_f64(&want_attn));
        assert!(dt < 1e-4, "image {i}: token diff {dt}");
        assert!(da < 1e-5, "image {i}: attention diff {da}");
    }
}

#[test]
fn bundle_round_trip_preserves_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bundle");
    let mut b = Bundle::new("features");
    b.config = Some(ViTConfig::tiny());
    b.insert(
        "tokens/a b",
        Tensor::from_vec(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
    );
    b.insert(
        "tokens/a_b",
        Tensor::from_vec(vec![1], vec![5.0f32]).unwrap(),
    );
    b.insert("ids", Tensor::from_vec(vec![3], vec![1i64, -2, 3]).unwrap());
    b.insert("f64", Tensor::from_vec(vec![1], vec![0.1f64]).unwrap());
    b.items.push(BundleItem {
        id: "a".into(),
        tensors: BTreeMap::from([("tokens".into(), "tokens/a b".into())]),
        label: Some(3),
        split: Some("train".into()),
        gt_boxes: Some(vec![[0.0, 1.0, 2.0, 3.0]]),
    });
    b.classes = vec!["x".into()];
    b.meta.insert("block".into(), 2.into());
    storage::save_bundle(&dir, &b).unwrap();
    let back = storage::load_bundle(&dir).unwrap();
    assert_eq!(back.tensors, b.tensors);
    assert_eq!(back.items, b.items);
    assert_eq!(back.classes, b.classes);
    assert_eq!(back.meta, b.meta);
    assert_eq!(back.config, b.config);
    let first = fs::read(dir.join("manifest.json")).unwrap();
    storage::save_bundle(&dir, &b).unwrap();
    assert_eq!(fs::read(dir.join("manifest.json")).unwrap(), first);
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers, vec![std::ffi::OsString::from("bundle")]);
}

#[test]
fn unknown_schema_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("manifest.json"),
        r#"{"schema_version": 7, "kind": "weights", "tensors": {}}"#,
    )
    .unwrap();
    assert!(matches!(
        storage::load_bundle(tmp.path()),
        Err(StorageError::UnknownSchema { version: 7, .. })
    ));
}

#[test]
fn missing_weight_tensor_is_named() {
    let src = fixtures().join("bridge_vit");
    let tmp = tempfile::tempdir().unwrap();
    let mut manifest: Value =
        serde_json::from_str(&fs::read_to_string(src.join("manifest.json")).unwrap()).unwrap();
    manifest["tensors"]
        .as_object_mut()
        .unwrap()
        .remove("blocks.1.mlp.fc1.weight");
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), tmp.path().join(e.file_name())).unwrap();
    }
    fs::write(tmp.path().join("manifest.json"), manifest.to_string()).unwrap();
    match storage::load_vit(tmp.path()) {
        Err(StorageError::MissingTensor { name, .. }) => {
            assert_eq!(name, "blocks.1.mlp.fc1.weight")
        }
        other => panic!("expected missing tensor, got {other:?}"),
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn report_floats_round_to_nine_digits() {
    assert_eq!(storage::round_sig9(std::f64::consts::PI), 3.14159265);
    assert_eq!(storage::round_sig9(-1.234567891234e-7), -1.23456789e-7);
    assert_eq!(storage::round_sig9(0.0), 0.0);
}
