use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tempfile::TempDir;

use ugt_core::io::{
    convert_npy, load_bundle, load_manifest, read_tensor, read_tensor_dims, save_bundle,
    save_manifest, validate_manifest, write_tensor, BundleStage, DatasetManifest, Domain,
    ManifestEntry, ModelBundle, Provenance, Tensor,
};
use ugt_core::synth::OcclusionLevel;
use ugt_core::{Error, GenerativeModel, SpatialCoefficients, ValidationKind, VmfDictionary};

fn unit_map_tensor(h: usize, w: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; h * w * d];
    for a in 0..h * w {
        data[a * d + a % d] = 1.0;
    }
    Tensor::new(vec![h, w, d], data).unwrap()
}

fn entry(path: &str, label: Option<u32>, domain: Domain) -> ManifestEntry {
    ManifestEntry {
        path: PathBuf::from(path),
        label,
        domain,
        occlusion: None,
    }
}

/// Writes `a.ugtf` (2×2×3) and `b.ugtf` (2×2×4) into a fresh directory.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_tensor(&dir.path().join("a.ugtf"), &unit_map_tensor(2, 2, 3)).unwrap();
    write_tensor(&dir.path().join("b.ugtf"), &unit_map_tensor(2, 2, 4)).unwrap();
    dir
}

fn manifest_in(dir: &Path, entries: Vec<ManifestEntry>) -> DatasetManifest {
    let path = dir.join("m.json");
    save_manifest(&path, &DatasetManifest::new(3, 2, 2, entries)).unwrap();
    load_manifest(&path).unwrap()
}

fn kind(r: ugt_core::Result<()>) -> ValidationKind {
    match r {
        Err(Error::Validation { kind, .. }) => kind,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn valid_manifest_loads_maps() {
    let dir = fixture();
    let mut e = entry("a.ugtf", None, Domain::Target);
    e.occlusion = Some(OcclusionLevel::L2);
    let m = manifest_in(
        dir.path(),
        vec![entry("a.ugtf", Some(1), Domain::Source), e],
    );
    validate_manifest(&m).unwrap();
    let (maps, labels) = m.load_domain(Domain::Source).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(labels, vec![Some(1)]);
    assert_eq!(m.entries[1].occlusion, Some(OcclusionLevel::L2));
}

#[test]
fn manifest_failures_have_distinct_categories() {
    let dir = fixture();
    let missing = manifest_in(
        dir.path(),
        vec![entry("nope.ugtf", Some(0), Domain::Source)],
    );
    assert_eq!(
        kind(validate_manifest(&missing)),
        ValidationKind::MissingFile
    );
    let dims = manifest_in(dir.path(), vec![entry("b.ugtf", Some(0), Domain::Source)]);
    assert_eq!(kind(validate_manifest(&dims)), ValidationKind::DimMismatch);
    let unlabeled = manifest_in(dir.path(), vec![entry("a.ugtf", None, Domain::Source)]);
    assert_eq!(
        kind(validate_manifest(&unlabeled)),
        ValidationKind::MissingLabel
    );

    let bad_schema = dir.path().join("bad.json");
    std::fs::write(
        &bad_schema,
        r#"{"schema": 9, "dim": 3, "height": 2, "width": 2, "entries": []}"#,
    )
    .unwrap();
    assert!(matches!(
        load_manifest(&bad_schema),
        Err(Error::Validation {
            kind: ValidationKind::Schema,
            ..
        })
    ));
    for e in [
        validate_manifest(&missing).unwrap_err(),
        validate_manifest(&dims).unwrap_err(),
        validate_manifest(&unlabeled).unwrap_err(),
    ] {
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn tensor_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ugtf");
    std::fs::write(&path, b"XXXX\x01\x00\x01\x00").unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    assert!(matches!(
        read_tensor(&dir.path().join("absent.ugtf")),
        Err(Error::Io { .. })
    ));
    assert_eq!(
        read_tensor(&dir.path().join("absent.ugtf"))
            .unwrap_err()
            .exit_code(),
        4
    );
    let t = unit_map_tensor(2, 3, 4);
    write_tensor(&path, &t).unwrap();
    assert_eq!(read_tensor_dims(&path).unwrap(), vec![2, 3, 4]);
    assert_eq!(read_tensor(&path).unwrap(), t);
}

/// A minimal version-1 `.npy` file.
fn npy_bytes(descr: &str, shape: &[usize], payload: &[u8]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

#[test]
fn npy_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let values = [1.0f64, 0.0, 0.0, 1.0, 0.6, 0.8];
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let input = dir.path().join("x.npy");
    std::fs::write(&input, npy_bytes("<f8", &[1, 3, 2], &payload)).unwrap();
    let out = dir.path().join("x.ugtf");
    let t = convert_npy(&input, &out).unwrap();
    assert_eq!(t.dims, vec![1, 3, 2]);
    assert_eq!(
        read_tensor(&out).unwrap().data,
        values.iter().map(|&v| v as f32).collect::<Vec<_>>()
    );

    let payload: Vec<u8> = [0.5f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&input, npy_bytes("<f4", &[2], &payload)).unwrap();
    assert_eq!(convert_npy(&input, &out).unwrap().data, vec![0.5, 2.0]);

    let payload: Vec<u8> = [1i32, 2].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&input, npy_bytes("<i4", &[2], &payload)).unwrap();
    assert!(matches!(convert_npy(&input, &out), Err(Error::Format(_))));
}

fn small_bundle() -> ModelBundle {
    let dict = VmfDictionary::new(2, 30.0, vec![1.0, 0.0, 0.6, 0.8], vec![0.3, 0.7]).unwrap();
    let spatial = SpatialCoefficients::new(
        vec![0, 4],
        1,
        1,
        2,
        2,
        vec![0.1, 0.9, 0.5, 0.5, 1.0 / 3.0, 2.0 / 3.0, 0.0, 1.0],
    )
    .unwrap();
    let model = GenerativeModel::new(dict, spatial, None).unwrap();
    ModelBundle::new(
        model,
        None,
        Provenance {
            stage: BundleStage::Source,
            config_hash: "c".into(),
            manifest_hash: "m".into(),
            seed: 3,
            tool_version: "test".into(),
        },
    )
}

#[test]
fn bundle_round_trip_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ugtb");
    let b = small_bundle();
    save_bundle(&path, &b).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.hash().unwrap(), b.hash().unwrap());
    assert_eq!(std::fs::read(&path).unwrap(), b.to_bytes().unwrap());

    std::fs::write(&path, b"UGTF0000").unwrap();
    assert!(matches!(load_bundle(&path), Err(Error::Format(_))));
    let bytes = b.to_bytes().unwrap();
    assert!(ModelBundle::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

proptest! {
    #[test]
    fn tensor_files_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((i as u32 ^ seed) as f32).sin() * 1e3).collect();
        let t = Tensor::new(dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ugtf");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        prop_assert_eq!(back.dims, t.dims);
        prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
