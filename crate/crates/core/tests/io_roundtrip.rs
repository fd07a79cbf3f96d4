use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdlab_core::dataset_io::{
    load_image, load_manifest, manifest_to_json, parse_manifest, read_checkpoint, save_image, write_checkpoint,
    write_manifest, CheckpointArchive, DatasetManifest, ImageRecord, Split,
};
use crowdlab_core::{Error, Tensor32, Tensor64};

fn manifest() -> DatasetManifest {
    DatasetManifest {
        name: "mall".into(),
        split: Split::Test,
        records: vec![
            ImageRecord {
                image_path: "a.png".into(),
                width: 8,
                height: 4,
                points: vec![[0.5, 0.5].into(), [7.25, 3.75].into()],
            },
            ImageRecord {
                image_path: "b.png".into(),
                width: 8,
                height: 4,
                points: Vec::new(),
            },
        ],
        base_dir: Default::default(),
    }
}

#[test]
fn manifest_survives_json_and_disk() {
    let m = manifest();
    let back = parse_manifest(&manifest_to_json(&m)).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.total_points(), 2);

    let dir = tempfile::tempdir().unwrap();
    let img = Tensor32::full(&[4, 8, 1], 0.5);
    save_image(&img, dir.path().join("a.png")).unwrap();
    save_image(&img, dir.path().join("b.png")).unwrap();
    let path = dir.path().join("m.json");
    write_manifest(&m, &path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.records, m.records);
    assert_eq!(loaded.resolve(&loaded.records[0]), dir.path().join("a.png"));
}

#[test]
fn manifest_points_outside_the_image_are_rejected() {
    let mut m = manifest();
    m.records[0].points.push([8.0, 1.0].into());
    let err = parse_manifest(&manifest_to_json(&m)).unwrap_err();
    assert!(matches!(err, Error::OutOfBoundsPoint { .. }), "{err}");
    assert_eq!(err.code(), "E_OUT_OF_BOUNDS_POINT");
}

#[test]
fn missing_images_are_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    write_manifest(&manifest(), &path).unwrap();
    match load_manifest(&path) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("a.png")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_roundtrip_keeps_names_shapes_and_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut archive = CheckpointArchive::new();
    let a = Tensor32::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor64::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
    archive.push_tensor("fen/col1/conv1/weight", &a).unwrap();
    archive.push_tensor("scalar/b", &b).unwrap();
    archive.metadata.insert("stage".into(), "stage1".into());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csa");
    write_checkpoint(&archive, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, archive);
    assert_eq!(back.get("fen/col1/conv1/weight").unwrap().shape, vec![2, 3, 4]);
    let restored: Tensor64 = back.get("scalar/b").unwrap().to_tensor();
    for (x, y) in restored.data().iter().zip(b.data()) {
        assert_abs_diff_eq!(*x, *y, epsilon = 1e-7);
    }
    assert!(archive.push_tensor("scalar/b", &b).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut archive = CheckpointArchive::new();
    archive.push_tensor("w", &Tensor32::full(&[3], 1.0)).unwrap();
    let bytes = archive.to_bytes().unwrap();
    assert!(matches!(
        CheckpointArchive::from_bytes(&bytes[..bytes.len() - 2]),
        Err(Error::TruncatedPayload(_))
    ));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(CheckpointArchive::from_bytes(&bad), Err(Error::BadMagic(_))));
}

#[test]
fn png_roundtrip_is_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor32::from_fn(&[5, 7, 3], |i| (i % 17) as f32 / 16.0);
    let p = dir.path().join("i.png");
    save_image(&img, &p).unwrap();
    let back: Tensor32 = load_image(&p, 3).unwrap();
    assert_eq!(back.shape(), img.shape());
    for (x, y) in back.data().iter().zip(img.data()) {
        assert_abs_diff_eq!(*x, *y, epsilon = 0.5 / 255.0 + 1e-6);
    }
    let gray: Tensor32 = load_image(&p, 1).unwrap();
    assert_eq!(gray.shape(), &[5, 7, 1]);
}
