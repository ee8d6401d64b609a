use std::fs;
use std::path::Path;

use cprl::data::{
    decode_blob, distort, encode_blob, export, generate, ingest, level_label, render_scene,
    write_manifest, Dataset, Distortion, GenerateConfig, IngestOptions, SplitSpec, MANIFEST,
};
use cprl::CprlError;
use cprl_autodiff::Tensor;
use proptest::prelude::*;

fn cfg(scenes: usize, levels: usize, size: usize) -> GenerateConfig {
    GenerateConfig {
        scenes,
        levels,
        image_size: size,
        label_noise: 0.0,
    }
}

fn opts(size: usize) -> IngestOptions {
    IngestOptions {
        image_size: size,
        channels: 1,
        label_range: [0.0, 1.0],
    }
}

fn mean_abs_laplacian(img: &Tensor) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let p = |i: usize, j: usize| img.data()[i * w + j];
    let mut total = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            total += (p(i - 1, j) + p(i + 1, j) + p(i, j - 1) + p(i, j + 1) - 4.0 * p(i, j)).abs();
        }
    }
    total / ((h - 2) * (w - 2)) as f64
}

fn manifest_error_line(err: CprlError) -> u64 {
    match err {
        CprlError::Manifest { line, .. } => line,
        other => panic!("expected a manifest error, got {other}"),
    }
}

#[test]
fn level_zero_is_the_reference() {
    let reference = render_scene(32, 4);
    for d in Distortion::APPLIED {
        assert_eq!(distort(&reference, d, 0, 5, 9), reference);
    }
    let data = generate(&cfg(5, 5, 16), 1).unwrap();
    for s in data.samples().iter().filter(|s| s.level == 0) {
        assert_eq!(s.distortion, Distortion::Reference);
        assert_eq!(s.label, 1.0);
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&cfg(6, 4, 16), 42).unwrap();
    assert_eq!(a, generate(&cfg(6, 4, 16), 42).unwrap());
    assert_ne!(a, generate(&cfg(6, 4, 16), 43).unwrap());
    assert_eq!(a.len(), 6 * (1 + 3 * 3));
}

#[test]
fn blur_response_decreases_with_level() {
    let data = generate(&cfg(40, 5, 32), 0).unwrap();
    for scene in data.scene_ids() {
        let mut seq: Vec<(u32, f64)> = data
            .samples()
            .iter()
            .filter(|s| {
                s.scene_id == scene
                    && matches!(s.distortion, Distortion::Reference | Distortion::Blur)
            })
            .map(|s| (s.level, mean_abs_laplacian(&s.image)))
            .collect();
        seq.sort_by_key(|p| p.0);
        assert_eq!(seq.len(), 5);
        assert!(
            seq.windows(2).all(|w| w[1].1 < w[0].1),
            "scene {scene}: {seq:?}"
        );
    }
}

#[test]
fn labels_fall_with_level_and_pixels_stay_in_range() {
    let data = generate(&cfg(8, 6, 16), 3).unwrap();
    for s in data.samples() {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((0.0..=1.0).contains(&s.label));
    }
    for scene in data.scene_ids() {
        for d in Distortion::APPLIED {
            let mut labels: Vec<(u32, f64)> = data
                .samples()
                .iter()
                .filter(|s| {
                    s.scene_id == scene
                        && (s.distortion == d || s.distortion == Distortion::Reference)
                })
                .map(|s| (s.level, s.label))
                .collect();
            labels.sort_by_key(|p| p.0);
            assert!(labels.windows(2).all(|w| w[1].1 < w[0].1), "{labels:?}");
        }
    }
    assert_eq!(level_label(Distortion::Noise, 5, 6), 0.0);
}

#[test]
fn split_is_four_to_one_and_round_trips() {
    let data = generate(&cfg(10, 3, 8), 0).unwrap();
    let split = SplitSpec::new(&data, 5).unwrap();
    assert_eq!((split.train_scenes.len(), split.test_scenes.len()), (8, 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    split.save(&path).unwrap();
    let back = SplitSpec::load(&path).unwrap();
    assert_eq!(back, split);
    assert_eq!(back.apply(&data).unwrap(), split.apply(&data).unwrap());
    // Three scenes cannot be split 4:1.
    let few = Dataset::new(data.samples()[..3 * 7].to_vec()).unwrap();
    assert!(SplitSpec::new(&few, 0).is_err());
}

#[test]
fn export_then_ingest_is_identity() {
    let data = generate(&cfg(5, 4, 16), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&data, dir.path()).unwrap();
    let back = ingest(dir.path(), &opts(16)).unwrap();
    assert_eq!(back, data);
}

#[test]
fn blob_round_trip_and_corruption() {
    let t = render_scene(8, 1);
    assert_eq!(decode_blob(&encode_blob(&t)).unwrap(), t);
    let bytes = encode_blob(&t);
    assert!(decode_blob(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_blob(&bytes[..8]).is_err());
}

fn write_blob(dir: &Path, name: &str, fill: f64) {
    fs::write(dir.join(name), encode_blob(&Tensor::full(&[1, 4, 4], fill))).unwrap();
}

#[test]
fn one_row_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_blob(dir.path(), "a.bin", 0.25);
    write_manifest(dir.path(), &[("a.bin", "0.7", "3")]).unwrap();
    let d = ingest(dir.path(), &opts(4)).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.samples()[0].scene_id, 3);
}

#[test]
fn constant_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_blob(dir.path(), "a.bin", 0.25);
    write_blob(dir.path(), "b.bin", 0.5);
    write_manifest(dir.path(), &[("a.bin", "0.4", "0"), ("b.bin", "0.4", "1")]).unwrap();
    let err = ingest(dir.path(), &opts(4)).unwrap_err();
    assert!(err.to_string().contains("normalization"), "{err}");
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_blob(dir.path(), "a.bin", 0.25);
    write_manifest(
        dir.path(),
        &[("a.bin", "0.1", "0"), ("missing.bin", "0.2", "1")],
    )
    .unwrap();
    assert_eq!(
        manifest_error_line(ingest(dir.path(), &opts(4)).unwrap_err()),
        3
    );

    write_manifest(
        dir.path(),
        &[
            ("a.bin", "0.1", "0"),
            ("a.bin", "0.3", "0"),
            ("a.bin", "7", "1"),
        ],
    )
    .unwrap();
    let err = ingest(dir.path(), &opts(4)).unwrap_err();
    assert!(err.to_string().contains("outside declared range"));
    assert_eq!(manifest_error_line(err), 4);

    write_manifest(dir.path(), &[("a.bin", "high", "0")]).unwrap();
    assert_eq!(
        manifest_error_line(ingest(dir.path(), &opts(4)).unwrap_err()),
        2
    );

    fs::write(dir.path().join(MANIFEST), "name,score\na.bin,0.1\n").unwrap();
    assert_eq!(
        manifest_error_line(ingest(dir.path(), &opts(4)).unwrap_err()),
        1
    );

    fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(ingest(dir.path(), &opts(4)).unwrap_err().exit_code(), 5);
}

#[test]
fn png_is_resized_and_cropped() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::GrayImage::from_fn(12, 8, |x, y| image::Luma([(x * 20 + y) as u8]));
    img.save(dir.path().join("a.png")).unwrap();
    let img = image::GrayImage::from_pixel(8, 8, image::Luma([255u8]));
    img.save(dir.path().join("b.png")).unwrap();
    write_manifest(dir.path(), &[("a.png", "2", "0"), ("b.png", "4", "1")]).unwrap();
    let d = ingest(
        dir.path(),
        &IngestOptions {
            image_size: 4,
            channels: 1,
            label_range: [0.0, 10.0],
        },
    )
    .unwrap();
    assert_eq!(d.image_shape(), Some(&[1usize, 4, 4][..]));
    assert_eq!(d.labels(), vec![0.0, 1.0]);
    assert!(d.samples()[1]
        .image
        .data()
        .iter()
        .all(|&v| (v - 1.0).abs() < 1e-6));
    assert!(d.samples()[0]
        .image
        .data()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_scenes_are_disjoint(seed in any::<u64>(), scenes in 5usize..30) {
        let data = generate(&cfg(scenes, 3, 4), 0).unwrap();
        let split = SplitSpec::new(&data, seed).unwrap();
        prop_assert!(split.train_scenes.iter().all(|s| !split.test_scenes.contains(s)));
        prop_assert_eq!(split.train_scenes.len() + split.test_scenes.len(), scenes);
        let (train, test) = split.apply(&data).unwrap();
        prop_assert!(train.scene_ids().is_disjoint(&test.scene_ids()));
        prop_assert_eq!(train.len() + test.len(), data.len());
    }
}
