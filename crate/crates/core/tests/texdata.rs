use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use mrdl_core::encoding::DescriptorBatch;
use mrdl_core::optim::{fit, TrainConfig};
use mrdl_core::texdata::*;
use mrdl_core::{Error, FormatError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Power spectrum of the mean-removed image by direct 2D DFT, as
/// `(radial frequency in cycles per image, power)` for every non-DC bin.
fn spectrum(img: &[f64], size: usize) -> Vec<(f64, f64)> {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let mut out = Vec::with_capacity(size * size);
    for u in 0..size {
        for v in 0..size {
            if u == 0 && v == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..size {
                for x in 0..size {
                    let a = -2.0 * PI * (u * x + v * y) as f64 / size as f64;
                    let p = img[y * size + x] - mean;
                    re += p * a.cos();
                    im += p * a.sin();
                }
            }
            let su = if u > size / 2 { u as f64 - size as f64 } else { u as f64 };
            let sv = if v > size / 2 { v as f64 - size as f64 } else { v as f64 };
            out.push(((su * su + sv * sv).sqrt(), re * re + im * im));
        }
    }
    out
}

fn ring_power(spec: &[(f64, f64)], center: f64, width: f64) -> f64 {
    spec.iter().filter(|(r, _)| (r - center).abs() <= width).map(|(_, p)| p).sum()
}

/// Radial frequency (cycles per image) of the strongest non-DC component.
fn dft_peak(img: &[f64], size: usize) -> f64 {
    spectrum(img, size)
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

fn clean_spec(classes: Vec<ClassSpec>) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        image_size: 32,
        noise: 0.0,
        nuisance_amplitude: 0.0,
        orientation_jitter_deg: 0.0,
        patches_per_group: 1,
        seed: 3,
    }
}

#[test]
fn noiseless_gratings_peak_at_their_frequency() {
    for scale in Scale::ALL {
        for orient in [0.0, 30.0, 90.0, 135.0] {
            let spec = clean_spec(vec![
                ClassSpec::at_scale(scale, orient, 32),
                ClassSpec::at_scale(Scale::Coarse, 0.0, 32),
            ]);
            let d = generate(&spec, 2).unwrap();
            for img in d.images.iter().filter(|i| i.label == 0) {
                let peak = dft_peak(img.pixels.data(), 32);
                let want = scale.frequency(32);
                assert!((peak - want).abs() <= 1.0, "{scale:?} {orient}°: peak {peak}, want {want}");
            }
        }
    }
}

#[test]
fn default_classes_keep_their_spectral_peak() {
    // With nuisance gratings at the other scales and noise on, a plaid's
    // single peak can fall below a nuisance peak and patchwork cells smear
    // the fine peak, so compare ring power instead: each class carries the
    // most power around its own scale.
    let spec = SyntheticSpec::default_with_seed(5);
    let d = generate(&spec, 6).unwrap();
    for img in &d.images {
        let class = &spec.classes[img.label];
        let s = spectrum(img.pixels.data(), 32);
        let width = if matches!(class.layout, Layout::Patchwork { .. }) { 2.5 } else { 1.0 };
        let own = ring_power(&s, class.frequency, width);
        for other in Scale::ALL.into_iter().filter(|&o| o != class.scale) {
            let theirs = ring_power(&s, other.frequency(32), 1.0);
            assert!(own > theirs, "class {}: {own} vs {other:?} {theirs}", img.label);
        }
    }
}

#[test]
fn generator_is_deterministic_and_in_range() {
    let spec = SyntheticSpec::default_with_seed(9);
    let a = generate(&spec, 5).unwrap();
    assert_eq!(a, generate(&spec, 5).unwrap());
    assert_eq!(a.classes, 4);
    assert_eq!(a.len(), 20);
    for img in &a.images {
        assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let mut bad = spec.clone();
    bad.classes[0].layout = Layout::Patchwork { cell: 0 };
    assert!(generate(&bad, 1).is_err());
}

#[test]
fn identical_classes_are_not_learnable() {
    let class = ClassSpec::at_scale(Scale::Fine, 0.0, 32);
    let mut spec = SyntheticSpec::default_with_seed(1);
    spec.classes = vec![class.clone(), class];
    let train = generate(&spec, 100).unwrap();
    spec.seed = 1001;
    let val = generate(&spec, 100).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        lr: 0.1,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let out = fit(&train, &val, &cfg).unwrap();
    let acc = *out.metrics.val_acc.last().unwrap();
    assert!(acc <= 0.6, "held-out accuracy {acc}");
}

#[test]
fn split_keeps_groups_together() {
    let mut spec = SyntheticSpec::default_with_seed(2);
    spec.patches_per_group = 3;
    let d = generate(&spec, 10).unwrap();
    let (train, val) = split(&d, 0.7, 4).unwrap();
    assert_eq!(train.len() + val.len(), d.len());
    let tg: BTreeSet<u64> = train.images.iter().map(|i| i.group).collect();
    let vg: BTreeSet<u64> = val.images.iter().map(|i| i.group).collect();
    assert!(tg.is_disjoint(&vg));
    assert_eq!(split(&d, 0.7, 4).unwrap(), (train, val));

    let (all, none) = split(&d, 1.0, 0).unwrap();
    assert_eq!(all.len(), d.len());
    assert!(none.is_empty());
    assert!(split(&d, 1.5, 0).is_err());
}

fn counting_oracle(labels: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let max = *counts.values().max().unwrap();
    *counts.iter().find(|(_, &c)| c == max).unwrap().0
}

#[test]
fn majority_vote_exhaustive_short_lists() {
    let mut checked = 0;
    for len in 1..=6u32 {
        for code in 0..3usize.pow(len) {
            let labels: Vec<usize> = (0..len).map(|i| code / 3usize.pow(i) % 3).collect();
            assert_eq!(majority_vote(&labels).unwrap(), counting_oracle(&labels), "{labels:?}");
            checked += 1;
        }
    }
    assert_eq!(checked, 3 + 9 + 27 + 81 + 243 + 729);
    assert_eq!(majority_vote(&[1, 1, 2]).unwrap(), 1);
    assert_eq!(majority_vote(&[0, 1]).unwrap(), 0);
    assert_eq!(majority_vote(&[2, 1, 2, 1]).unwrap(), 1);
    assert!(majority_vote(&[]).is_err());
}

#[test]
fn majority_vote_random_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let k = rng.random_range(1..8);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        assert_eq!(majority_vote(&labels).unwrap(), counting_oracle(&labels));
    }
}

fn golden_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"MRDLDESC");
    b.extend_from_slice(&[1, 0, 0, 0]); // version
    b.extend_from_slice(&[1, 0, 0, 0]); // levels
    b.extend_from_slice(&[2, 0, 0, 0]); // N
    b.extend_from_slice(&[1, 0, 0, 0]); // D
    b.extend_from_slice(&[0x00, 0x00, 0xC0, 0x3F]); // 1.5
    b.extend_from_slice(&[0x00, 0x00, 0x10, 0xC0]); // -2.25
    b.extend_from_slice(&[3, 0, 0, 0]); // label
    b
}

#[test]
fn little_endian_fixture_decodes_exactly() {
    let maps = decode_descriptor_maps(&golden_bytes()).unwrap();
    assert_eq!(maps.label, 3);
    assert_eq!(maps.levels.len(), 1);
    assert_eq!(maps.levels[0].descriptors().data(), &[1.5, -2.25]);
    assert_eq!(encode_descriptor_maps(&maps), golden_bytes());
}

#[test]
fn descriptor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mrdl");
    let maps = DescriptorMaps {
        levels: vec![
            DescriptorBatch::from_rows(3, 2, vec![0.5, -1.0, 2.0, 0.25, 8.0, -0.125]).unwrap(),
            DescriptorBatch::from_rows(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ],
        label: 7,
    };
    write_descriptor_maps(&path, &maps).unwrap();
    assert_eq!(load_descriptor_maps(&path).unwrap(), maps);
}

fn format_code(bytes: &[u8]) -> u32 {
    decode_descriptor_maps(bytes).unwrap_err().code()
}

#[test]
fn malformed_files_have_distinct_codes() {
    let good = golden_bytes();
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[8] = 2;
    let truncated = &good[..good.len() - 2];
    let mut nan = good.clone();
    nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    let mut zero_n = good.clone();
    zero_n[16] = 0;
    let mut trailing = good.clone();
    trailing.push(0);

    let codes = [
        format_code(&magic),
        format_code(&version),
        format_code(truncated),
        format_code(&nan),
        format_code(&zero_n),
        format_code(&trailing),
    ];
    assert_eq!(codes, [1, 2, 3, 4, 5, 6]);
    assert!(matches!(
        decode_descriptor_maps(&nan),
        Err(FormatError::NonFinitePayload { level: 0, index: 1 })
    ));
    assert_eq!(format_code(&good[..3]), 1);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&SyntheticSpec::default_with_seed(4), 3).unwrap();
    save_dataset(dir.path(), &d).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.classes, 4);
    assert_eq!(back.len(), 12);
    for (a, b) in d.images.iter().zip(&back.images) {
        assert_eq!((a.label, a.group), (b.label, b.group));
        for (p, q) in a.pixels.data().iter().zip(b.pixels.data()) {
            assert_eq!(*q, *p as f32 as f64);
        }
    }
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&SyntheticSpec::default_with_seed(4), 1).unwrap();
    save_dataset(dir.path(), &d).unwrap();
    let path = dir.path().join(MANIFEST_NAME);
    let good = std::fs::read_to_string(&path).unwrap();

    let first = good.lines().next().unwrap().to_string();
    let wrong_label = first.replacen(",0,", ",2,", 1);
    for (text, line) in [
        (format!("{good}only,two\n"), 5),
        (format!("{first}\nsample_000001.mrdl,x,0\n"), 2),
        (format!("{wrong_label}\n"), 1),
    ] {
        std::fs::write(&path, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format(FormatError::Manifest { line: l, .. })) => assert_eq!(l, line),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
    std::fs::write(&path, "missing.mrdl,0,0\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io(_))));
    std::fs::write(&path, "# nothing\n").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_never_separates_a_group(seed in any::<u64>(), fraction in 0.0f64..=1.0, per_group in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..30)
            .map(|i| LabeledImage::new(8, vec![0.5; 64], i % 3, (i / per_group) as u64 + rng.random_range(0..2) * 100).unwrap())
            .collect();
        let d = Dataset::new(3, 8, images).unwrap();
        let (train, val) = split(&d, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), 30);
        let tg: BTreeSet<u64> = train.images.iter().map(|i| i.group).collect();
        prop_assert!(val.images.iter().all(|i| !tg.contains(&i.group)));
    }

    #[test]
    fn descriptor_files_round_trip(seed in any::<u64>(), levels in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = (0..levels)
            .map(|_| {
                let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
                let data = (0..n * d).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect();
                DescriptorBatch::from_rows(n, d, data).unwrap()
            })
            .collect();
        let maps = DescriptorMaps { levels, label: rng.random() };
        let bytes = encode_descriptor_maps(&maps);
        prop_assert_eq!(decode_descriptor_maps(&bytes).unwrap(), maps);
        let cut = rng.random_range(0..bytes.len());
        prop_assert!(decode_descriptor_maps(&bytes[..cut]).is_err());
    }
}
