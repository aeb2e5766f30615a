//! File-format round trips and the published synthetic-dataset checksum.

use proptest::prelude::*;
use uqd_core::data::{dataset_checksum, generate_synthetic, write_dataset, SynthConfig};
use uqd_core::io::{self, Dataset, MANIFEST_NAME};
use uqd_core::maps::{Mask, ProbMap};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pgm_image_round_trip_is_exact(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        let bytes: Vec<u8> = (0..h * w).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 7919) >> 3) as u8).collect();
        io::write_pgm_bytes(&path, w, h, &bytes).unwrap();
        let img = io::read_pgm_image(&path).unwrap();
        io::write_pgm_image(&path, &img).unwrap();
        prop_assert_eq!(io::read_pgm_bytes(&path).unwrap(), (w, h, bytes));
        prop_assert_eq!(io::read_pgm_image(&path).unwrap(), img);
    }

    #[test]
    fn pgm_mask_round_trip_is_exact(labels in proptest::collection::vec(0u8..2, 1..100)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Mask::new(1, labels.len(), labels).unwrap();
        io::write_pgm_mask(&path, &mask).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = io::read_pgm_mask(&path).unwrap();
        prop_assert_eq!(&back, &mask);
        io::write_pgm_mask(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn pfm_round_trip_within_single_precision(probs in proptest::collection::vec(0.0f64..=1.0, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pfm");
        let p = ProbMap::new(3, 4, probs).unwrap();
        io::write_pfm(&path, &p).unwrap();
        let back = io::read_pfm(&path).unwrap();
        prop_assert_eq!(back.clamped, 0);
        for (a, b) in p.probs().iter().zip(back.map.probs()) {
            prop_assert!((a - b).abs() <= a.abs() * 2f64.powi(-24));
        }
    }
}

#[test]
fn manifest_reemission_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(&SynthConfig {
        n_images: 3,
        height: 16,
        width: 16,
        ..SynthConfig::default()
    })
    .unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let manifest = dir.path().join(MANIFEST_NAME);
    let original = std::fs::read_to_string(&manifest).unwrap();
    let ds = Dataset::load(&manifest).unwrap();
    ds.write_manifest().unwrap();
    assert_eq!(std::fs::read_to_string(&manifest).unwrap(), original);
    assert_eq!(Dataset::load(&manifest).unwrap(), ds);
}

#[test]
fn seed7_dataset_matches_published_checksum() {
    let golden = include_str!("golden/synth_seed7.sha256").trim();
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(&SynthConfig::default()).unwrap();
    for s in &samples {
        let f = s.mask.foreground_fraction();
        assert!((0.02..=0.4).contains(&f), "{f}");
    }
    let ds = write_dataset(&samples, dir.path()).unwrap();
    assert_eq!(dataset_checksum(&ds).unwrap(), golden);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let cfg = SynthConfig {
        n_images: 2,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&generate_synthetic(&cfg).unwrap(), a.path()).unwrap();
    write_dataset(&generate_synthetic(&cfg).unwrap(), b.path()).unwrap();
    for name in ["img_000.pgm", "mask_001.pgm", MANIFEST_NAME] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
}
