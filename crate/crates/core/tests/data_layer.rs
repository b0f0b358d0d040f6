use std::fs;

use salguide_core::domains::{generate_split, DomainSpec, SplitConfig, TARGET_DOMAINS};
use salguide_core::store::{read_dataset, write_dataset};
use salguide_oracles::stats::{chi_square_independence, pairing_fraction};

fn config(n_per_class: usize, side: usize, seed: u64) -> SplitConfig {
    SplitConfig {
        num_classes: 10,
        n_per_class,
        side,
        seed,
    }
}

fn pairs(domain: &DomainSpec, seed: u64) -> Vec<(usize, usize)> {
    let (ds, _) = generate_split(domain, "train", &config(500, 16, seed)).unwrap();
    ds.examples.iter().map(|e| (e.label, e.texture.unwrap())).collect()
}

#[test]
fn bias_dial_matches_requested_strength() {
    for (k, p) in [0.0, 0.1, 0.5, 0.9, 1.0].into_iter().enumerate() {
        let pairs = pairs(&DomainSpec::source(p), 40 + k as u64);
        assert_eq!(pairs.len(), 5000);
        let f = pairing_fraction(&pairs);
        assert!((f - p).abs() <= 0.02, "bias {p}: measured {f}");
    }
}

#[test]
fn decorrelated_backgrounds_are_independent_of_labels() {
    let domain = DomainSpec::by_name("decorrelated", 1.0).unwrap();
    let pairs = pairs(&domain, 77);
    let (stat, p) = chi_square_independence(&pairs, 10, 10);
    assert!(p > 0.01, "chi-square {stat}, p {p}");
}

#[test]
fn full_bias_pairs_every_example() {
    let pairs = pairs(&DomainSpec::source(1.0), 3);
    assert!(pairs.iter().all(|(l, t)| l == t));
}

#[test]
fn round_trip_is_exact_for_labels_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    for (i, domain) in DomainSpec::targets().iter().chain([&DomainSpec::source(0.7)]).enumerate() {
        let (ds, manifest) = generate_split(domain, "test", &config(2, 64, i as u64)).unwrap();
        let path = dir.path().join(&domain.name);
        write_dataset(&ds, &manifest, &path).unwrap();
        let (back, back_manifest) = read_dataset(&path).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.examples.iter().zip(&back.examples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.annotation, b.annotation);
            let worst = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst <= 1.0 / 510.0 + 1e-12, "{worst}");
        }
        let files = fs::read_dir(path.join("images")).unwrap().count();
        assert_eq!(files, manifest.example_count);
    }
}

#[test]
fn regeneration_is_bit_identical() {
    for name in TARGET_DOMAINS {
        let domain = DomainSpec::by_name(name, 1.0).unwrap();
        let a = generate_split(&domain, "test", &config(3, 64, 9)).unwrap();
        let b = generate_split(&domain, "test", &config(3, 64, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_split(&domain, "test", &config(3, 64, 10)).unwrap();
        assert_ne!(a.0.examples, c.0.examples);
    }
}
