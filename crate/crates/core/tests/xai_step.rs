use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salguide_core::saliency::gradcam;
use salguide_core::train::{downscale_annotation, xai_step_batch, Branch};
use salguide_core::{BinaryMask, ModelConfig, ModelState, Tensor};
use salguide_oracles::reference::{self, Gate};

const LR: f64 = 0.05;

fn setup(seed: u64) -> (ModelState, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelState::init(ModelConfig::default_for(10, seed)).unwrap();
    let x = Tensor::new(vec![1, 3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen()).collect()).unwrap();
    (model, x)
}

/// First class whose map is (non-)empty for this image.
fn class_with(model: &ModelState, x: &Tensor, empty: bool) -> Option<usize> {
    (0..10).find(|&c| gradcam(model, x, c, 4).unwrap().is_zero() == empty)
}

/// Pixel annotation covering one whole 16×16 cell of the 4×4 last block.
fn cell_annotation(row: usize, col: usize) -> BinaryMask {
    let mut g = BinaryMask::zeros(64, 64);
    for y in 16 * row..16 * (row + 1) {
        for x in 16 * col..16 * (col + 1) {
            g.set(y, x, true);
        }
    }
    g
}

fn check(seed: u64, want_hit: bool) {
    let (model, x) = setup(seed);
    let label = class_with(&model, &x, false).expect("a class with a non-empty map");
    let s = gradcam(&model, &x, label, 4).unwrap();
    let p = salguide_core::saliency::peak(&s);
    let (row, col) = if want_hit { (p.row, p.col) } else { ((p.row + 2) % 4, (p.col + 2) % 4) };
    compare(&model, x, label, &cell_annotation(row, col), want_hit);
}

fn compare(model: &ModelState, x: Tensor, label: usize, g: &BinaryMask, want_hit: bool) {

    let (gate, want) = reference::xai_step(model, &x, label, g, 4, LR);
    assert_eq!(gate, if want_hit { Gate::Saliency } else { Gate::Annotation });

    let mut ours = model.clone();
    let layer = downscale_annotation(g, 4, 4).unwrap();
    let (_, trace) = xai_step_batch(&mut ours, x, &[label], &[layer], &[0], 5, 4, LR).unwrap();
    assert_eq!(trace[0].hit, want_hit);
    assert_eq!(trace[0].branch, if want_hit { Branch::Saliency } else { Branch::Annotation });
    for (p, w) in ours.params().iter().zip(&want) {
        for (a, b) in p.data().iter().zip(w) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
    assert_ne!(ours.params(), model.params());
}

#[test]
fn empty_saliency_takes_annotation_branch() {
    let found = (0..10).find_map(|seed| {
        let (model, x) = setup(seed);
        class_with(&model, &x, true).map(|c| (model, x, c))
    });
    let (model, x, label) = found.expect("an empty map among the first seeds");
    compare(&model, x, label, &cell_annotation(0, 0), false);
}

#[test]
fn saliency_branch_matches_two_pass_oracle() {
    for seed in 0..3 {
        check(seed, true);
    }
}

#[test]
fn annotation_branch_matches_two_pass_oracle() {
    for seed in 0..3 {
        check(seed, false);
    }
}
