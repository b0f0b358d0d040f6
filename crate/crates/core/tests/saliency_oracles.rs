use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salguide_core::saliency::{binarize, gradcam, gradcam_from_parts, peak, pointing_hit};
use salguide_core::{BinaryMask, ModelConfig, ModelState, SaliencyMap, Tensor};
use salguide_oracles::reference;

fn random_image(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(vec![1, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn one_by_one_maps_are_the_rectified_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let c = rng.gen_range(1..8);
        let act: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, map) = gradcam_from_parts(&act, &grad, c, 1, 1);
        let dot: f64 = grad.iter().zip(&act).fold(0.0, |s, (g, a)| s + g * a);
        assert_eq!(map, vec![dot.max(0.0)]);
    }
}

#[test]
fn one_by_one_last_block_uses_head_weights() {
    // 16×16 input and four pools leave a 1×1 last block, where the logit
    // gradient with respect to channel k is the head weight W[c, k].
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ModelState::init(ModelConfig::with_channels([3, 16, 16], &[4, 4, 6, 6], 3, 5)).unwrap();
    let head = model.param("head.weight").unwrap().clone();
    for _ in 0..20 {
        let x = random_image(&mut rng, [3, 16, 16]);
        let class = rng.gen_range(0..3);
        let act = model.forward(&x, None).unwrap().block_activations[3].clone();
        let c = act.len();
        let dot = (0..c).fold(0.0, |s, k| s + head.data()[class * c + k] * act.data()[k]);
        let s = gradcam(&model, &x, class, 4).unwrap();
        assert_eq!(s.values(), &[dot.max(0.0)]);
    }
}

#[test]
fn handcrafted_two_channel_case() {
    // alpha = (mean of channel gradients) = (0.25, 0.1);
    // map = relu(0.25·A1 + 0.1·A2) = relu(0.25 − 0.5, 0.5 − 0.1, 0.75 + 0.2, 1 + 0).
    let act = [1.0, 2.0, 3.0, 4.0, -5.0, -1.0, 2.0, 0.0];
    let grad = [0.1, 0.2, 0.3, 0.4, -0.2, 0.1, 0.0, 0.5];
    let (weights, map) = gradcam_from_parts(&act, &grad, 2, 2, 2);
    let want_alpha = [0.25, 0.1];
    let want_map = [0.0, 0.4, 0.95, 1.0];
    for (a, b) in weights.alpha.iter().zip(want_alpha) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in map.iter().zip(want_map) {
        assert!((a - b).abs() < 1e-12, "{map:?}");
    }
}

#[test]
fn gradcam_matches_reference_on_every_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = ModelState::init(ModelConfig::with_channels([3, 32, 32], &[4, 6, 8, 8], 4, 9)).unwrap();
    for block in 1..=4 {
        for _ in 0..3 {
            let x = random_image(&mut rng, [3, 32, 32]);
            let class = rng.gen_range(0..4);
            let s = gradcam(&model, &x, class, block).unwrap();
            let (h, w, want) = reference::gradcam(&model, &x, class, block);
            assert_eq!((s.height(), s.width()), (h, w));
            for (a, b) in s.values().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

fn random_pair(rng: &mut impl Rng, case: usize) -> (SaliencyMap, BinaryMask) {
    let h = rng.gen_range(1..=6);
    let w = rng.gen_range(1..=6);
    let values: Vec<f64> = match case % 4 {
        0 => vec![0.0; h * w],
        1 => vec![rng.gen_range(0.1..2.0); h * w],
        2 => (0..h * w).map(|_| rng.gen_range(0..3) as f64).collect(),
        _ => (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let g = BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen::<bool>()).collect());
    (SaliencyMap::new(h, w, values, 4, 0), g)
}

#[test]
fn pointing_agrees_with_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let (s, g) = random_pair(&mut rng, case);
        let r = pointing_hit(&s, &g);
        let (row, col, hit) = reference::pointing(s.values(), s.height(), s.width(), &g);
        assert_eq!((r.peak.row, r.peak.col, r.hit), (row, col, hit), "case {case}");
        if case % 4 == 0 {
            assert!(!r.hit);
        }
    }
}

#[test]
fn constant_map_points_at_the_origin() {
    let s = SaliencyMap::new(3, 3, vec![0.7; 9], 4, 0);
    assert_eq!((peak(&s).row, peak(&s).col), (0, 0));
    let mut g = BinaryMask::zeros(3, 3);
    g.set(0, 0, true);
    assert!(pointing_hit(&s, &g).hit);
}

#[test]
fn binarize_keeps_strictly_positive_cells() {
    let s = SaliencyMap::new(2, 3, vec![0.0, 1e-300, 2.0, 0.0, 0.5, 0.0], 4, 0);
    assert_eq!(binarize(&s).as_slice(), &[false, true, true, false, true, false]);
}
