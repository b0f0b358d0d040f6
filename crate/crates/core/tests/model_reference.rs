use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salguide_core::{ModelConfig, ModelState, Tensor};
use salguide_oracles::reference;

#[test]
fn logits_match_loop_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (seed, side) in [(0, 64), (1, 32), (2, 16)] {
        let model = ModelState::init(ModelConfig::with_channels([3, side, side], &[16, 32, 64, 64], 10, seed)).unwrap();
        let n = 3;
        let x = Tensor::new(vec![n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.gen()).collect()).unwrap();
        let ours = model.logits(&x).unwrap();
        let (want, _) = reference::forward(&model, &x);
        for (a, b) in ours.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
