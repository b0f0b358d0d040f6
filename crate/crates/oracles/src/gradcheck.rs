//! Central finite differences against the tape's reverse pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salguide_core::model::GradTarget;
use salguide_core::tensor::{Tape, Tensor, Var};
use salguide_core::{ModelConfig, ModelState};

use crate::reference;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are zero up
/// to round-off compare on an absolute scale of `TOLERANCE * FLOOR`.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    /// Coordinates probed, kinks included.
    pub coordinates: usize,
    /// Smooth coordinates the case must check to count.
    pub required: usize,
    pub max_rel_error: f64,
    /// Coordinates whose ±h step crosses a relu or pooling boundary. The
    /// objective is not differentiable across them, so they are excluded
    /// from the maximum.
    pub kinks: usize,
}

impl CaseReport {
    pub fn checked(&self) -> usize {
        self.coordinates - self.kinks
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked() >= self.required
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One operator applied to random inputs; the checked scalar is
/// `Σ out ⊙ weights`.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub weights: Vec<f64>,
    build: Build,
}

impl OpCase {
    fn output(&self, inputs: &[Tensor], track: bool) -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(track)))
            .collect();
        let out = (self.build)(&mut tape, &vars);
        (tape, vars, out)
    }

    fn objective(&self, inputs: &[Tensor]) -> f64 {
        let (tape, _, out) = self.output(inputs, false);
        dot(tape.value(out).data(), &self.weights)
    }

    pub fn check(&self) -> CaseReport {
        let (mut tape, vars, out) = self.output(&self.inputs, true);
        tape.backward_with_seed(out, &self.weights).expect("backward");
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect();
        let mut report = CaseReport {
            name: self.name.clone(),
            coordinates: 0,
            required: analytic.iter().map(Vec::len).sum(),
            max_rel_error: 0.0,
            kinks: 0,
        };
        for (i, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let probe = |delta: f64| {
                    let mut inputs = self.inputs.clone();
                    inputs[i].data_mut()[j] += delta;
                    self.objective(&inputs)
                };
                let (plus, centre, minus) = (probe(STEP), self.objective(&self.inputs), probe(-STEP));
                // Inputs are drawn away from relu and pooling boundaries, so
                // one-sided slopes may only differ by the O(h) curvature term.
                let (fwd, bwd) = ((plus - centre) / STEP, (centre - minus) / STEP);
                let kink = (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0);
                record(&mut report, a, plus, minus, kink);
            }
        }
        report
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn record(report: &mut CaseReport, analytic: f64, plus: f64, minus: f64, kink: bool) {
    report.coordinates += 1;
    if kink {
        report.kinks += 1;
        return;
    }
    let numeric = (plus - minus) / (2.0 * STEP);
    report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Values bounded away from zero so no step crosses the relu kink.
fn away_from_zero(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Distinct values at least 0.01 apart, so every pooling window has a
/// strict maximum well beyond the step size.
fn distinct(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("shape")
}

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn case(name: String, inputs: Vec<Tensor>, build: Build, rng: &mut impl Rng) -> OpCase {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let out = build(&mut probe, &vars);
    let n = probe.value(out).len();
    OpCase {
        name,
        inputs,
        weights: weights(rng, n),
        build,
    }
}

/// Randomized cases for every operator, `per_op` each.
pub fn operator_cases(seed: u64, per_op: usize) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for k in 0..per_op {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let h = 2 * rng.gen_range(2..=3);
        let w = 2 * rng.gen_range(2..=3);
        let co = rng.gen_range(1..=3);
        let stride = if k % 2 == 0 { 1 } else { 2 };
        let padding = k % 3 % 2;

        let x = uniform(&mut rng, vec![n, c, h, w], 1.0);
        let kern = uniform(&mut rng, vec![co, c, 3, 3], 0.5);
        let bias = uniform(&mut rng, vec![co], 0.5);
        cases.push(case(
            format!("conv2d#{k} stride {stride} padding {padding}"),
            vec![x, kern, bias],
            Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding).expect("conv2d")),
            &mut rng,
        ));

        let x = away_from_zero(&mut rng, vec![n, c, h, w]);
        cases.push(case(format!("relu#{k}"), vec![x], Box::new(|t, v| t.relu(v[0])), &mut rng));

        let x = distinct(&mut rng, vec![n, c, h, w]);
        cases.push(case(
            format!("maxpool2d#{k}"),
            vec![x],
            Box::new(|t, v| t.maxpool2d(v[0]).expect("maxpool2d")),
            &mut rng,
        ));

        let x = uniform(&mut rng, vec![n, c, h, w], 1.0);
        cases.push(case(
            format!("global_avg_pool#{k}"),
            vec![x],
            Box::new(|t, v| t.global_avg_pool(v[0]).expect("global_avg_pool")),
            &mut rng,
        ));

        let d = rng.gen_range(1..=5);
        let o = rng.gen_range(1..=4);
        let x = uniform(&mut rng, vec![n, d], 1.0);
        let wt = uniform(&mut rng, vec![o, d], 1.0);
        let b = uniform(&mut rng, vec![o], 1.0);
        cases.push(case(
            format!("dense#{k}"),
            vec![x, wt, b],
            Box::new(|t, v| t.dense(v[0], v[1], v[2]).expect("dense")),
            &mut rng,
        ));

        let classes = rng.gen_range(2..=5);
        let z = uniform(&mut rng, vec![n, classes], 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        cases.push(case(
            format!("softmax_cross_entropy#{k}"),
            vec![z],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels).expect("cross entropy")),
            &mut rng,
        ));

        let x = uniform(&mut rng, vec![n, c, h, w], 1.0);
        let mask: Vec<f64> = (0..n * h * w).map(|_| f64::from(rng.gen::<bool>() as u8)).collect();
        cases.push(case(
            format!("spatial_mask#{k}"),
            vec![x],
            Box::new(move |t, v| t.spatial_mask(v[0], &mask).expect("spatial_mask")),
            &mut rng,
        ));
    }
    cases
}

/// Cross-entropy of a four-block network on one random image, checked on
/// `per_tensor` random smooth coordinates of every parameter tensor.
/// Coordinates whose step changes the activation pattern are redrawn.
pub fn model_case(config: ModelConfig, per_tensor: usize) -> CaseReport {
    let seed = config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let k = config.num_classes;
    let mut model = ModelState::init(config).expect("model");
    let [c, h, w] = model.config().input_shape;
    let batch = Tensor::new(vec![1, c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).expect("batch");
    let labels = [rng.gen_range(0..k)];

    let loss_of = |m: &ModelState| {
        let mut f = m.forward_taped(batch.clone(), None, GradTarget::None).expect("forward");
        let l = f.tape.softmax_cross_entropy(f.logits, &labels).expect("loss");
        f.tape.value(l).data()[0]
    };

    let mut f = model.forward_taped(batch.clone(), None, GradTarget::Parameters).expect("forward");
    let loss = f.tape.softmax_cross_entropy(f.logits, &labels).expect("loss");
    f.tape.backward(loss).expect("backward");
    let param_grads: Vec<Vec<f64>> = f.params.iter().map(|&v| f.tape.grad(v).expect("grad").to_vec()).collect();

    let (_, centre_pattern) = reference::forward(&model, &batch);
    let mut report = CaseReport {
        name: format!("model {}x{} seed {seed}", h, w),
        coordinates: 0,
        required: per_tensor * param_grads.len(),
        max_rel_error: 0.0,
        kinks: 0,
    };
    for (p, grads) in param_grads.iter().enumerate() {
        let mut idx: Vec<usize> = (0..grads.len()).collect();
        idx.shuffle(&mut rng);
        let mut smooth = 0;
        for &j in &idx {
            if smooth == per_tensor {
                break;
            }
            let original = model.params()[p].data()[j];
            let side = |m: &mut ModelState, delta: f64| {
                m.params_mut()[p].data_mut()[j] = original + delta;
                let loss = loss_of(m);
                let (_, pattern) = reference::forward(m, &batch);
                (loss, pattern != centre_pattern)
            };
            let (plus, kink_plus) = side(&mut model, STEP);
            let (minus, kink_minus) = side(&mut model, -STEP);
            model.params_mut()[p].data_mut()[j] = original;
            let kink = kink_plus || kink_minus;
            smooth += usize::from(!kink);
            record(&mut report, grads[j], plus, minus, kink);
        }
    }
    report
}
