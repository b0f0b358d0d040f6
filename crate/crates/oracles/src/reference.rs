//! Straight-line reference versions of the saliency, pointing and XAI-step
//! computations, written from the definitions rather than the engine code.

use salguide_core::model::{GradTarget, MaskSpec};
use salguide_core::{BinaryMask, ModelState, Tensor};

/// GradCAM from scratch: gradient of the class logit at the block output,
/// spatially averaged per channel, weighted channel sum, then ReLU.
pub fn gradcam(model: &ModelState, image: &Tensor, class: usize, block: usize) -> (usize, usize, Vec<f64>) {
    let mut f = model.forward_taped(image.clone(), None, GradTarget::Activation(block)).expect("forward");
    let k = model.config().num_classes;
    let mut seed = vec![0.0; k];
    seed[class] = 1.0;
    f.tape.backward_with_seed(f.logits, &seed).expect("backward");
    let var = f.blocks[block - 1];
    let act = f.tape.value(var);
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let zeros = vec![0.0; act.len()];
    let grad = f.tape.grad(var).unwrap_or(&zeros);
    let a = act.data();
    let mut map = vec![0.0; h * w];
    for ch in 0..c {
        let mut total = 0.0;
        for p in 0..h * w {
            total += grad[ch * h * w + p];
        }
        let alpha = total / (h * w) as f64;
        for p in 0..h * w {
            map[p] += alpha * a[ch * h * w + p];
        }
    }
    for v in &mut map {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (h, w, map)
}

/// Pointing game by exhaustive scan: the first maximal cell in row-major
/// order must lie on the annotation, and an all-zero map never hits.
pub fn pointing(values: &[f64], height: usize, width: usize, annotation: &BinaryMask) -> (usize, usize, bool) {
    let mut best = f64::NEG_INFINITY;
    for &v in values {
        if v > best {
            best = v;
        }
    }
    let mut found = (0, 0);
    'scan: for r in 0..height {
        for c in 0..width {
            if values[r * width + c] == best {
                found = (r, c);
                break 'scan;
            }
        }
    }
    let all_zero = values.iter().all(|&v| v == 0.0);
    (found.0, found.1, !all_zero && annotation.get(found.0, found.1))
}

/// Annotation at block resolution: a cell is on when any pixel it covers
/// is on, cell (i, j) covering rows ⌊i·H/h⌋..⌊(i+1)·H/h⌋.
pub fn downscale(g: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    let (gh, gw) = g.dims();
    let mut out = BinaryMask::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let on = (i * gh / h..(i + 1) * gh / h).any(|y| (j * gw / w..(j + 1) * gw / w).any(|x| g.get(y, x)));
            out.set(i, j, on);
        }
    }
    out
}

/// Which gate branch the oracle took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Saliency,
    Annotation,
}

/// One saliency-gated SGD step on a single example, scripted as two
/// separate passes. Returns the gate branch and the updated parameters.
pub fn xai_step(
    model: &ModelState,
    image: &Tensor,
    label: usize,
    annotation: &BinaryMask,
    block: usize,
    learning_rate: f64,
) -> (Gate, Vec<Vec<f64>>) {
    let (h, w, s) = gradcam(model, image, label, block);
    let g = downscale(annotation, h, w);
    let (_, _, hit) = pointing(&s, h, w, &g);
    let (mask, gate) = if hit {
        (BinaryMask::new(h, w, s.iter().map(|&v| v > 0.0).collect()), Gate::Saliency)
    } else {
        (g, Gate::Annotation)
    };
    let masks = [mask];
    let mut f = model
        .forward_taped(image.clone(), Some(MaskSpec { block, masks: &masks }), GradTarget::Parameters)
        .expect("forward");
    let loss = f.tape.softmax_cross_entropy(f.logits, &[label]).expect("loss");
    f.tape.backward(loss).expect("backward");
    let params = model
        .params()
        .iter()
        .zip(&f.params)
        .map(|(p, &v)| {
            let grad = f.tape.grad(v).expect("parameter gradient");
            p.data().iter().zip(grad).map(|(x, g)| x - learning_rate * g).collect()
        })
        .collect();
    (gate, params)
}

/// Loop-based forward pass of the block network. Returns the logits and
/// the activation pattern: every relu sign and every pooling argmax. Two
/// inputs with the same pattern lie in the same smooth piece.
pub fn forward(model: &ModelState, batch: &Tensor) -> (Vec<f64>, Vec<u32>) {
    let cfg = model.config();
    let [c0, h0, w0] = cfg.input_shape;
    let n = batch.shape()[0];
    let mut logits = Vec::new();
    let mut pattern = Vec::new();
    for i in 0..n {
        let per = c0 * h0 * w0;
        let mut x = batch.data()[i * per..(i + 1) * per].to_vec();
        let (mut c, mut h, mut w) = (c0, h0, w0);
        for block in &cfg.blocks {
            let k = model.param(&format!("block{}.weight", block.index)).expect("weight").data();
            let b = model.param(&format!("block{}.bias", block.index)).expect("bias").data();
            let co = block.out_channels;
            let mut y = vec![0.0; co * h * w];
            for o in 0..co {
                for r in 0..h {
                    for s in 0..w {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for dr in 0..3 {
                                for ds in 0..3 {
                                    let (rr, ss) = (r + dr, s + ds);
                                    if rr < 1 || ss < 1 || rr > h || ss > w {
                                        continue;
                                    }
                                    acc += k[((o * c + ci) * 3 + dr) * 3 + ds] * x[(ci * h + rr - 1) * w + ss - 1];
                                }
                            }
                        }
                        pattern.push(u32::from(acc > 0.0));
                        y[(o * h + r) * w + s] = acc.max(0.0);
                    }
                }
            }
            x = y;
            c = co;
            if block.downsample {
                let (ho, wo) = (h / 2, w / 2);
                let mut p = vec![0.0; c * ho * wo];
                for ch in 0..c {
                    for r in 0..ho {
                        for s in 0..wo {
                            let mut best = 0;
                            let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
                            let at = |q: usize| {
                                let (dr, ds) = cells[q];
                                x[(ch * h + 2 * r + dr) * w + 2 * s + ds]
                            };
                            for q in 1..4 {
                                if at(q) > at(best) {
                                    best = q;
                                }
                            }
                            pattern.push(best as u32);
                            p[(ch * ho + r) * wo + s] = at(best);
                        }
                    }
                }
                x = p;
                h = ho;
                w = wo;
            }
        }
        let pooled: Vec<f64> = x.chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        let wt = model.param("head.weight").expect("head").data();
        let bt = model.param("head.bias").expect("head").data();
        for cls in 0..cfg.num_classes {
            logits.push(bt[cls] + (0..c).map(|j| wt[cls * c + j] * pooled[j]).sum::<f64>());
        }
    }
    (logits, pattern)
}
