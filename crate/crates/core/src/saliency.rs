//! GradCAM saliency, binarization and the pointing-game hit test.

use crate::error::ModelError;
use crate::grid::{BinaryMask, LayerAnnotation};
use crate::model::{GradTarget, ModelState};
use crate::tensor::Tensor;

/// Non-negative evidence scores on a block's spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    block: usize,
    class_id: usize,
}

impl SaliencyMap {
    /// Values are clamped at zero on construction.
    pub fn new(height: usize, width: usize, values: Vec<f64>, block: usize, class_id: usize) -> Self {
        assert_eq!(height * width, values.len(), "saliency data length");
        let values = values.into_iter().map(|v| v.max(0.0)).collect();
        Self {
            height,
            width,
            values,
            block,
            class_id,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// GradCAM channel weights: spatial mean of `d y^c / d A^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub alpha: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointingResult {
    pub peak: Peak,
    pub hit: bool,
}

/// Combines one example's block activation and its gradient (both C×H×W)
/// into channel weights and the rectified weighted channel sum.
pub fn gradcam_from_parts(
    activation: &[f64],
    gradient: &[f64],
    channels: usize,
    height: usize,
    width: usize,
) -> (ChannelWeights, Vec<f64>) {
    let area = height * width;
    assert_eq!(activation.len(), channels * area);
    assert_eq!(gradient.len(), channels * area);
    let alpha: Vec<f64> = gradient
        .chunks_exact(area)
        .map(|g| g.iter().sum::<f64>() / area as f64)
        .collect();
    let mut map = vec![0.0; area];
    for (a, &w) in activation.chunks_exact(area).zip(&alpha) {
        map.iter_mut().zip(a).for_each(|(m, v)| *m += w * v);
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    (ChannelWeights { alpha }, map)
}

/// Logits and per-example saliency from one batched forward/backward.
#[derive(Clone, Debug)]
pub struct SaliencyPass {
    pub logits: Tensor,
    pub maps: Vec<SaliencyMap>,
}

/// GradCAM at `block` for every example of `batch`, each w.r.t. its own
/// target class. Examples never interact in the network, so seeding every
/// row's target logit at once yields the per-example gradients.
pub fn gradcam_batch(
    model: &ModelState,
    batch: &Tensor,
    classes: &[usize],
    block: usize,
) -> Result<SaliencyPass, ModelError> {
    let k = model.config().num_classes;
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(crate::error::TensorError::LabelOutOfRange {
            label: bad,
            classes: k,
        }
        .into());
    }
    let n = batch.shape().first().copied().unwrap_or(0);
    if classes.len() != n {
        return Err(ModelError::Config(format!(
            "{} target classes for a batch of {n}",
            classes.len()
        )));
    }
    let mut taped = model.forward_taped(batch.clone(), None, GradTarget::Activation(block))?;
    let mut seed = vec![0.0; n * k];
    for (i, &c) in classes.iter().enumerate() {
        seed[i * k + c] = 1.0;
    }
    taped.tape.backward_with_seed(taped.logits, &seed)?;
    let act_var = taped.blocks[block - 1];
    let act = taped.tape.value(act_var);
    let [_, c, h, w] = <[usize; 4]>::try_from(act.shape()).expect("rank-4 activation");
    let per = c * h * w;
    let zeros;
    let grad = match taped.tape.grad(act_var) {
        Some(g) => g,
        None => {
            zeros = vec![0.0; act.len()];
            &zeros
        }
    };
    let maps = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let range = i * per..(i + 1) * per;
            let (_, map) = gradcam_from_parts(&act.data()[range.clone()], &grad[range], c, h, w);
            SaliencyMap::new(h, w, map, block, class)
        })
        .collect();
    let logits = taped.tape.take(taped.logits);
    Ok(SaliencyPass { logits, maps })
}

/// GradCAM for a single 1×C×H×W image.
pub fn gradcam(
    model: &ModelState,
    image: &Tensor,
    class_id: usize,
    block: usize,
) -> Result<SaliencyMap, ModelError> {
    if image.shape().first() != Some(&1) {
        return Err(ModelError::Config(format!(
            "gradcam expects a single image, got batch shape {:?}",
            image.shape()
        )));
    }
    let mut pass = gradcam_batch(model, image, &[class_id], block)?;
    Ok(pass.maps.pop().expect("one map"))
}

/// 1 exactly where the saliency is strictly positive.
pub fn binarize(s: &SaliencyMap) -> BinaryMask {
    BinaryMask::new(s.height, s.width, s.values.iter().map(|&v| v > 0.0).collect())
}

/// Location of the maximum; the smallest row-major index wins ties.
pub fn peak(s: &SaliencyMap) -> Peak {
    let mut best = 0;
    for (i, &v) in s.values.iter().enumerate() {
        if v > s.values[best] {
            best = i;
        }
    }
    Peak {
        row: best / s.width,
        col: best % s.width,
    }
}

/// Pointing-game test. An identically zero map is always a miss.
pub fn pointing_hit(s: &SaliencyMap, g: &LayerAnnotation) -> PointingResult {
    assert_eq!(
        (s.height, s.width),
        g.dims(),
        "saliency and annotation grids differ"
    );
    let p = peak(s);
    let hit = !s.is_zero() && g.get(p.row, p.col);
    PointingResult { peak: p, hit }
}

/// Nearest-neighbour upscaling: output cell (i, j) reads source
/// `(floor(i·h/H), floor(j·w/W))`.
pub fn upsample_nearest(s: &SaliencyMap, out_height: usize, out_width: usize) -> Vec<f64> {
    assert!(out_height >= s.height && out_width >= s.width);
    let mut out = Vec::with_capacity(out_height * out_width);
    for i in 0..out_height {
        let si = i * s.height / out_height;
        for j in 0..out_width {
            let sj = j * s.width / out_width;
            out.push(s.values[si * s.width + sj]);
        }
    }
    out
}

/// 8-bit binary PGM of a map, min-max normalized to 0..=255.
pub fn to_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let range = max - min;
    out.extend(values.iter().map(|&v| {
        if max <= 0.0 {
            0
        } else if range <= 0.0 {
            255
        } else {
            ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }));
    out
}
