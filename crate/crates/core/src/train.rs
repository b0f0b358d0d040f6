//! Saliency-gated training.
//!
//! Every `freq`-th epoch (epochs count from 1) each example gets a binary
//! mask at one block before the update: GradCAM at that block for the true
//! class is computed with the current weights, and if its peak falls inside
//! the downscaled ground-truth annotation the mask is the saliency support,
//! otherwise it is the annotation itself. All other epochs are plain SGD.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::TrainError;
use crate::grid::{BinaryMask, LayerAnnotation};
use crate::model::{GradTarget, MaskSpec, ModelState};
use crate::saliency::{binarize, gradcam_batch, pointing_hit};
use crate::tensor::{sgd_update, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    NoXai,
    Xai,
    Aug,
    XaiAug,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::NoXai, Mode::Xai, Mode::Aug, Mode::XaiAug];

    pub fn uses_xai(self) -> bool {
        matches!(self, Mode::Xai | Mode::XaiAug)
    }

    pub fn uses_augmentation(self) -> bool {
        matches!(self, Mode::Aug | Mode::XaiAug)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoXai => "noxai",
            Mode::Xai => "xai",
            Mode::Aug => "aug",
            Mode::XaiAug => "xai-aug",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected noxai, xai, aug or xai-aug)"))
    }
}

/// Plain SGD, no momentum.
///
/// Fine-tuning a pretrained ResNet-50 typically uses a rate around 1e-5;
/// this network trains from scratch and defaults to 1e-3.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub freq: usize,
    /// 1-based block that receives masks and saliency.
    pub xai_block: usize,
    pub mode: Mode,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
}

pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_FREQ: usize = 5;

impl TrainConfig {
    /// Defaults with masking at the last block.
    pub fn new(mode: Mode, num_blocks: usize, seed: u64) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            freq: DEFAULT_FREQ,
            xai_block: num_blocks,
            mode,
            seed,
            augmentation: AugmentationPolicy::default(),
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.freq == 0 {
            return bad("freq must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} is not a nonnegative number", self.learning_rate));
        }
        if self.xai_block == 0 || self.xai_block > num_blocks {
            return bad(format!("block {} outside 1..={num_blocks}", self.xai_block));
        }
        Ok(())
    }

    pub fn epoch_kind(&self, epoch: usize) -> EpochKind {
        EpochKind {
            epoch,
            is_xai: self.mode.uses_xai() && epoch % self.freq == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochKind {
    pub epoch: usize,
    pub is_xai: bool,
}

/// Any-1 pooling of an image-resolution annotation onto an `h`×`w` grid.
/// Pixel (y, x) belongs to cell (⌊y·h/H⌋, ⌊x·w/W⌋).
pub fn downscale_annotation(g: &BinaryMask, h: usize, w: usize) -> Result<LayerAnnotation, TrainError> {
    let (gh, gw) = g.dims();
    if h == 0 || w == 0 || h > gh || w > gw {
        return Err(TrainError::AnnotationShape {
            got_h: gh,
            got_w: gw,
            want_h: h,
            want_w: w,
        });
    }
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..gh {
        let cy = y * h / gh;
        for x in 0..gw {
            if g.get(y, x) {
                out.set(cy, x * w / gw, true);
            }
        }
    }
    Ok(out)
}

/// Like [`downscale_annotation`] for raw values, rejecting anything but 0 and 1.
pub fn downscale_values(values: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Result<LayerAnnotation, TrainError> {
    let g = BinaryMask::from_values(gh, gw, values).map_err(|index| TrainError::NonBinaryAnnotation {
        index,
        value: values.get(index).copied().unwrap_or(f64::NAN),
    })?;
    downscale_annotation(&g, h, w)
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Blend with a 3×3 smoothed copy; factor 1 is identity.
    Sharpness(f64),
    Brightness(f64),
    /// Saturation: blend with the luma image.
    Color(f64),
    /// Blend with the mean luma of the image.
    Contrast(f64),
    Grayscale,
    ChannelShift([f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugFamily {
    Sharpness,
    Brightness,
    Color,
    Contrast,
    Grayscale,
    ChannelShift,
}

impl AugFamily {
    pub const ALL: [AugFamily; 6] = [
        AugFamily::Sharpness,
        AugFamily::Brightness,
        AugFamily::Color,
        AugFamily::Contrast,
        AugFamily::Grayscale,
        AugFamily::ChannelShift,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub families: Vec<AugFamily>,
    /// Number of distinct families per chain.
    pub chain_length: usize,
    pub factor_range: (f64, f64),
    pub max_channel_offset: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            families: AugFamily::ALL.to_vec(),
            chain_length: 5,
            factor_range: (0.5, 1.5),
            max_channel_offset: 0.1,
        }
    }
}

impl AugmentationPolicy {
    /// Distinct families in random order, each with fresh parameters.
    pub fn sample_chain(&self, rng: &mut impl Rng) -> Vec<AugOp> {
        let (lo, hi) = self.factor_range;
        let m = self.max_channel_offset;
        let mut families = self.families.clone();
        families.shuffle(rng);
        families.truncate(self.chain_length);
        families
            .into_iter()
            .map(|f| match f {
                AugFamily::Sharpness => AugOp::Sharpness(rng.gen_range(lo..=hi)),
                AugFamily::Brightness => AugOp::Brightness(rng.gen_range(lo..=hi)),
                AugFamily::Color => AugOp::Color(rng.gen_range(lo..=hi)),
                AugFamily::Contrast => AugOp::Contrast(rng.gen_range(lo..=hi)),
                AugFamily::Grayscale => AugOp::Grayscale,
                AugFamily::ChannelShift => {
                    AugOp::ChannelShift([rng.gen_range(-m..=m), rng.gen_range(-m..=m), rng.gen_range(-m..=m)])
                }
            })
            .collect()
    }
}

/// Applies `chain` to every 3-channel image of an N×3×H×W batch; values are
/// clamped to [0, 1] after each op.
pub fn apply_chain(batch: &mut Tensor, chain: &[AugOp]) {
    let [n, c, h, w] = <[usize; 4]>::try_from(batch.shape()).expect("rank-4 batch");
    assert_eq!(c, 3, "augmentation expects RGB images");
    let area = h * w;
    let data = batch.data_mut();
    for img in data.chunks_mut(3 * area).take(n) {
        for op in chain {
            apply_op(img, h, w, *op);
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
}

fn luma_plane(img: &[f64], area: usize) -> Vec<f64> {
    (0..area)
        .map(|p| LUMA[0] * img[p] + LUMA[1] * img[area + p] + LUMA[2] * img[2 * area + p])
        .collect()
}

fn apply_op(img: &mut [f64], h: usize, w: usize, op: AugOp) {
    let area = h * w;
    match op {
        AugOp::Brightness(f) => img.iter_mut().for_each(|v| *v *= f),
        AugOp::Color(f) => {
            let gray = luma_plane(img, area);
            for ch in 0..3 {
                for p in 0..area {
                    let v = &mut img[ch * area + p];
                    *v = gray[p] + f * (*v - gray[p]);
                }
            }
        }
        AugOp::Contrast(f) => {
            let mean = luma_plane(img, area).iter().sum::<f64>() / area as f64;
            img.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
        }
        AugOp::Grayscale => {
            let gray = luma_plane(img, area);
            for ch in 0..3 {
                img[ch * area..(ch + 1) * area].copy_from_slice(&gray);
            }
        }
        AugOp::ChannelShift(off) => {
            for ch in 0..3 {
                img[ch * area..(ch + 1) * area].iter_mut().for_each(|v| *v += off[ch]);
            }
        }
        AugOp::Sharpness(f) => {
            // Smoothing kernel [[1,1,1],[1,5,1],[1,1,1]]/13 on interior pixels;
            // the border is left as is.
            if h < 3 || w < 3 {
                return;
            }
            for ch in 0..3 {
                let plane = img[ch * area..(ch + 1) * area].to_vec();
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        let mut acc = 4.0 * plane[y * w + x];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += plane[(y + dy - 1) * w + x + dx - 1];
                            }
                        }
                        let smooth = acc / 13.0;
                        img[ch * area + y * w + x] = smooth + f * (plane[y * w + x] - smooth);
                    }
                }
            }
        }
    }
}

/// Samples one chain from `rng` and applies it to the batch.
pub fn augment_batch(batch: &mut Tensor, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<AugOp> {
    let chain = policy.sample_chain(rng);
    apply_chain(batch, &chain);
    chain
}

/// Which mask an example received in a saliency-gated step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Peak on the object: mask is the saliency support.
    Saliency = 1,
    /// Peak off the object (or empty saliency): mask is the annotation.
    Annotation = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub example_id: usize,
    pub branch: Branch,
    pub peak_w: usize,
    pub peak_h: usize,
    pub hit: bool,
}

pub const TRACE_HEADER: &str = "epoch,example_id,branch,peak_w,peak_h,hit";

impl TraceRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.example_id, self.branch as u8, self.peak_w, self.peak_h, self.hit as u8
        )
    }
}

/// One forward/backward/SGD update with an optional mask. Returns the loss.
pub fn masked_update(
    model: &mut ModelState,
    batch: Tensor,
    labels: &[usize],
    mask: Option<MaskSpec<'_>>,
    learning_rate: f64,
) -> Result<f64, TrainError> {
    let mut taped = model.forward_taped(batch, mask, GradTarget::Parameters)?;
    let loss = taped.tape.softmax_cross_entropy(taped.logits, labels)?;
    taped.tape.backward(loss)?;
    let value = taped.tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(TrainError::NonFinite(format!("loss {value}")));
    }
    model.zero_grads();
    model.accumulate_grads(&taped)?;
    let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
    sgd_update(&mut params, learning_rate)?;
    Ok(value)
}

/// Unmasked update.
pub fn standard_step(model: &mut ModelState, batch: Tensor, labels: &[usize], learning_rate: f64) -> Result<f64, TrainError> {
    masked_update(model, batch, labels, None, learning_rate)
}

/// Masks chosen by the saliency gate for a batch, without updating anything.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub masks: Vec<BinaryMask>,
    pub branches: Vec<Branch>,
    pub peaks: Vec<(usize, usize)>,
    pub hits: Vec<bool>,
}

/// Saliency pass and gate for each example. The saliency tape is dropped
/// before returning, so none of its gradients reach the parameters.
pub fn gate_masks(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    annotations: &[LayerAnnotation],
    block: usize,
) -> Result<GateDecision, TrainError> {
    let pass = gradcam_batch(model, batch, labels, block)?;
    let mut out = GateDecision {
        masks: Vec::with_capacity(labels.len()),
        branches: Vec::with_capacity(labels.len()),
        peaks: Vec::with_capacity(labels.len()),
        hits: Vec::with_capacity(labels.len()),
    };
    for (s, g) in pass.maps.iter().zip(annotations) {
        if s.values().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite("saliency map".into()));
        }
        let r = pointing_hit(s, g);
        let (mask, branch) = if r.hit {
            (binarize(s), Branch::Saliency)
        } else {
            (g.clone(), Branch::Annotation)
        };
        out.masks.push(mask);
        out.branches.push(branch);
        out.peaks.push((r.peak.row, r.peak.col));
        out.hits.push(r.hit);
    }
    Ok(out)
}

/// Layer-resolution annotations for the given examples.
pub fn layer_annotations(
    dataset: &Dataset,
    indices: &[usize],
    h: usize,
    w: usize,
) -> Result<Vec<LayerAnnotation>, TrainError> {
    indices
        .iter()
        .map(|&i| {
            let ex = &dataset.examples[i];
            let g = ex.annotation.as_ref().ok_or(TrainError::MissingAnnotation { id: ex.id })?;
            downscale_annotation(g, h, w)
        })
        .collect()
}

/// Saliency-gated update on a prepared batch. Returns the loss and trace.
pub fn xai_step_batch(
    model: &mut ModelState,
    batch: Tensor,
    labels: &[usize],
    annotations: &[LayerAnnotation],
    example_ids: &[usize],
    epoch: usize,
    block: usize,
    learning_rate: f64,
) -> Result<(f64, Vec<TraceRecord>), TrainError> {
    let gate = gate_masks(model, &batch, labels, annotations, block)?;
    let trace = (0..labels.len())
        .map(|i| TraceRecord {
            epoch,
            example_id: example_ids[i],
            branch: gate.branches[i],
            peak_w: gate.peaks[i].0,
            peak_h: gate.peaks[i].1,
            hit: gate.hits[i],
        })
        .collect();
    let spec = MaskSpec {
        block,
        masks: &gate.masks,
    };
    let loss = masked_update(model, batch, labels, Some(spec), learning_rate)?;
    Ok((loss, trace))
}

/// Saliency-gated update on dataset examples `indices`.
pub fn xai_step(
    model: &mut ModelState,
    dataset: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<TraceRecord>), TrainError> {
    let (h, w) = model.config().block_spatial(config.xai_block)?;
    let annotations = layer_annotations(dataset, indices, h, w)?;
    let ids: Vec<usize> = indices.iter().map(|&i| dataset.examples[i].id).collect();
    xai_step_batch(
        model,
        dataset.batch(indices),
        &dataset.labels(indices),
        &annotations,
        &ids,
        epoch,
        config.xai_block,
        config.learning_rate,
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    /// Correctly classified examples whose saliency peak lies on the object.
    pub pointing_hits: usize,
    /// Examples for which pointing was evaluated.
    pub pointing_total: usize,
    pub mean_loss: f64,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn hit_rate(&self) -> f64 {
        if self.pointing_total == 0 {
            0.0
        } else {
            self.pointing_hits as f64 / self.pointing_total as f64
        }
    }
}

/// Index of the largest logit; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and per-row predictions from an N×K logit block.
pub fn score_logits(logits: &[f64], k: usize, labels: &[usize]) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(labels.len());
    for (row, &y) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        preds.push(argmax(row));
    }
    (total, preds)
}

/// Accuracy, loss and (optionally) pointing-game hits at `block`.
///
/// Saliency is taken for the true class; only correctly classified
/// examples can score a hit.
pub fn evaluate(
    model: &ModelState,
    dataset: &Dataset,
    pointing_block: Option<usize>,
    batch_size: usize,
) -> Result<EvalResult, TrainError> {
    let k = model.config().num_classes;
    let mut res = EvalResult::default();
    let mut loss_sum = 0.0;
    let grid = match pointing_block {
        Some(b) if dataset.has_annotations() => Some((b, model.config().block_spatial(b)?)),
        Some(_) => {
            let id = dataset.examples.iter().find(|e| e.annotation.is_none()).map_or(0, |e| e.id);
            return Err(TrainError::MissingAnnotation { id });
        }
        None => None,
    };
    for chunk in dataset.chunks(batch_size) {
        let batch = dataset.batch(&chunk);
        let labels = dataset.labels(&chunk);
        let (logits, maps) = match grid {
            Some((block, _)) => {
                let pass = gradcam_batch(model, &batch, &labels, block)?;
                (pass.logits, Some(pass.maps))
            }
            None => (model.logits(&batch)?, None),
        };
        if !logits.is_finite() {
            return Err(TrainError::NonFinite("logits".into()));
        }
        let (loss, preds) = score_logits(logits.data(), k, &labels);
        loss_sum += loss;
        res.total += chunk.len();
        for (j, &i) in chunk.iter().enumerate() {
            let correct = preds[j] == labels[j];
            res.correct += correct as usize;
            if let (Some(maps), Some((_, (h, w)))) = (&maps, grid) {
                let g = downscale_annotation(dataset.examples[i].annotation.as_ref().expect("checked"), h, w)?;
                res.pointing_total += 1;
                if correct && pointing_hit(&maps[j], &g).hit {
                    res.pointing_hits += 1;
                }
            }
        }
    }
    res.mean_loss = if res.total == 0 { 0.0 } else { loss_sum / res.total as f64 };
    Ok(res)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub kind: EpochKind,
    pub train_loss: f64,
    pub validation: Option<EvalResult>,
    pub trace: Vec<TraceRecord>,
}

/// Fixed per-epoch example order.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn augmentation_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5_a5a5_a5a5);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs one epoch in place.
pub fn train_epoch(
    model: &mut ModelState,
    train: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<TraceRecord>), TrainError> {
    let kind = config.epoch_kind(epoch);
    let order = epoch_order(train.len(), config.seed, epoch);
    let mut aug_rng = augmentation_rng(config.seed, epoch);
    let grid = model.config().block_spatial(config.xai_block)?;
    let mut loss_sum = 0.0;
    let mut trace = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let mut batch = train.batch(chunk);
        if config.mode.uses_augmentation() {
            augment_batch(&mut batch, &config.augmentation, &mut aug_rng);
        }
        let labels = train.labels(chunk);
        let loss = if kind.is_xai {
            let annotations = layer_annotations(train, chunk, grid.0, grid.1)?;
            let ids: Vec<usize> = chunk.iter().map(|&i| train.examples[i].id).collect();
            let (loss, records) = xai_step_batch(
                model,
                batch,
                &labels,
                &annotations,
                &ids,
                epoch,
                config.xai_block,
                config.learning_rate,
            )?;
            trace.extend(records);
            loss
        } else {
            standard_step(model, batch, &labels, config.learning_rate)?
        };
        loss_sum += loss * chunk.len() as f64;
    }
    if !model.is_finite() {
        return Err(TrainError::NonFinite(format!("parameters after epoch {epoch}")));
    }
    Ok((loss_sum / train.len() as f64, trace))
}

/// Trains for `config.epochs` epochs, evaluating on `validation` (if given)
/// after each one. `observer` sees every epoch report and may abort by
/// returning an error.
pub fn train(
    model: &mut ModelState,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
    mut observer: impl FnMut(&ModelState, &EpochReport) -> Result<(), TrainError>,
) -> Result<Vec<EpochReport>, TrainError> {
    config.validate(model.config().num_blocks())?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.mode.uses_xai() {
        if let Some(e) = train_set.examples.iter().find(|e| e.annotation.is_none()) {
            return Err(TrainError::MissingAnnotation { id: e.id });
        }
    }
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (train_loss, trace) = train_epoch(model, train_set, config, epoch)?;
        let validation = match validation {
            Some(v) => {
                let block = v.has_annotations().then_some(config.xai_block);
                Some(evaluate(model, v, block, config.batch_size.max(64))?)
            }
            None => None,
        };
        let report = EpochReport {
            kind: config.epoch_kind(epoch),
            train_loss,
            validation,
            trace,
        };
        observer(model, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::model::ModelConfig;

    fn tiny_model(k: usize, seed: u64) -> ModelState {
        ModelState::init(ModelConfig::with_channels([3, 8, 8], &[4, 4], k, seed)).unwrap()
    }

    fn tiny_dataset(n: usize, k: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|id| {
                let mut g = BinaryMask::zeros(8, 8);
                let (r, c) = (rng.gen_range(0..6), rng.gen_range(0..6));
                for dy in 0..3 {
                    for dx in 0..3 {
                        g.set(r + dy, c + dx, true);
                    }
                }
                Example {
                    id,
                    image: (0..192).map(|_| rng.gen()).collect(),
                    label: id % k,
                    annotation: Some(g),
                    texture: None,
                }
            })
            .collect();
        Dataset {
            name: "tiny".into(),
            image_shape: [3, 8, 8],
            num_classes: k,
            examples,
        }
    }

    #[test]
    fn schedule_follows_modulus() {
        let mut c = TrainConfig::new(Mode::Xai, 4, 0);
        let xai: Vec<usize> = (1..=50).filter(|&e| c.epoch_kind(e).is_xai).collect();
        assert_eq!(xai, (1..=10).map(|i| 5 * i).collect::<Vec<_>>());
        c.freq = 1;
        assert!((1..=50).all(|e| c.epoch_kind(e).is_xai));
        c.freq = 60;
        assert!((1..=50).all(|e| !c.epoch_kind(e).is_xai));
        c.mode = Mode::NoXai;
        c.freq = 1;
        assert!(!c.epoch_kind(5).is_xai);
    }

    #[test]
    fn validate_rejects_degenerate_configs() {
        let base = TrainConfig::new(Mode::Xai, 4, 0);
        assert!(base.validate(4).is_ok());
        for f in [
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.freq = 0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.xai_block = 5,
            |c: &mut TrainConfig| c.xai_block = 0,
            |c: &mut TrainConfig| c.learning_rate = f64::NAN,
        ] {
            let mut c = base.clone();
            f(&mut c);
            assert!(c.validate(4).is_err());
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("xai_aug".parse::<Mode>().is_err());
    }

    #[test]
    fn downscale_cases() {
        assert_eq!(downscale_annotation(&BinaryMask::ones(64, 64), 4, 4).unwrap(), BinaryMask::ones(4, 4));
        let mut g = BinaryMask::zeros(4, 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            g.set(r, c, true);
        }
        let d = downscale_annotation(&g, 2, 2).unwrap();
        assert_eq!(d.as_slice(), &[true, false, false, false]);
        let mut single = BinaryMask::zeros(64, 64);
        single.set(63, 17, true);
        let d = downscale_annotation(&single, 4, 4).unwrap();
        assert_eq!(d.count_ones(), 1);
        assert!(d.get(3, 1));
        assert!(downscale_annotation(&g, 5, 2).is_err());
    }

    #[test]
    fn downscale_rejects_non_binary() {
        let err = downscale_values(&[0.0, 1.0, 0.5, 1.0], 2, 2, 1, 1).unwrap_err();
        assert!(matches!(err, TrainError::NonBinaryAnnotation { index: 2, .. }));
        let ok = downscale_values(&[0.0, 1.0, 0.0, 0.0], 2, 2, 1, 1).unwrap();
        assert!(ok.get(0, 0));
    }

    #[test]
    fn grayscale_uses_luma() {
        let mut t = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        apply_chain(&mut t, &[AugOp::Grayscale]);
        assert_eq!(t.data(), &[0.299, 0.299, 0.299]);
    }

    #[test]
    fn identity_chain_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen()).collect();
        let mut t = Tensor::new(vec![2, 3, 5, 5], data.clone()).unwrap();
        apply_chain(
            &mut t,
            &[
                AugOp::Sharpness(1.0),
                AugOp::Brightness(1.0),
                AugOp::Color(1.0),
                AugOp::Contrast(1.0),
                AugOp::ChannelShift([0.0; 3]),
            ],
        );
        for (a, b) in t.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sampled_chains_are_distinct_and_in_range() {
        let policy = AugmentationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let chain = policy.sample_chain(&mut rng);
            assert_eq!(chain.len(), 5);
            let kinds: std::collections::HashSet<_> = chain.iter().map(std::mem::discriminant).collect();
            assert_eq!(kinds.len(), 5);
            for op in chain {
                match op {
                    AugOp::Sharpness(f) | AugOp::Brightness(f) | AugOp::Color(f) | AugOp::Contrast(f) => {
                        assert!((0.5..=1.5).contains(&f))
                    }
                    AugOp::ChannelShift(o) => assert!(o.iter().all(|v| v.abs() <= 0.1)),
                    AugOp::Grayscale => {}
                }
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_clamped() {
        let ds = tiny_dataset(4, 2, 1);
        let policy = AugmentationPolicy::default();
        let mut a = ds.batch(&[0, 1, 2, 3]);
        let mut b = a.clone();
        augment_batch(&mut a, &policy, &mut ChaCha8Rng::seed_from_u64(5));
        augment_batch(&mut b, &policy, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ones_mask_update_equals_standard() {
        let ds = tiny_dataset(4, 2, 2);
        let idx = [0, 1, 2, 3];
        let mut a = tiny_model(2, 4);
        let mut b = a.clone();
        let la = standard_step(&mut a, ds.batch(&idx), &ds.labels(&idx), 0.05).unwrap();
        let ones = vec![BinaryMask::ones(2, 2); 4];
        let spec = MaskSpec { block: 2, masks: &ones };
        let lb = masked_update(&mut b, ds.batch(&idx), &ds.labels(&idx), Some(spec), 0.05).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let ds = tiny_dataset(4, 2, 2);
        let mut m = tiny_model(2, 4);
        let before = m.params().to_vec();
        standard_step(&mut m, ds.batch(&[0, 1]), &ds.labels(&[0, 1]), 0.0).unwrap();
        for (a, b) in before.iter().zip(m.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn repeated_steps_overfit_one_batch() {
        let ds = tiny_dataset(8, 2, 6);
        let idx: Vec<usize> = (0..8).collect();
        let mut m = tiny_model(2, 1);
        let losses: Vec<f64> = (0..50)
            .map(|_| standard_step(&mut m, ds.batch(&idx), &ds.labels(&idx), 0.1).unwrap())
            .collect();
        let first: f64 = losses[..10].iter().sum();
        let last: f64 = losses[40..].iter().sum();
        assert!(last < first, "{losses:?}");
    }

    #[test]
    fn gate_takes_exactly_one_branch() {
        let ds = tiny_dataset(6, 3, 3);
        let m = tiny_model(3, 2);
        let idx: Vec<usize> = (0..6).collect();
        let ann = layer_annotations(&ds, &idx, 2, 2).unwrap();
        let gate = gate_masks(&m, &ds.batch(&idx), &ds.labels(&idx), &ann, 2).unwrap();
        let pass = gradcam_batch(&m, &ds.batch(&idx), &ds.labels(&idx), 2).unwrap();
        for i in 0..6 {
            match gate.branches[i] {
                Branch::Saliency => {
                    assert!(gate.hits[i]);
                    assert_eq!(gate.masks[i], binarize(&pass.maps[i]));
                }
                Branch::Annotation => {
                    assert!(!gate.hits[i]);
                    assert_eq!(gate.masks[i], ann[i]);
                }
            }
        }
    }

    #[test]
    fn dead_head_takes_annotation_branch() {
        let ds = tiny_dataset(3, 3, 3);
        let mut m = tiny_model(3, 2);
        m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
        let idx = [0, 1, 2];
        let ann = layer_annotations(&ds, &idx, 2, 2).unwrap();
        let gate = gate_masks(&m, &ds.batch(&idx), &ds.labels(&idx), &ann, 2).unwrap();
        assert!(gate.branches.iter().all(|&b| b == Branch::Annotation));
        assert_eq!(gate.masks, ann);
    }

    #[test]
    fn xai_step_requires_annotations() {
        let mut ds = tiny_dataset(2, 2, 3);
        ds.examples[1].annotation = None;
        let mut m = tiny_model(2, 2);
        let mut c = TrainConfig::new(Mode::Xai, 2, 0);
        c.xai_block = 2;
        assert!(matches!(
            xai_step(&mut m, &ds, &[0, 1], &c, 5),
            Err(TrainError::MissingAnnotation { id: 1 })
        ));
    }

    #[test]
    fn training_is_deterministic_and_modes_agree_before_first_xai_epoch() {
        let ds = tiny_dataset(12, 3, 8);
        let val = tiny_dataset(6, 3, 9);
        let run = |mode| {
            let mut m = tiny_model(3, 5);
            let mut c = TrainConfig::new(mode, 2, 7);
            c.epochs = 4;
            c.freq = 3;
            c.batch_size = 5;
            c.learning_rate = 0.05;
            let reports = train(&mut m, &ds, Some(&val), &c, |_, _| Ok(())).unwrap();
            (m, reports)
        };
        let (ma, ra) = run(Mode::Xai);
        let (mb, rb) = run(Mode::Xai);
        assert_eq!(ma, mb);
        assert_eq!(ra, rb);
        let (_, rn) = run(Mode::NoXai);
        assert_eq!(ra[..2], rn[..2]);
        assert_ne!(ra[2], rn[2]);
        assert_eq!(ra[2].trace.len(), 12);
        assert!(ra[0].trace.is_empty());
    }

    #[test]
    fn evaluate_counts() {
        let ds = tiny_dataset(7, 2, 1);
        let m = tiny_model(2, 3);
        let r = evaluate(&m, &ds, Some(2), 3).unwrap();
        assert_eq!(r.total, 7);
        assert_eq!(r.pointing_total, 7);
        assert!(r.pointing_hits <= r.correct);
        let plain = evaluate(&m, &ds, None, 4).unwrap();
        assert_eq!(plain.correct, r.correct);
        assert!((plain.mean_loss - r.mean_loss).abs() < 1e-12);
        assert_eq!(plain.pointing_total, 0);
    }
}
