//! Block-structured convolutional classifier.
//!
//! Every block is `conv3x3 (pad 1) -> relu [-> maxpool 2x2]`; the head is a
//! global average pool followed by a dense layer. The forward pass can
//! multiply a per-example binary spatial mask into the output of one block,
//! broadcast over channels, before the next block consumes it.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, ModelError};
use crate::grid::BinaryMask;
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT1\n";
const KERNEL_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    /// 1-based position in the network.
    pub index: usize,
    pub out_channels: usize,
    /// Max-pool 2x2 after the conv-relu pair.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// C×H×W of a single input image.
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Four downsampling blocks with 16, 32, 64, 64 channels on 3×64×64 input.
    pub fn default_for(num_classes: usize, seed: u64) -> Self {
        Self::with_channels([3, 64, 64], &[16, 32, 64, 64], num_classes, seed)
    }

    pub fn with_channels(
        input_shape: [usize; 3],
        channels: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockSpec {
                index: i + 1,
                out_channels: c,
                downsample: true,
            })
            .collect();
        Self {
            input_shape,
            blocks,
            num_classes,
            seed,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// (channels, height, width) of each block's output.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>, ModelError> {
        let [c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::Config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.blocks.is_empty() {
            return Err(ModelError::Config("at least one block is required".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::Config("num_classes must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if block.index != i + 1 {
                return Err(ModelError::Config(format!(
                    "block indices must run 1..=B, found {} at position {}",
                    block.index,
                    i + 1
                )));
            }
            if block.out_channels == 0 {
                return Err(ModelError::Config(format!(
                    "block {} has zero channels",
                    block.index
                )));
            }
            if block.downsample {
                if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                    return Err(ModelError::Config(format!(
                        "block {} cannot halve a {h}x{w} activation",
                        block.index
                    )));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push([block.out_channels, h, w]);
        }
        Ok(shapes)
    }

    /// Spatial (height, width) of block `block` (1-based).
    pub fn block_spatial(&self, block: usize) -> Result<(usize, usize), ModelError> {
        let shapes = self.block_shapes()?;
        shapes
            .get(block.wrapping_sub(1))
            .map(|s| (s[1], s[2]))
            .ok_or(ModelError::NoSuchBlock(block))
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_layout(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let shapes = self.block_shapes()?;
        let mut layout = Vec::with_capacity(2 * shapes.len() + 2);
        let mut in_c = self.input_shape[0];
        for (block, shape) in self.blocks.iter().zip(&shapes) {
            layout.push((
                format!("block{}.weight", block.index),
                vec![shape[0], in_c, KERNEL_SIZE, KERNEL_SIZE],
            ));
            layout.push((format!("block{}.bias", block.index), vec![shape[0]]));
            in_c = shape[0];
        }
        layout.push(("head.weight".into(), vec![self.num_classes, in_c]));
        layout.push(("head.bias".into(), vec![self.num_classes]));
        Ok(layout)
    }
}

/// Named parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Per-example masks applied at one block.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec<'a> {
    pub block: usize,
    pub masks: &'a [BinaryMask],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub logits: Tensor,
    /// Output of block b at position b-1.
    pub block_activations: Vec<Tensor>,
}

impl ForwardRecord {
    pub fn activation(&self, block: usize) -> Option<&Tensor> {
        self.block_activations.get(block.wrapping_sub(1))
    }
}

/// Which tape values should carry gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Inference only.
    None,
    /// All model parameters.
    Parameters,
    /// Output of the given block (1-based), for saliency.
    Activation(usize),
}

/// A forward pass recorded on a tape, with handles to the interesting values.
pub struct TapedForward {
    pub tape: Tape,
    pub params: Vec<Var>,
    /// Output of each block (post-mask for the masked block).
    pub blocks: Vec<Var>,
    pub logits: Var,
}

impl ModelState {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let layout = config.parameter_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            };
            names.push(name);
            params.push(tensor.with_requires_grad(true));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Assembles a model from named tensors, validating names and shapes.
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let layout = config.parameter_layout()?;
        if named.len() != layout.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, tensor)) in layout.into_iter().zip(named) {
            if name != got_name || tensor.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {got_name:?} {:?} does not match expected {name:?} {shape:?}",
                    tensor.shape()
                )));
            }
            names.push(name);
            params.push(tensor.with_requires_grad(true));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds the parameter gradients held on `taped` into the model.
    pub fn accumulate_grads(&mut self, taped: &TapedForward) -> Result<(), ModelError> {
        for (param, &var) in self.params.iter_mut().zip(&taped.params) {
            match taped.tape.grad(var) {
                Some(g) => param.accumulate_grad(g)?,
                None => param.accumulate_grad(&vec![0.0; param.len()])?,
            }
        }
        Ok(())
    }

    /// Runs the network and keeps every block's output.
    pub fn forward(
        &self,
        batch: &Tensor,
        mask: Option<MaskSpec<'_>>,
    ) -> Result<ForwardRecord, ModelError> {
        let mut taped = self.forward_taped(batch.clone(), mask, GradTarget::None)?;
        let block_activations = taped
            .blocks
            .iter()
            .map(|&v| taped.tape.value(v).clone())
            .collect();
        let logits = taped.tape.take(taped.logits);
        Ok(ForwardRecord {
            logits,
            block_activations,
        })
    }

    /// Logits only; skips copying intermediate activations.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut taped = self.forward_taped(batch.clone(), None, GradTarget::None)?;
        Ok(taped.tape.take(taped.logits))
    }

    /// Forward pass recorded on a fresh tape.
    pub fn forward_taped(
        &self,
        batch: Tensor,
        mask: Option<MaskSpec<'_>>,
        target: GradTarget,
    ) -> Result<TapedForward, ModelError> {
        let shapes = self.config.block_shapes()?;
        let n = match batch.shape() {
            &[n, c, h, w] if [c, h, w] == self.config.input_shape => n,
            other => {
                return Err(ModelError::InputShape {
                    got: other.to_vec(),
                    want: self.config.input_shape,
                })
            }
        };
        let flat_mask = match mask {
            Some(spec) => Some((spec.block, self.flatten_mask(spec, n, &shapes)?)),
            None => None,
        };
        if let GradTarget::Activation(b) = target {
            if b == 0 || b > shapes.len() {
                return Err(ModelError::NoSuchBlock(b));
            }
        }

        let mut tape = Tape::new();
        let track_params = target == GradTarget::Parameters;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut leaf = p.clone();
                leaf.clear_grad();
                leaf.set_requires_grad(track_params);
                tape.leaf(leaf)
            })
            .collect();

        let mut x = tape.leaf(batch);
        let mut blocks = Vec::with_capacity(shapes.len());
        for (i, block) in self.config.blocks.iter().enumerate() {
            let conv = tape.conv2d(x, params[2 * i], params[2 * i + 1], 1, KERNEL_SIZE / 2)?;
            x = tape.relu(conv);
            if block.downsample {
                x = tape.maxpool2d(x)?;
            }
            if let Some((mb, values)) = &flat_mask {
                if *mb == block.index {
                    x = tape.spatial_mask(x, values)?;
                }
            }
            if target == GradTarget::Activation(block.index) {
                tape.mark_requires_grad(x);
            }
            blocks.push(x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let head = 2 * self.config.blocks.len();
        let logits = tape.dense(pooled, params[head], params[head + 1])?;
        Ok(TapedForward {
            tape,
            params,
            blocks,
            logits,
        })
    }

    fn flatten_mask(
        &self,
        spec: MaskSpec<'_>,
        n: usize,
        shapes: &[[usize; 3]],
    ) -> Result<Vec<f64>, ModelError> {
        let shape = shapes
            .get(spec.block.wrapping_sub(1))
            .ok_or(ModelError::NoSuchBlock(spec.block))?;
        let (h, w) = (shape[1], shape[2]);
        if spec.masks.len() != n {
            return Err(ModelError::Config(format!(
                "{} masks for a batch of {n}",
                spec.masks.len()
            )));
        }
        let mut flat = Vec::with_capacity(n * h * w);
        for m in spec.masks {
            if m.dims() != (h, w) {
                return Err(ModelError::MaskShape {
                    block: spec.block,
                    got_h: m.height(),
                    got_w: m.width(),
                    want_h: h,
                    want_w: w,
                });
            }
            flat.extend(m.to_f64());
        }
        Ok(flat)
    }

    /// Serializes parameters: magic, then per parameter `u32` name length,
    /// name bytes, `u32` rank, `u32` extents, little-endian `f64` values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, p) in self.names.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        // Write beside the target and rename so an interrupted save never
        // clobbers the previous checkpoint.
        let tmp = path.with_extension("bin.partial");
        let mut file = std::fs::File::create(&tmp).map_err(io)?;
        file.write_all(&self.to_checkpoint_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_bytes(&bytes, path, config)
    }

    pub fn from_checkpoint_bytes(
        bytes: &[u8],
        path: &Path,
        config: &ModelConfig,
    ) -> Result<Self, CheckpointError> {
        let path_buf = || path.to_path_buf();
        let layout = config
            .parameter_layout()
            .map_err(|e| CheckpointError::Malformed {
                path: path_buf(),
                detail: e.to_string(),
            })?;
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { path: path_buf() });
        }
        let mut reader = ByteReader {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
            path,
        };
        let mut named: Vec<(String, Tensor)> = Vec::with_capacity(layout.len());
        while !reader.at_end() {
            let name_len = reader.u32()? as usize;
            let name_bytes = reader.take(name_len)?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| {
                CheckpointError::Malformed {
                    path: path_buf(),
                    detail: "parameter name is not UTF-8".into(),
                }
            })?;
            let Some((_, want)) = layout.iter().find(|(n, _)| *n == name) else {
                return Err(CheckpointError::UnknownParameter {
                    path: path_buf(),
                    name,
                });
            };
            if named.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::Malformed {
                    path: path_buf(),
                    detail: format!("duplicate parameter {name:?}"),
                });
            }
            let rank = reader.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed {
                    path: path_buf(),
                    detail: format!("implausible rank {rank} for {name:?}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32()? as usize);
            }
            if &shape != want {
                return Err(CheckpointError::ParameterShape {
                    path: path_buf(),
                    name,
                    got: shape,
                    want: want.clone(),
                });
            }
            let count: usize = shape.iter().product();
            let raw = reader.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed {
                path: path_buf(),
                detail: e.to_string(),
            })?;
            named.push((name, tensor));
        }
        // Reorder to the canonical layout; every name must be present.
        let mut ordered = Vec::with_capacity(layout.len());
        for (name, _) in &layout {
            let Some(pos) = named.iter().position(|(n, _)| n == name) else {
                return Err(CheckpointError::Malformed {
                    path: path_buf(),
                    detail: format!("missing parameter {name:?}"),
                });
            };
            ordered.push(named.swap_remove(pos));
        }
        Self::from_named(config.clone(), ordered).map_err(|e| CheckpointError::Malformed {
            path: path_buf(),
            detail: e.to_string(),
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig::with_channels([3, 8, 8], &[4, 5, 6], 3, seed)
    }

    fn batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(
            vec![n, shape[0], shape[1], shape[2]],
            (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = ModelState::init(tiny_config(4)).unwrap();
        let b = ModelState::init(tiny_config(4)).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(tiny_config(5)).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
        for (name, p) in a.names().iter().zip(a.params()) {
            if name.ends_with(".bias") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn kernel_bounds_follow_fan_in() {
        let model = ModelState::init(ModelConfig::default_for(10, 1)).unwrap();
        let mut in_c = 3;
        for block in &model.config().blocks {
            let w = model.param(&format!("block{}.weight", block.index)).unwrap();
            let bound = (6.0 / (in_c * 9) as f64).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= bound));
            in_c = block.out_channels;
        }
    }

    #[test]
    fn default_shape_schedule() {
        let cfg = ModelConfig::default_for(10, 0);
        let shapes = cfg.block_shapes().unwrap();
        assert_eq!(
            shapes,
            vec![[16, 32, 32], [32, 16, 16], [64, 8, 8], [64, 4, 4]]
        );
    }

    #[test]
    fn degenerate_schedule_rejected() {
        let cfg = ModelConfig::with_channels([3, 4, 4], &[2, 2, 2], 2, 0);
        assert!(matches!(ModelState::init(cfg), Err(ModelError::Config(_))));
        let cfg = ModelConfig::with_channels([3, 6, 6], &[2, 2], 2, 0);
        assert!(ModelState::init(cfg).is_err());
    }

    #[test]
    fn ones_mask_is_exact_identity() {
        let model = ModelState::init(tiny_config(2)).unwrap();
        let x = batch(3, [3, 8, 8], 7);
        let plain = model.forward(&x, None).unwrap();
        for block in 1..=3 {
            let (h, w) = model.config().block_spatial(block).unwrap();
            let masks = vec![BinaryMask::ones(h, w); 3];
            let masked = model
                .forward(&x, Some(MaskSpec { block, masks: &masks }))
                .unwrap();
            assert_eq!(plain.logits, masked.logits);
        }
    }

    #[test]
    fn zeros_mask_at_last_block_leaves_bias() {
        let mut model = ModelState::init(tiny_config(2)).unwrap();
        let bias = vec![0.25, -0.5, 1.0];
        model
            .param_mut("head.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let x = batch(2, [3, 8, 8], 8);
        let masks = vec![BinaryMask::zeros(1, 1); 2];
        let out = model
            .forward(&x, Some(MaskSpec { block: 3, masks: &masks }))
            .unwrap();
        assert_eq!(out.logits.data(), &[0.25, -0.5, 1.0, 0.25, -0.5, 1.0]);
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let model = ModelState::init(tiny_config(2)).unwrap();
        let x = batch(1, [3, 8, 8], 8);
        let masks = vec![BinaryMask::ones(3, 3)];
        let err = model
            .forward(&x, Some(MaskSpec { block: 1, masks: &masks }))
            .unwrap_err();
        assert!(matches!(err, ModelError::MaskShape { block: 1, .. }));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(3);
        let model = ModelState::init(cfg.clone()).unwrap();
        let path = dir.path().join("ckpt.bin");
        model.save_checkpoint(&path).unwrap();
        let loaded = ModelState::load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(loaded.to_checkpoint_bytes(), model.to_checkpoint_bytes());
        let x = batch(2, [3, 8, 8], 1);
        assert_eq!(
            loaded.forward(&x, None).unwrap().logits,
            model.forward(&x, None).unwrap().logits
        );

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.bin");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&trunc, &cfg),
            Err(CheckpointError::Truncated { .. })
        ));

        let bad = dir.path().join("bad.bin");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad, &corrupted).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&bad, &cfg),
            Err(CheckpointError::BadMagic { .. })
        ));

        // Rename the first parameter to something unknown, same length.
        let mut renamed = bytes.clone();
        renamed[12..12 + 5].copy_from_slice(b"bogus");
        let unk = dir.path().join("unk.bin");
        std::fs::write(&unk, &renamed).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&unk, &cfg),
            Err(CheckpointError::UnknownParameter { .. })
        ));
    }
}
