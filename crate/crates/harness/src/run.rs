//! One training run: `runs/<run_id>/{manifest.txt, metrics.csv, trace.csv,
//! ckpt_*.bin, saliency/}`.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use salguide_core::domains::SOURCE_DOMAIN;
use salguide_core::train::{evaluate, train, TRACE_HEADER};
use salguide_core::{Dataset, Mode, ModelConfig, ModelState, TrainConfig, TrainError};
use sha2::{Digest, Sha256};

use crate::datagen::{load_split, load_targets};
use crate::error::{HarnessError, Result};
use crate::metrics::{self, MetricsRow, METRICS_HEADER};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.bin";
pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub train: TrainConfig,
    pub data_root: PathBuf,
    pub channels: Vec<usize>,
    /// Target domains are evaluated in this many final epochs.
    pub eval_targets_last: usize,
    pub checkpoint_every: usize,
}

impl RunSpec {
    pub fn new(train: TrainConfig, data_root: impl Into<PathBuf>) -> Self {
        Self {
            run_id: default_run_id(&train),
            train,
            data_root: data_root.into(),
            channels: DEFAULT_CHANNELS.to_vec(),
            eval_targets_last: 4,
            checkpoint_every: 5,
        }
    }

    /// Deterministic description of everything that shapes the outputs.
    pub fn canonical_config(&self, model: &ModelConfig) -> String {
        let t = &self.train;
        let [c, h, w] = model.input_shape;
        let channels: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        format!(
            "run_id={}\nmode={}\nepochs={}\nlearning_rate={:e}\nbatch_size={}\nfreq={}\nxai_block={}\nseed={}\nnum_classes={}\ninput_shape={}x{}x{}\nchannels={}\neval_targets_last={}\ncheckpoint_every={}\ndata={}\n",
            self.run_id,
            t.mode,
            t.epochs,
            t.learning_rate,
            t.batch_size,
            t.freq,
            t.xai_block,
            t.seed,
            model.num_classes,
            c,
            h,
            w,
            channels.join(","),
            self.eval_targets_last,
            self.checkpoint_every,
            self.data_root.display(),
        )
    }
}

pub fn default_run_id(t: &TrainConfig) -> String {
    format!("{}_s{}_b{}_f{}", t.mode, t.seed, t.xai_block, t.freq)
}

/// Git blob hash (`blob <len>\0<content>`) with SHA-256.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| HarnessError::malformed(path, format!("manifest lacks {key}")))
    }

    fn parse_field<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.require(key, path)?;
        v.parse()
            .map_err(|_| HarnessError::malformed(path, format!("bad {key}: {v:?}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| HarnessError::malformed(path, format!("malformed line {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn is_complete(&self) -> bool {
        self.get("status") == Some("complete")
    }

    pub fn mode(&self, path: &Path) -> Result<Mode> {
        self.require("mode", path)?
            .parse()
            .map_err(|e: String| HarnessError::malformed(path, e))
    }

    pub fn seed(&self, path: &Path) -> Result<u64> {
        self.parse_field("seed", path)
    }

    pub fn xai_block(&self, path: &Path) -> Result<usize> {
        self.parse_field("xai_block", path)
    }

    pub fn freq(&self, path: &Path) -> Result<usize> {
        self.parse_field("freq", path)
    }

    pub fn epochs(&self, path: &Path) -> Result<usize> {
        self.parse_field("epochs", path)
    }

    /// Model architecture recorded for the run.
    pub fn model_config(&self, path: &Path) -> Result<ModelConfig> {
        let k: usize = self.parse_field("num_classes", path)?;
        let seed: u64 = self.parse_field("seed", path)?;
        let shape = self.require("input_shape", path)?;
        let dims: Vec<usize> = shape
            .split('x')
            .map(|s| s.parse().map_err(|_| HarnessError::malformed(path, format!("bad input_shape {shape:?}"))))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| HarnessError::malformed(path, format!("bad input_shape {shape:?}")))?;
        let channels: Vec<usize> = self
            .require("channels", path)?
            .split(',')
            .map(|s| s.parse().map_err(|_| HarnessError::malformed(path, "bad channels")))
            .collect::<Result<_>>()?;
        Ok(ModelConfig::with_channels(input, &channels, k, seed))
    }
}

fn write_manifest(dir: &Path, canonical: &str, hash: &str, started: u64, finished: Option<u64>, status: &str) -> Result<()> {
    let mut text = String::from(canonical);
    text.push_str(&format!("config_hash={hash}\nstarted_unix={started}\n"));
    if let Some(f) = finished {
        text.push_str(&format!("finished_unix={f}\n"));
    }
    text.push_str(&format!("status={status}\n"));
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

fn append(file: &mut File, path: &Path, text: &str) -> Result<()> {
    file.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

fn create(path: &Path, header: &str) -> Result<File> {
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))?;
    append(&mut f, path, &format!("{header}\n"))?;
    Ok(f)
}

/// Datasets a run reads.
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub targets: Vec<(String, Dataset)>,
}

impl RunData {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self {
            train: load_split(root, SOURCE_DOMAIN, "train")?,
            val: load_split(root, SOURCE_DOMAIN, "val")?,
            targets: load_targets(root)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// True when a finished run with the same config hash was reused.
    pub reused: bool,
}

/// Trains and records one run under `runs_root/<run_id>`. With `reuse`, a
/// completed run with an identical config hash is returned as is.
pub fn execute(spec: &RunSpec, data: &RunData, runs_root: &Path, reuse: bool) -> Result<RunOutcome> {
    let model_config = ModelConfig::with_channels(
        data.train.image_shape,
        &spec.channels,
        data.train.num_classes,
        spec.train.seed,
    );
    model_config.block_shapes()?;
    spec.train.validate(model_config.num_blocks())?;
    if spec.run_id.is_empty() || spec.run_id.contains(['/', '\\', ',']) {
        return Err(HarnessError::Usage(format!("invalid run id {:?}", spec.run_id)));
    }
    let dir = runs_root.join(&spec.run_id);
    let canonical = spec.canonical_config(&model_config);
    let hash = content_hash(&canonical);

    if reuse {
        let mp = dir.join(MANIFEST_FILE);
        if let Ok(m) = RunManifest::read(&mp) {
            if m.is_complete() && m.get("config_hash") == Some(hash.as_str()) {
                let rows = metrics::read_csv(&dir.join(METRICS_FILE))?;
                return Ok(RunOutcome { dir, rows, reused: true });
            }
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    }
    fs::create_dir_all(dir.join("saliency")).map_err(|e| HarnessError::io(&dir, e))?;
    let started = unix_now();
    write_manifest(&dir, &canonical, &hash, started, None, "running")?;

    let metrics_path = dir.join(METRICS_FILE);
    let trace_path = dir.join(TRACE_FILE);
    let mut metrics_file = create(&metrics_path, METRICS_HEADER)?;
    let mut trace_file = create(&trace_path, TRACE_HEADER)?;
    let mut rows = Vec::new();
    let mut model = ModelState::init(model_config)?;
    let cfg = &spec.train;
    let eval_bs = cfg.batch_size.max(64);

    let result = train(&mut model, &data.train, Some(&data.val), cfg, |m, report| {
        let epoch = report.kind.epoch;
        let val = report.validation.as_ref().expect("validation requested");
        let mut new_rows = vec![MetricsRow::from_eval(&spec.run_id, epoch, SOURCE_DOMAIN, val)];
        if epoch + spec.eval_targets_last > cfg.epochs {
            for (name, ds) in &data.targets {
                let block = ds.has_annotations().then_some(cfg.xai_block);
                let r = evaluate(m, ds, block, eval_bs)?;
                new_rows.push(MetricsRow::from_eval(&spec.run_id, epoch, name, &r));
            }
        }
        let io = |e: HarnessError| TrainError::Config(e.to_string());
        let text: String = new_rows.iter().map(|r| format!("{}\n", r.csv())).collect();
        append(&mut metrics_file, &metrics_path, &text).map_err(io)?;
        let trace: String = report.trace.iter().map(|t| format!("{}\n", t.csv_row())).collect();
        append(&mut trace_file, &trace_path, &trace).map_err(io)?;
        if spec.checkpoint_every > 0 && epoch % spec.checkpoint_every == 0 {
            m.save_checkpoint(&dir.join(format!("ckpt_epoch{epoch:03}.bin")))
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        rows.extend(new_rows);
        Ok(())
    });
    if let Err(e) = result {
        let _ = write_manifest(&dir, &canonical, &hash, started, Some(unix_now()), "failed");
        return Err(e.into());
    }
    model.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    write_manifest(&dir, &canonical, &hash, started, Some(unix_now()), "complete")?;
    Ok(RunOutcome { dir, rows, reused: false })
}

/// Loads a checkpoint using the architecture recorded in the manifest next
/// to it.
pub fn load_model(checkpoint: &Path) -> Result<(ModelState, RunManifest)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let mp = dir.join(MANIFEST_FILE);
    let manifest = RunManifest::read(&mp)?;
    let config = manifest.model_config(&mp)?;
    Ok((ModelState::load_checkpoint(checkpoint, &config)?, manifest))
}

/// A finished run as read back from disk.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub xai_block: usize,
    pub freq: usize,
    pub rows: Vec<MetricsRow>,
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let mp = dir.join(MANIFEST_FILE);
    let m = RunManifest::read(&mp)?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        run_id: m.require("run_id", &mp)?.to_string(),
        mode: m.mode(&mp)?,
        seed: m.seed(&mp)?,
        xai_block: m.xai_block(&mp)?,
        freq: m.freq(&mp)?,
        rows: metrics::read_csv(&dir.join(METRICS_FILE))?,
    })
}

/// Completed runs directly under `root`, sorted by run id.
pub fn read_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| HarnessError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| HarnessError::io(root, e))?;
        let mp = entry.path().join(MANIFEST_FILE);
        if !mp.exists() || !RunManifest::read(&mp)?.is_complete() {
            continue;
        }
        out.push(read_run(&entry.path())?);
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_framing() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn run_ids() {
        let t = TrainConfig::new(Mode::XaiAug, 4, 2);
        assert_eq!(default_run_id(&t), "xai-aug_s2_b4_f5");
    }
}
