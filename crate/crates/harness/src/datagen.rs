//! Writing and loading the full set of domain splits.

use std::fs;
use std::path::{Path, PathBuf};

use salguide_core::domains::{generate_split, split_seed, DatasetManifest, DomainSpec, SplitConfig, DEFAULT_SIDE, SOURCE_DOMAIN, TARGET_DOMAINS};
use salguide_core::store::{read_dataset, split_dir, write_dataset};
use salguide_core::Dataset;

use crate::error::{HarnessError, Result};
use crate::pool::map_jobs;

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub bias: f64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub force: bool,
}

impl GenDataOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            seed: 0,
            bias: 1.0,
            num_classes: 10,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            side: DEFAULT_SIDE,
            force: false,
        }
    }

    /// (domain, split, per-class count) for every split written.
    pub fn splits(&self) -> Vec<(String, &'static str, usize)> {
        let mut v = vec![
            (SOURCE_DOMAIN.to_string(), "train", self.train_per_class),
            (SOURCE_DOMAIN.to_string(), "val", self.val_per_class),
        ];
        v.extend(TARGET_DOMAINS.iter().map(|d| (d.to_string(), "test", self.test_per_class)));
        v
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generates the source train/val and every target test split under
/// `<out>/<domain>/<split>/`.
pub fn generate_all(opts: &GenDataOptions) -> Result<Vec<DatasetManifest>> {
    if !(0.0..=1.0).contains(&opts.bias) {
        return Err(HarnessError::Usage(format!("bias {} outside [0, 1]", opts.bias)));
    }
    if is_nonempty_dir(&opts.out) {
        if !opts.force {
            return Err(HarnessError::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                opts.out.display()
            )));
        }
        for (domain, _, _) in opts.splits() {
            let d = opts.out.join(&domain);
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| HarnessError::io(&d, e))?;
            }
        }
    }
    let jobs = opts.splits();
    let results = map_jobs(jobs, |(domain, split, n)| -> Result<DatasetManifest> {
        let spec = DomainSpec::by_name(&domain, opts.bias).expect("known domain");
        let cfg = SplitConfig {
            num_classes: opts.num_classes,
            n_per_class: n,
            side: opts.side,
            seed: split_seed(opts.seed, &domain, split),
        };
        let (ds, manifest) = generate_split(&spec, split, &cfg)?;
        write_dataset(&ds, &manifest, &split_dir(&opts.out, &domain, split))?;
        Ok(manifest)
    });
    results.into_iter().collect()
}

pub fn load_split(root: &Path, domain: &str, split: &str) -> Result<Dataset> {
    Ok(read_dataset(&split_dir(root, domain, split))?.0)
}

/// Every target test split present under `root`, in the standard order.
pub fn load_targets(root: &Path) -> Result<Vec<(String, Dataset)>> {
    TARGET_DOMAINS
        .iter()
        .filter(|d| split_dir(root, d, "test").exists())
        .map(|d| Ok((d.to_string(), load_split(root, d, "test")?)))
        .collect()
}
