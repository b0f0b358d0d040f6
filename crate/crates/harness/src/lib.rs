//! Experiment harness: dataset generation, training runs with metrics and
//! checkpoints, evaluation, ablations, domain-evidence maps and reports.

pub mod datagen;
pub mod error;
pub mod evidence;
pub mod metrics;
pub mod pool;
pub mod protocol;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use salguide_core::store::read_dataset;
use salguide_core::train::evaluate;

pub use error::{HarnessError, Result};
pub use metrics::MetricsRow;

/// Evaluates a checkpoint on each split directory. Pointing hits are
/// computed at the run's masking block whenever `pointing` is set; a split
/// without mask files is then an error.
pub fn eval_checkpoint(checkpoint: &Path, splits: &[PathBuf], pointing: bool) -> Result<Vec<MetricsRow>> {
    let (model, manifest) = run::load_model(checkpoint)?;
    let mp = checkpoint.parent().unwrap_or(Path::new(".")).join(run::MANIFEST_FILE);
    let block = manifest.xai_block(&mp)?;
    let run_id = manifest.get("run_id").unwrap_or("eval").to_string();
    let epoch = manifest.epochs(&mp).unwrap_or(0);
    splits
        .iter()
        .map(|dir| {
            let (ds, m) = read_dataset(dir)?;
            if ds.num_classes != model.config().num_classes {
                return Err(HarnessError::Usage(format!(
                    "{} has {} classes, model has {}",
                    dir.display(),
                    ds.num_classes,
                    model.config().num_classes
                )));
            }
            let r = evaluate(&model, &ds, pointing.then_some(block), 64)?;
            Ok(MetricsRow::from_eval(&run_id, epoch, &m.domain, &r))
        })
        .collect()
}
