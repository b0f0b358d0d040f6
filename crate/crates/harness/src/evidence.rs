//! Domain evidence: a two-way domain classifier and, per held-out image,
//! GradCAM maps for both domain hypotheses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salguide_core::saliency::{gradcam_batch, to_pgm, upsample_nearest};
use salguide_core::store::read_dataset;
use salguide_core::train::{evaluate, train};
use salguide_core::{Dataset, Example, Mode, ModelConfig, ModelState, TrainConfig};

use crate::error::{HarnessError, Result};
use crate::run::DEFAULT_CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceOptions {
    pub domain_a: PathBuf,
    pub domain_b: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of each domain held out for testing and saliency.
    pub test_fraction: f64,
}

impl EvidenceOptions {
    pub fn new(a: impl Into<PathBuf>, b: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            domain_a: a.into(),
            domain_b: b.into(),
            out: out.into(),
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceOutcome {
    pub test_accuracy: f64,
    pub test_ids: Vec<usize>,
}

/// Relabels A → 0 and B → 1, renumbering ids A first. Returns the merged
/// set and `(new id, domain label, original id)` triples.
pub fn merge_domains(a: &Dataset, b: &Dataset) -> Result<(Dataset, Vec<(usize, usize, usize)>)> {
    if a.image_shape != b.image_shape {
        return Err(HarnessError::Usage(format!(
            "image shapes differ: {:?} vs {:?}",
            a.image_shape, b.image_shape
        )));
    }
    let mut examples = Vec::with_capacity(a.len() + b.len());
    let mut ids = Vec::with_capacity(a.len() + b.len());
    for (label, ds) in [(0, a), (1, b)] {
        for ex in &ds.examples {
            let id = examples.len();
            ids.push((id, label, ex.id));
            examples.push(Example {
                id,
                image: ex.image.clone(),
                label,
                annotation: None,
                texture: None,
            });
        }
    }
    Ok((
        Dataset {
            name: "domains".into(),
            image_shape: a.image_shape,
            num_classes: 2,
            examples,
        },
        ids,
    ))
}

fn subset(ds: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        name: ds.name.clone(),
        image_shape: ds.image_shape,
        num_classes: ds.num_classes,
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
    }
}

pub fn run_evidence(opts: &EvidenceOptions) -> Result<EvidenceOutcome> {
    if !(0.0..1.0).contains(&opts.test_fraction) || opts.test_fraction == 0.0 {
        return Err(HarnessError::Usage("test fraction must be in (0, 1)".into()));
    }
    let (a, _) = read_dataset(&opts.domain_a)?;
    let (b, _) = read_dataset(&opts.domain_b)?;
    let (merged, ids) = merge_domains(&a, &b)?;

    // Stratified hold-out so both domains appear in the test set.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in 0..2 {
        let mut idx: Vec<usize> = (0..merged.len()).filter(|&i| merged.examples[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * opts.test_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_set = subset(&merged, &train_idx);
    let test_set = subset(&merged, &test_idx);

    let config = ModelConfig::with_channels(merged.image_shape, &DEFAULT_CHANNELS, 2, opts.seed);
    let mut model = ModelState::init(config)?;
    let mut tc = TrainConfig::new(Mode::NoXai, model.config().num_blocks(), opts.seed);
    tc.epochs = opts.epochs;
    tc.learning_rate = opts.learning_rate;
    tc.batch_size = opts.batch_size;
    train(&mut model, &train_set, None, &tc, |_, _| Ok(()))?;
    let result = evaluate(&model, &test_set, None, 64)?;

    fs::create_dir_all(&opts.out).map_err(|e| HarnessError::io(&opts.out, e))?;
    let block = model.config().num_blocks();
    let [_, h, w] = merged.image_shape;
    for chunk in test_set.chunks(32) {
        let batch = test_set.batch(&chunk);
        for class in 0..2 {
            let pass = gradcam_batch(&model, &batch, &vec![class; chunk.len()], block)?;
            for (j, &i) in chunk.iter().enumerate() {
                let id = test_set.examples[i].id;
                let up = upsample_nearest(&pass.maps[j], h, w);
                let p = opts.out.join(format!("{id}_class{class}.pgm"));
                fs::write(&p, to_pgm(&up, h, w)).map_err(|e| HarnessError::io(&p, e))?;
            }
        }
    }

    let mut id_map = String::from("id,domain_label,source_example_id,split\n");
    let test_set_ids: std::collections::HashSet<usize> = test_set.examples.iter().map(|e| e.id).collect();
    for (id, label, orig) in &ids {
        let split = if test_set_ids.contains(id) { "test" } else { "train" };
        let _ = writeln!(id_map, "{id},{label},{orig},{split}");
    }
    let manifest = format!(
        "label0={}\nlabel1={}\nepochs={}\nlearning_rate={:e}\nseed={}\ntest_examples={}\ntest_accuracy={:.6}\n",
        opts.domain_a.display(),
        opts.domain_b.display(),
        opts.epochs,
        opts.learning_rate,
        opts.seed,
        test_set.len(),
        result.accuracy()
    );
    for (name, text) in [("manifest.txt", manifest), ("ids.csv", id_map)] {
        let p = opts.out.join(name);
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?;
    }
    Ok(EvidenceOutcome {
        test_accuracy: result.accuracy(),
        test_ids: test_set.examples.iter().map(|e| e.id).collect(),
    })
}

/// GradCAM dumps for a dataset split, one PGM per example at image
/// resolution, named `<example_id>.pgm`.
pub fn dump_saliency(model: &ModelState, dataset: &Dataset, block: usize, limit: Option<usize>, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let n = limit.unwrap_or(dataset.len()).min(dataset.len());
    let [_, h, w] = dataset.image_shape;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(32) {
        let pass = gradcam_batch(model, &dataset.batch(chunk), &dataset.labels(chunk), block)?;
        for (j, &i) in chunk.iter().enumerate() {
            let up = upsample_nearest(&pass.maps[j], h, w);
            let p = out.join(format!("{}.pgm", dataset.examples[i].id));
            fs::write(&p, to_pgm(&up, h, w)).map_err(|e| HarnessError::io(&p, e))?;
        }
    }
    Ok(n)
}
