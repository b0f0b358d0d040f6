//! In-memory labelled image datasets.

use crate::grid::BinaryMask;
use crate::tensor::Tensor;

/// One labelled image with its optional object annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    /// C×H×W, values in [0, 1].
    pub image: Vec<f64>,
    pub label: usize,
    /// Image-resolution object mask.
    pub annotation: Option<BinaryMask>,
    /// Background texture id, when the generator used one.
    pub texture: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_annotations(&self) -> bool {
        self.examples.iter().all(|e| e.annotation.is_some())
    }

    /// Stacks the selected images into an N×C×H×W tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.examples[i].image);
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.examples[i].label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Consecutive index chunks of at most `batch_size`.
    pub fn chunks(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
