//! Synthetic inputs shared by the benchmarks.

use spurtrain_core::contaminate::{contaminate_dataset, ContaminationSpec};
use spurtrain_core::{Batch, Dataset, LabeledImage};

/// `n` contaminated 28×28 images with a deterministic texture.
pub fn decoy_batch(n: usize) -> Batch {
    let images = (0..n)
        .map(|i| {
            let px = (0..784).map(|p| ((p * 31 + i * 17) % 256) as f64).collect();
            LabeledImage::new(28, 28, px, i % 10, 10).expect("valid image")
        })
        .collect();
    let ds = contaminate_dataset(&Dataset::new(images), &ContaminationSpec::corner_patch(0)).expect("clean images");
    ds.batch(&(0..n).collect::<Vec<_>>()).expect("uniform batch")
}
