//! Shared fixtures for the criterion benches.

use tailor_core::crossmodal::CostMatrix;
use tailor_core::traingen::{generate_dataset, Family};
use tailor_core::{GarmentSample, ModelConfig, PatternModel};

/// Deterministic cost matrix with entries in `[0, 2]`.
pub fn cost_matrix(rows: usize, cols: usize) -> CostMatrix {
    let delta = (0..rows * cols).map(|i| 1.0 + (i as f64 * 0.731).sin()).collect();
    CostMatrix::new(rows, cols, delta)
}

/// An untrained model and one garment per seen family.
pub fn model_and_samples(config: ModelConfig) -> (PatternModel, Vec<GarmentSample>) {
    let samples = generate_dataset(&Family::SEEN, Family::SEEN.len(), config.num_points, 1);
    let mut model = PatternModel::new(config, 1).expect("valid preset");
    model.refresh_prototypes(samples.iter().map(|s| &s.pattern)).expect("prototypes");
    (model, samples)
}
