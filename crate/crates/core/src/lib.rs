//! Sewing-pattern prediction from garment point clouds, steered by a
//! per-panel instruction of text labels or sketches.

pub mod config;
pub mod crossmodal;
pub mod decoder;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod pattern;
pub mod pointcloud;
pub mod prompt;
pub mod stitcher;
pub mod traingen;

pub use config::ModelConfig;
pub use model::{ModelError, PatternModel, Prediction};
pub use numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};
pub use pattern::{
    GarmentSample, Mask, MaskGrid, MetricsReport, Panel, PatternError, SewingPattern, Stitch, PANEL_CLASSES,
};
pub use prompt::{Instruction, PromptMode, SketchPrompt, SlotPrompt};
