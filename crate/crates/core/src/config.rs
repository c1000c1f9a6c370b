//! Model and run dimensions shared by every stage.

use serde::{Deserialize, Serialize};

use crate::pattern::{MaskGrid, MAX_EDGES, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points sampled per garment.
    pub num_points: usize,
    /// Points fed to the global encoder (farthest-point subsample).
    pub global_points: usize,
    pub patches: usize,
    pub neighbors: usize,
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the patch embedder.
    pub patch_hidden: usize,
    pub decoder_blocks: usize,
    pub encoder_blocks: usize,
    pub mask_size: usize,
    /// Centimetres per mask pixel.
    pub mask_scale: f64,
    pub num_classes: usize,
    pub max_edges: usize,
    pub top_k: usize,
    pub threshold: f64,
    /// Width of raw prompt vectors before projection.
    pub prompt_raw_dim: usize,
    pub sketch_points: usize,
    pub sketch_hidden: usize,
    pub ot_epsilon: f64,
    pub ot_iters: usize,
    pub stitch_candidates: usize,
    pub stitch_width: usize,
    pub stitch_rounds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_points: 1024,
            global_points: 1024,
            patches: 32,
            neighbors: 32,
            dim: 512,
            heads: 8,
            patch_hidden: 128,
            decoder_blocks: 2,
            encoder_blocks: 2,
            mask_size: 32,
            mask_scale: 3.0,
            num_classes: NUM_CLASSES,
            max_edges: MAX_EDGES,
            top_k: 14,
            threshold: 0.5,
            prompt_raw_dim: 512,
            sketch_points: 64,
            sketch_hidden: 64,
            ot_epsilon: 0.05,
            ot_iters: 200,
            stitch_candidates: 6,
            stitch_width: 64,
            stitch_rounds: 2,
        }
    }
}

impl ModelConfig {
    /// Reduced widths that train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            num_points: 512,
            global_points: 128,
            patches: 16,
            neighbors: 16,
            dim: 64,
            heads: 4,
            patch_hidden: 64,
            ..Self::default()
        }
    }

    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_points: 64,
            global_points: 16,
            patches: 4,
            neighbors: 4,
            dim: 16,
            heads: 2,
            patch_hidden: 8,
            decoder_blocks: 1,
            encoder_blocks: 1,
            mask_size: 16,
            mask_scale: 6.0,
            prompt_raw_dim: 12,
            sketch_points: 8,
            sketch_hidden: 6,
            stitch_width: 8,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> MaskGrid {
        MaskGrid::new(self.mask_size, self.mask_size, self.mask_scale)
    }

    /// Channels of the mask head's seed grid (`dim` reshaped to `c × s × s`
    /// with `s = mask_size / 8`).
    pub fn mask_seed(&self) -> (usize, usize) {
        let side = self.mask_size / 8;
        (self.dim / (side * side).max(1), side)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("num_points", self.num_points),
            ("global_points", self.global_points),
            ("patches", self.patches),
            ("neighbors", self.neighbors),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mask_size", self.mask_size),
            ("num_classes", self.num_classes),
            ("max_edges", self.max_edges),
            ("top_k", self.top_k),
            ("prompt_raw_dim", self.prompt_raw_dim),
            ("sketch_points", self.sketch_points),
            ("stitch_width", self.stitch_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mask_size % 8 != 0 {
            return Err(format!("mask_size {} must be a multiple of 8", self.mask_size));
        }
        let (c, s) = self.mask_seed();
        if c == 0 || c * s * s != self.dim {
            return Err(format!("dim {} does not reshape to a {s}x{s} seed grid", self.dim));
        }
        if self.global_points > self.num_points || self.patches > self.num_points || self.neighbors > self.num_points {
            return Err("sampling counts exceed num_points".into());
        }
        if self.num_classes != NUM_CLASSES || self.max_edges < 3 || self.max_edges > MAX_EDGES {
            return Err("class count or edge bound outside the pattern vocabulary".into());
        }
        if !(self.mask_scale > 0.0) || !(self.ot_epsilon > 0.0) {
            return Err("mask_scale and ot_epsilon must be positive".into());
        }
        Ok(())
    }
}
