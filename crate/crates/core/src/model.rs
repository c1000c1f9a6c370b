//! The assembled network: cloud and prompt encoders, transport-matched
//! fusion, slot decoder with heads, mask smoother and stitch scorer.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::crossmodal::{cost_var, solve_transport, wasserstein_var, CostMatrix, CrossmodalError, Fusion, TransportPlan};
use crate::decoder::{read_heads, select_panels, HeadOutputs, PanelDecoder, PanelPrediction, Smoother};
use crate::numerics::checkpoint::{read_records, write_records};
use crate::numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};
use crate::pattern::{PatternError, SewingPattern};
use crate::pointcloud::{CloudEncoder, CloudInput, PointCloudError};
use crate::prompt::{Instruction, PromptEncoder, PromptError, PromptMode, Prototypes, SketchPrompt};
use crate::stitcher::StitchGraph;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Crossmodal(#[from] CrossmodalError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Transport between patch features and the active prompt rows.
pub struct Transport<'g> {
    pub plan: TransportPlan,
    pub cost: CostMatrix,
    /// Differentiable `G × K` costs behind `cost`.
    pub delta: Var<'g>,
    /// `W_D` with the plan held fixed.
    pub loss: Var<'g>,
}

pub struct ModelOutputs<'g> {
    pub heads: HeadOutputs<'g>,
    pub prompts: Var<'g>,
    pub transport: Option<Transport<'g>>,
}

/// Prediction for one cloud: every slot's raw outputs and the selected,
/// stitched pattern.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub slots: Vec<PanelPrediction>,
    pub pattern: SewingPattern,
}

#[derive(Clone, Debug)]
pub struct PatternModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub cloud: CloudEncoder,
    pub prompt: PromptEncoder,
    pub fusion: Fusion,
    pub decoder: PanelDecoder,
    pub smoother: Smoother,
    pub stitcher: StitchGraph,
    pub prototypes: Prototypes,
}

/// Points per edge when tracing a silhouette sketch.
pub const SILHOUETTE_SAMPLES: usize = 16;

const META_CONFIG: &str = "meta.config";
const PROTO_PREFIX: &str = "proto.";

impl PatternModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let cloud = CloudEncoder::new(&mut store, &config, &mut rng)?;
        let prompt = PromptEncoder::new(&mut store, config.prompt_raw_dim, config.sketch_hidden, config.dim, &mut rng);
        let fusion = Fusion::new(&mut store, "fusion", config.dim, config.heads, &mut rng)?;
        let decoder = PanelDecoder::new(&mut store, "dec", &config, &mut rng)?;
        let smoother = Smoother::new(&mut store, "smooth", &config, &mut rng);
        let stitcher = StitchGraph::new(
            &mut store,
            "stitch",
            config.stitch_width,
            config.stitch_rounds,
            config.stitch_candidates,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            cloud,
            prompt,
            fusion,
            decoder,
            smoother,
            stitcher,
            prototypes: Prototypes::default(),
        })
    }

    pub fn prepare(&self, points: &[[f64; 3]], seed: u64) -> Result<CloudInput> {
        Ok(CloudInput::prepare(points, &self.config, seed)?)
    }

    /// Head outputs for every slot, plus `W_D` when any slot is active.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, input: &CloudInput, instr: &Instruction) -> Result<ModelOutputs<'g>> {
        let feats = self.cloud.forward(g, input)?;
        let prompts = self.prompt.forward(g, instr)?;
        let active = instr.active_slots();
        let transport = if active.is_empty() {
            None
        } else {
            let delta = cost_var(prompts.gather_rows(&active)?, feats.f_loc)?;
            let value = delta.value();
            let (rows, cols) = value.dims2()?;
            let cost = CostMatrix::new(rows, cols, value.data().to_vec());
            let plan = solve_transport(&cost, self.config.ot_epsilon, self.config.ot_iters)?;
            let loss = wasserstein_var(&plan, delta)?;
            Some(Transport { plan, cost, delta, loss })
        };
        let fused = self.fusion.forward(g, prompts, feats.f_loc)?;
        let f_comp = self.decoder.decode(g, fused, feats.f_global)?;
        let heads = self.decoder.heads(g, f_comp)?;
        Ok(ModelOutputs {
            heads,
            prompts,
            transport,
        })
    }

    /// Per-slot predictions without selection.
    pub fn predict_slots(&self, points: &[[f64; 3]], instr: &Instruction, seed: u64) -> Result<Vec<PanelPrediction>> {
        let input = self.prepare(points, seed)?;
        let g = Graph::inference(&self.store);
        let out = self.forward(&g, &input, instr)?;
        // The smoother sees binary masks, as in training.
        let logits = out.heads.masks.value();
        let binary = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect(),
        )?;
        let smoothed = self.smoother.forward(&g, g.constant(binary))?;
        Ok(read_heads(&out.heads)
            .into_iter()
            .enumerate()
            .map(|(slot, (mask_probs, confidence, rotation, translation))| PanelPrediction {
                slot,
                mask_probs,
                confidence,
                rotation,
                translation,
                curve: self.smoother.read(&smoothed, slot),
            })
            .collect())
    }

    /// Selected panels among the instruction's active slots, stitched.
    pub fn predict(&self, points: &[[f64; 3]], instr: &Instruction, seed: u64) -> Result<Prediction> {
        let slots = self.predict_slots(points, instr, seed)?;
        let active = instr.active();
        let mut pattern = select_panels(&slots, self.config.threshold, self.config.top_k, Some(&active));
        self.stitcher.stitch(&self.store, &mut pattern, self.config.threshold)?;
        Ok(Prediction { slots, pattern })
    }

    /// Every active slot becomes a panel regardless of confidence, stitched.
    pub fn personalize(&self, points: &[[f64; 3]], instr: &Instruction, seed: u64) -> Result<Prediction> {
        let slots = self.predict_slots(points, instr, seed)?;
        let mut pattern = SewingPattern {
            panels: instr.active_slots().into_iter().filter_map(|s| slots[s].to_panel(0.5)).collect(),
            stitches: Vec::new(),
        };
        self.stitcher.stitch(&self.store, &mut pattern, self.config.threshold)?;
        Ok(Prediction { slots, pattern })
    }

    /// Every slot active with class text or stored sketch prototypes.
    pub fn standard_instruction(&self, mode: PromptMode) -> Result<Instruction> {
        Ok(Instruction::standard(mode, &self.prototypes)?)
    }

    /// Silhouette sketches of `pattern`'s panels at their class slots.
    pub fn silhouette_instruction(&self, pattern: &SewingPattern) -> Result<Instruction> {
        let sketches: Vec<(usize, SketchPrompt)> = pattern
            .panels
            .iter()
            .map(|p| (p.class_id, SketchPrompt::silhouette(p, SILHOUETTE_SAMPLES)))
            .collect();
        Ok(Instruction::sketch(&sketches, self.config.sketch_points)?)
    }

    /// Recomputes per-class sketch prototypes from ground-truth silhouettes
    /// under the current parameters.
    pub fn refresh_prototypes<'a>(&mut self, patterns: impl IntoIterator<Item = &'a SewingPattern>) -> Result<()> {
        let mut rows = Vec::new();
        for pattern in patterns {
            for panel in &pattern.panels {
                let points = SketchPrompt::silhouette(panel, SILHOUETTE_SAMPLES).resample(self.config.sketch_points)?;
                rows.push((panel.class_id, self.prompt.raw_sketch_value(&self.store, &points)?));
            }
        }
        self.prototypes = Prototypes::from_samples(rows.iter().map(|(c, v)| (*c, v.as_slice())));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let config = serde_json::to_string(&self.config).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut records = vec![(META_CONFIG.to_string(), Tensor::from_vec(config.bytes().map(f64::from).collect()))];
        for (c, row) in &self.prototypes.rows {
            records.push((format!("{PROTO_PREFIX}{c}"), Tensor::from_vec(row.clone())));
        }
        records.extend(self.store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        write_records(&mut out, &records)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let records = read_records(&mut BufReader::new(file))?;
        let mismatch = |m: String| ModelError::CheckpointMismatch(m);
        let config_bytes: Vec<u8> = records
            .iter()
            .find(|(n, _)| n == META_CONFIG)
            .ok_or_else(|| mismatch("missing model configuration".into()))?
            .1
            .data()
            .iter()
            .map(|&b| b as u8)
            .collect();
        let config: ModelConfig = serde_json::from_slice(&config_bytes).map_err(|e| mismatch(format!("configuration: {e}")))?;
        let mut model = Self::new(config, 0)?;
        let mut seen = 0;
        for (name, tensor) in &records {
            if name == META_CONFIG {
                continue;
            }
            if let Some(class) = name.strip_prefix(PROTO_PREFIX) {
                let c: usize = class.parse().map_err(|_| mismatch(format!("bad prototype record `{name}`")))?;
                model.prototypes.rows.insert(c, tensor.data().to_vec());
                continue;
            }
            let expected = model
                .store
                .get(name)
                .map_err(|_| mismatch(format!("unexpected parameter `{name}`")))?;
            if expected.shape() != tensor.shape() {
                return Err(mismatch(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    expected.shape()
                )));
            }
            model.store.set(name, tensor.clone())?;
            seen += 1;
        }
        if seen != model.store.len() {
            let missing = model
                .store
                .names()
                .find(|n| !records.iter().any(|(r, _)| r == n))
                .unwrap_or_default()
                .to_string();
            return Err(mismatch(format!("missing parameter `{missing}`")));
        }
        Ok(model)
    }
}
