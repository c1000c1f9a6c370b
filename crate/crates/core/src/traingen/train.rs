//! Mini-batch Adam training of the full model and of the stitch scorer.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{composite_loss, LossError, LossParts, LossWeights, Targets, PART_NAMES};
use crate::config::ModelConfig;
use crate::model::{ModelError, PatternModel};
use crate::numerics::{AdamConfig, Graph, NumericsError};
use crate::pattern::{GarmentSample, SewingPattern, Stitch};
use crate::pointcloud::CloudInput;
use crate::prompt::{Instruction, PromptMode, SlotPrompt, SlotSource};
use crate::stitcher::{build_edge_graph, candidate_labels, EdgeGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last epoch relative to `lr`, reached along a
    /// cosine; 1 keeps it constant.
    pub final_lr_scale: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Stop once an epoch's mean mask loss falls below this; 0 disables.
    pub stop_mask_loss: f64,
    /// Epochs of the separate stitch-scorer stage; 0 skips it.
    pub stitch_epochs: usize,
    pub stitch_lr: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 15,
            lr: 1e-4,
            final_lr_scale: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            stop_mask_loss: 0.0,
            stitch_epochs: 200,
            stitch_lr: 3e-3,
            model: ModelConfig::desk(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    DivergenceDetected { epoch: usize, sample: usize },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.stitch_lr >= 0.0) {
            return Err(TrainError::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_scale) {
            return Err(TrainError::Config("final_lr_scale must lie in [0, 1]".into()));
        }
        self.model.validate().map_err(TrainError::Config)
    }

    /// Learning rate of `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        let s = self.final_lr_scale;
        self.lr * (s + (1.0 - s) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    /// Reads `key = value` lines; `#` starts a comment. Model fields are
    /// written `model.<field>`, loss weights `weights.<part>`; `preset`
    /// (tiny, desk or full) picks the model the fields override. Unset keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut root = serde_json::Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            let value = value.trim();
            let parsed = serde_json::from_str::<serde_json::Value>(value).unwrap_or_else(|_| value.into());
            let mut target = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for section in &parts[..parts.len() - 1] {
                target = target
                    .entry(section.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()))
                    .as_object_mut()
                    .ok_or_else(|| TrainError::Config(format!("line {}: `{section}` is not a section", n + 1)))?;
            }
            target.insert(parts[parts.len() - 1].to_string(), parsed);
        }
        let model = match root.remove("preset") {
            None => TrainConfig::default().model,
            Some(v) => match v.as_str() {
                Some("tiny") => ModelConfig::tiny(),
                Some("desk") => ModelConfig::desk(),
                Some("full") => ModelConfig::default(),
                _ => return Err(TrainError::Config(format!("unknown preset {v}; expected tiny, desk or full"))),
            },
        };
        let mut base = serde_json::to_value(TrainConfig { model, ..TrainConfig::default() }).expect("plain data");
        merge(&mut base, serde_json::Value::Object(root));
        let cfg: TrainConfig = serde_json::from_value(base).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let value = serde_json::to_value(self).expect("plain data");
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        walk("", &value, &mut out);
        out
    }
}

/// Overwrites `base` with every leaf of `over`; unknown keys are kept so
/// deserialization can reject them.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    /// Mean stitch-scorer loss per stitch epoch.
    pub stitch_curve: Vec<f64>,
}

/// Writes `epoch,part,value` rows.
pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(out, "epoch,part,value")?;
    for e in curve {
        for (name, v) in PART_NAMES.iter().zip(e.parts.values()) {
            writeln!(out, "{},{name},{v}", e.epoch)?;
        }
    }
    Ok(())
}

/// Which prompts a training step sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstructionKind {
    /// Ground-truth slots with class text.
    Text,
    /// Ground-truth slots with panel silhouettes.
    Sketch,
    /// Every slot with class text.
    AllText,
    /// Every slot that has a stored sketch prototype.
    AllSketch,
}

/// Ground-truth slots only, text or silhouette prompts.
pub fn build_training_instruction(model: &PatternModel, sample: &GarmentSample, mode: PromptMode) -> Result<Instruction, ModelError> {
    match mode {
        PromptMode::Text => {
            let classes: Vec<usize> = sample.pattern.panels.iter().map(|p| p.class_id).collect();
            Ok(Instruction::text(&classes)?)
        }
        PromptMode::Sketch => model.silhouette_instruction(&sample.pattern),
    }
}

struct Prepared {
    input: CloudInput,
    targets: Targets,
    text: Instruction,
    sketch: Instruction,
}

fn prepare(model: &PatternModel, data: &[GarmentSample]) -> Result<Vec<Prepared>, TrainError> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Prepared {
                input: model.prepare(&s.points, i as u64)?,
                targets: Targets::build(&s.pattern, &model.config)?,
                text: build_training_instruction(model, s, PromptMode::Text)?,
                sketch: build_training_instruction(model, s, PromptMode::Sketch)?,
            })
        })
        .collect()
}

/// Loss of one sample under `instr`; gradients go into the store's buffers
/// when `learn` is set.
fn sample_step(
    model: &mut PatternModel,
    p: &Prepared,
    instr: &Instruction,
    weights: &LossWeights,
    learn: bool,
) -> Result<LossParts, TrainError> {
    let targets = p.targets.clone().for_instruction(&instr.active());
    let (parts, grads) = {
        let g = if learn {
            Graph::with_store(&model.store)
        } else {
            Graph::inference(&model.store)
        };
        let out = model.forward(&g, &p.input, instr)?;
        let smooth = model.smoother.forward(&g, g.constant(targets.gt_masks()))?;
        let asso = out.transport.as_ref().map(|t| t.loss);
        let (total, parts) = composite_loss(&g, &out.heads, &smooth, &targets, asso, weights)?;
        let grads = if learn && parts.total.is_finite() { Some(g.backward(total)?) } else { None };
        (parts, grads)
    };
    if let Some(grads) = grads {
        model.store.accumulate(&grads)?;
    }
    Ok(parts)
}

fn instruction_for(kind: InstructionKind, p: &Prepared, model: &PatternModel) -> Result<Instruction, TrainError> {
    Ok(match kind {
        InstructionKind::Text => p.text.clone(),
        InstructionKind::Sketch => p.sketch.clone(),
        InstructionKind::AllText => model.standard_instruction(PromptMode::Text)?,
        InstructionKind::AllSketch => {
            // Classes absent from the training set have no prototype and stay off.
            let mut instr = Instruction::empty();
            for (&c, row) in &model.prototypes.rows {
                instr.slots[c] = SlotPrompt::Raw(row.clone(), SlotSource::Sketch);
            }
            instr
        }
    })
}

/// Mean loss parts over `data` with ground-truth text instructions.
pub fn dataset_loss(model: &mut PatternModel, data: &[GarmentSample], weights: &LossWeights) -> Result<LossParts, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let prepared = prepare(model, data)?;
    let mut sum = LossParts::default();
    for p in &prepared {
        sum.add(&sample_step(model, p, &p.text, weights, false)?);
    }
    Ok(sum.scaled(1.0 / data.len() as f64))
}

/// Trains every non-stitch parameter on the composite objective, then the
/// stitch scorer. `on_epoch` sees each epoch's mean loss parts.
pub fn train(
    model: &mut PatternModel,
    data: &[GarmentSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.validate()?;
    let prepared = prepare(model, data)?;
    let patterns: Vec<&SewingPattern> = data.iter().map(|s| &s.pattern).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    model.store.set_frozen("stitch.", true);
    for epoch in 0..cfg.epochs {
        let adam = AdamConfig::with_lr(cfg.lr_at(epoch));
        model.refresh_prototypes(patterns.iter().copied())?;
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            for &i in batch {
                let kind = match rng.random_range(0..4) {
                    0 => InstructionKind::Text,
                    1 => InstructionKind::Sketch,
                    2 => InstructionKind::AllText,
                    _ => InstructionKind::AllSketch,
                };
                let instr = instruction_for(kind, &prepared[i], model)?;
                let parts = sample_step(model, &prepared[i], &instr, &cfg.weights, true)?;
                if !parts.total.is_finite() {
                    return Err(TrainError::DivergenceDetected { epoch, sample: i });
                }
                sum.add(&parts);
            }
            model.store.scale_grads(1.0 / batch.len() as f64);
            model.store.adam_step(&adam)?;
        }
        let entry = EpochLoss {
            epoch,
            parts: sum.scaled(1.0 / data.len() as f64),
        };
        on_epoch(&entry);
        report.curve.push(entry);
        if cfg.stop_mask_loss > 0.0 && entry.parts.mask < cfg.stop_mask_loss {
            break;
        }
    }
    model.store.set_frozen("stitch.", false);
    model.refresh_prototypes(patterns.iter().copied())?;
    if cfg.stitch_epochs > 0 {
        report.stitch_curve = train_stitcher(model, data, cfg)?;
    }
    Ok(report)
}

/// Ground truth stitches expressed in `predicted`'s indices: panels match
/// by class, edges by index.
pub fn transfer_stitches(predicted: &SewingPattern, truth: &SewingPattern) -> Vec<Stitch> {
    let by_class: BTreeMap<usize, usize> = predicted
        .panels
        .iter()
        .enumerate()
        .rev()
        .map(|(i, p)| (p.class_id, i))
        .collect();
    truth
        .stitches
        .iter()
        .filter_map(|s| {
            let map = |r: (usize, usize)| {
                let pi = *by_class.get(&truth.panels[r.0].class_id)?;
                (r.1 < predicted.panels[pi].num_edges()).then_some((pi, r.1))
            };
            Some(Stitch::new(map(s.a)?, map(s.b)?))
        })
        .collect()
}

/// Adam on the stitch scorer alone, over the ground-truth patterns and the
/// model's own standard-mode predictions of them. Returns the mean loss per
/// epoch.
pub fn train_stitcher(model: &mut PatternModel, data: &[GarmentSample], cfg: &TrainConfig) -> Result<Vec<f64>, TrainError> {
    let c = model.config.stitch_candidates;
    let instr = model.standard_instruction(PromptMode::Text)?;
    let mut graphs: Vec<(EdgeGraph, Vec<f64>)> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let truth = build_edge_graph(&s.pattern, c);
        let labels = candidate_labels(&truth, &s.pattern.stitches);
        graphs.push((truth, labels));
        let slots = model.predict_slots(&s.points, &instr, i as u64)?;
        let mut predicted = crate::decoder::select_panels(&slots, model.config.threshold, model.config.top_k, None);
        predicted.stitches = transfer_stitches(&predicted, &s.pattern);
        if predicted.panels.len() >= 2 {
            let graph = build_edge_graph(&predicted, c);
            let labels = candidate_labels(&graph, &predicted.stitches);
            graphs.push((graph, labels));
        }
    }
    graphs.retain(|(g, _)| !g.candidates.is_empty());
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    for n in &names {
        model.store.set_frozen(n, !n.starts_with("stitch."));
    }
    let adam = AdamConfig::with_lr(cfg.stitch_lr);
    let mut curve = Vec::with_capacity(cfg.stitch_epochs);
    let result = (|| -> Result<(), TrainError> {
        for epoch in 0..cfg.stitch_epochs {
            model.store.zero_grads();
            let mut sum = 0.0;
            for (graph, labels) in &graphs {
                let grads = {
                    let g = Graph::with_store(&model.store);
                    let loss = model.stitcher.loss(&g, graph, labels)?;
                    sum += loss.item();
                    g.backward(loss)?
                };
                model.store.accumulate(&grads)?;
            }
            if !sum.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, sample: 0 });
            }
            model.store.scale_grads(1.0 / graphs.len().max(1) as f64);
            model.store.adam_step(&adam)?;
            curve.push(sum / graphs.len().max(1) as f64);
        }
        Ok(())
    })();
    model.store.set_frozen("", false);
    result?;
    Ok(curve)
}
