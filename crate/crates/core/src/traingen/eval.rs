//! Dataset-level evaluation: standard inference metrics and the
//! before/after personalization protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::synth::Family;
use crate::model::{ModelError, PatternModel};
use crate::pattern::geometry::rasterize_on;
use crate::pattern::metrics::DEFAULT_METRIC_GRID;
use crate::pattern::{panel_iou, pattern_metrics_on, GarmentSample, Mask, MaskGrid, MetricsReport, Panel, SewingPattern};
use crate::prompt::{Instruction, PromptMode, SlotPrompt, SlotSource};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no samples of family `{0}` in the dataset")]
    MissingFamily(String),
    #[error("bad personalization case: {0}")]
    BadCase(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub family: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardReport {
    pub mode: PromptMode,
    pub mean: MetricsReport,
    pub samples: Vec<SampleMetrics>,
}

/// Source and target garment family of one transfer case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferCase {
    pub source: Family,
    pub target: Family,
}

impl TransferCase {
    /// Reads one `source,target` (or `source -> target`) pair per line.
    pub fn parse_list(text: &str) -> Result<Vec<TransferCase>, EvalError> {
        let mut out = Vec::new();
        for line in text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()) {
            let (a, b) = line
                .split_once("->")
                .or_else(|| line.split_once(','))
                .ok_or_else(|| EvalError::BadCase(format!("`{line}`: expected source,target")))?;
            let parse = |s: &str| s.trim().parse::<Family>().map_err(EvalError::BadCase);
            out.push(TransferCase {
                source: parse(a)?,
                target: parse(b)?,
            });
        }
        if out.is_empty() {
            return Err(EvalError::BadCase("no cases".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub source: Family,
    pub target: Family,
    pub mode: PromptMode,
    pub samples: usize,
    /// Mean panel IOU against the target family's average panels.
    pub before: f64,
    pub after: f64,
}

/// Predictions under the standard instruction, scored against each sample's
/// ground truth.
pub fn evaluate_standard(model: &PatternModel, data: &[GarmentSample], mode: PromptMode, jobs: usize) -> Result<StandardReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let instr = model.standard_instruction(mode)?;
    let samples = parallel_map(data.len(), jobs, |i| -> Result<SampleMetrics, EvalError> {
        let pred = model.predict(&data[i].points, &instr, i as u64)?;
        Ok(SampleMetrics {
            index: i,
            family: data[i].garment_class.clone(),
            metrics: pattern_metrics_on(&pred.pattern, &data[i].pattern, &DEFAULT_METRIC_GRID),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricsReport> = samples.iter().map(|s| s.metrics).collect();
    Ok(StandardReport {
        mode,
        mean: MetricsReport::mean(&reports).expect("nonempty"),
        samples,
    })
}

/// Per-class mean masks of `family`'s panels over `data`, thresholded at one
/// half.
pub fn average_panels(data: &[GarmentSample], family: Family, grid: &MaskGrid) -> Result<BTreeMap<usize, Mask>, EvalError> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for s in data.iter().filter(|s| s.garment_class == family.name()) {
        for p in &s.pattern.panels {
            let Ok(m) = rasterize_on(p, grid) else { continue };
            let e = sums.entry(p.class_id).or_insert_with(|| (vec![0.0; m.data.len()], 0));
            for (acc, v) in e.0.iter_mut().zip(m.to_values()) {
                *acc += v;
            }
            e.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(EvalError::MissingFamily(family.name().to_string()));
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| {
            let probs: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            (c, Mask::from_probs(grid.height, grid.width, &probs, 0.5))
        })
        .collect())
}

/// Mean over target classes of the best IOU any predicted panel reaches
/// against that class's average mask.
pub fn iou_against_average(pattern: &SewingPattern, averages: &BTreeMap<usize, Mask>, grid: &MaskGrid) -> f64 {
    let masks: Vec<Mask> = pattern.panels.iter().filter_map(|p| rasterize_on(p, grid).ok()).collect();
    let total: f64 = averages
        .values()
        .map(|avg| masks.iter().map(|m| panel_iou(m, avg).unwrap_or(0.0)).fold(0.0, f64::max))
        .sum();
    total / averages.len().max(1) as f64
}

/// Instruction activating `classes` with text or stored sketch prototypes.
pub fn class_instruction(model: &PatternModel, classes: &[usize], mode: PromptMode) -> Result<Instruction, EvalError> {
    Ok(match mode {
        PromptMode::Text => Instruction::text(classes).map_err(ModelError::from)?,
        PromptMode::Sketch => {
            let mut instr = Instruction::empty();
            for &c in classes {
                let row = model.prototypes.get(c).ok_or_else(|| {
                    ModelError::from(crate::prompt::PromptError::MissingPrototype(crate::pattern::PANEL_CLASSES[c].to_string()))
                })?;
                instr.slots[c] = SlotPrompt::Raw(row.to_vec(), SlotSource::Sketch);
            }
            instr
        }
    })
}

/// For every source-family sample: panels under the source classes, then
/// under the target classes, each scored against the target family's
/// average panels.
pub fn evaluate_personalized(
    model: &PatternModel,
    data: &[GarmentSample],
    cases: &[TransferCase],
    mode: PromptMode,
    jobs: usize,
) -> Result<Vec<CaseResult>, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let grid = DEFAULT_METRIC_GRID;
    let mut out = Vec::new();
    for case in cases {
        let averages = average_panels(data, case.target, &grid)?;
        let sources: Vec<usize> = (0..data.len()).filter(|&i| data[i].garment_class == case.source.name()).collect();
        if sources.is_empty() {
            return Err(EvalError::MissingFamily(case.source.name().to_string()));
        }
        let before_instr = class_instruction(model, case.source.classes(), mode)?;
        let after_instr = class_instruction(model, case.target.classes(), mode)?;
        let scores = parallel_map(sources.len(), jobs, |k| -> Result<(f64, f64), EvalError> {
            let i = sources[k];
            let before = model.personalize(&data[i].points, &before_instr, i as u64)?;
            let after = model.personalize(&data[i].points, &after_instr, i as u64)?;
            Ok((
                iou_against_average(&before.pattern, &averages, &grid),
                iou_against_average(&after.pattern, &averages, &grid),
            ))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let n = scores.len() as f64;
        out.push(CaseResult {
            source: case.source,
            target: case.target,
            mode,
            samples: scores.len(),
            before: scores.iter().map(|s| s.0).sum::<f64>() / n,
            after: scores.iter().map(|s| s.1).sum::<f64>() / n,
        });
    }
    Ok(out)
}

/// IOU on `fine` between each panel and the panel recovered by smoothing its
/// rasterization on the model's mask grid.
pub fn smoothing_round_trip<'a>(
    model: &PatternModel,
    panels: impl IntoIterator<Item = &'a Panel>,
    fine: &MaskGrid,
) -> Result<Vec<f64>, EvalError> {
    let grid = model.config.grid();
    let mut out = Vec::new();
    for panel in panels {
        let coarse = rasterize_on(panel, &grid).map_err(ModelError::from)?;
        let curve = model
            .smoother
            .smooth_mask(&model.store, grid.width, &coarse.to_values())
            .map_err(ModelError::from)?;
        let truth = rasterize_on(panel, fine).map_err(ModelError::from)?;
        let iou = match curve.to_panel(panel.class_id, 0.5) {
            Some(p) => rasterize_on(&p, fine).ok().and_then(|m| panel_iou(&m, &truth).ok()).unwrap_or(0.0),
            None => 0.0,
        };
        out.push(iou);
    }
    Ok(out)
}

/// `f(0..n)` spread over `jobs` scoped threads, results in index order.
pub fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, jobs: usize, f: F) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = n.div_ceil(jobs);
        for (c, slots) in results.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + k));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::traingen::synth::generate_dataset;

    #[test]
    fn case_lists_parse() {
        let cases = TransferCase::parse_list("# cases\nskirt-2p,skirt-4p\nskirt-4p -> skirt-2p\n").unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[1].source, Family::Skirt4p);
        assert!(TransferCase::parse_list("skirt-2p").is_err());
        assert!(TransferCase::parse_list("").is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(7, 3, |i| i * i), (0..7).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }

    #[test]
    fn average_of_one_sample_is_its_own_mask() {
        let data = generate_dataset(&[Family::Skirt4p], 1, 64, 2);
        let grid = DEFAULT_METRIC_GRID;
        let avg = average_panels(&data, Family::Skirt4p, &grid).unwrap();
        assert_eq!(avg.len(), 4);
        assert!((iou_against_average(&data[0].pattern, &avg, &grid) - 1.0).abs() < 1e-12);
        assert!(average_panels(&data, Family::Tee, &grid).is_err());
    }

    #[test]
    fn same_source_and_target_change_nothing() {
        let data = generate_dataset(&[Family::Skirt2p], 2, 64, 2);
        let model = PatternModel::new(ModelConfig::tiny(), 4).unwrap();
        let case = TransferCase {
            source: Family::Skirt2p,
            target: Family::Skirt2p,
        };
        let r = evaluate_personalized(&model, &data, &[case], PromptMode::Text, 1).unwrap();
        assert_eq!(r[0].before, r[0].after);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let model = PatternModel::new(ModelConfig::tiny(), 4).unwrap();
        assert!(matches!(evaluate_standard(&model, &[], PromptMode::Text, 1), Err(EvalError::EmptyDataset)));
    }
}
