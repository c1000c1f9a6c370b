//! Finite-difference checks over every differentiable piece of the model,
//! from single tape ops up to the composite training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::crossmodal::{cost_matrix, cost_var, solve_transport, wasserstein_var};
use crate::model::PatternModel;
use crate::numerics::gradcheck::{check_inputs, check_inputs_with, check_params, jitter, GradCheckReport};
use crate::numerics::layers::MultiHeadAttention;
use crate::numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};
use crate::prompt::{Instruction, SketchPrompt};
use crate::stitcher::build_edge_graph;
use crate::traingen::synth::{generate_sample, Family, SyntheticSpec};
use crate::traingen::{composite_loss, LossWeights, Targets};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn ev(e: impl std::fmt::Display) -> NumericsError {
    NumericsError::Evaluation(e.to_string())
}

type Check = fn(u64) -> Result<GradCheckReport, NumericsError>;

const CHECKS: &[(&str, Check)] = &[
    ("elementwise", elementwise),
    ("matmul-transpose", matmul_transpose),
    ("shape-ops", shape_ops),
    ("gather", gather),
    ("softmax", softmax),
    ("layer-norm", layer_norm),
    ("reductions", reductions),
    ("row-normalize", row_normalize),
    ("conv2d", conv2d),
    ("conv-transpose2d", conv_transpose2d),
    ("losses", losses),
    ("attention", attention),
    ("wasserstein", wasserstein),
    ("model-loss", model_loss),
    ("stitch-loss", stitch_loss),
];

pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|c| c.0)
}

/// Runs every check; `seed` picks the random inputs.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>, NumericsError> {
    CHECKS
        .iter()
        .map(|&(name, f)| Ok(SuiteEntry { name, report: f(seed)? }))
        .collect()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn sum<'g>(parts: &[Var<'g>]) -> Result<Var<'g>, NumericsError> {
    let mut total = parts[0];
    for p in &parts[1..] {
        total = total.add(*p)?;
    }
    Ok(total)
}

/// Weighted sum so every output entry gets a distinct sensitivity.
fn weighted<'g>(x: Var<'g>, seed: u64) -> Result<Var<'g>, NumericsError> {
    let w = random(&x.shape(), seed ^ 0xabcd, -1.0, 1.0);
    Ok(x.mul_const(&w)?.sum_all())
}

fn elementwise(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[3, 4], seed, -1.0, 1.0);
    let b = random(&[3, 4], seed + 1, -1.0, 1.0);
    let r = random(&[4], seed + 2, -1.0, 1.0);
    check_inputs(&[a, b, r], 12, |_, v| {
        sum(&[
            weighted(v[0].relu(), seed)?,
            weighted(v[0].sigmoid(), seed + 1)?,
            weighted(v[1].tanh(), seed + 2)?,
            weighted(v[0].affine(1.5, -0.2).add(v[1])?, seed + 3)?,
            weighted(v[0].sub(v[1])?.scale(0.7), seed + 4)?,
            weighted(v[0].mul(v[1])?, seed + 5)?,
            weighted(v[1].add_row(v[2])?, seed + 6)?,
        ])
    })
}

fn matmul_transpose(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[3, 5], seed, -1.0, 1.0);
    let b = random(&[5, 2], seed + 1, -1.0, 1.0);
    check_inputs(&[a, b], 15, |_, v| {
        let p = v[0].matmul(v[1])?;
        weighted(p.transpose()?.matmul(p)?, seed)
    })
}

fn shape_ops(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[2, 6], seed, -1.0, 1.0);
    let b = random(&[2, 3], seed + 1, -1.0, 1.0);
    check_inputs(&[a, b], 12, |_, v| {
        let c = Var::concat(&[v[0], v[1]], 1)?;
        let s = c.slice(1, 2, 5)?.reshape(&[5, 2])?;
        let d = Var::concat(&[s, v[0].reshape(&[6, 2])?], 0)?;
        weighted(d.tanh(), seed)
    })
}

fn gather(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[4, 3], seed, -1.0, 1.0);
    check_inputs(&[a], 12, |_, v| {
        sum(&[
            weighted(v[0].gather_rows(&[2, 0, 2, 3])?, seed)?,
            weighted(v[0].gather_flat(&[11, 1, 1, 6])?.sigmoid(), seed + 1)?,
        ])
    })
}

fn softmax(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[3, 4], seed, -2.0, 2.0);
    check_inputs(&[a], 12, |_, v| {
        sum(&[weighted(v[0].softmax(1)?, seed)?, weighted(v[0].softmax(0)?, seed + 1)?])
    })
}

fn layer_norm(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let x = random(&[3, 5], seed, -1.0, 1.0);
    let gain = random(&[5], seed + 1, 0.5, 1.5);
    let bias = random(&[5], seed + 2, -0.5, 0.5);
    check_inputs(&[x, gain, bias], 15, |_, v| weighted(v[0].layer_norm(v[1], v[2], 1e-5)?, seed))
}

fn reductions(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[4, 5], seed, -1.0, 1.0);
    check_inputs(&[a], 20, |_, v| {
        sum(&[
            weighted(v[0].mean_axis(0)?, seed)?,
            weighted(v[0].max_axis(1)?, seed + 1)?,
            v[0].mul(v[0])?.mean_all(),
        ])
    })
}

fn row_normalize(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let a = random(&[3, 4], seed, -1.0, 1.0);
    check_inputs(&[a], 12, |_, v| weighted(v[0].row_normalize()?, seed))
}

fn conv2d(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let x = random(&[2, 2, 5, 5], seed, -1.0, 1.0);
    let w = random(&[3, 2, 3, 3], seed + 1, -0.5, 0.5);
    let b = random(&[3], seed + 2, -0.5, 0.5);
    check_inputs(&[x, w, b], 20, |_, v| weighted(v[0].conv2d(v[1], v[2], 2, 1)?, seed))
}

fn conv_transpose2d(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let x = random(&[2, 2, 3, 3], seed, -1.0, 1.0);
    let w = random(&[2, 3, 4, 4], seed + 1, -0.5, 0.5);
    let b = random(&[3], seed + 2, -0.5, 0.5);
    check_inputs(&[x, w, b], 20, |_, v| weighted(v[0].conv_transpose2d(v[1], v[2], 2, 1)?, seed))
}

fn losses(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let x = random(&[3, 4], seed, -1.0, 1.0);
    let p = random(&[3, 4], seed + 1, 0.1, 0.9);
    let t = random(&[3, 4], seed + 2, -1.0, 1.0);
    let labels = random(&[3, 4], seed + 3, 0.0, 1.0);
    // Keep L1 residuals away from its kink.
    let shifted = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + 3.0).collect())?;
    check_inputs(&[x, p], 12, |_, v| {
        sum(&[
            v[0].mse(&t)?,
            v[0].l1(&shifted)?,
            v[1].bce(&labels)?,
            v[0].bce_with_logits(&labels)?,
        ])
    })
}

fn attention(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng)?;
    jitter(&mut store, seed, 0.05);
    let q = random(&[3, 8], seed + 1, -1.0, 1.0);
    let kv = random(&[5, 8], seed + 2, -1.0, 1.0);
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut report = check_params(&store, &names, 8, |g| {
        weighted(attn.forward(g, g.constant(q.clone()), g.constant(kv.clone()), g.constant(kv.clone()))?, seed)
    })?;
    report.merge(&check_inputs_with(&store, &[q.clone(), kv.clone()], 16, |g, v| {
        weighted(attn.forward(g, v[0], v[1], v[1])?, seed)
    })?);
    Ok(report)
}

fn wasserstein(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let p = random(&[3, 5], seed, -1.0, 1.0);
    let f = random(&[4, 5], seed + 1, -1.0, 1.0);
    let rows = |t: &Tensor, n: usize| (0..n).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let cost = cost_matrix(&rows(&p, 3), &rows(&f, 4)).map_err(ev)?;
    let plan = solve_transport(&cost, 0.05, 500).map_err(ev)?;
    check_inputs(&[p, f], 20, |_, v| {
        wasserstein_var(&plan, cost_var(v[0], v[1])?).map_err(ev)
    })
}

/// Composite loss of a tiny model on one garment, against every parameter
/// of the point cloud encoder, prompt encoder, fusion, decoder, heads and
/// smoother. The transport term is left out: its plan is a constant on the
/// tape but is re-solved at every finite-difference probe.
fn model_loss(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let cfg = ModelConfig::tiny();
    let mut model = PatternModel::new(cfg.clone(), seed).map_err(ev)?;
    jitter(&mut model.store, seed, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = generate_sample(&SyntheticSpec::new(Family::Skirt2p, cfg.num_points), &mut rng);
    let input = model.prepare(&sample.points, seed).map_err(ev)?;
    let targets = Targets::build(&sample.pattern, &cfg).map_err(ev)?;
    // One text slot and one sketch slot so both prompt branches are on the tape.
    let classes: Vec<usize> = sample.pattern.panels.iter().map(|p| p.class_id).collect();
    let mut instr = Instruction::text(&classes[..1]).map_err(ev)?;
    let sketch = Instruction::sketch(
        &[(classes[1], SketchPrompt::silhouette(&sample.pattern.panels[1], 8))],
        cfg.sketch_points,
    )
    .map_err(ev)?;
    instr.slots[classes[1]] = sketch.slots[classes[1]].clone();
    let targets = targets.for_instruction(&instr.active());
    let names: Vec<String> = model.store.names().filter(|n| !n.starts_with("stitch.")).map(String::from).collect();
    check_params(&model.store, &names, 4, |g: &Graph<'_>| {
        let out = model.forward(g, &input, &instr).map_err(ev)?;
        let smooth = model.smoother.forward(g, g.constant(targets.gt_masks()))?;
        let (total, _) = composite_loss(g, &out.heads, &smooth, &targets, None, &LossWeights::default())
            .map_err(ev)?;
        Ok(total)
    })
}

fn stitch_loss(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let cfg = ModelConfig::tiny();
    let mut model = PatternModel::new(cfg.clone(), seed).map_err(ev)?;
    jitter(&mut model.store, seed, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = generate_sample(&SyntheticSpec::new(Family::Skirt4p, cfg.num_points), &mut rng);
    let graph = build_edge_graph(&sample.pattern, cfg.stitch_candidates);
    let labels = crate::stitcher::candidate_labels(&graph, &sample.pattern.stitches);
    let names: Vec<String> = model.store.names().filter(|n| n.starts_with("stitch.")).map(String::from).collect();
    check_params(&model.store, &names, 6, |g| model.stitcher.loss(g, &graph, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: std::collections::BTreeSet<_> = check_names().collect();
        assert_eq!(names.len(), CHECKS.len());
    }

    #[test]
    fn primitive_checks_pass() {
        for &(name, f) in &CHECKS[..11] {
            let r = f(3).unwrap();
            assert!(r.passes(TOLERANCE), "{name}: {r:?}");
        }
    }
}
