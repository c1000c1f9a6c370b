//! Optimal-transport association of patch and prompt features, and the
//! cross-attention fusion that turns prompt rows into per-slot features.

use rand::Rng;

use crate::numerics::layers::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum CrossmodalError {
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("transport did not converge: marginal residual {residual:.3e}")]
    NoConvergence { residual: f64 },
    #[error("transport plan carries no mass")]
    ZeroMass,
    #[error("plan is {plan:?} but cost is {cost:?}")]
    ShapeMismatch { plan: (usize, usize), cost: (usize, usize) },
    #[error("regularisation must be positive, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, CrossmodalError>;

/// Marginal tolerance every returned plan satisfies.
pub const MARGINAL_TOL: f64 = 1e-6;

// Marginal error at which an intermediate ε stage hands over to the next.
const STAGE_TOL: f64 = 1e-3;

/// `δ[g][k]`: mean squared difference of L2-normalised rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub delta: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, delta: Vec<f64>) -> Self {
        assert_eq!(delta.len(), rows * cols, "cost matrix size");
        Self { rows, cols, delta }
    }

    pub fn at(&self, g: usize, k: usize) -> f64 {
        self.delta[g * self.cols + k]
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    row.iter().map(|v| v / n).collect()
}

/// Costs between patch rows `f_loc` (G×D) and active prompt rows `p_loc`
/// (K×D), both given row-major.
pub fn cost_matrix(p_loc: &[Vec<f64>], f_loc: &[Vec<f64>]) -> Result<CostMatrix> {
    let (Some(p0), Some(f0)) = (p_loc.first(), f_loc.first()) else {
        return Err(CrossmodalError::EmptyInput("cost_matrix"));
    };
    let d = f0.len();
    if let Some(bad) = p_loc.iter().chain(f_loc).find(|r| r.len() != d) {
        return Err(CrossmodalError::WidthMismatch(d, bad.len()));
    }
    if d == 0 || p0.is_empty() {
        return Err(CrossmodalError::EmptyInput("cost_matrix"));
    }
    let p: Vec<Vec<f64>> = p_loc.iter().map(|r| normalized(r)).collect();
    let f: Vec<Vec<f64>> = f_loc.iter().map(|r| normalized(r)).collect();
    let mut delta = Vec::with_capacity(f.len() * p.len());
    for fr in &f {
        for pr in &p {
            delta.push(fr.iter().zip(pr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64);
        }
    }
    Ok(CostMatrix::new(f.len(), p.len(), delta))
}

/// Differentiable `G × K` costs `(2 - 2 F̂ P̂ᵀ) / D` for unit rows.
pub fn cost_var<'g>(p_loc: Var<'g>, f_loc: Var<'g>) -> std::result::Result<Var<'g>, NumericsError> {
    let d = *f_loc.shape().last().ok_or(NumericsError::EmptyInput("cost"))? as f64;
    let sim = f_loc.row_normalize()?.matmul(p_loc.row_normalize()?.transpose()?)?;
    Ok(sim.affine(-2.0 / d, 2.0 / d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub flow: Vec<f64>,
    pub source: Vec<f64>,
    pub sink: Vec<f64>,
}

impl TransportPlan {
    pub fn at(&self, g: usize, k: usize) -> f64 {
        self.flow[g * self.cols + k]
    }

    pub fn mass(&self) -> f64 {
        self.flow.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.flow.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|k| (0..self.rows).map(|g| self.at(g, k)).sum())
            .collect()
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.flow.iter().zip(&cost.delta).map(|(f, d)| f * d).sum()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.flow.clone()).expect("sized")
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic transport with uniform capacities.
pub fn solve_transport(cost: &CostMatrix, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    let source = vec![1.0 / cost.rows.max(1) as f64; cost.rows];
    let sink = vec![1.0 / cost.cols.max(1) as f64; cost.cols];
    solve_transport_weighted(cost, &source, &sink, epsilon, iters)
}

/// Log-domain Sinkhorn iterations with ε-scaling. When the two sides carry
/// different mass, the heavier side is scaled down so the plan moves
/// `min(Σ source, Σ sink)`. `iters` bounds the total number of rounds.
pub fn solve_transport_weighted(
    cost: &CostMatrix,
    source: &[f64],
    sink: &[f64],
    epsilon: f64,
    iters: usize,
) -> Result<TransportPlan> {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Err(CrossmodalError::EmptyInput("solve_transport"));
    }
    if !(epsilon > 0.0) {
        return Err(CrossmodalError::BadEpsilon(epsilon));
    }
    if source.len() != n || sink.len() != m {
        return Err(CrossmodalError::ShapeMismatch {
            plan: (source.len(), sink.len()),
            cost: (n, m),
        });
    }
    let (sa, sb): (f64, f64) = (source.iter().sum(), sink.iter().sum());
    if !(sa > 0.0 && sb > 0.0) {
        return Err(CrossmodalError::ZeroMass);
    }
    let mass = sa.min(sb);
    let a: Vec<f64> = source.iter().map(|v| v * mass / sa).collect();
    let b: Vec<f64> = sink.iter().map(|v| v * mass / sb).collect();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let c = &cost.delta;
    let spread = c.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut eps = spread.max(epsilon);
    let (mut f, mut g) = (vec![0.0; n], vec![0.0; m]);
    let mut residual = f64::INFINITY;
    let mut budget = iters;
    while budget > 0 {
        budget -= 1;
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - c[i * m + j]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c[i * m + j]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        // Columns are exact after the g-update; rows carry the residual.
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| ((f[i] + g[j] - c[i * m + j]) / eps).exp()).sum();
                (row - a[i]).abs()
            })
            .fold(0.0, f64::max);
        if eps > epsilon {
            if residual <= STAGE_TOL * mass {
                eps = (eps * 0.5).max(epsilon);
            }
        } else if residual <= MARGINAL_TOL * 1e-3 {
            break;
        }
    }
    if eps > epsilon {
        residual = residual.max(STAGE_TOL);
    }
    if !(residual <= MARGINAL_TOL) {
        return Err(CrossmodalError::NoConvergence { residual });
    }
    let mut flow = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            flow.push(((f[i] + g[j] - c[i * m + j]) / epsilon).exp());
        }
    }
    Ok(TransportPlan {
        rows: n,
        cols: m,
        flow,
        source: source.to_vec(),
        sink: sink.to_vec(),
    })
}

/// `Σ f·δ / Σ f`.
pub fn wasserstein_loss(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if (plan.rows, plan.cols) != (cost.rows, cost.cols) {
        return Err(CrossmodalError::ShapeMismatch {
            plan: (plan.rows, plan.cols),
            cost: (cost.rows, cost.cols),
        });
    }
    let mass = plan.mass();
    if !(mass > 0.0) {
        return Err(CrossmodalError::ZeroMass);
    }
    Ok(plan.cost(cost) / mass)
}

/// [`wasserstein_loss`] on a differentiable cost with the plan held fixed.
pub fn wasserstein_var<'g>(plan: &TransportPlan, delta: Var<'g>) -> Result<Var<'g>> {
    let shape = delta.shape();
    if shape != [plan.rows, plan.cols] {
        return Err(CrossmodalError::ShapeMismatch {
            plan: (plan.rows, plan.cols),
            cost: (shape.first().copied().unwrap_or(0), shape.get(1).copied().unwrap_or(0)),
        });
    }
    let mass = plan.mass();
    if !(mass > 0.0) {
        return Err(CrossmodalError::ZeroMass);
    }
    Ok(delta.mul_const(&plan.as_tensor())?.sum_all().scale(1.0 / mass))
}

/// Cross-attention from prompt rows to patch features plus a feed-forward
/// layer, each with a residual connection. Every operation acts on prompt
/// rows independently.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> std::result::Result<Self, NumericsError> {
        Ok(Self {
            norm_query: LayerNorm::new(store, &format!("{name}.lnq"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.lnkv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.lnff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 2 * dim, rng),
        })
    }

    /// `F_cm` (K×D) from prompt rows (K×D) and patch features (G×D).
    pub fn forward<'g>(&self, g: &'g Graph<'g>, p_loc: Var<'g>, f_loc: Var<'g>) -> std::result::Result<Var<'g>, NumericsError> {
        let q = self.norm_query.forward(g, p_loc)?;
        let kv = self.norm_context.forward(g, f_loc)?;
        let h = p_loc.add(self.attn.forward(g, q, kv, kv)?)?;
        let n = self.norm_ff.forward(g, h)?;
        h.add(self.ff.forward(g, n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_inputs, check_params, jitter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cost_examples() {
        let v = vec![vec![0.3, -1.2, 2.0]];
        assert_eq!(cost_matrix(&v, &v).unwrap().delta, vec![0.0]);
        let c = cost_matrix(&[vec![1.0, 0.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(c.delta, vec![0.5]);
        assert!(matches!(cost_matrix(&[], &v), Err(CrossmodalError::EmptyInput(_))));
    }

    #[test]
    fn cost_matches_loop_and_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (p, f) = (rows(2), rows(3));
        let c = cost_matrix(&p, &f).unwrap();
        for gi in 0..3 {
            for k in 0..2 {
                let nf = f[gi].iter().map(|v| v * v).sum::<f64>().sqrt();
                let np = p[k].iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut s = 0.0;
                for d in 0..4 {
                    s += (f[gi][d] / nf - p[k][d] / np).powi(2);
                }
                assert!((c.at(gi, k) - s / 4.0).abs() < 1e-15);
            }
        }
        let g = Graph::new();
        let pv = g.constant(Tensor::from_rows(&p).unwrap());
        let fv = g.constant(Tensor::from_rows(&f).unwrap());
        let cv = cost_var(pv, fv).unwrap().value();
        for (a, b) in cv.data().iter().zip(&c.delta) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_cell_plan() {
        let plan = solve_transport(&CostMatrix::new(1, 1, vec![0.7]), 0.05, 200).unwrap();
        assert!((plan.flow[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_plan_at_small_epsilon() {
        let plan = solve_transport(&CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]), 1e-3, 500).unwrap();
        assert!((plan.at(0, 0) - 0.5).abs() < 1e-9 && (plan.at(1, 1) - 0.5).abs() < 1e-9);
        assert!(plan.at(0, 1) < 1e-9);
    }

    #[test]
    fn unequal_masses_move_the_minimum() {
        let cost = CostMatrix::new(2, 3, vec![0.1, 0.5, 0.3, 0.7, 0.2, 0.4]);
        let plan = solve_transport_weighted(&cost, &[0.5, 0.5], &[0.2, 0.2, 0.2], 0.05, 500).unwrap();
        assert!((plan.mass() - 0.6).abs() < 1e-6);
        for (s, w) in plan.row_sums().iter().zip(&plan.source) {
            assert!(*s <= w + 1e-6);
        }
        for (s, w) in plan.col_sums().iter().zip(&plan.sink) {
            assert!(*s <= w + 1e-6);
        }
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = CostMatrix::new(6, 6, (0..36).map(|_| rng.random_range(0.0..1.0)).collect());
        assert!(matches!(
            solve_transport(&cost, 1e-4, 1),
            Err(CrossmodalError::NoConvergence { .. })
        ));
    }

    #[test]
    fn wasserstein_examples() {
        let plan = TransportPlan {
            rows: 2,
            cols: 2,
            flow: vec![0.1, 0.2, 0.3, 0.15],
            source: vec![0.5; 2],
            sink: vec![0.5; 2],
        };
        assert_eq!(wasserstein_loss(&plan, &CostMatrix::new(2, 2, vec![0.0; 4])).unwrap(), 0.0);
        let c = wasserstein_loss(&plan, &CostMatrix::new(2, 2, vec![0.4; 4])).unwrap();
        assert!((c - 0.4).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let delta: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let plan = TransportPlan {
            rows: 3,
            cols: 3,
            flow: flow.clone(),
            source: vec![1.0; 3],
            sink: vec![1.0; 3],
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..9 {
            num += flow[i] * delta[i];
            den += flow[i];
        }
        let cost = CostMatrix::new(3, 3, delta);
        assert!((wasserstein_loss(&plan, &cost).unwrap() - num / den).abs() < 1e-15);
        let mut scaled = plan.clone();
        scaled.flow.iter_mut().for_each(|f| *f *= 7.0);
        assert!((wasserstein_loss(&scaled, &cost).unwrap() - num / den).abs() < 1e-14);
        let empty = TransportPlan {
            flow: vec![0.0; 9],
            ..plan
        };
        assert!(matches!(wasserstein_loss(&empty, &cost), Err(CrossmodalError::ZeroMass)));
    }

    #[test]
    fn wasserstein_gradient_with_frozen_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::new(vec![2, 5], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cost = cost_matrix(
            &(0..2).map(|r| p.row(r).to_vec()).collect::<Vec<_>>(),
            &(0..3).map(|r| f.row(r).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let plan = solve_transport(&cost, 0.05, 200).unwrap();
        let report = check_inputs(&[p, f], 20, |_, v| Ok(wasserstein_var(&plan, cost_var(v[0], v[1])?).unwrap())).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn fusion() -> (ParameterStore, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let f = Fusion::new(&mut store, "fuse", 8, 2, &mut rng).unwrap();
        jitter(&mut store, 2, 0.1);
        (store, f)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fusion_rows_are_independent() {
        let (store, fu) = fusion();
        let g = Graph::inference(&store);
        let p = random(&[5, 8], 1);
        let f = g.constant(random(&[6, 8], 2));
        let base = fu.forward(&g, g.constant(p.clone()), f).unwrap().value();
        for j in 0..5 {
            let mut q = p.clone();
            q.data_mut()[j * 8..(j + 1) * 8].iter_mut().for_each(|v| *v = 0.0);
            let out = fu.forward(&g, g.constant(q), f).unwrap().value();
            for r in 0..5 {
                if r == j {
                    assert_ne!(out.row(r), base.row(r));
                } else {
                    assert_eq!(out.row(r), base.row(r));
                }
            }
        }
        // Permuting prompt rows permutes outputs.
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| p.row(i).to_vec()).collect();
        let out = fu.forward(&g, g.constant(Tensor::from_rows(&rows).unwrap()), f).unwrap().value();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(out.row(r), base.row(i));
        }
    }

    #[test]
    fn fusion_with_one_patch() {
        let (store, fu) = fusion();
        let g = Graph::inference(&store);
        let p = g.constant(random(&[3, 8], 3));
        let f = g.constant(random(&[1, 8], 4));
        let attn = fu.forward(&g, p, f).unwrap().value();
        // Attention over one key returns the projected key row for every query.
        let kv = fu.norm_context.forward(&g, f).unwrap();
        let v = fu.attn.out.forward(&g, fu.attn.value.forward(&g, kv).unwrap()).unwrap();
        let h = p.add(g.constant(Tensor::from_rows(&vec![v.value().row(0).to_vec(); 3]).unwrap())).unwrap();
        let want = h.add(fu.ff.forward(&g, fu.norm_ff.forward(&g, h).unwrap()).unwrap()).unwrap().value();
        assert!(attn.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fusion_gradients() {
        let (store, fu) = fusion();
        let names: Vec<String> = store.names().map(String::from).collect();
        let p = random(&[3, 8], 5);
        let f = random(&[4, 8], 6);
        let w = random(&[3, 8], 7);
        let report = check_params(&store, &names, 6, |g| {
            let out = fu.forward(g, g.constant(p.clone()), g.constant(f.clone()))?;
            Ok(out.mul_const(&w)?.sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
