//! Stitch prediction: candidate edge pairs by 3D proximity, a small message
//! passing network over them, and greedy one-to-one matching.

use rand::Rng;

use crate::numerics::layers::Linear;
use crate::numerics::{sigmoid, Graph, NumericsError, ParameterStore, Tensor, Var};
use crate::pattern::{drape_point, sample_edge, EdgeRef, SewingPattern, Stitch};

type Result<T> = std::result::Result<T, NumericsError>;

pub const NODE_FEATURES: usize = 13;
/// Geometric pair features appended to the symmetric node combination.
pub const PAIR_FEATURES: usize = 2;

// Feature scales: cm → 100 cm units, degrees → half turns.
const LENGTH_UNIT: f64 = 100.0;
const ANGLE_UNIT: f64 = 180.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeNode {
    pub panel: usize,
    pub edge: usize,
    /// Start (2), end (2), curvature (2), length (1), rotation (3),
    /// translation (3); raw units.
    pub feature: [f64; NODE_FEATURES],
    pub midpoint_3d: [f64; 3],
    pub ends_3d: [[f64; 3]; 2],
}

impl EdgeNode {
    pub fn edge_ref(&self) -> EdgeRef {
        (self.panel, self.edge)
    }

    /// Feature row fed to the network.
    pub fn scaled(&self) -> [f64; NODE_FEATURES] {
        let f = &self.feature;
        let mut out = *f;
        for k in [0, 1, 2, 3, 6, 10, 11, 12] {
            out[k] = f[k] / LENGTH_UNIT;
        }
        for k in 7..10 {
            out[k] = f[k] / ANGLE_UNIT;
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Midpoint of every edge curve after placement, per panel.
pub fn drape_edges(pattern: &SewingPattern) -> Vec<Vec<[f64; 3]>> {
    pattern
        .panels
        .iter()
        .map(|p| {
            (0..p.num_edges())
                .map(|e| {
                    let (s, t, c) = p.edge(e);
                    drape_point(p, sample_edge(s, t, c, 3)[1])
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGraph {
    pub nodes: Vec<EdgeNode>,
    /// Unordered candidate pairs `(i, j)` with `i < j`, sorted.
    pub candidates: Vec<(usize, usize)>,
}

impl EdgeGraph {
    pub fn index_of(&self, r: EdgeRef) -> Option<usize> {
        self.nodes.iter().position(|n| n.edge_ref() == r)
    }

    /// Symmetric pair features: midpoint distance and the smaller mean
    /// endpoint distance over the two endpoint pairings, in 100 cm units.
    pub fn pair_features(&self, i: usize, j: usize) -> [f64; PAIR_FEATURES] {
        let (a, b) = (&self.nodes[i], &self.nodes[j]);
        let straight = dist(a.ends_3d[0], b.ends_3d[0]) + dist(a.ends_3d[1], b.ends_3d[1]);
        let crossed = dist(a.ends_3d[0], b.ends_3d[1]) + dist(a.ends_3d[1], b.ends_3d[0]);
        [
            dist(a.midpoint_3d, b.midpoint_3d) / LENGTH_UNIT,
            straight.min(crossed) / (2.0 * LENGTH_UNIT),
        ]
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(i, j) in &self.candidates {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }
}

/// One node per panel edge; each edge proposes its `c` nearest edges of
/// other panels by draped midpoint distance (ties by node order).
pub fn build_edge_graph(pattern: &SewingPattern, c: usize) -> EdgeGraph {
    let mut nodes = Vec::new();
    for (pi, p) in pattern.panels.iter().enumerate() {
        for e in 0..p.num_edges() {
            let (s, t, curv) = p.edge(e);
            let pts = sample_edge(s, t, curv, 33);
            let length: f64 = pts
                .windows(2)
                .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
                .sum();
            let cv = curv.unwrap_or([0.5, 0.0]);
            nodes.push(EdgeNode {
                panel: pi,
                edge: e,
                feature: [
                    s[0],
                    s[1],
                    t[0],
                    t[1],
                    cv[0],
                    cv[1],
                    length,
                    p.rotation[0],
                    p.rotation[1],
                    p.rotation[2],
                    p.translation[0],
                    p.translation[1],
                    p.translation[2],
                ],
                midpoint_3d: drape_point(p, pts[16]),
                ends_3d: [drape_point(p, s), drape_point(p, t)],
            });
        }
    }
    let mut pairs = std::collections::BTreeSet::new();
    for (i, a) in nodes.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = nodes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.panel != a.panel)
            .map(|(j, b)| (dist(a.midpoint_3d, b.midpoint_3d), j))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in others.iter().take(c) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    EdgeGraph {
        nodes,
        candidates: pairs.into_iter().collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchScore {
    pub a: EdgeRef,
    pub b: EdgeRef,
    pub score: f64,
}

/// Message passing over candidate pairs followed by a symmetric pair
/// classifier.
#[derive(Clone, Debug)]
pub struct StitchGraph {
    pub embed: Linear,
    pub rounds: Vec<Linear>,
    pub pair_hidden: Linear,
    pub pair_out: Linear,
    pub candidates: usize,
}

impl StitchGraph {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, width: usize, rounds: usize, candidates: usize, rng: &mut R) -> Self {
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), NODE_FEATURES, width, rng),
            rounds: (0..rounds)
                .map(|r| Linear::new(store, &format!("{name}.round{r}"), 2 * width, width, rng))
                .collect(),
            pair_hidden: Linear::new(store, &format!("{name}.pair1"), 2 * width + PAIR_FEATURES, width, rng),
            pair_out: Linear::new(store, &format!("{name}.pair2"), width, 1, rng),
            candidates,
        }
    }

    /// Logits for every candidate pair, `P×1`.
    pub fn logits<'g>(&self, g: &'g Graph<'g>, graph: &EdgeGraph) -> Result<Var<'g>> {
        let n = graph.nodes.len();
        let p = graph.candidates.len();
        if n == 0 || p == 0 {
            return Err(NumericsError::EmptyInput("stitch candidates"));
        }
        let rows: Vec<Vec<f64>> = graph.nodes.iter().map(|nd| nd.scaled().to_vec()).collect();
        let mut h = self.embed.forward(g, g.constant(Tensor::from_rows(&rows)?))?.relu();
        let adj = graph.neighbours();
        let mut mean = Tensor::zeros(&[n, n]);
        for (i, nb) in adj.iter().enumerate() {
            for &j in nb {
                mean.data_mut()[i * n + j] = 1.0 / nb.len() as f64;
            }
        }
        let mean = g.constant(mean);
        for round in &self.rounds {
            let msg = mean.matmul(h)?;
            h = round.forward(g, Var::concat(&[h, msg], 1)?)?.relu();
        }
        let (us, vs): (Vec<usize>, Vec<usize>) = graph.candidates.iter().copied().unzip();
        let (hu, hv) = (h.gather_rows(&us)?, h.gather_rows(&vs)?);
        let diff = hu.sub(hv)?;
        let abs = diff.relu().add(diff.scale(-1.0).relu())?;
        let geo: Vec<Vec<f64>> = graph.candidates.iter().map(|&(i, j)| graph.pair_features(i, j).to_vec()).collect();
        let x = Var::concat(&[hu.add(hv)?, abs, g.constant(Tensor::from_rows(&geo)?)], 1)?;
        self.pair_out.forward(g, self.pair_hidden.forward(g, x)?.relu())
    }

    /// Binary cross-entropy over candidates; `labels[i]` is 1 for stitched pairs.
    pub fn loss<'g>(&self, g: &'g Graph<'g>, graph: &EdgeGraph, labels: &[f64]) -> Result<Var<'g>> {
        let target = Tensor::new(vec![labels.len(), 1], labels.to_vec())?;
        self.logits(g, graph)?.bce_with_logits(&target)
    }

    pub fn score(&self, store: &ParameterStore, graph: &EdgeGraph) -> Result<Vec<StitchScore>> {
        if graph.candidates.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::inference(store);
        let z = self.logits(&g, graph)?.value();
        Ok(graph
            .candidates
            .iter()
            .zip(z.data())
            .map(|(&(i, j), &z)| StitchScore {
                a: graph.nodes[i].edge_ref(),
                b: graph.nodes[j].edge_ref(),
                score: sigmoid(z),
            })
            .collect())
    }

    /// Scores, matches and attaches stitches to `pattern`.
    pub fn stitch(&self, store: &ParameterStore, pattern: &mut SewingPattern, threshold: f64) -> Result<()> {
        let graph = build_edge_graph(pattern, self.candidates);
        pattern.stitches = match_stitches(&self.score(store, &graph)?, threshold);
        Ok(())
    }
}

/// Greedy matching: highest remaining score above `threshold` whose edges
/// are both unused, ties by list order.
pub fn match_stitches(scores: &[StitchScore], threshold: f64) -> Vec<Stitch> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].score > threshold).collect();
    order.sort_by(|&x, &y| scores[y].score.total_cmp(&scores[x].score).then(x.cmp(&y)));
    let mut used = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for i in order {
        let s = &scores[i];
        if s.a != s.b && !used.contains(&s.a) && !used.contains(&s.b) {
            used.insert(s.a);
            used.insert(s.b);
            out.push(Stitch::new(s.a, s.b));
        }
    }
    out
}

/// 1 for candidates present in `truth`, else 0.
pub fn candidate_labels(graph: &EdgeGraph, truth: &[Stitch]) -> Vec<f64> {
    let set: std::collections::BTreeSet<Stitch> = truth.iter().copied().collect();
    graph
        .candidates
        .iter()
        .map(|&(i, j)| set.contains(&Stitch::new(graph.nodes[i].edge_ref(), graph.nodes[j].edge_ref())) as u8 as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_params, jitter};
    use crate::pattern::Panel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(class_id: usize, translation: [f64; 3]) -> Panel {
        let mut p = Panel::straight(class_id, vec![[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]]);
        p.translation = translation;
        p
    }

    fn pattern(panels: Vec<Panel>) -> SewingPattern {
        SewingPattern {
            panels,
            stitches: vec![],
        }
    }

    #[test]
    fn drape_examples() {
        let p = pattern(vec![square(0, [0.0; 3])]);
        let m = drape_edges(&p);
        assert_eq!(m[0][0], [0.0, -10.0, 0.0]);
        let mut q = square(0, [0.0; 3]);
        q.rotation = [0.0, 0.0, 90.0];
        let m = drape_edges(&pattern(vec![q.clone()]));
        let want = [10.0, 0.0, 0.0]; // (0,-10) → (10, 0)
        for k in 0..3 {
            assert!((m[0][0][k] - want[k]).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        q.rotation = [rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0)];
        q.translation = [3.0, -4.0, 7.5];
        let m = drape_edges(&pattern(vec![q.clone()]));
        // Independent construction: rotate about each axis in turn.
        let r = q.rotation.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, r[0].cos(), -r[0].sin()], [0.0, r[0].sin(), r[0].cos()]];
        let ry = [[r[1].cos(), 0.0, r[1].sin()], [0.0, 1.0, 0.0], [-r[1].sin(), 0.0, r[1].cos()]];
        let rz = [[r[2].cos(), -r[2].sin(), 0.0], [r[2].sin(), r[2].cos(), 0.0], [0.0, 0.0, 1.0]];
        let mul = |a: [[f64; 3]; 3], v: [f64; 3]| [0, 1, 2].map(|i| (0..3).map(|k| a[i][k] * v[k]).sum::<f64>());
        let v = mul(rx, mul(ry, mul(rz, [10.0, 0.0, 0.0])));
        for k in 0..3 {
            assert!((m[0][1][k] - (v[k] + q.translation[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn candidates_examples() {
        let single = build_edge_graph(&pattern(vec![square(0, [0.0; 3])]), 6);
        assert!(single.candidates.is_empty());
        let far = build_edge_graph(&pattern(vec![square(0, [0.0; 3]), square(1, [1000.0, 0.0, 0.0])]), 6);
        assert!(!far.candidates.is_empty());
        for &(i, j) in &far.candidates {
            assert_ne!(far.nodes[i].panel, far.nodes[j].panel);
            assert!(far.pair_features(i, j)[0] > 9.0);
        }
        // Each of 4 edges picks 2 nearest of the other panel: at least 4 pairs.
        let two = build_edge_graph(&pattern(vec![square(0, [0.0; 3]), square(1, [25.0, 0.0, 0.0])]), 2);
        assert!(two.candidates.len() >= 4);
        assert!(two.candidates.iter().all(|&(i, j)| i < j));
    }

    fn net(width: usize, rounds: usize, seed: u64) -> (ParameterStore, StitchGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let s = StitchGraph::new(&mut store, "stitch", width, rounds, 6, &mut rng);
        (store, s)
    }

    #[test]
    fn scores_are_symmetric_and_half_at_zero() {
        let pat = pattern(vec![square(0, [0.0; 3]), square(1, [20.0, 0.0, 0.0]), square(2, [0.0, 20.0, 3.0])]);
        let graph = build_edge_graph(&pat, 6);
        let (mut store, s) = net(8, 2, 1);
        jitter(&mut store, 1, 0.1);
        let scores = s.score(&store, &graph).unwrap();
        let mut swapped = graph.clone();
        swapped.candidates = graph.candidates.iter().map(|&(i, j)| (j, i)).collect();
        let again = s.score(&store, &swapped).unwrap();
        for (a, b) in scores.iter().zip(&again) {
            assert_eq!(a.score, b.score);
        }
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        assert!(s.score(&store, &graph).unwrap().iter().all(|x| x.score == 0.5));
    }

    fn linear(store: &ParameterStore, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(&l.weight).unwrap();
        let b = store.get(&l.bias).unwrap();
        (0..l.out_dim)
            .map(|o| b.data()[o] + (0..l.in_dim).map(|i| x[i] * w.at2(i, o)).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    #[test]
    fn identical_pair_by_hand() {
        let pat = pattern(vec![square(0, [0.0, 0.0, 0.0]), square(1, [0.0, 0.0, 0.0])]);
        let mut graph = build_edge_graph(&pat, 1);
        graph.nodes.truncate(1);
        let mut twin = graph.nodes[0].clone();
        twin.panel = 1;
        graph.nodes.push(twin);
        graph.candidates = vec![(0, 1)];
        let (mut store, s) = net(4, 1, 3);
        jitter(&mut store, 3, 0.2);
        let x = graph.nodes[0].scaled();
        let h0 = relu(linear(&store, &s.embed, &x));
        // Each node's only neighbour is its twin, so the message equals h0.
        let h1 = relu(linear(&store, &s.rounds[0], &[h0.clone(), h0.clone()].concat()));
        let sum: Vec<f64> = h1.iter().map(|v| v + v).collect();
        let pair = [sum, vec![0.0; 4], vec![0.0, 0.0]].concat();
        let z = linear(&store, &s.pair_out, &relu(linear(&store, &s.pair_hidden, &pair)))[0];
        let got = s.score(&store, &graph).unwrap()[0].score;
        assert!((got - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }

    fn sc(a: EdgeRef, b: EdgeRef, score: f64) -> StitchScore {
        StitchScore { a, b, score }
    }

    #[test]
    fn greedy_examples() {
        assert!(match_stitches(&[sc((0, 0), (1, 0), 0.3)], 0.5).is_empty());
        let got = match_stitches(&[sc((0, 0), (1, 0), 0.8), sc((0, 0), (2, 1), 0.9)], 0.5);
        assert_eq!(got, vec![Stitch::new((0, 0), (2, 1))]);
    }

    /// Brute-force restatement: walk scores in descending order, keeping a
    /// pair iff it clears the threshold and shares no edge with a kept pair.
    fn greedy_oracle(scores: &[StitchScore], threshold: f64) -> Vec<Stitch> {
        let mut kept: Vec<Stitch> = Vec::new();
        let mut remaining: Vec<usize> = (0..scores.len()).collect();
        loop {
            let mut best: Option<usize> = None;
            for &i in &remaining {
                let s = &scores[i];
                let clash = kept.iter().any(|k| [k.a, k.b].contains(&s.a) || [k.a, k.b].contains(&s.b));
                if s.score > threshold && !clash && s.a != s.b && best.is_none_or(|b| s.score > scores[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { return kept };
            kept.push(Stitch::new(scores[b].a, scores[b].b));
            remaining.retain(|&i| i != b);
        }
    }

    #[test]
    fn greedy_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(0..=8);
            let scores: Vec<StitchScore> = (0..n)
                .map(|_| {
                    let e = |rng: &mut ChaCha8Rng| (rng.random_range(0..3usize), rng.random_range(0..2usize));
                    sc(e(&mut rng), e(&mut rng), (rng.random_range(0..20) as f64) / 20.0)
                })
                .collect();
            let got = match_stitches(&scores, 0.5);
            let mut want = greedy_oracle(&scores, 0.5);
            let mut g2 = got.clone();
            g2.sort();
            want.sort();
            assert_eq!(g2, want);
            let mut seen = std::collections::BTreeSet::new();
            for s in &got {
                assert!(seen.insert(s.a) && seen.insert(s.b));
            }
        }
    }

    #[test]
    fn gradients() {
        let pat = pattern(vec![square(0, [0.0; 3]), square(1, [20.0, 1.0, 0.0]), square(2, [0.0, 20.0, 3.0])]);
        let graph = build_edge_graph(&pat, 3);
        let labels: Vec<f64> = (0..graph.candidates.len()).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (mut store, s) = net(6, 2, 5);
        jitter(&mut store, 5, 0.1);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = check_params(&store, &names, 10, |g| s.loss(g, &graph, &labels)).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
