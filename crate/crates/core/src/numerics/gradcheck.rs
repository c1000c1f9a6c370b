//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::optim::ParameterStore;
use super::tensor::Tensor;
use super::NumericsError;

pub const STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`]. Entries whose true derivative is
/// far below this are compared in absolute terms instead.
pub const REL_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Label of the entry with the largest error.
    pub worst: String,
    /// Probes whose two evaluations fell on different sides of a ReLU or
    /// max kink, where central differences do not estimate the derivative.
    pub straddled: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err >= self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = label();
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.straddled += other.straddled;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
    }

    /// Error below `tol` with at most one probe in ten lost to kinks.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0 && self.straddled * 10 <= self.checked + self.straddled
    }
}

/// Adds uniform noise in `±amount` to every parameter so checks do not sit
/// on activation kinks or symmetric initial values.
pub fn jitter(store: &mut ParameterStore, seed: u64, amount: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let mut t = store.get(&name).expect("listed").clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amount..amount));
        store.set(&name, t).expect("same shape");
    }
}

/// Indices probed in a tensor of `n` entries, at most `limit` evenly spread.
fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let stride = n as f64 / limit as f64;
    (0..limit).map(|i| (i as f64 * stride) as usize).collect()
}

/// Checks `d f / d inputs` where `f` builds a scalar from graph inputs.
pub fn check_inputs<F>(inputs: &[Tensor], limit: usize, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph<'g>, &[Var<'g>]) -> Result<Var<'g>, NumericsError>,
{
    check_inputs_with(&ParameterStore::new(), inputs, limit, f)
}

/// [`check_inputs`] for functions that also read parameters of `store`.
pub fn check_inputs_with<F>(
    store: &ParameterStore,
    inputs: &[Tensor],
    limit: usize,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph<'g>, &[Var<'g>]) -> Result<Var<'g>, NumericsError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64), NumericsError> {
        let g = Graph::inference(store);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?.item();
        Ok((out, g.branch_signature()))
    };
    let g = Graph::with_store(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (vi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in probe_indices(inputs[vi].numel(), limit) {
            let orig = work[vi].data()[i];
            work[vi].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[vi].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[vi].data_mut()[i] = orig;
            if up.1 != down.1 {
                report.straddled += 1;
                continue;
            }
            let numeric = (up.0 - down.0) / (2.0 * STEP);
            report.record(|| format!("input{vi}[{i}]"), analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks `d f / d θ` for the named parameters of `store`, probing at most
/// `limit` entries of each.
pub fn check_params<F>(
    store: &ParameterStore,
    names: &[String],
    limit: usize,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>, NumericsError>,
{
    let g = Graph::with_store(store);
    let loss = f(&g)?;
    let grads = g.backward(loss)?;
    let nodes: std::collections::BTreeMap<String, usize> = g.param_nodes().into_iter().collect();
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let base = store.get(name)?.clone();
        let analytic = nodes
            .get(name)
            .and_then(|&id| grads.get_id(id))
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in probe_indices(base.numel(), limit) {
            let mut eval_at = |v: f64| -> Result<(f64, u64), NumericsError> {
                let mut t = base.clone();
                t.data_mut()[i] = v;
                probe.set(name, t)?;
                let g = Graph::inference(&probe);
                let out = f(&g)?.item();
                Ok((out, g.branch_signature()))
            };
            let orig = base.data()[i];
            let up = eval_at(orig + STEP)?;
            let down = eval_at(orig - STEP)?;
            probe.set(name, base.clone())?;
            if up.1 != down.1 {
                report.straddled += 1;
                continue;
            }
            let numeric = (up.0 - down.0) / (2.0 * STEP);
            report.record(|| format!("{name}[{i}]"), analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_wrong_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.2]);
        let ok = check_inputs(&[x.clone()], 8, |_, v| Ok(v[0].mul(v[0])?.sum_all())).unwrap();
        assert!(ok.passes(1e-6));
        let bad = check_inputs(&[x], 8, |g, v| {
            // value depends on x through a constant copy, so the tape sees no path
            let c = g.constant(Tensor::clone(&v[0].value()));
            Ok(c.mul(c)?.sum_all().add(v[0].scale(0.0).sum_all())?)
        })
        .unwrap();
        assert!(!bad.passes(1e-4));
    }

    #[test]
    fn skips_probes_across_a_kink() {
        // relu(x) at x = 5e-5: the ±1e-4 probes straddle zero.
        let x = Tensor::from_vec(vec![5e-5, 0.5]);
        let r = check_inputs(&[x], 8, |_, v| Ok(v[0].relu().sum_all())).unwrap();
        assert_eq!((r.checked, r.straddled), (1, 1));
        assert!(!r.passes(1e-4));
        let x = Tensor::from_vec(vec![0.3, 0.30005, -1.0]);
        let r = check_inputs(&[x], 8, |_, v| Ok(v[0].max_axis(0)?.sum_all())).unwrap();
        assert_eq!(r.straddled, 2);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / REL_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
