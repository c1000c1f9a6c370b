//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Minimises `c·x` subject to `A x = b`, `x ≥ 0` with a dense two-phase
/// simplex using Bland's rule. `b` must be non-negative.
pub fn simplex_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), c.len());
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut t, &mut basis, &phase1, n + m);
    // Drive zero-level artificials out of the basis; drop redundant rows.
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= n {
            match (0..n).find(|&j| t[i][j].abs() > 1e-9) {
                Some(j) => pivot(&mut t, &mut basis, i, j),
                None => {
                    t.remove(i);
                    basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }
    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat_n(0.0, m));
    run(&mut t, &mut basis, &cost, n);
    basis.iter().zip(&t).map(|(&j, row)| cost[j] * row[width - 1]).sum()
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, col: usize) {
    let p = t[r][col];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pr = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r && row[col] != 0.0 {
            let f = row[col];
            row.iter_mut().zip(&pr).for_each(|(v, p)| *v -= f * p);
        }
    }
    basis[r] = col;
}

fn run(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
    let rhs = t.first().map_or(0, |r| r.len() - 1);
    loop {
        let entering = (0..allowed).find(|&j| {
            let reduced = cost[j] - basis.iter().zip(t.iter()).map(|(&b, row)| cost[b] * row[j]).sum::<f64>();
            reduced < -1e-12
        });
        let Some(j) = entering else { return };
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, row) in t.iter().enumerate() {
            if row[j] > 1e-12 {
                let ratio = row[rhs] / row[j];
                let better = match best {
                    None => true,
                    Some((r, _, b)) => ratio < r - 1e-15 || (ratio <= r + 1e-15 && basis[i] < b),
                };
                if better {
                    best = Some((ratio, i, basis[i]));
                }
            }
        }
        let Some((_, r, _)) = best else { panic!("unbounded LP") };
        pivot(t, basis, r, j);
    }
}

/// Optimal cost of the balanced transport problem with the given capacities.
pub fn transport_lp(cost: &[f64], rows: usize, cols: usize, source: &[f64], sink: &[f64]) -> f64 {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..rows {
        let mut r = vec![0.0; rows * cols];
        r[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v = 1.0);
        a.push(r);
        b.push(source[i]);
    }
    for j in 0..cols {
        let mut r = vec![0.0; rows * cols];
        (0..rows).for_each(|i| r[i * cols + j] = 1.0);
        a.push(r);
        b.push(sink[j]);
    }
    simplex_min(cost, &a, &b)
}
