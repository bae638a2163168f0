//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::io::Write;

use gbsg_core::grading::Status;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a line past the test harness's output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

pub fn verdict(criterion: &str, ok: bool, detail: &str) {
    report(&format!("[acceptance] {criterion}: {} ({detail})", if ok { "PASS" } else { "FAIL" }));
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain template record for the brute-force scan.
pub struct RefTemplate {
    pub data: Vec<f32>,
    pub status: Status,
}

fn idx(d: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + d[0] * (j + d[1] * k)
}

/// Patch values around `c`, x fastest.
pub fn ref_patch(data: &[f32], d: [usize; 3], c: [usize; 3], r: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for k in c[2] - r..=c[2] + r {
        for j in c[1] - r..=c[1] + r {
            for i in c[0] - r..=c[0] + r {
                out.push(data[idx(d, i, j, k)]);
            }
        }
    }
    out
}

pub fn ref_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s
}

/// `(dist2, template, center)` of the `k` best candidates, by exhaustive scan
/// of the window clipped to the template interior.
pub fn brute_knn(
    query: &[f32],
    c: [usize; 3],
    d: [usize; 3],
    templates: &[RefTemplate],
    r: usize,
    s: usize,
    k: usize,
) -> Vec<(f64, usize, usize)> {
    let lo: Vec<usize> = (0..3).map(|a| c[a].saturating_sub(s).max(r)).collect();
    let hi: Vec<usize> = (0..3).map(|a| (c[a] + s).min(d[a] - 1 - r)).collect();
    let mut all = Vec::new();
    for (t, tpl) in templates.iter().enumerate() {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let dist = ref_dist(query, &ref_patch(&tpl.data, d, [x, y, z], r));
                    all.push((dist, t, idx(d, x, y, z)));
                }
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.truncate(k);
    all
}

/// Reference grade map: `None` outside the gradable set.
pub fn ref_grade_volume(
    test: &[f32],
    labels: &[u32],
    d: [usize; 3],
    templates: &[RefTemplate],
    r: usize,
    s: usize,
    k: usize,
    eps: f64,
) -> Vec<Option<f64>> {
    let mut out = vec![None; test.len()];
    for z in r..d[2].saturating_sub(r) {
        for y in r..d[1].saturating_sub(r) {
            for x in r..d[0].saturating_sub(r) {
                let v = idx(d, x, y, z);
                if labels[v] == 0 {
                    continue;
                }
                let q = ref_patch(test, d, [x, y, z], r);
                let nn = brute_knn(&q, [x, y, z], d, templates, r, s, k);
                let dmin = nn.iter().map(|n| n.0).fold(f64::INFINITY, f64::min);
                let (mut num, mut den) = (0.0, 0.0);
                for (dist, t, _) in &nn {
                    let w = (-dist / (dmin + eps)).exp();
                    num += w * templates[*t].status.value();
                    den += w;
                }
                out[v] = Some(num / den);
            }
        }
    }
    out
}

/// Piecewise-uniform density of `masses` on `[-1, 1]` integrated over the target bins.
pub fn ref_rebin(masses: &[f64], bins: usize) -> Vec<f64> {
    let src = masses.len();
    let (ws, wt) = (2.0 / src as f64, 2.0 / bins as f64);
    (0..bins)
        .map(|j| {
            let (lo, hi) = (-1.0 + j as f64 * wt, -1.0 + (j + 1) as f64 * wt);
            masses
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let (a, b) = (-1.0 + i as f64 * ws, -1.0 + (i + 1) as f64 * ws);
                    let overlap = (hi.min(b) - lo.max(a)).max(0.0);
                    m * overlap / ws
                })
                .sum()
        })
        .collect()
}

/// Optimal transport cost between two histograms on a common grid, solved as an LP.
pub fn transport_lp(a: &[f64], b: &[f64]) -> f64 {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let n = a.len();
    let w = 2.0 / n as f64;
    let center = |i: usize| -1.0 + (i as f64 + 0.5) * w;
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let mut vars = vec![vec![]; n];
    for (i, row) in vars.iter_mut().enumerate() {
        for j in 0..n {
            row.push(p.add_var((center(i) - center(j)).abs(), (0.0, f64::INFINITY)));
        }
    }
    for i in 0..n {
        let terms: Vec<_> = (0..n).map(|j| (vars[i][j], 1.0)).collect();
        p.add_constraint(&terms, ComparisonOp::Eq, a[i]);
    }
    for j in 0..n {
        let terms: Vec<_> = (0..n).map(|i| (vars[i][j], 1.0)).collect();
        p.add_constraint(&terms, ComparisonOp::Eq, b[j]);
    }
    p.solve().expect("feasible transport problem").objective()
}

/// Random normalized histogram with `bins` bins (some bins may be empty).
pub fn random_masses(rng: &mut ChaCha8Rng, bins: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..bins)
            .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random::<f64>() })
            .collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 {
            return raw.iter().map(|v| v / sum).collect();
        }
    }
}

/// Optimal dual objective of the soft-margin SVM by enumerating which
/// multipliers sit at 0, at C, or strictly inside, and solving the
/// equality-constrained KKT system on the free set.
pub fn svm_dual_oracle(x: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let n = x.len();
    assert!(n <= 10);
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>());
    let dual = |alpha: &DVector<f64>| alpha.sum() - 0.5 * (alpha.transpose() * &q * alpha)[(0, 0)];
    let mut best = f64::NEG_INFINITY;
    let mut state = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha = DVector::from_fn(n, |i, _| if state[i] == 1 { c } else { 0.0 });
        let m = free.len();
        let mut ok = true;
        if m > 0 {
            // [Q_FF  y_F] [a_F]   [1 - Q_FB a_B]
            // [y_F'   0 ] [nu ] = [   -y_B' a_B ]
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (ri, &i) in free.iter().enumerate() {
                for (rj, &j) in free.iter().enumerate() {
                    a[(ri, rj)] = q[(i, j)];
                }
                a[(ri, m)] = y[i];
                a[(m, ri)] = y[i];
                rhs[ri] = 1.0 - (0..n).filter(|t| state[*t] == 1).map(|t| q[(i, t)] * c).sum::<f64>();
            }
            rhs[m] = -(0..n).filter(|t| state[*t] == 1).map(|t| y[t] * c).sum::<f64>();
            let sol = a.clone().svd(true, true).solve(&rhs, 1e-12).expect("svd solve");
            if (&a * &sol - &rhs).norm() > 1e-8 {
                ok = false;
            }
            for (ri, &i) in free.iter().enumerate() {
                alpha[i] = sol[ri];
            }
        }
        let sum_y: f64 = (0..n).map(|i| alpha[i] * y[i]).sum();
        if ok && sum_y.abs() < 1e-9 && alpha.iter().all(|&v| v >= -1e-12 && v <= c + 1e-12) {
            best = best.max(dual(&alpha));
        }
        // next assignment in base 3
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            state[pos] += 1;
            if state[pos] == 3 {
                state[pos] = 0;
                pos += 1;
            } else {
                break;
            }
        }
    }
}
