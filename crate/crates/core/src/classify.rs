//! Linear soft-margin SVM, random forest, and ACC/SEN/SPE evaluation.
//!
//! Binary labels are `±1.0`. Feature rows are plain `Vec<f64>` slices.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grading::mix_seed;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("labels must be -1 or +1")]
    BadLabels,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite feature value")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ClassifyError> = std::result::Result<T, E>;

fn check_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(ClassifyError::Empty);
    }
    if x.len() != y.len() {
        return Err(ClassifyError::LengthMismatch(x.len(), y.len()));
    }
    let p = x[0].len();
    for row in x {
        if row.len() != p {
            return Err(ClassifyError::DimensionMismatch {
                expected: p,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFinite);
        }
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(ClassifyError::BadLabels);
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(ClassifyError::SingleClass);
    }
    Ok(p)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sign_label(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

// ---------------------------------------------------------------- SVM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Primal minus dual objective at the returned solution.
    pub duality_gap: f64,
}

impl SvmModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn margins(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter()
            .map(|row| {
                if row.len() != self.w.len() {
                    Err(ClassifyError::DimensionMismatch {
                        expected: self.w.len(),
                        found: row.len(),
                    })
                } else {
                    Ok(self.margin(row))
                }
            })
            .collect()
    }

    /// `sign(w·x + b)` with `sign(0) = +1`.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.margins(x)?.into_iter().map(sign_label).collect())
    }
}

/// `(1/2)||w||² + C Σ max(0, 1 − y(w·x + b))`
pub fn svm_primal_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &yi)| (1.0 - yi * (dot(w, row) + b)).max(0.0))
        .sum();
    0.5 * dot(w, w) + c * hinge
}

/// Bias minimizing the primal for fixed `w`; the optimum sits on a hinge breakpoint.
fn best_bias(f: &[f64], y: &[f64], w2: f64, c: f64) -> (f64, f64) {
    let cost = |b: f64| {
        0.5 * w2
            + c * f
                .iter()
                .zip(y)
                .map(|(fi, yi)| (1.0 - yi * (fi + b)).max(0.0))
                .sum::<f64>()
    };
    let mut best = (0.0, cost(0.0));
    for (fi, yi) in f.iter().zip(y) {
        let b = yi - fi;
        let v = cost(b);
        if v < best.1 {
            best = (b, v);
        }
    }
    best
}

const SMO_TAU: f64 = 1e-12;
const SMO_MAX_ITER: usize = 10_000_000;
pub const SVM_GAP_TOLERANCE: f64 = 1e-4;

struct Smo<'a> {
    k: &'a [Vec<f64>],
    y: &'a [f64],
    c: f64,
    alpha: Vec<f64>,
    /// Gradient of ½αᵀQα − eᵀα.
    grad: Vec<f64>,
    iterations: usize,
}

impl<'a> Smo<'a> {
    fn new(k: &'a [Vec<f64>], y: &'a [f64], c: f64) -> Self {
        let n = y.len();
        Self {
            k,
            y,
            c,
            alpha: vec![0.0; n],
            grad: vec![-1.0; n],
            iterations: 0,
        }
    }

    fn in_up(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] < self.c) || (self.y[t] < 0.0 && self.alpha[t] > 0.0)
    }

    fn in_low(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] > 0.0) || (self.y[t] < 0.0 && self.alpha[t] < self.c)
    }

    /// Second-order working-set selection; `None` once the KKT gap is below `tol`.
    fn select(&self, tol: f64) -> Option<(usize, usize)> {
        let n = self.y.len();
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if self.in_up(t) {
                let v = -self.y[t] * self.grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        if i == usize::MAX {
            return None;
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !self.in_low(t) {
                continue;
            }
            let v = -self.y[t] * self.grad[t];
            gmin = gmin.min(v);
            let bgap = gmax - v;
            if bgap > 0.0 {
                let mut a = self.k[i][i] + self.k[t][t] - 2.0 * self.k[i][t];
                if a <= 0.0 {
                    a = SMO_TAU;
                }
                let obj = -bgap * bgap / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax - gmin < tol || j == usize::MAX {
            None
        } else {
            Some((i, j))
        }
    }

    fn q(&self, a: usize, b: usize) -> f64 {
        self.y[a] * self.y[b] * self.k[a][b]
    }

    fn step(&mut self, i: usize, j: usize) {
        let c = self.c;
        let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        let (gi, gj) = (self.grad[i], self.grad[j]);
        if self.y[i] != self.y[j] {
            let mut quad = self.k[i][i] + self.k[j][j] + 2.0 * self.q(i, j);
            if quad <= 0.0 {
                quad = SMO_TAU;
            }
            let delta = (-gi - gj) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = self.k[i][i] + self.k[j][j] - 2.0 * self.q(i, j);
            if quad <= 0.0 {
                quad = SMO_TAU;
            }
            let delta = (gi - gj) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        self.alpha[i] = ai;
        self.alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..self.y.len() {
            self.grad[t] += self.q(i, t) * di + self.q(j, t) * dj;
        }
        self.iterations += 1;
    }

    fn solve(&mut self, tol: f64) -> bool {
        while self.iterations < SMO_MAX_ITER {
            match self.select(tol) {
                Some((i, j)) => self.step(i, j),
                None => return true,
            }
        }
        false
    }
}

/// Soft-margin linear SVM solved in the dual by SMO; the KKT tolerance is
/// tightened until the duality gap falls below [`SVM_GAP_TOLERANCE`].
pub fn svm_train(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<SvmModel> {
    if !(c.is_finite() && c > 0.0) {
        return Err(ClassifyError::InvalidParams(format!("C must be > 0, got {c}")));
    }
    let p = check_xy(x, y)?;
    let n = x.len();
    let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&x[i], &x[j])).collect()).collect();
    let mut smo = Smo::new(&gram, y, c);
    let mut tol = 1e-3;
    loop {
        let finished = smo.solve(tol);
        let mut w = vec![0.0; p];
        for ((row, &a), &yi) in x.iter().zip(&smo.alpha).zip(y) {
            if a != 0.0 {
                for (wk, xk) in w.iter_mut().zip(row) {
                    *wk += a * yi * xk;
                }
            }
        }
        let w2 = dot(&w, &w);
        let f: Vec<f64> = x.iter().map(|row| dot(&w, row)).collect();
        let (b, primal) = best_bias(&f, y, w2, c);
        let dual = smo.alpha.iter().sum::<f64>() - 0.5 * w2;
        let gap = (primal - dual).max(0.0);
        let good = gap <= SVM_GAP_TOLERANCE;
        if good || !finished || tol < 1e-13 {
            if !good {
                log::warn!("svm did not reach duality gap tolerance (gap {gap:e}, C {c})");
            }
            return Ok(SvmModel {
                w,
                b,
                c,
                converged: good,
                iterations: smo.iterations,
                duality_gap: gap,
            });
        }
        tol /= 10.0;
    }
}

/// `2^i` for `i = −10..=10`.
pub fn svm_c_grid() -> Vec<f64> {
    (-10..=10).map(|i| 2f64.powi(i)).collect()
}

/// Stratified fold index per row, shuffled within each class by `seed`.
pub fn stratified_folds(y: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; y.len()];
    for class in [-1.0, 1.0] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        for k in (1..idx.len()).rev() {
            let r = rng.random_range(0..=k);
            idx.swap(k, r);
        }
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

/// Index of the highest score; ties keep the earliest (smallest C).
pub fn select_best_c(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &(_, acc)) in scores.iter().enumerate() {
        if best.is_none_or(|b| acc > scores[b].1) {
            best = Some(k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best_c: f64,
    /// `(C, mean fold accuracy)` for every grid value.
    pub scores: Vec<(f64, f64)>,
    pub folds: usize,
    pub model: SvmModel,
}

/// Cross-validated choice of C over [`svm_c_grid`], then a refit on all rows.
pub fn svm_grid_search(x: &[Vec<f64>], y: &[f64], folds: usize, seed: u64) -> Result<GridSearch> {
    check_xy(x, y)?;
    if folds < 2 {
        return Err(ClassifyError::InvalidParams("need at least 2 folds".into()));
    }
    let minority = y.iter().filter(|&&v| v > 0.0).count().min(y.iter().filter(|&&v| v < 0.0).count());
    let folds = folds.min(minority);
    let grid = svm_c_grid();
    let mut scores = Vec::with_capacity(grid.len());
    if folds < 2 {
        scores.extend(grid.iter().map(|&c| (c, 0.0)));
    } else {
        let assignment = stratified_folds(y, folds, seed);
        let split: Vec<_> = (0..folds)
            .map(|f| {
                let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (vec![], vec![], vec![], vec![]);
                for i in 0..y.len() {
                    if assignment[i] == f {
                        te_x.push(x[i].clone());
                        te_y.push(y[i]);
                    } else {
                        tr_x.push(x[i].clone());
                        tr_y.push(y[i]);
                    }
                }
                (tr_x, tr_y, te_x, te_y)
            })
            .collect();
        for &c in &grid {
            let mut acc = 0.0;
            for (tr_x, tr_y, te_x, te_y) in &split {
                let m = svm_train(tr_x, tr_y, c)?;
                let pred = m.predict(te_x)?;
                let hits = pred.iter().zip(te_y).filter(|(a, b)| a == b).count();
                acc += hits as f64 / te_y.len() as f64;
            }
            scores.push((c, acc / folds as f64));
        }
    }
    let best = select_best_c(&scores).expect("non-empty grid");
    let best_c = scores[best].0;
    let model = svm_train(x, y, best_c)?;
    Ok(GridSearch {
        best_c,
        scores,
        folds,
        model,
    })
}

// ---------------------------------------------------------------- forest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means ⌈√p⌉.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(ClassifyError::InvalidParams("n_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(ClassifyError::InvalidParams("min_leaf must be >= 1".into()));
        }
        if self.mtry == Some(0) {
            return Err(ClassifyError::InvalidParams("mtry must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: f64,
        positives: usize,
        negatives: usize,
    },
}

/// Nodes stored flat; index 0 is the root. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { label, .. } => return label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub params: ForestParams,
    pub n_features: usize,
    pub seed: u64,
    /// Out-of-bag accuracy over rows with at least one out-of-bag tree.
    pub oob_accuracy: Option<f64>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn majority(pos: usize, neg: usize) -> f64 {
    if pos >= neg {
        1.0
    } else {
        -1.0
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let positives = rows.iter().filter(|&&r| self.y[r] > 0.0).count();
        let negatives = rows.len() - positives;
        self.nodes.push(Node::Leaf {
            label: majority(positives, negatives),
            positives,
            negatives,
        });
        self.nodes.len() - 1
    }

    /// Best Gini split over `mtry` sampled features: `(feature, threshold, weighted impurity)`.
    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let p = self.x[0].len();
        let features = sample(&mut self.rng, p, self.mtry);
        let total_pos = rows.iter().filter(|&&r| self.y[r] > 0.0).count();
        let n = rows.len();
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for feature in features.iter() {
            sorted.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]).then(a.cmp(&b)));
            let mut left_pos = 0;
            for k in 0..n - 1 {
                if self.y[sorted[k]] > 0.0 {
                    left_pos += 1;
                }
                let nl = k + 1;
                let (lo, hi) = (self.x[sorted[k]][feature], self.x[sorted[k + 1]][feature]);
                if lo == hi || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let impurity =
                    (nl as f64 * gini(left_pos, nl) + (n - nl) as f64 * gini(total_pos - left_pos, n - nl)) / n as f64;
                if best.is_none_or(|b| impurity < b.2) {
                    let mid = 0.5 * (lo + hi);
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((feature, threshold, impurity));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let positives = rows.iter().filter(|&&r| self.y[r] > 0.0).count();
        let pure = positives == 0 || positives == rows.len();
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || rows.len() < 2 * self.params.min_leaf {
            return self.leaf(rows);
        }
        let Some((feature, threshold, _)) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            label: 0.0,
            positives: 0,
            negatives: 0,
        });
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn bootstrap(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Trains one tree on a bootstrap sample; returns the tree and its in-bag flags.
fn train_tree(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> (Tree, Vec<bool>) {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = bootstrap(&mut rng, n);
    let mut in_bag = vec![false; n];
    for &r in &rows {
        in_bag[r] = true;
    }
    let mut b = TreeBuilder {
        x,
        y,
        params,
        mtry: params.effective_mtry(x[0].len()),
        rng,
        nodes: Vec::new(),
    };
    b.grow(&rows, 0);
    (Tree { nodes: b.nodes }, in_bag)
}

/// Random forest with per-tree seeds `mix_seed(seed, t)`; identical for any thread count.
pub fn rf_train(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    params.validate()?;
    let p = check_xy(x, y)?;
    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| train_tree(x, y, params, mix_seed(seed, t as u64)))
        .collect();
    let mut votes = vec![(0usize, 0usize); x.len()];
    for (tree, in_bag) in &grown {
        for (i, row) in x.iter().enumerate() {
            if !in_bag[i] {
                if tree.predict(row) > 0.0 {
                    votes[i].0 += 1;
                } else {
                    votes[i].1 += 1;
                }
            }
        }
    }
    let (mut hits, mut counted) = (0, 0);
    for (v, &yi) in votes.iter().zip(y) {
        if v.0 + v.1 > 0 {
            counted += 1;
            if majority(v.0, v.1) == yi {
                hits += 1;
            }
        }
    }
    Ok(ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        params: params.clone(),
        n_features: p,
        seed,
        oob_accuracy: (counted > 0).then(|| hits as f64 / counted as f64),
    })
}

impl ForestModel {
    /// Fraction of trees voting +1 per row.
    pub fn vote_fraction(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter()
            .map(|row| {
                if row.len() != self.n_features {
                    return Err(ClassifyError::DimensionMismatch {
                        expected: self.n_features,
                        found: row.len(),
                    });
                }
                let pos = self.trees.iter().filter(|t| t.predict(row) > 0.0).count();
                Ok(pos as f64 / self.trees.len() as f64)
            })
            .collect()
    }

    /// Majority vote; ties go to +1.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .vote_fraction(x)?
            .into_iter()
            .map(|f| if f >= 0.5 { 1.0 } else { -1.0 })
            .collect())
    }
}

pub fn rf_predict(m: &ForestModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    m.predict(x)
}

pub fn svm_predict(m: &SvmModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    m.predict(x)
}

// ---------------------------------------------------------------- models on disk

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Svm(SvmModel),
    Forest(ForestModel),
}

impl Classifier {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Classifier::Svm(m) => m.predict(x),
            Classifier::Forest(m) => m.predict(x),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: Classifier,
}

pub fn save_model(m: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        model: m.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Classifier> {
    let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(ClassifyError::FormatVersion(file.format_version));
    }
    Ok(file.model)
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub acc: f64,
    /// NaN when there are no positives.
    pub sen: f64,
    /// NaN when there are no negatives.
    pub spe: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
        Self {
            tp,
            fp,
            tn,
            fn_,
            acc: ratio(tp + tn, tp + tn + fp + fn_),
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<Metrics>,
    pub mean: Summary,
    /// Sample standard deviation across runs (0 for a single run).
    pub sd: Summary,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<Metrics>) -> Self {
        let k = runs.len() as f64;
        let stat = |f: fn(&Metrics) -> f64| {
            let m = runs.iter().map(f).sum::<f64>() / k;
            let sd = if runs.len() > 1 {
                (runs.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            (m, sd)
        };
        let (acc, sa) = stat(|r| r.acc);
        let (sen, ss) = stat(|r| r.sen);
        let (spe, sp) = stat(|r| r.spe);
        Self {
            runs,
            mean: Summary { acc, sen, spe },
            sd: Summary {
                acc: sa,
                sen: ss,
                spe: sp,
            },
        }
    }

    /// Confusion counts of the first run.
    pub fn first(&self) -> &Metrics {
        &self.runs[0]
    }
}

/// Confusion counts with `positive` as the positive class.
pub fn evaluate<L: PartialEq>(preds: &[L], truth: &[L], positive: &L) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(ClassifyError::LengthMismatch(preds.len(), truth.len()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, t) in preds.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(EvalReport::from_runs(vec![Metrics::from_counts(tp, fp, tn, fn_)]))
}

/// `runs` forests seeded `mix_seed(master_seed, run)`, each evaluated on the test rows.
#[allow(clippy::too_many_arguments)]
pub fn repeated_rf_eval(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_test: &[Vec<f64>],
    y_test: &[f64],
    params: &ForestParams,
    runs: usize,
    master_seed: u64,
    positive: f64,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(ClassifyError::InvalidParams("runs must be >= 1".into()));
    }
    let mut all = Vec::with_capacity(runs);
    for run in 0..runs {
        let m = rf_train(x_train, y_train, params, mix_seed(master_seed, run as u64))?;
        let pred = m.predict(x_test)?;
        all.push(evaluate(&pred, y_test, &positive)?.runs[0]);
    }
    Ok(EvalReport::from_runs(all))
}

/// Aligned `Method  Classifier  ACC  SEN  SPE` table with percentages.
pub fn format_table(rows: &[(&str, &str, &EvalReport)]) -> String {
    let mw = rows.iter().map(|r| r.0.len()).chain([6]).max().unwrap_or(6);
    let cw = rows.iter().map(|r| r.1.len()).chain([10]).max().unwrap_or(10);
    let mut s = String::new();
    let _ = writeln!(s, "{:<mw$}  {:<cw$}  {:>12}  {:>12}  {:>12}", "Method", "Classifier", "ACC", "SEN", "SPE");
    for (method, clf, rep) in rows {
        // Repeated runs show mean±sd.
        let pct = |m: f64, sd: f64| {
            if rep.runs.len() > 1 {
                format!("{:.1}±{:.1}%", 100.0 * m, 100.0 * sd)
            } else {
                format!("{:.1}%", 100.0 * m)
            }
        };
        let _ = writeln!(
            s,
            "{:<mw$}  {:<cw$}  {:>12}  {:>12}  {:>12}",
            method,
            clf,
            pct(rep.mean.acc, rep.sd.acc),
            pct(rep.mean.sen, rep.sd.sen),
            pct(rep.mean.spe, rep.sd.spe)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.push(vec![
                label * gap + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn symmetric_1d() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = vec![-1.0, 1.0];
        let m = svm_train(&x, &y, 1e3).unwrap();
        assert!((m.w[0] - 1.0).abs() < 1e-6 && m.b.abs() < 1e-6, "{m:?}");
        assert_eq!(m.predict(&x).unwrap(), y);
        assert_eq!(m.predict(&[vec![-m.b / m.w[0]]]).unwrap(), vec![1.0]);
    }

    #[test]
    fn separable_blobs_train_perfectly() {
        let (x, y) = blobs(40, 2.5, 1);
        let m = svm_train(&x, &y, 100.0).unwrap();
        assert!(m.converged);
        assert_eq!(m.predict(&x).unwrap(), y);
        assert!(m.duality_gap <= SVM_GAP_TOLERANCE);
    }

    #[test]
    fn objective_beats_zero() {
        let (x, y) = blobs(30, 0.3, 2);
        for c in [0.01, 1.0, 50.0] {
            let m = svm_train(&x, &y, c).unwrap();
            let at_zero = svm_primal_objective(&x, &y, &[0.0, 0.0], 0.0, c);
            assert!(svm_primal_objective(&x, &y, &m.w, m.b, c) <= at_zero + 1e-12);
        }
    }

    #[test]
    fn margins_are_dot_products() {
        let (x, y) = blobs(12, 1.0, 3);
        let m = svm_train(&x, &y, 1.0).unwrap();
        for (row, got) in x.iter().zip(m.margins(&x).unwrap()) {
            let mut s = m.b;
            for k in 0..row.len() {
                s += m.w[k] * row[k];
            }
            assert!((s - got).abs() < 1e-9);
        }
        assert!(matches!(m.margins(&[vec![1.0]]), Err(ClassifyError::DimensionMismatch { .. })));
    }

    #[test]
    fn svm_input_errors() {
        assert!(matches!(svm_train(&[vec![1.0], vec![2.0]], &[1.0, 1.0], 1.0), Err(ClassifyError::SingleClass)));
        assert!(matches!(svm_train(&[vec![1.0], vec![2.0]], &[1.0, 0.0], 1.0), Err(ClassifyError::BadLabels)));
        assert!(svm_train(&[vec![1.0], vec![2.0]], &[1.0, -1.0], 0.0).is_err());
    }

    #[test]
    fn grid_and_tie_rule() {
        let grid = svm_c_grid();
        assert_eq!(grid.len(), 21);
        assert_eq!((grid[0], grid[10], grid[20]), (2f64.powi(-10), 1.0, 1024.0));
        let scores = vec![(0.5, 0.7), (1.0, 0.9), (2.0, 0.9), (4.0, 0.8)];
        assert_eq!(select_best_c(&scores), Some(1));
    }

    #[test]
    fn grid_search_on_separable() {
        let (x, y) = blobs(30, 3.0, 4);
        let gs = svm_grid_search(&x, &y, 5, 9).unwrap();
        assert_eq!(gs.scores.len(), 21);
        assert!(gs.scores.iter().any(|s| s.1 == 1.0));
        assert_eq!(gs.model.predict(&x).unwrap(), y);
    }

    #[test]
    fn stratified_folds_balance() {
        let y: Vec<f64> = (0..23).map(|i| if i < 10 { 1.0 } else { -1.0 }).collect();
        let f = stratified_folds(&y, 5, 1);
        for k in 0..5 {
            let pos = (0..23).filter(|&i| f[i] == k && y[i] > 0.0).count();
            assert_eq!(pos, 2);
        }
        assert_eq!(f, stratified_folds(&y, 5, 1));
    }

    #[test]
    fn perfect_split_root_threshold() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 9.5]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] > 0.0 { 1.0 } else { -1.0 }).collect();
        let params = ForestParams {
            n_trees: 50,
            ..Default::default()
        };
        let m = rf_train(&x, &y, &params, 7).unwrap();
        for (t, tree) in m.trees.iter().enumerate() {
            let in_bag = bootstrap(&mut ChaCha8Rng::seed_from_u64(mix_seed(7, t as u64)), x.len());
            let max_neg = in_bag.iter().map(|&r| x[r][0]).filter(|&v| v < 0.0).fold(f64::MIN, f64::max);
            let min_pos = in_bag.iter().map(|&r| x[r][0]).filter(|&v| v > 0.0).fold(f64::MAX, f64::min);
            match tree.root() {
                Node::Split { threshold, .. } => assert!(*threshold > max_neg && *threshold < min_pos),
                Node::Leaf { positives, negatives, .. } => assert!(*positives == 0 || *negatives == 0),
            }
        }
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn pure_node_is_leaf() {
        let params = ForestParams::default();
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![1.0, 1.0, 1.0];
        let mut b = TreeBuilder {
            x: &x,
            y: &y,
            params: &params,
            mtry: 1,
            rng: ChaCha8Rng::seed_from_u64(0),
            nodes: vec![],
        };
        b.grow(&[0, 1, 2], 0);
        assert_eq!(
            b.nodes,
            vec![Node::Leaf {
                label: 1.0,
                positives: 3,
                negatives: 0
            }]
        );
    }

    #[test]
    fn forest_determinism_and_oob() {
        let (x, y) = blobs(40, 3.0, 5);
        let params = ForestParams {
            n_trees: 60,
            ..Default::default()
        };
        let a = rf_train(&x, &y, &params, 11).unwrap();
        let b = rf_train(&x, &y, &params, 11).unwrap();
        let c = rf_train(&x, &y, &params, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.trees, c.trees);
        assert!(a.oob_accuracy.unwrap() >= 0.9);
    }

    #[test]
    fn vote_tie_goes_positive() {
        let leaf = |label| Tree {
            nodes: vec![Node::Leaf {
                label,
                positives: 0,
                negatives: 0,
            }],
        };
        let m = ForestModel {
            trees: vec![leaf(1.0), leaf(-1.0)],
            params: ForestParams::default(),
            n_features: 1,
            seed: 0,
            oob_accuracy: None,
        };
        assert_eq!(m.predict(&[vec![0.0]]).unwrap(), vec![1.0]);
        let unanimous = ForestModel {
            trees: vec![leaf(-1.0); 3],
            ..m
        };
        assert_eq!(unanimous.predict(&[vec![0.0]]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn metrics_arithmetic() {
        let m = Metrics::from_counts(82, 32, 68, 18);
        assert!((m.acc - 0.75).abs() < 1e-12);
        assert!((m.sen - 0.82).abs() < 1e-12);
        assert!((m.spe - 0.68).abs() < 1e-12);
        let rep = evaluate(&["p", "s", "p"], &["p", "s", "p"], &"p").unwrap();
        assert_eq!((rep.mean.acc, rep.mean.sen, rep.mean.spe), (1.0, 1.0, 1.0));
        assert!(evaluate(&[1], &[1, 2], &1).is_err());
    }

    #[test]
    fn repeated_runs_summary() {
        let runs = vec![Metrics::from_counts(3, 1, 3, 1); 4];
        let rep = EvalReport::from_runs(runs);
        assert_eq!(rep.mean.acc, 0.75);
        assert_eq!(rep.sd.acc, 0.0);
        let (x, y) = blobs(20, 3.0, 6);
        let params = ForestParams {
            n_trees: 20,
            ..Default::default()
        };
        let one = repeated_rf_eval(&x, &y, &x, &y, &params, 1, 5, -1.0).unwrap();
        let direct = rf_train(&x, &y, &params, mix_seed(5, 0)).unwrap();
        let pred = direct.predict(&x).unwrap();
        assert_eq!(one.runs[0], evaluate(&pred, &y, &-1.0).unwrap().runs[0]);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = blobs(10, 3.0, 7);
        let svm = Classifier::Svm(svm_train(&x, &y, 1.0).unwrap());
        let p = dir.path().join("m.json");
        save_model(&svm, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), svm);
        let rf = Classifier::Forest(
            rf_train(
                &x,
                &y,
                &ForestParams {
                    n_trees: 3,
                    ..Default::default()
                },
                1,
            )
            .unwrap(),
        );
        save_model(&rf, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), rf);
    }

    #[test]
    fn table_layout() {
        let rep = EvalReport::from_runs(vec![Metrics::from_counts(82, 32, 68, 18)]);
        let t = format_table(&[("GBSG", "RF", &rep)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[1].contains("75.0%") && lines[1].contains("82.0%") && lines[1].contains("68.0%"));
    }
}
