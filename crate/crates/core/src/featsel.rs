//! Age residualization, z-scoring, and elastic-net feature selection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatselError {
    #[error("need at least {required} subjects, got {found}")]
    TooFewSubjects { required: usize, found: usize },
    #[error("ages have zero variance")]
    ConstantAges,
    #[error("no feature selected (lambda1 = {0})")]
    NoFeatureSelected(f64),
    #[error("selection mask is empty")]
    EmptyMask,
    #[error("labels must be -1 or +1 and contain both classes")]
    BadLabels,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid elastic-net parameters: {0}")]
    InvalidParams(String),
    #[error("malformed feature table: {0}")]
    Malformed(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatselError> = std::result::Result<T, E>;

/// Dense row-major subjects × features table with names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub col_names: Vec<String>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, col_names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != row_ids.len() * col_names.len() {
            return Err(FeatselError::DimensionMismatch(format!(
                "{} values for {}x{}",
                data.len(),
                row_ids.len(),
                col_names.len()
            )));
        }
        Ok(Self {
            row_ids,
            col_names,
            data,
        })
    }

    pub fn from_rows(row_ids: Vec<String>, col_names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != col_names.len()) {
            return Err(FeatselError::DimensionMismatch(format!(
                "row of length {} for {} columns",
                r.len(),
                col_names.len()
            )));
        }
        Self::new(row_ids, col_names, rows.concat())
    }

    pub fn nrows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.col_names.len()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.ncols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let p = self.ncols();
        self.data[r * p + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let p = self.ncols();
        &self.data[r * p..(r + 1) * p]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.nrows()).map(|r| self.get(r, c)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.ncols()).map(|c| self.column(c)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.nrows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(FeatselError::NonFinite {
                row: i / self.ncols().max(1),
                col: i % self.ncols().max(1),
            }),
            None => Ok(()),
        }
    }

    /// Rows at the given positions, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            col_names: self.col_names.clone(),
            data: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
        }
    }

    /// CSV with header `subject_id,<col names>`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(std::iter::once("subject_id").chain(self.col_names.iter().map(String::as_str)))?;
        for r in 0..self.nrows() {
            let mut rec = vec![self.row_ids[r].clone()];
            rec.extend(self.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.clone();
        if header.get(0) != Some("subject_id") {
            return Err(FeatselError::Malformed("first column must be subject_id".into()));
        }
        let col_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut row_ids = Vec::new();
        let mut data = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            row_ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|_| FeatselError::Malformed(format!("bad number `{field}`")))?,
                );
            }
        }
        Self::new(row_ids, col_names, data)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-feature linear age trend fitted on CN subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeModel {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
    pub cn_mean: Vec<f64>,
}

/// Ordinary least squares of every feature against age.
pub fn fit_age_correction(x_cn: &FeatureMatrix, ages: &[f64]) -> Result<AgeModel> {
    let n = x_cn.nrows();
    if ages.len() != n {
        return Err(FeatselError::DimensionMismatch(format!("{} ages for {n} rows", ages.len())));
    }
    if n < 3 {
        return Err(FeatselError::TooFewSubjects { required: 3, found: n });
    }
    x_cn.check_finite()?;
    let age_mean = mean(ages);
    let sxx: f64 = ages.iter().map(|a| (a - age_mean).powi(2)).sum();
    if !(sxx > 1e-12 * age_mean.abs().max(1.0).powi(2)) {
        return Err(FeatselError::ConstantAges);
    }
    let p = x_cn.ncols();
    let mut model = AgeModel {
        intercept: Vec::with_capacity(p),
        slope: Vec::with_capacity(p),
        cn_mean: Vec::with_capacity(p),
    };
    for c in 0..p {
        let col = x_cn.column(c);
        let fm = mean(&col);
        let sxy: f64 = ages.iter().zip(&col).map(|(a, f)| (a - age_mean) * (f - fm)).sum();
        let slope = sxy / sxx;
        model.slope.push(slope);
        model.intercept.push(fm - slope * age_mean);
        model.cn_mean.push(fm);
    }
    Ok(model)
}

/// `x' = x − (β0 + β1·age) + cn_mean` per feature.
pub fn apply_age_correction(x: &FeatureMatrix, ages: &[f64], m: &AgeModel) -> Result<FeatureMatrix> {
    if ages.len() != x.nrows() || m.slope.len() != x.ncols() {
        return Err(FeatselError::DimensionMismatch("age model vs matrix".into()));
    }
    let mut out = x.clone();
    for (r, &age) in ages.iter().enumerate() {
        for c in 0..x.ncols() {
            let v = x.get(r, c) - (m.intercept[c] + m.slope[c] * age) + m.cn_mean[c];
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Features whose training sd falls below this are treated as constant.
pub const CONSTANT_SD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreModel {
    pub mean: Vec<f64>,
    /// Sample standard deviation (n − 1 denominator).
    pub sd: Vec<f64>,
}

impl ZScoreModel {
    pub fn is_constant(&self, c: usize) -> bool {
        self.sd[c] < CONSTANT_SD
    }
}

pub fn zscore_fit(x_train: &FeatureMatrix) -> Result<ZScoreModel> {
    let n = x_train.nrows();
    if n < 2 {
        return Err(FeatselError::TooFewSubjects { required: 2, found: n });
    }
    x_train.check_finite()?;
    let mut model = ZScoreModel {
        mean: Vec::new(),
        sd: Vec::new(),
    };
    for c in 0..x_train.ncols() {
        let col = x_train.column(c);
        let m = mean(&col);
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        model.mean.push(m);
        model.sd.push(var.sqrt());
    }
    Ok(model)
}

/// `(x − μ) / s`; constant features map to 0.
pub fn zscore_apply(x: &FeatureMatrix, m: &ZScoreModel) -> Result<FeatureMatrix> {
    if m.mean.len() != x.ncols() {
        return Err(FeatselError::DimensionMismatch("z-score model vs matrix".into()));
    }
    let mut out = x.clone();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let v = if m.is_constant(c) {
                0.0
            } else {
                (x.get(r, c) - m.mean[c]) / m.sd[c]
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum L1Penalty {
    Fixed(f64),
    /// Search λ1 so that the number of nonzero coefficients lands within ±10%.
    TargetNonzeros(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetParams {
    pub l1: L1Penalty,
    pub lambda2: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for ElasticNetParams {
    fn default() -> Self {
        Self {
            l1: L1Penalty::TargetNonzeros(50),
            lambda2: 1.0,
            max_iterations: 10_000,
            tolerance: 1e-9,
        }
    }
}

impl ElasticNetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FeatselError::InvalidParams(m.to_string()));
        match self.l1 {
            L1Penalty::Fixed(l) if !(l.is_finite() && l >= 0.0) => return bad("lambda1 must be >= 0"),
            L1Penalty::TargetNonzeros(0) => return bad("target_nonzeros must be >= 1"),
            _ => {}
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return bad("lambda2 must be >= 0");
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return bad("tolerance must be > 0");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        Ok(())
    }
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Column-major design plus targets for coordinate descent.
#[derive(Debug, Clone)]
pub struct Design {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// (1/n) ||x_j||²
    col_sq: Vec<f64>,
}

impl Design {
    pub fn new(x: &FeatureMatrix, y: &[f64]) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(FeatselError::DimensionMismatch(format!("{} labels for {} rows", y.len(), x.nrows())));
        }
        x.check_finite()?;
        Ok(Self::from_columns(x.columns(), y.to_vec()))
    }

    pub fn from_columns(cols: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        let n = y.len() as f64;
        let col_sq = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect();
        Self { cols, y, col_sq }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.cols.len()
    }

    fn residual(&self, beta: &[f64]) -> Vec<f64> {
        let mut r = self.y.clone();
        for (c, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for (ri, xi) in r.iter_mut().zip(c) {
                    *ri -= xi * b;
                }
            }
        }
        r
    }

    /// `(1/2n)||y − Xβ||² + λ1||β||₁ + (λ2/2)||β||²`
    pub fn objective(&self, beta: &[f64], lambda1: f64, lambda2: f64) -> f64 {
        let r = self.residual(beta);
        let loss = r.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.n() as f64);
        loss + lambda1 * beta.iter().map(|b| b.abs()).sum::<f64>()
            + 0.5 * lambda2 * beta.iter().map(|b| b * b).sum::<f64>()
    }

    /// Largest violation of the subgradient optimality conditions at `beta`.
    pub fn kkt_residual(&self, beta: &[f64], lambda1: f64, lambda2: f64) -> f64 {
        let r = self.residual(beta);
        let n = self.n() as f64;
        self.cols
            .iter()
            .zip(beta)
            .map(|(c, &b)| {
                let g = -c.iter().zip(&r).map(|(x, ri)| x * ri).sum::<f64>() / n + lambda2 * b;
                if b != 0.0 {
                    (g + lambda1 * b.signum()).abs()
                } else {
                    (g.abs() - lambda1).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Smallest λ1 for which β = 0 is optimal: max_j |x_jᵀy| / n.
    pub fn lambda_max(&self) -> f64 {
        let n = self.n() as f64;
        self.cols
            .iter()
            .map(|c| (c.iter().zip(&self.y).map(|(x, y)| x * y).sum::<f64>() / n).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetFit {
    pub coefficients: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each sweep (index 0 is the starting point).
    pub objective_history: Vec<f64>,
}

impl ElasticNetFit {
    pub fn nonzeros(&self) -> usize {
        self.coefficients.iter().filter(|&&b| b != 0.0).count()
    }
}

/// Cyclic coordinate descent in column order; stops when the largest
/// coefficient change of a sweep drops below `tolerance`.
pub fn coordinate_descent(
    design: &Design,
    lambda1: f64,
    lambda2: f64,
    warm: Option<&[f64]>,
    max_iterations: usize,
    tolerance: f64,
) -> ElasticNetFit {
    let n = design.n() as f64;
    let mut beta = warm.map_or_else(|| vec![0.0; design.p()], <[f64]>::to_vec);
    let mut r = design.residual(&beta);
    let mut history = vec![design.objective(&beta, lambda1, lambda2)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let mut max_change = 0.0f64;
        for (j, col) in design.cols.iter().enumerate() {
            let cs = design.col_sq[j];
            if cs == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let old = beta[j];
            let rho = col.iter().zip(&r).map(|(x, ri)| x * ri).sum::<f64>() / n + cs * old;
            let new = soft_threshold(rho, lambda1) / (cs + lambda2);
            let delta = new - old;
            if delta != 0.0 {
                for (ri, xi) in r.iter_mut().zip(col) {
                    *ri -= xi * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        history.push(design.objective(&beta, lambda1, lambda2));
        if max_change < tolerance {
            converged = true;
            break;
        }
    }
    ElasticNetFit {
        coefficients: beta,
        lambda1,
        lambda2,
        iterations,
        converged,
        objective_history: history,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    pub coefficients: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub converged: bool,
    pub iterations: usize,
    /// False when a nonzero target could not be reached within ±10%.
    pub target_met: bool,
}

impl SelectionMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Writes `feature,coefficient` lines for the selected features.
    pub fn write(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("feature,coefficient\n");
        for ((name, &s), c) in names.iter().zip(&self.selected).zip(&self.coefficients) {
            if s {
                out.push_str(&format!("{name},{c}\n"));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a selection file back into a mask over `names`.
    pub fn read(names: &[String], path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("feature,coefficient") {
            return Err(FeatselError::Malformed("selection header".into()));
        }
        let mut selected = vec![false; names.len()];
        let mut coefficients = vec![0.0; names.len()];
        for line in lines.filter(|l| !l.is_empty()) {
            let (name, coef) = line
                .rsplit_once(',')
                .ok_or_else(|| FeatselError::Malformed(line.to_string()))?;
            let j = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| FeatselError::Malformed(format!("unknown feature `{name}`")))?;
            selected[j] = true;
            coefficients[j] = coef.parse().map_err(|_| FeatselError::Malformed(line.to_string()))?;
        }
        Ok(Self {
            selected,
            coefficients,
            lambda1: f64::NAN,
            lambda2: f64::NAN,
            converged: true,
            iterations: 0,
            target_met: true,
        })
    }
}

fn check_labels(y: &[f64]) -> Result<()> {
    let ok = y.iter().all(|&v| v == 1.0 || v == -1.0)
        && y.contains(&1.0)
        && y.contains(&-1.0);
    if ok {
        Ok(())
    } else {
        Err(FeatselError::BadLabels)
    }
}

fn mask_from(fit: &ElasticNetFit, target_met: bool) -> SelectionMask {
    SelectionMask {
        selected: fit.coefficients.iter().map(|&b| b != 0.0).collect(),
        coefficients: fit.coefficients.clone(),
        lambda1: fit.lambda1,
        lambda2: fit.lambda2,
        converged: fit.converged,
        iterations: fit.iterations,
        target_met,
    }
}

/// Ratio between the smallest and largest λ1 explored by the target search.
const LAMBDA_PATH_RATIO: f64 = 1e-4;
const LAMBDA_BISECTIONS: usize = 60;

/// Elastic-net fit on ±1 labels; the mask holds the nonzero coefficients.
pub fn elastic_net_fit(x: &FeatureMatrix, y: &[f64], params: &ElasticNetParams) -> Result<SelectionMask> {
    params.validate()?;
    check_labels(y)?;
    let design = Design::new(x, y)?;
    let run = |l1: f64, warm: Option<&[f64]>| {
        let fit = coordinate_descent(&design, l1, params.lambda2, warm, params.max_iterations, params.tolerance);
        if !fit.converged {
            log::warn!("elastic net did not converge at lambda1={l1} after {} sweeps", fit.iterations);
        }
        fit
    };
    match params.l1 {
        L1Penalty::Fixed(l1) => {
            let fit = run(l1, None);
            if fit.nonzeros() == 0 {
                return Err(FeatselError::NoFeatureSelected(l1));
            }
            Ok(mask_from(&fit, true))
        }
        L1Penalty::TargetNonzeros(target) => {
            let lmax = design.lambda_max();
            if lmax == 0.0 {
                return Err(FeatselError::NoFeatureSelected(0.0));
            }
            let band = (0.9 * target as f64, 1.1 * target as f64);
            let in_band = |k: usize| (k as f64) >= band.0 && (k as f64) <= band.1;
            let (mut lo, mut hi) = (lmax * LAMBDA_PATH_RATIO, lmax);
            let dense = run(lo, None);
            if (dense.nonzeros() as f64) < band.0 || in_band(dense.nonzeros()) {
                // Even the smallest λ1 cannot reach the band (or already sits in it).
                let met = in_band(dense.nonzeros());
                if dense.nonzeros() == 0 {
                    return Err(FeatselError::NoFeatureSelected(lo));
                }
                return Ok(mask_from(&dense, met));
            }
            let mut best = dense;
            let mut warm = best.coefficients.clone();
            for _ in 0..LAMBDA_BISECTIONS {
                let mid = (lo * hi).sqrt();
                let fit = run(mid, Some(&warm));
                let k = fit.nonzeros();
                let closer = (k as f64 - target as f64).abs() < (best.nonzeros() as f64 - target as f64).abs();
                if k > 0 && closer {
                    best = fit.clone();
                }
                if in_band(k) {
                    return Ok(mask_from(&fit, true));
                }
                if (k as f64) > band.1 {
                    lo = mid;
                    warm = fit.coefficients;
                } else {
                    hi = mid;
                }
            }
            Ok(mask_from(&best, false))
        }
    }
}

/// Columns flagged in `mask`, in their original order.
pub fn select_features(x: &FeatureMatrix, mask: &[bool]) -> Result<FeatureMatrix> {
    if mask.len() != x.ncols() {
        return Err(FeatselError::DimensionMismatch(format!("mask of {} for {} columns", mask.len(), x.ncols())));
    }
    let keep: Vec<usize> = (0..x.ncols()).filter(|&c| mask[c]).collect();
    if keep.is_empty() {
        return Err(FeatselError::EmptyMask);
    }
    let data = (0..x.nrows())
        .flat_map(|r| keep.iter().map(move |&c| x.get(r, c)))
        .collect();
    FeatureMatrix::new(
        x.row_ids.clone(),
        keep.iter().map(|&c| x.col_names[c].clone()).collect(),
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        let p = rows[0].len();
        FeatureMatrix::from_rows(
            (0..rows.len()).map(|i| format!("s{i}")).collect(),
            (0..p).map(|j| format!("f{j}")).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn age_fit_on_exact_line() {
        let ages = [60.0, 65.0, 70.0, 80.0];
        let x = matrix(&ages.iter().map(|a| vec![2.0 * a, 5.0]).collect::<Vec<_>>());
        let m = fit_age_correction(&x, &ages).unwrap();
        assert!((m.slope[0] - 2.0).abs() < 1e-12);
        assert!(m.intercept[0].abs() < 1e-9);
        assert_eq!(m.slope[1], 0.0);
        assert_eq!(m.intercept[1], 5.0);
        let corrected = apply_age_correction(&x, &ages, &m).unwrap();
        for r in 0..4 {
            assert!((corrected.get(r, 0) - m.cn_mean[0]).abs() < 1e-9);
            assert_eq!(corrected.get(r, 1), 5.0);
        }
    }

    #[test]
    fn age_fit_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ages: Vec<f64> = (0..25).map(|_| rng.random_range(55.0..90.0)).collect();
        let x = matrix(
            &ages
                .iter()
                .map(|a| vec![0.3 - 0.01 * a + rng.random_range(-0.05..0.05)])
                .collect::<Vec<_>>(),
        );
        let m = fit_age_correction(&x, &ages).unwrap();
        // [n Σa; Σa Σa²] [b0; b1] = [Σf; Σaf]
        let n = ages.len() as f64;
        let (sa, saa) = (ages.iter().sum::<f64>(), ages.iter().map(|a| a * a).sum::<f64>());
        let f = x.column(0);
        let (sf, saf) = (f.iter().sum::<f64>(), ages.iter().zip(&f).map(|(a, v)| a * v).sum::<f64>());
        let det = n * saa - sa * sa;
        let b0 = (saa * sf - sa * saf) / det;
        let b1 = (n * saf - sa * sf) / det;
        assert!((m.intercept[0] - b0).abs() < 1e-9);
        assert!((m.slope[0] - b1).abs() < 1e-9);
    }

    #[test]
    fn age_fit_errors() {
        let x = matrix(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(matches!(
            fit_age_correction(&x, &[70.0, 70.0, 70.0]),
            Err(FeatselError::ConstantAges)
        ));
        let two = matrix(&[vec![1.0], vec![2.0]]);
        assert!(matches!(
            fit_age_correction(&two, &[60.0, 70.0]),
            Err(FeatselError::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn residualization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ages: Vec<f64> = (0..30).map(|_| rng.random_range(60.0..85.0)).collect();
        let x = matrix(
            &ages
                .iter()
                .map(|a| vec![a * 0.1 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect::<Vec<_>>(),
        );
        let m = fit_age_correction(&x, &ages).unwrap();
        let once = apply_age_correction(&x, &ages, &m).unwrap();
        let m2 = fit_age_correction(&once, &ages).unwrap();
        let twice = apply_age_correction(&once, &ages, &m2).unwrap();
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                assert!((once.get(r, c) - twice.get(r, c)).abs() < 1e-9);
            }
        }
        assert!(m2.slope.iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn zscore_examples() {
        let x = matrix(&[vec![1.0, 4.0], vec![2.0, 4.0], vec![3.0, 4.0]]);
        let m = zscore_fit(&x).unwrap();
        assert_eq!((m.mean[0], m.sd[0]), (2.0, 1.0));
        assert!(m.is_constant(1));
        let z = zscore_apply(&x, &m).unwrap();
        assert_eq!(z.column(0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(z.column(1), vec![0.0; 3]);
        assert!(zscore_fit(&matrix(&[vec![1.0]])).is_err());
    }

    #[test]
    fn zscored_training_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..17).map(|_| (0..5).map(|_| rng.random_range(-3.0..7.0)).collect()).collect();
        let x = matrix(&rows);
        let z = zscore_apply(&x, &zscore_fit(&x).unwrap()).unwrap();
        for c in 0..5 {
            let col = z.column(c);
            let m = mean(&col);
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        }
    }

    /// n × p matrix with (1/n) XᵀX = I built from scaled Hadamard rows.
    fn scaled_orthogonal(n: usize, p: usize) -> Vec<Vec<f64>> {
        // Sylvester Hadamard of order n (power of two).
        let mut h = vec![vec![1.0f64]];
        while h.len() < n {
            let m = h.len();
            let mut next = vec![vec![0.0; 2 * m]; 2 * m];
            for i in 0..m {
                for j in 0..m {
                    next[i][j] = h[i][j];
                    next[i][j + m] = h[i][j];
                    next[i + m][j] = h[i][j];
                    next[i + m][j + m] = -h[i][j];
                }
            }
            h = next;
        }
        (0..n).map(|i| h[i][1..=p].to_vec()).collect()
    }

    #[test]
    fn orthogonal_design_closed_form() {
        let (n, p) = (16, 6);
        let rows = scaled_orthogonal(n, p);
        let x = matrix(&rows);
        let y: Vec<f64> = (0..n).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { -1.0 }).collect();
        let design = Design::new(&x, &y).unwrap();
        for (l1, l2) in [(0.0, 0.0), (0.05, 0.0), (0.1, 1.0), (0.02, 0.3)] {
            let fit = coordinate_descent(&design, l1, l2, None, 1000, 1e-14);
            for j in 0..p {
                let xty: f64 = (0..n).map(|i| rows[i][j] * y[i]).sum::<f64>() / n as f64;
                let expect = soft_threshold(xty, l1) / (1.0 + l2);
                assert!((fit.coefficients[j] - expect).abs() < 1e-8, "{l1} {l2} {j}");
            }
        }
    }

    #[test]
    fn orthonormal_ols() {
        // XᵀX = I: OLS coefficients are Xᵀy.
        let (n, p) = (8, 3);
        let s = (n as f64).sqrt();
        let rows: Vec<Vec<f64>> = scaled_orthogonal(n, p).into_iter().map(|r| r.iter().map(|v| v / s).collect()).collect();
        let y = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        let design = Design::from_columns(matrix(&rows).columns(), y.to_vec());
        let fit = coordinate_descent(&design, 0.0, 0.0, None, 1000, 1e-15);
        for j in 0..p {
            let xty: f64 = (0..n).map(|i| rows[i][j] * y[i]).sum();
            assert!((fit.coefficients[j] - xty).abs() < 1e-12);
        }
    }

    #[test]
    fn kill_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = matrix(&rows);
        let lmax = Design::new(&x, &y).unwrap().lambda_max();
        let params = ElasticNetParams {
            l1: L1Penalty::Fixed(lmax),
            ..Default::default()
        };
        assert!(matches!(elastic_net_fit(&x, &y, &params), Err(FeatselError::NoFeatureSelected(_))));
        let params = ElasticNetParams {
            l1: L1Penalty::Fixed(0.5 * lmax),
            ..Default::default()
        };
        assert!(elastic_net_fit(&x, &y, &params).unwrap().count() >= 1);
    }

    #[test]
    fn target_search_lands_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, p) = (60, 120);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[0] + r[1] - r[2] > 0.0 { 1.0 } else { -1.0 }).collect();
        let x = matrix(&rows);
        let z = zscore_apply(&x, &zscore_fit(&x).unwrap()).unwrap();
        let params = ElasticNetParams {
            l1: L1Penalty::TargetNonzeros(20),
            lambda2: 1.0,
            ..Default::default()
        };
        let mask = elastic_net_fit(&z, &y, &params).unwrap();
        assert!(mask.target_met);
        assert!((18..=22).contains(&mask.count()), "{}", mask.count());

        // More features requested than exist.
        let small = select_features(&z, &(0..p).map(|j| j < 5).collect::<Vec<_>>()).unwrap();
        let all = elastic_net_fit(&small, &y, &params).unwrap();
        assert!(!all.target_met && all.count() <= 5);
    }

    #[test]
    fn selection_columns() {
        let x = matrix(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        assert_eq!(select_features(&x, &[true; 4]).unwrap(), x);
        let s = select_features(&x, &[false, true, false, true]).unwrap();
        assert_eq!(s.col_names, vec!["f1", "f3"]);
        assert_eq!(s.row(1), &[6.0, 8.0]);
        assert!(matches!(select_features(&x, &[false; 4]), Err(FeatselError::EmptyMask)));
    }

    #[test]
    fn selection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ["V:1", "V:2", "E:1-2"].iter().map(|s| s.to_string()).collect();
        let mask = SelectionMask {
            selected: vec![true, false, true],
            coefficients: vec![0.25, 0.0, -0.125],
            lambda1: 0.1,
            lambda2: 1.0,
            converged: true,
            iterations: 3,
            target_met: true,
        };
        let p = dir.path().join("sel.txt");
        mask.write(&names, &p).unwrap();
        let back = SelectionMask::read(&names, &p).unwrap();
        assert_eq!(back.selected, mask.selected);
        assert_eq!(back.coefficients, mask.coefficients);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = matrix(&[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 7.0]]);
        let p = dir.path().join("x.csv");
        x.write_csv(&p).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), x);
    }
}
