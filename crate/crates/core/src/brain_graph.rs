//! Per-subject graph of structure grading.
//!
//! Vertices carry the mean grade of each labeled structure. Edges carry
//! `exp(-d² / σ²)` where `d` is the Wasserstein-1 distance between the grade
//! histograms of the two structures. Histograms use Sturges' bin count over
//! `[-1, +1]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grading::GradingMap;
use crate::volio::{self, LabelMap, VolioError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("structure {id} has {found} graded voxels, fewer than {required}")]
    StructureTooSmall { id: u32, found: usize, required: usize },
    #[error("histogram masses must be non-negative and sum to 1 (sum = {0})")]
    NotNormalized(f64),
    #[error("only {0} structures survive the voxel filter; need at least 2")]
    TooFewStructures(usize),
    #[error("structure {0} is not part of the canonical structure list")]
    CanonicalOrderMismatch(u32),
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("grade out of [-1, 1]: {0}")]
    GradeOutOfRange(f64),
    #[error(transparent)]
    Volio(#[from] VolioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Sturges' rule: `ceil(1 + log2(n))`, computed in integers.
pub fn sturges_bins(n: usize) -> usize {
    assert!(n >= 1, "sturges_bins needs at least one sample");
    // ceil(log2 n) is the bit length of n - 1.
    1 + (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// Normalized histogram over uniform bins on `[-1, +1]`; the top bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureHistogram {
    pub structure_id: u32,
    pub masses: Vec<f64>,
    /// Number of grades the histogram was built from.
    pub n: usize,
}

fn bin_of(g: f64, bins: usize) -> usize {
    (((g + 1.0) * bins as f64 / 2.0).floor() as usize).min(bins - 1)
}

impl StructureHistogram {
    /// Bins `grades` with `sturges_bins(grades.len())` bins.
    pub fn from_grades(structure_id: u32, grades: &[f64]) -> Result<Self> {
        if grades.is_empty() {
            return Err(GraphError::StructureTooSmall {
                id: structure_id,
                found: 0,
                required: 1,
            });
        }
        if let Some(&g) = grades.iter().find(|g| !(-1.0..=1.0).contains(*g)) {
            return Err(GraphError::GradeOutOfRange(g));
        }
        let bins = sturges_bins(grades.len());
        let mut counts = vec![0usize; bins];
        for &g in grades {
            counts[bin_of(g, bins)] += 1;
        }
        let n = grades.len();
        Ok(Self {
            structure_id,
            masses: counts.iter().map(|&c| c as f64 / n as f64).collect(),
            n,
        })
    }

    pub fn from_masses(structure_id: u32, masses: Vec<f64>, n: usize) -> Result<Self> {
        let h = Self {
            structure_id,
            masses,
            n,
        };
        h.check_normalized()?;
        Ok(h)
    }

    pub fn bin_count(&self) -> usize {
        self.masses.len()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let b = self.bin_count();
        (0..=b).map(|k| -1.0 + 2.0 * k as f64 / b as f64).collect()
    }

    pub fn check_normalized(&self) -> Result<()> {
        let sum: f64 = self.masses.iter().sum();
        if self.masses.is_empty() || self.masses.iter().any(|&m| !(m >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GraphError::NotNormalized(sum));
        }
        Ok(())
    }

    /// Mass re-distributed onto `bins` uniform bins, each source bin spread
    /// proportionally to its overlap with the target bins.
    pub fn rebinned(&self, bins: usize) -> Vec<f64> {
        let src = self.bin_count();
        if src == bins {
            return self.masses.clone();
        }
        // Work on [0, src * bins] so that all edges are integers.
        let mut out = vec![0.0; bins];
        for (i, &m) in self.masses.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let (lo, hi) = (i * bins, (i + 1) * bins);
            let first = lo / src;
            let last = (hi - 1) / src;
            for (j, slot) in out.iter_mut().enumerate().take(last + 1).skip(first) {
                let overlap = hi.min((j + 1) * src) - lo.max(j * src);
                *slot += m * overlap as f64 / bins as f64;
            }
        }
        out
    }
}

/// Wasserstein-1 distance between two grade histograms on `[-1, +1]`.
///
/// Both histograms are moved onto the finer of the two grids, then
/// `d = Σ_k |CDF_a(k) − CDF_b(k)| · Δ` with `Δ = 2 / B`.
pub fn wasserstein1(a: &StructureHistogram, b: &StructureHistogram) -> Result<f64> {
    a.check_normalized()?;
    b.check_normalized()?;
    let bins = a.bin_count().max(b.bin_count());
    let (ma, mb) = (a.rebinned(bins), b.rebinned(bins));
    let width = 2.0 / bins as f64;
    let (mut ca, mut cb, mut d) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..bins {
        ca += ma[k];
        cb += mb[k];
        d += (ca - cb).abs();
    }
    Ok(d * width)
}

/// Gaussian kernel on a histogram distance. Underflow is clamped to the
/// smallest positive normal so weights stay in `(0, 1]`.
#[inline]
pub fn edge_weight(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (sigma * sigma)).exp().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    Fixed(f64),
    /// Median of this subject's pairwise distances (1 if that median is 0).
    MedianHeuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub sigma: SigmaMode,
    pub min_voxels: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            sigma: SigmaMode::MedianHeuristic,
            min_voxels: 1,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if let SigmaMode::Fixed(s) = self.sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(GraphError::InvalidParams(format!("sigma must be > 0, got {s}")));
            }
        }
        if self.min_voxels < 1 {
            return Err(GraphError::InvalidParams("min_voxels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainGraph {
    /// Sorted ids of the retained structures.
    pub structure_ids: Vec<u32>,
    pub voxel_counts: Vec<usize>,
    /// Mean grade per structure.
    pub vertex_values: Vec<f64>,
    /// Pairwise Wasserstein distances, canonical pair order (i < j).
    pub edge_distances: Vec<f64>,
    pub edge_weights: Vec<f64>,
    pub sigma: f64,
    /// Structures removed by the voxel filter, with their graded voxel count.
    pub dropped: Vec<(u32, usize)>,
}

/// Position of pair `(i, j)`, `i < j < n`, in the canonical edge order.
#[inline]
pub fn edge_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

pub fn edge_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Arithmetic mean of the raw grades of one structure.
pub fn vertex_value(grades: &[f64]) -> f64 {
    grades.iter().sum::<f64>() / grades.len() as f64
}

/// Raw grades of every labeled structure, keyed by id (graded voxels only).
pub fn grades_by_structure(g: &GradingMap, lm: &LabelMap) -> Result<BTreeMap<u32, Vec<f64>>> {
    volio::check_geometry(g.dims(), g.grades().spacing(), lm.dims(), lm.spacing())?;
    let mut by_id: BTreeMap<u32, Vec<f64>> = lm.structure_ids().into_iter().map(|id| (id, Vec::new())).collect();
    for (idx, &label) in lm.labels().iter().enumerate() {
        if label == 0 {
            continue;
        }
        if let Some(grade) = g.grade(idx) {
            by_id.get_mut(&label).expect("id collected").push(grade as f64);
        }
    }
    Ok(by_id)
}

/// Histogram of one structure; fails with `StructureTooSmall` below `min_voxels`.
pub fn structure_histogram(g: &GradingMap, lm: &LabelMap, id: u32, min_voxels: usize) -> Result<StructureHistogram> {
    let grades = grades_by_structure(g, lm)?.remove(&id).unwrap_or_default();
    if grades.len() < min_voxels.max(1) {
        return Err(GraphError::StructureTooSmall {
            id,
            found: grades.len(),
            required: min_voxels.max(1),
        });
    }
    StructureHistogram::from_grades(id, &grades)
}

pub fn build_graph(g: &GradingMap, lm: &LabelMap, params: &GraphParams) -> Result<BrainGraph> {
    params.validate()?;
    let by_id = grades_by_structure(g, lm)?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (id, grades) in by_id {
        if grades.len() >= params.min_voxels {
            kept.push((id, grades));
        } else {
            dropped.push((id, grades.len()));
        }
    }
    if kept.len() < 2 {
        return Err(GraphError::TooFewStructures(kept.len()));
    }
    let histograms = kept
        .par_iter()
        .map(|(id, grades)| StructureHistogram::from_grades(*id, grades))
        .collect::<Result<Vec<_>>>()?;
    let n = kept.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let edge_distances = pairs
        .par_iter()
        .map(|&(i, j)| wasserstein1(&histograms[i], &histograms[j]))
        .collect::<Result<Vec<_>>>()?;
    let sigma = match params.sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::MedianHeuristic => {
            let m = median(&edge_distances);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    Ok(BrainGraph {
        structure_ids: kept.iter().map(|(id, _)| *id).collect(),
        voxel_counts: kept.iter().map(|(_, g)| g.len()).collect(),
        vertex_values: kept.iter().map(|(_, g)| vertex_value(g)).collect(),
        edge_weights: edge_distances.iter().map(|&d| edge_weight(d, sigma)).collect(),
        edge_distances,
        sigma,
        dropped,
    })
}

impl BrainGraph {
    /// CSV dump: a `# vertices` block then a `# edges` block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# vertices\nstructure_id,gamma\n");
        for (id, g) in self.structure_ids.iter().zip(&self.vertex_values) {
            writeln!(out, "{id},{g}").unwrap();
        }
        out.push_str("# edges\nid_i,id_j,distance,weight\n");
        let n = self.structure_ids.len();
        for i in 0..n {
            for j in i + 1..n {
                let e = edge_index(i, j, n);
                writeln!(
                    out,
                    "{},{},{},{}",
                    self.structure_ids[i], self.structure_ids[j], self.edge_distances[e], self.edge_weights[e]
                )
                .unwrap();
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Feature names in canonical order: `V:<id>` then `E:<a>-<b>` for a < b.
pub fn feature_names(canonical: &[u32]) -> Vec<String> {
    let mut names: Vec<String> = canonical.iter().map(|id| format!("V:{id}")).collect();
    for (i, a) in canonical.iter().enumerate() {
        for b in &canonical[i + 1..] {
            names.push(format!("E:{a}-{b}"));
        }
    }
    names
}

/// Flattened graph aligned to a canonical structure list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Entries the subject could not provide. Missing vertices hold 0; missing
    /// edges hold NaN until imputed.
    pub missing: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

/// `[Γ_1..Γ_N, ω_(1,2), ω_(1,3), .., ω_(N−1,N)]` over the sorted canonical ids.
pub fn graph_to_features(bg: &BrainGraph, canonical: &[u32]) -> Result<FeatureVector> {
    let mut canon = canonical.to_vec();
    canon.sort_unstable();
    canon.dedup();
    let pos: Vec<usize> = bg
        .structure_ids
        .iter()
        .map(|id| canon.binary_search(id).map_err(|_| GraphError::CanonicalOrderMismatch(*id)))
        .collect::<Result<_>>()?;
    let n = canon.len();
    let total = n + edge_count(n);
    let mut values = vec![f64::NAN; total];
    let mut missing = vec![true; total];
    values[..n].fill(0.0);
    for (local, &p) in pos.iter().enumerate() {
        values[p] = bg.vertex_values[local];
        missing[p] = false;
    }
    let m = pos.len();
    for a in 0..m {
        for b in a + 1..m {
            let (i, j) = (pos[a].min(pos[b]), pos[a].max(pos[b]));
            let slot = n + edge_index(i, j, n);
            values[slot] = bg.edge_weights[edge_index(a, b, m)];
            missing[slot] = false;
        }
    }
    Ok(FeatureVector { values, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Volume3D;
    use proptest::prelude::*;

    const UNIT: [f32; 3] = [1.0, 1.0, 1.0];

    fn hist(masses: &[f64]) -> StructureHistogram {
        StructureHistogram::from_masses(1, masses.to_vec(), 100).unwrap()
    }

    #[test]
    fn sturges_values() {
        assert_eq!(sturges_bins(1), 1);
        assert_eq!(sturges_bins(2), 2);
        assert_eq!(sturges_bins(128), 8);
        assert_eq!(sturges_bins(129), 9);
        assert_eq!(sturges_bins(100), 8);
    }

    #[test]
    fn histogram_binning() {
        let h = StructureHistogram::from_grades(3, &[0.0; 128]).unwrap();
        assert_eq!(h.bin_count(), 8);
        assert_eq!(h.masses[4], 1.0);
        assert_eq!(h.masses.iter().sum::<f64>(), 1.0);

        // Four bins of width 0.5: centers -0.75, -0.25, 0.25, 0.75.
        let grades = [-0.75, -0.75, -0.25, -0.25, 0.25, 0.25, 0.75, 0.75];
        let h = StructureHistogram::from_grades(3, &grades).unwrap();
        assert_eq!(h.bin_count(), 4);
        assert_eq!(h.masses, vec![0.25; 4]);
        assert_eq!(h.bin_edges(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);

        let top = StructureHistogram::from_grades(3, &[1.0, -1.0]).unwrap();
        assert_eq!(top.masses, vec![0.5, 0.5]);
    }

    #[test]
    fn wasserstein_cases() {
        let a = hist(&[0.2, 0.3, 0.5]);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein1(&hist(&[1.0, 0.0]), &hist(&[0.0, 1.0])).unwrap(), 1.0);
        let d = wasserstein1(&hist(&[0.5, 0.5, 0.0]), &hist(&[0.0, 0.5, 0.5])).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        let bad = StructureHistogram {
            structure_id: 0,
            masses: vec![0.5, 0.6],
            n: 2,
        };
        assert!(matches!(wasserstein1(&bad, &a), Err(GraphError::NotNormalized(_))));
    }

    #[test]
    fn rebinning_splits_by_overlap() {
        let h = hist(&[1.0, 0.0]);
        let r = h.rebinned(3);
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r[2], 0.0);
        assert!((hist(&[0.1, 0.2, 0.3, 0.4]).rebinned(6).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_weight_values() {
        assert_eq!(edge_weight(0.0, 0.3), 1.0);
        assert!((edge_weight(0.3, 0.3) - 0.367879441171).abs() < 1e-9);
        assert!((edge_weight(0.6, 0.3) - 0.018315638889).abs() < 1e-9);
    }

    #[test]
    fn edge_index_is_canonical() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(edge_index(i, j, n), k);
                k += 1;
            }
        }
        assert_eq!(k, edge_count(n));
        assert_eq!(134 + edge_count(134), 9045);
    }

    fn grading_map(dims: [usize; 3], grades: Vec<f32>, mask: Vec<bool>) -> GradingMap {
        GradingMap::from_parts(Volume3D::new(dims, UNIT, grades).unwrap(), mask).unwrap()
    }

    #[test]
    fn two_identical_structures() {
        let g = grading_map([4, 1, 1], vec![0.5, -0.5, 0.5, -0.5], vec![true; 4]);
        let lm = LabelMap::new([4, 1, 1], UNIT, vec![1, 1, 2, 2]).unwrap();
        let bg = build_graph(&g, &lm, &GraphParams::default()).unwrap();
        assert_eq!(bg.structure_ids, vec![1, 2]);
        assert_eq!(bg.vertex_values, vec![0.0, 0.0]);
        assert_eq!(bg.edge_weights, vec![1.0]);
        assert_eq!(bg.sigma, 1.0);
    }

    #[test]
    fn small_structures_are_dropped() {
        let g = grading_map([5, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![true, true, true, true, false]);
        let lm = LabelMap::new([5, 1, 1], UNIT, vec![1, 1, 2, 2, 3]).unwrap();
        let params = GraphParams {
            min_voxels: 2,
            ..Default::default()
        };
        let bg = build_graph(&g, &lm, &params).unwrap();
        assert_eq!(bg.dropped, vec![(3, 0)]);
        assert!(matches!(
            structure_histogram(&g, &lm, 3, 2),
            Err(GraphError::StructureTooSmall { id: 3, found: 0, .. })
        ));
        let strict = GraphParams {
            min_voxels: 3,
            ..Default::default()
        };
        assert!(matches!(build_graph(&g, &lm, &strict), Err(GraphError::TooFewStructures(0))));
    }

    #[test]
    fn features_follow_canonical_order() {
        let bg = BrainGraph {
            structure_ids: vec![2, 5, 7],
            voxel_counts: vec![1; 3],
            vertex_values: vec![0.1, 0.2, 0.3],
            edge_distances: vec![0.0; 3],
            edge_weights: vec![0.9, 0.8, 0.7],
            sigma: 1.0,
            dropped: vec![],
        };
        let fv = graph_to_features(&bg, &[7, 5, 2]).unwrap();
        assert_eq!(fv.values, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]);
        assert_eq!(feature_names(&[2, 5, 7]), ["V:2", "V:5", "V:7", "E:2-5", "E:2-7", "E:5-7"]);

        // Structure 5 missing from a wider canonical list.
        let bg2 = BrainGraph {
            structure_ids: vec![2, 7],
            voxel_counts: vec![1; 2],
            vertex_values: vec![0.1, 0.3],
            edge_distances: vec![0.0],
            edge_weights: vec![0.7],
            sigma: 1.0,
            dropped: vec![(5, 0)],
        };
        let fv = graph_to_features(&bg2, &[2, 5, 7]).unwrap();
        assert_eq!(fv.values[..3], [0.1, 0.0, 0.3]);
        assert_eq!(fv.missing, vec![false, true, false, true, false, true]);
        assert_eq!(fv.values[4], 0.7);
        assert!(fv.values[3].is_nan());

        assert!(matches!(
            graph_to_features(&bg, &[2, 5]),
            Err(GraphError::CanonicalOrderMismatch(7))
        ));
    }

    #[test]
    fn csv_dump_blocks() {
        let g = grading_map([4, 1, 1], vec![1.0, 1.0, -1.0, -1.0], vec![true; 4]);
        let lm = LabelMap::new([4, 1, 1], UNIT, vec![1, 1, 2, 2]).unwrap();
        let csv = build_graph(&g, &lm, &GraphParams::default()).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# vertices");
        assert_eq!(lines[2], "1,1");
        assert_eq!(lines[4], "# edges");
        assert_eq!(lines[6], "1,2,1,0.36787944117144233");
    }

    fn arb_hist(bins: usize) -> impl Strategy<Value = StructureHistogram> {
        proptest::collection::vec(0.0f64..1.0, bins).prop_filter_map("non-zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| StructureHistogram {
                structure_id: 0,
                masses: w.iter().map(|x| x / s).collect(),
                n: 10,
            })
        })
    }

    proptest! {
        #[test]
        fn sturges_monotone(n in 1usize..2_000_000) {
            prop_assert!(sturges_bins(n + 1) >= sturges_bins(n));
        }

        #[test]
        fn wasserstein_symmetric_mixed_grids(a in (1usize..9).prop_flat_map(arb_hist), b in (1usize..9).prop_flat_map(arb_hist)) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0 && ab <= 2.0 + 1e-12);
        }

        #[test]
        fn edge_weight_decreasing(d1 in 0.0f64..3.0, d2 in 0.0f64..3.0, s in 0.1f64..2.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(edge_weight(lo, s) >= edge_weight(hi, s));
            prop_assert!(edge_weight(hi, s) > 0.0 && edge_weight(lo, s) <= 1.0);
        }

        #[test]
        fn vertex_mean(grades in proptest::collection::vec(-1.0f64..=1.0, 1..200)) {
            let mut oracle = 0.0;
            for g in &grades { oracle += g; }
            oracle /= grades.len() as f64;
            prop_assert!((vertex_value(&grades) - oracle).abs() <= 1e-12);
        }
    }
}
