//! Voxel-wise patch-based grading.
//!
//! Each graded voxel receives a weighted vote of the pathological status of
//! its K most similar template patches:
//!
//! ```text
//! g(x) = Σ_j w_j p_j / Σ_j w_j,   w_j = exp(-d_j / (d_min + ε))
//! ```
//!
//! where `d_j` is the squared L2 distance between the test patch and the j-th
//! retained template patch and `d_min` the smallest of them. Neighbors come
//! either from an exhaustive scan of a search window around the corresponding
//! template voxel, or from a seeded PatchMatch search over the same window.
//!
//! All squared distances, in every search mode, are produced by one kernel that
//! accumulates in f64 in x-fastest patch order, so a distance is bit-identical
//! no matter which code path computed it.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{self, coords_of, LabelMap, Volume3D, VolioError};

/// Value written to ungraded voxels of a serialized grading map.
pub const UNGRADED: f32 = -2.0;

/// Depth (in z-slices) of the slabs PatchMatch propagates within.
pub const PM_SLAB_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum GradingError {
    #[error("patch of radius {radius} at {center:?} leaves the volume {dims:?}")]
    OutOfBounds {
        center: [usize; 3],
        radius: usize,
        dims: [usize; 3],
    },
    #[error("patch radii differ: {0} vs {1}")]
    RadiusMismatch(usize, usize),
    #[error("search window around {0:?} contains no valid patch center")]
    EmptyCandidateSet([usize; 3]),
    #[error("no neighbors to grade from")]
    EmptyNeighborhood,
    #[error("negative or non-finite squared distance {0}")]
    InvalidDistance(f64),
    #[error("invalid grading parameters: {0}")]
    InvalidParams(String),
    #[error("training library is empty")]
    EmptyLibrary,
    #[error("template {index}: {source}")]
    InconsistentLibrary { index: usize, source: VolioError },
    #[error("test volume does not match template space: {0}")]
    GeometryMismatch(VolioError),
    #[error(transparent)]
    Volio(#[from] VolioError),
}

pub type Result<T, E = GradingError> = std::result::Result<T, E>;

/// Pathological status of a template: AD votes −1, CN votes +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Ad,
    Cn,
}

impl Status {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Status::Ad => -1.0,
            Status::Cn => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Status::Ad => Status::Cn,
            Status::Cn => Status::Ad,
        }
    }

    pub fn from_value(v: i32) -> Option<Self> {
        match v {
            -1 => Some(Status::Ad),
            1 => Some(Status::Cn),
            _ => None,
        }
    }
}

/// Cube of side `2r + 1` read in x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub radius: usize,
    pub center: [usize; 3],
    pub values: Vec<f32>,
}

#[inline]
pub fn patch_side(radius: usize) -> usize {
    2 * radius + 1
}

#[inline]
pub fn patch_len(radius: usize) -> usize {
    patch_side(radius).pow(3)
}

#[inline]
fn is_interior(dims: [usize; 3], c: [usize; 3], r: usize) -> bool {
    (0..3).all(|a| c[a] >= r && c[a] + r < dims[a])
}

pub fn extract_patch(v: &Volume3D, center: [usize; 3], radius: usize) -> Result<Patch> {
    let dims = v.dims();
    if !is_interior(dims, center, radius) {
        return Err(GradingError::OutOfBounds {
            center,
            radius,
            dims,
        });
    }
    let mut values = Vec::with_capacity(patch_len(radius));
    for k in center[2] - radius..=center[2] + radius {
        for j in center[1] - radius..=center[1] + radius {
            let start = v.index(center[0] - radius, j, k);
            values.extend_from_slice(&v.data()[start..start + patch_side(radius)]);
        }
    }
    Ok(Patch {
        radius,
        center,
        values,
    })
}

/// Squared L2 distance between two patches of equal radius.
pub fn patch_distance(p: &Patch, q: &Patch) -> Result<f64> {
    if p.radius != q.radius {
        return Err(GradingError::RadiusMismatch(p.radius, q.radius));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    Ok(acc)
}

/// Row layout of a patch inside a volume with the given dims.
#[derive(Debug, Clone)]
struct PatchGeometry {
    side: usize,
    row_starts: Vec<usize>,
    corner_offset: usize,
}

impl PatchGeometry {
    fn new(dims: [usize; 3], radius: usize) -> Self {
        let side = patch_side(radius);
        let mut row_starts = Vec::with_capacity(side * side);
        for dz in 0..side {
            for dy in 0..side {
                row_starts.push(dy * dims[0] + dz * dims[0] * dims[1]);
            }
        }
        let corner_offset = radius + radius * dims[0] + radius * dims[0] * dims[1];
        Self {
            side,
            row_starts,
            corner_offset,
        }
    }

    /// Squared distance between the patches centered at `ca` in `a` and `cb`
    /// in `b`, or `None` once the running sum exceeds `bound`.
    #[inline]
    fn distance(&self, a: &[f32], ca: usize, b: &[f32], cb: usize, bound: f64) -> Option<f64> {
        let oa = ca - self.corner_offset;
        let ob = cb - self.corner_offset;
        let mut acc = 0.0f64;
        for &row in &self.row_starts {
            let ra = &a[oa + row..oa + row + self.side];
            let rb = &b[ob + row..ob + row + self.side];
            for (&x, &y) in ra.iter().zip(rb) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
            if acc > bound {
                return None;
            }
        }
        Some(acc)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateEntry {
    pub volume: Volume3D,
    pub labels: LabelMap,
    pub status: Status,
}

impl TemplateEntry {
    pub fn new(volume: Volume3D, labels: LabelMap, status: Status) -> Result<Self> {
        volio::validate_pair(&volume, &labels)?;
        Ok(Self {
            volume,
            labels,
            status,
        })
    }
}

/// Non-empty set of templates registered to a common space.
#[derive(Debug, Clone)]
pub struct TrainingLibrary {
    entries: Vec<TemplateEntry>,
}

impl TrainingLibrary {
    pub fn new(entries: Vec<TemplateEntry>) -> Result<Self> {
        let first = entries.first().ok_or(GradingError::EmptyLibrary)?;
        let (dims, spacing) = (first.volume.dims(), first.volume.spacing());
        for (index, e) in entries.iter().enumerate() {
            volio::validate_pair(&e.volume, &e.labels)
                .and_then(|_| volio::check_geometry(dims, spacing, e.volume.dims(), e.volume.spacing()))
                .map_err(|source| GradingError::InconsistentLibrary { index, source })?;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TemplateEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.entries[0].volume.dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.entries[0].volume.spacing()
    }

    /// Same library with every status negated.
    pub fn flipped(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| TemplateEntry {
                    status: e.status.flipped(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    fn view(&self, exclude: Option<usize>) -> Result<LibraryView<'_>> {
        let members: Vec<usize> = (0..self.entries.len()).filter(|&i| Some(i) != exclude).collect();
        if members.is_empty() {
            return Err(GradingError::EmptyLibrary);
        }
        Ok(LibraryView {
            data: members.iter().map(|&i| self.entries[i].volume.data()).collect(),
            status: members.iter().map(|&i| self.entries[i].status).collect(),
            ids: members,
        })
    }
}

/// Borrowed subset of a library; `ids` keep the original template indices.
struct LibraryView<'a> {
    data: Vec<&'a [f32]>,
    status: Vec<Status>,
    ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMethod {
    Exact,
    PatchMatch,
}

impl SearchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMethod::Exact => "exact",
            SearchMethod::PatchMatch => "patchmatch",
        }
    }
}

impl std::str::FromStr for SearchMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(SearchMethod::Exact),
            "patchmatch" => Ok(SearchMethod::PatchMatch),
            other => Err(format!("unknown grading method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingParams {
    pub patch_radius: usize,
    pub k: usize,
    /// Half-width of the template-space search window, in voxels.
    pub search_window: usize,
    /// Kernel regularizer; `None` means `1e-12 * patch cardinality`.
    pub epsilon: Option<f64>,
    pub method: SearchMethod,
    pub pm_iterations: usize,
    pub seed: u64,
}

impl Default for GradingParams {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            k: 50,
            search_window: 3,
            epsilon: None,
            method: SearchMethod::Exact,
            pm_iterations: 4,
            seed: 0,
        }
    }
}

impl GradingParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GradingError::InvalidParams(m.to_string()));
        if self.patch_radius < 1 {
            return bad("patch_radius must be >= 1");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return bad("epsilon must be finite and > 0");
            }
        }
        if self.method == SearchMethod::PatchMatch && self.pm_iterations < 1 {
            return bad("pm_iterations must be >= 1");
        }
        Ok(())
    }

    pub fn effective_epsilon(&self) -> f64 {
        self.epsilon
            .unwrap_or(1e-12 * patch_len(self.patch_radius) as f64)
    }
}

/// One retained template patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub dist2: f64,
    pub status: Status,
    /// Index of the template in the full library.
    pub template: usize,
    /// Linear voxel index of the candidate patch center in template space.
    pub center: usize,
}

impl Neighbor {
    /// Total order used for ranking: distance, then template, then voxel.
    #[inline]
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.template.cmp(&other.template))
            .then(self.center.cmp(&other.center))
    }
}

/// Ascending list of at most `k` neighbors.
#[derive(Debug, Clone)]
struct KBest {
    k: usize,
    items: Vec<Neighbor>,
    /// `(template, center)` packed, parallel to `items`.
    keys: Vec<u64>,
}

#[inline]
fn pack_key(template: usize, center: usize) -> u64 {
    ((template as u64) << 40) | center as u64
}

impl KBest {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
            keys: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn contains(&self, template: usize, center: usize) -> bool {
        self.keys.contains(&pack_key(template, center))
    }

    /// Distance above which a candidate can no longer enter.
    #[inline]
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].dist2
        }
    }

    #[inline]
    fn offer(&mut self, n: Neighbor) {
        if self.items.len() == self.k
            && n.rank_cmp(&self.items[self.k - 1]) != Ordering::Less
        {
            return;
        }
        let pos = self
            .items
            .partition_point(|x| x.rank_cmp(&n) == Ordering::Less);
        self.keys.insert(pos, pack_key(n.template, n.center));
        self.items.insert(pos, n);
        self.items.truncate(self.k);
        self.keys.truncate(self.k);
    }
}

fn window_bounds(dims: [usize; 3], center: [usize; 3], r: usize, s: usize) -> Option<[(usize, usize); 3]> {
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let lo = center[a].saturating_sub(s).max(r);
        let hi = (center[a] + s).min(dims[a].checked_sub(r + 1)?);
        if lo > hi {
            return None;
        }
        out[a] = (lo, hi);
    }
    Some(out)
}

fn check_test_geometry(test: &Volume3D, lib: &TrainingLibrary) -> Result<()> {
    volio::check_geometry(test.dims(), test.spacing(), lib.dims(), lib.spacing())
        .map_err(GradingError::GeometryMismatch)
}

fn exact_at(
    test: &[f32],
    center: [usize; 3],
    dims: [usize; 3],
    geo: &PatchGeometry,
    lib: &LibraryView<'_>,
    params: &GradingParams,
) -> Result<Vec<Neighbor>> {
    let r = params.patch_radius;
    let bounds =
        window_bounds(dims, center, r, params.search_window).ok_or(GradingError::EmptyCandidateSet(center))?;
    let cq = volio::linear_index(dims, center[0], center[1], center[2]);
    let mut best = KBest::new(params.k);
    for (t, data) in lib.data.iter().enumerate() {
        let template = lib.ids[t];
        let status = lib.status[t];
        for k in bounds[2].0..=bounds[2].1 {
            for j in bounds[1].0..=bounds[1].1 {
                for i in bounds[0].0..=bounds[0].1 {
                    let cc = volio::linear_index(dims, i, j, k);
                    if let Some(dist2) = geo.distance(test, cq, data, cc, best.bound()) {
                        best.offer(Neighbor {
                            dist2,
                            status,
                            template,
                            center: cc,
                        });
                    }
                }
            }
        }
    }
    Ok(best.items)
}

/// Exhaustive K-nearest search over the window around the query's center in
/// every template. Results are ascending with ties broken by template index,
/// then candidate voxel index.
pub fn knn_exact(query: &Patch, lib: &TrainingLibrary, params: &GradingParams) -> Result<Vec<Neighbor>> {
    params.validate()?;
    if query.radius != params.patch_radius {
        return Err(GradingError::RadiusMismatch(query.radius, params.patch_radius));
    }
    let dims = lib.dims();
    if !is_interior(dims, query.center, query.radius) {
        return Err(GradingError::OutOfBounds {
            center: query.center,
            radius: query.radius,
            dims,
        });
    }
    // Embed the query in a scratch volume so the shared kernel can be used.
    let mut scratch = vec![0.0f32; dims.iter().product()];
    let r = query.radius;
    let side = patch_side(r);
    let mut it = query.values.iter();
    for k in 0..side {
        for j in 0..side {
            for i in 0..side {
                let idx = volio::linear_index(
                    dims,
                    query.center[0] - r + i,
                    query.center[1] - r + j,
                    query.center[2] - r + k,
                );
                scratch[idx] = *it.next().expect("patch length matches radius");
            }
        }
    }
    let geo = PatchGeometry::new(dims, r);
    exact_at(&scratch, query.center, dims, &geo, &lib.view(None)?, params)
}

/// Grade from a neighbor list: Σ w p / Σ w with w = exp(-d / (d_min + ε)).
pub fn grade_voxel(neighbors: &[(f64, Status)], epsilon: f64) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(GradingError::EmptyNeighborhood);
    }
    if let Some(&(d, _)) = neighbors.iter().find(|(d, _)| !(d.is_finite() && *d >= 0.0)) {
        return Err(GradingError::InvalidDistance(d));
    }
    let d_min = neighbors.iter().map(|n| n.0).fold(f64::INFINITY, f64::min);
    let denom = d_min + epsilon;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for &(d, status) in neighbors {
        let w = (-d / denom).exp();
        num += w * status.value();
        den += w;
    }
    Ok((num / den).clamp(-1.0, 1.0))
}

fn grade_neighbors(neighbors: &[Neighbor], epsilon: f64) -> Result<f64> {
    let pairs: Vec<(f64, Status)> = neighbors.iter().map(|n| (n.dist2, n.status)).collect();
    grade_voxel(&pairs, epsilon)
}

/// Voxels that carry a nonzero label and lie at least `radius` from every face.
pub fn gradable_voxels(labels: &LabelMap, radius: usize) -> Vec<usize> {
    let dims = labels.dims();
    labels
        .labels()
        .iter()
        .enumerate()
        .filter(|&(idx, &l)| l != 0 && is_interior(dims, coords_of(dims, idx), radius))
        .map(|(idx, _)| idx)
        .collect()
}

/// Grades plus the mask of voxels that were graded.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingMap {
    grades: Volume3D,
    mask: Vec<bool>,
}

impl GradingMap {
    pub fn from_parts(grades: Volume3D, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grades.len() {
            return Err(VolioError::LengthMismatch {
                expected: grades.len(),
                found: mask.len(),
            }
            .into());
        }
        Ok(Self { grades, mask })
    }

    pub fn grades(&self) -> &Volume3D {
        &self.grades
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grades.dims()
    }

    /// Grade at a linear index, if graded.
    pub fn grade(&self, idx: usize) -> Option<f32> {
        self.mask[idx].then(|| self.grades.data()[idx])
    }

    pub fn graded_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_labelmap(&self) -> LabelMap {
        LabelMap::new(
            self.grades.dims(),
            self.grades.spacing(),
            self.mask.iter().map(|&m| m as u32).collect(),
        )
        .expect("mask shares grade geometry")
    }

    /// Writes the grade volume (sentinel −2 outside the mask) and the mask as a label map.
    pub fn save(&self, grades_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<()> {
        volio::write_volume(&self.grades, grades_path)?;
        volio::write_labelmap(&self.mask_labelmap(), mask_path)?;
        Ok(())
    }

    pub fn load(grades_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<Self> {
        let grades = volio::read_volume(grades_path)?;
        let mask = volio::read_labelmap(mask_path)?;
        volio::check_geometry(grades.dims(), grades.spacing(), mask.dims(), mask.spacing())?;
        Self::from_parts(grades, mask.labels().iter().map(|&l| l != 0).collect())
    }
}

/// Per-voxel neighbor lists for a set of target voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborField {
    pub voxels: Vec<usize>,
    pub neighbors: Vec<Vec<Neighbor>>,
}

fn validate_targets(dims: [usize; 3], targets: &[usize], r: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    for &t in targets {
        let c = coords_of(dims, t);
        if t >= n || !is_interior(dims, c, r) {
            return Err(GradingError::OutOfBounds {
                center: c,
                radius: r,
                dims,
            });
        }
    }
    Ok(())
}

/// Exact neighbor lists for every target voxel of `test`.
pub fn knn_exact_field(
    test: &Volume3D,
    targets: &[usize],
    lib: &TrainingLibrary,
    params: &GradingParams,
    exclude: Option<usize>,
) -> Result<NeighborField> {
    params.validate()?;
    check_test_geometry(test, lib)?;
    let dims = test.dims();
    validate_targets(dims, targets, params.patch_radius)?;
    let view = lib.view(exclude)?;
    let geo = PatchGeometry::new(dims, params.patch_radius);
    let neighbors = targets
        .par_iter()
        .with_min_len(64)
        .map(|&v| exact_at(test.data(), coords_of(dims, v), dims, &geo, &view, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(NeighborField {
        voxels: targets.to_vec(),
        neighbors,
    })
}

/// splitmix64 finalizer; used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct PmContext<'a> {
    test: &'a [f32],
    dims: [usize; 3],
    geo: PatchGeometry,
    lib: LibraryView<'a>,
    r: usize,
    s: usize,
}

impl PmContext<'_> {
    #[inline]
    fn propose(&self, best: &mut KBest, v: usize, t: usize, c: usize) {
        let template = self.lib.ids[t];
        if best.contains(template, c) {
            return;
        }
        if let Some(dist2) = self.geo.distance(self.test, v, self.lib.data[t], c, best.bound()) {
            best.offer(Neighbor {
                dist2,
                status: self.lib.status[t],
                template,
                center: c,
            });
        }
    }

    /// Uniform candidate in the intersection of `[around ± radius]`, the window of
    /// `v`, and the template interior.
    fn sample_near(&self, rng: &mut ChaCha8Rng, v: [usize; 3], around: [usize; 3], radius: usize) -> usize {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let lo = v[a].saturating_sub(self.s).max(self.r).max(around[a].saturating_sub(radius));
            let hi = (v[a] + self.s)
                .min(self.dims[a] - 1 - self.r)
                .min(around[a] + radius);
            c[a] = if lo >= hi { lo } else { rng.random_range(lo..=hi) };
        }
        volio::linear_index(self.dims, c[0], c[1], c[2])
    }

    fn run_slab(&self, targets: &[usize], seed: u64, iterations: usize, k: usize) -> Vec<Vec<Neighbor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_t = self.lib.data.len();
        let mut state: Vec<KBest> = Vec::with_capacity(targets.len());
        let coords: Vec<[usize; 3]> = targets.iter().map(|&v| coords_of(self.dims, v)).collect();

        // Initialization: identity offset in every template, then random draws.
        for (&v, &cv) in targets.iter().zip(&coords) {
            let mut best = KBest::new(k);
            for t in 0..n_t {
                self.propose(&mut best, v, t, v);
            }
            for _ in 0..k {
                let t = rng.random_range(0..n_t);
                let c = self.sample_near(&mut rng, cv, cv, self.s);
                self.propose(&mut best, v, t, c);
            }
            state.push(best);
        }

        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        let slot_of = |v: usize| targets.binary_search(&v).ok();
        let mut carried: Vec<Neighbor> = Vec::with_capacity(k);
        for _ in 0..iterations {
            for forward in [true, false] {
                let order: Box<dyn Iterator<Item = usize>> = if forward {
                    Box::new(0..targets.len())
                } else {
                    Box::new((0..targets.len()).rev())
                };
                for slot in order {
                    let v = targets[slot];
                    let cv = coords[slot];
                    let mut best = std::mem::replace(&mut state[slot], KBest::new(0));
                    for (axis, &stride) in strides.iter().enumerate() {
                        // Neighbor already visited in this pass.
                        let nb = if forward {
                            if cv[axis] == 0 {
                                continue;
                            }
                            v - stride
                        } else {
                            if cv[axis] + 1 >= self.dims[axis] {
                                continue;
                            }
                            v + stride
                        };
                        let Some(nslot) = slot_of(nb) else { continue };
                        carried.clear();
                        carried.extend_from_slice(&state[nslot].items);
                        for n in &carried {
                            let cc = coords_of(self.dims, n.center);
                            let shifted = if forward {
                                (cc[axis] + 1 + self.r < self.dims[axis]).then(|| n.center + stride)
                            } else {
                                (cc[axis] > self.r).then(|| n.center - stride)
                            };
                            if let Some(c) = shifted {
                                let t = self.lib.ids.binary_search(&n.template).expect("template in view");
                                self.propose(&mut best, v, t, c);
                            }
                        }
                    }
                    // Random search around the current best, radius halving from the window size.
                    if let Some(top) = best.items.first().copied() {
                        let t = self.lib.ids.binary_search(&top.template).expect("template in view");
                        let around = coords_of(self.dims, top.center);
                        let mut radius = self.s;
                        while radius >= 1 {
                            let c = self.sample_near(&mut rng, cv, around, radius);
                            self.propose(&mut best, v, t, c);
                            radius /= 2;
                        }
                    }
                    // One unrestricted draw keeps every template reachable.
                    let t = rng.random_range(0..n_t);
                    let c = self.sample_near(&mut rng, cv, cv, self.s);
                    self.propose(&mut best, v, t, c);
                    state[slot] = best;
                }
            }
        }
        state.into_iter().map(|b| b.items).collect()
    }
}

/// Approximate K-nearest search by PatchMatch: identity-offset plus random
/// initialization, then per iteration a scanline and a reverse-scanline pass of
/// offset propagation followed by random search with radius halving from the
/// window half-width. Propagation is confined to fixed z-slabs, each driven by
/// an RNG seeded from `(seed, slab)`, so the output does not depend on the
/// number of worker threads.
pub fn knn_patchmatch(
    test: &Volume3D,
    targets: &[usize],
    lib: &TrainingLibrary,
    params: &GradingParams,
    exclude: Option<usize>,
) -> Result<NeighborField> {
    params.validate()?;
    if params.pm_iterations < 1 {
        return Err(GradingError::InvalidParams("pm_iterations must be >= 1".into()));
    }
    check_test_geometry(test, lib)?;
    let dims = test.dims();
    let r = params.patch_radius;
    validate_targets(dims, targets, r)?;
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let ctx = PmContext {
        test: test.data(),
        dims,
        geo: PatchGeometry::new(dims, r),
        lib: lib.view(exclude)?,
        r,
        s: params.search_window,
    };
    let plane = dims[0] * dims[1];
    let mut slabs: Vec<(usize, &[usize])> = Vec::new();
    let mut rest: &[usize] = &sorted;
    while let Some(&first) = rest.first() {
        let slab = first / plane / PM_SLAB_DEPTH;
        let end = rest.partition_point(|&v| v / plane / PM_SLAB_DEPTH == slab);
        slabs.push((slab, &rest[..end]));
        rest = &rest[end..];
    }
    let per_slab: Vec<Vec<Vec<Neighbor>>> = slabs
        .par_iter()
        .map(|&(slab, ts)| {
            ctx.run_slab(
                ts,
                mix_seed(params.seed, slab as u64),
                params.pm_iterations,
                params.k,
            )
        })
        .collect();
    let field: Vec<Vec<Neighbor>> = per_slab.into_iter().flatten().collect();
    // Return in the caller's order.
    let neighbors = targets
        .iter()
        .map(|v| field[sorted.binary_search(v).expect("target present")].clone())
        .collect();
    Ok(NeighborField {
        voxels: targets.to_vec(),
        neighbors,
    })
}

/// Grades every gradable voxel of `test` against the library.
pub fn grade_volume(
    test: &Volume3D,
    labels: &LabelMap,
    lib: &TrainingLibrary,
    params: &GradingParams,
) -> Result<GradingMap> {
    grade_volume_excluding(test, labels, lib, params, None)
}

/// As [`grade_volume`], leaving template `exclude` out of the library.
pub fn grade_volume_excluding(
    test: &Volume3D,
    labels: &LabelMap,
    lib: &TrainingLibrary,
    params: &GradingParams,
    exclude: Option<usize>,
) -> Result<GradingMap> {
    params.validate()?;
    volio::validate_pair(test, labels)?;
    check_test_geometry(test, lib)?;
    let targets = gradable_voxels(labels, params.patch_radius);
    let field = match params.method {
        SearchMethod::Exact => knn_exact_field(test, &targets, lib, params, exclude)?,
        SearchMethod::PatchMatch => knn_patchmatch(test, &targets, lib, params, exclude)?,
    };
    let eps = params.effective_epsilon();
    let grades = field
        .neighbors
        .par_iter()
        .map(|n| grade_neighbors(n, eps))
        .collect::<Result<Vec<f64>>>()?;
    let mut data = vec![UNGRADED; test.len()];
    let mut mask = vec![false; test.len()];
    for (&v, g) in field.voxels.iter().zip(grades) {
        data[v] = g as f32;
        mask[v] = true;
    }
    GradingMap::from_parts(Volume3D::new(test.dims(), test.spacing(), data)?, mask)
}
