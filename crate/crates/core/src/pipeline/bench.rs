//! Wall-clock comparison of exact and PatchMatch grading.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grading::{self, mix_seed, GradingError, GradingMap, GradingParams, SearchMethod, Status, TemplateEntry, TrainingLibrary};
use crate::volio::{LabelMap, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// Edge length of the cubic volumes.
    pub size: usize,
    pub templates: usize,
    pub k: usize,
    pub patch_radius: usize,
    pub search_window: usize,
    pub pm_iterations: usize,
    pub threads: Vec<usize>,
    pub repeats: usize,
    pub methods: Vec<SearchMethod>,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            size: 64,
            templates: 10,
            k: 50,
            patch_radius: 2,
            search_window: 3,
            pm_iterations: 4,
            threads: vec![1],
            repeats: 1,
            methods: vec![SearchMethod::Exact, SearchMethod::PatchMatch],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: SearchMethod,
    pub threads: usize,
    /// Seconds per graded subject, one entry per repeat.
    pub seconds: Vec<f64>,
}

impl BenchRow {
    pub fn mean(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.seconds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// (max − min) / min across repeats.
    pub fn spread(&self) -> f64 {
        let max = self.seconds.iter().copied().fold(0.0, f64::max);
        (max - self.min()) / self.min()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub spec: BenchmarkSpec,
    pub graded_voxels: usize,
    pub rows: Vec<BenchRow>,
    /// Exact grades were bit-identical for every thread count tried.
    pub exact_identical_across_threads: bool,
}

impl BenchmarkReport {
    pub fn row(&self, method: SearchMethod, threads: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.threads == threads)
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "dims = {0}x{0}x{0}\ntemplates = {1}\nk = {2}\npatch_radius = {3}\nsearch_window = {4}\npm_iterations = {5}\ngraded_voxels = {6}",
            s.size, s.templates, s.k, s.patch_radius, s.search_window, s.pm_iterations, self.graded_voxels
        );
        let _ = writeln!(out, "{:<11} {:>7} {:>10} {:>10} {:>7}", "mode", "threads", "mean_s", "min_s", "spread");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<11} {:>7} {:>10.3} {:>10.3} {:>6.1}%",
                r.method.as_str(),
                r.threads,
                r.mean(),
                r.min(),
                100.0 * r.spread()
            );
        }
        let _ = writeln!(out, "exact_identical_across_threads = {}", self.exact_identical_across_threads);
        out
    }
}

/// Smooth random field plus white noise, fully labelled.
pub fn benchmark_data(spec: &BenchmarkSpec) -> Result<(Volume3D, LabelMap, TrainingLibrary), GradingError> {
    let n = spec.size;
    let dims = [n; 3];
    let mut anat = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
    let waves: Vec<([f64; 3], f64)> = (0..6)
        .map(|_| ([0; 3].map(|_| anat.random_range(0.05..0.4)), anat.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let make = |subject: u64, shift: f64| -> Result<Volume3D, GradingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, subject));
        let mut data = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let smooth: f64 = waves
                        .iter()
                        .map(|(f, ph)| (f[0] * i as f64 + f[1] * j as f64 + f[2] * k as f64 + ph).sin())
                        .sum();
                    data.push((smooth + shift + rng.random_range(-0.3..0.3)) as f32);
                }
            }
        }
        Ok(Volume3D::new(dims, [1.0; 3], data)?)
    };
    let labels = LabelMap::new(dims, [1.0; 3], vec![1; n * n * n])?;
    let mut entries = Vec::with_capacity(spec.templates);
    for t in 0..spec.templates {
        let (status, shift) = if t % 2 == 0 { (Status::Cn, 0.0) } else { (Status::Ad, 0.2) };
        entries.push(TemplateEntry::new(make(t as u64 + 1, shift)?, labels.clone(), status)?);
    }
    let test = make(0, 0.1)?;
    Ok((test, labels, TrainingLibrary::new(entries)?))
}

/// Times one-subject grading for each method and thread count.
pub fn benchmark_grading(spec: &BenchmarkSpec) -> Result<BenchmarkReport, GradingError> {
    let (test, labels, lib) = benchmark_data(spec)?;
    let mut rows = Vec::new();
    let mut exact_maps: Vec<GradingMap> = Vec::new();
    let mut graded_voxels = 0;
    for &method in &spec.methods {
        for &threads in &spec.threads {
            let params = GradingParams {
                patch_radius: spec.patch_radius,
                k: spec.k,
                search_window: spec.search_window,
                epsilon: None,
                method,
                pm_iterations: spec.pm_iterations,
                seed: spec.seed,
            };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| GradingError::InvalidParams(e.to_string()))?;
            let mut seconds = Vec::new();
            for _ in 0..spec.repeats.max(1) {
                let t0 = Instant::now();
                let map = pool.install(|| grading::grade_volume(&test, &labels, &lib, &params))?;
                seconds.push(t0.elapsed().as_secs_f64());
                graded_voxels = map.graded_count();
                if method == SearchMethod::Exact && exact_maps.len() < spec.threads.len() {
                    exact_maps.push(map);
                }
            }
            rows.push(BenchRow { method, threads, seconds });
        }
    }
    let exact_identical_across_threads = exact_maps.windows(2).all(|w| {
        w[0].mask() == w[1].mask()
            && w[0]
                .grades()
                .data()
                .iter()
                .zip(w[1].grades().data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    Ok(BenchmarkReport {
        spec: spec.clone(),
        graded_voxels,
        rows,
        exact_identical_across_threads,
    })
}
