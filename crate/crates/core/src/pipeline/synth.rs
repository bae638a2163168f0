//! Synthetic registered cohorts: box structures with textured intensities.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::grading::mix_seed;
use crate::pipeline::config::ConfigError;
use crate::volio::{self, Cohort, Group, LabelMap, Sex, SubjectRecord, Volume3D, VolioError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("structures do not fit: box of {size} in cells of {cell} voxels")]
    OverlappingStructures { size: usize, cell: usize },
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Volio(#[from] VolioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

const ANATOMY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub structures: usize,
    /// Side of each cubic structure, in voxels.
    pub structure_size: usize,
    /// Structure ids receiving the group perturbation.
    pub affected: Vec<u32>,
    pub noise_sd: f64,
    /// Amplitude of the smooth within-structure pattern.
    pub texture: f64,
    /// Intensity offset per group in noise-sd units, ordered as [`Group::ALL`].
    pub severity: [f64; 4],
    /// Subjects per group, ordered as [`Group::ALL`].
    pub counts: [usize; 4],
    pub age_min: f64,
    pub age_max: f64,
    /// Intensity change per year from the mid age, in noise-sd units.
    pub age_effect: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            structures: 8,
            structure_size: 8,
            affected: vec![1, 3],
            noise_sd: 0.1,
            texture: 0.5,
            severity: [0.0, 0.5, 2.5, 3.0],
            counts: [40, 20, 20, 40],
            age_min: 60.0,
            age_max: 85.0,
            age_effect: 0.0,
            seed: 0,
            out_dir: PathBuf::from("synth"),
        }
    }
}

fn group_slot(g: Group) -> usize {
    Group::ALL.iter().position(|&x| x == g).expect("known group")
}

fn group_key(g: Group) -> &'static str {
    match g {
        Group::CN => "cn",
        Group::sMCI => "smci",
        Group::pMCI => "pmci",
        Group::AD => "ad",
    }
}

impl SynthSpec {
    pub fn severity_of(&self, g: Group) -> f64 {
        self.severity[group_slot(g)]
    }

    pub fn count_of(&self, g: Group) -> usize {
        self.counts[group_slot(g)]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        match key {
            "synth.dims" => {
                let parts = v.split(',').map(int).collect::<Result<Vec<_>, _>>()?;
                self.dims = match parts[..] {
                    [d] => [d; 3],
                    [a, b, c] => [a, b, c],
                    _ => return Err(bad()),
                };
            }
            "synth.structures" => self.structures = int(v)?,
            "synth.structure_size" => self.structure_size = int(v)?,
            "synth.affected" => {
                self.affected = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| s.trim().parse::<u32>().map_err(|_| bad()))
                        .collect::<Result<_, _>>()?
                };
            }
            "synth.noise_sd" => self.noise_sd = num(v)?,
            "synth.texture" => self.texture = num(v)?,
            "synth.age_min" => self.age_min = num(v)?,
            "synth.age_max" => self.age_max = num(v)?,
            "synth.age_effect" => self.age_effect = num(v)?,
            _ => {
                for g in Group::ALL {
                    if key == format!("synth.severity.{}", group_key(g)) {
                        self.severity[group_slot(g)] = num(v)?;
                        return Ok(());
                    }
                    if key == format!("synth.count.{}", group_key(g)) {
                        self.counts[group_slot(g)] = int(v)?;
                        return Ok(());
                    }
                }
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                });
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs accepted by [`SynthSpec::set`], plus the output directory.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let join = |v: Vec<String>| v.join(",");
        let mut out = vec![
            ("synth.dims".to_string(), join(self.dims.iter().map(|d| d.to_string()).collect())),
            ("synth.structures".into(), self.structures.to_string()),
            ("synth.structure_size".into(), self.structure_size.to_string()),
            ("synth.affected".into(), join(self.affected.iter().map(|a| a.to_string()).collect())),
            ("synth.noise_sd".into(), self.noise_sd.to_string()),
            ("synth.texture".into(), self.texture.to_string()),
        ];
        for g in Group::ALL {
            out.push((format!("synth.severity.{}", group_key(g)), self.severity_of(g).to_string()));
        }
        for g in Group::ALL {
            out.push((format!("synth.count.{}", group_key(g)), self.count_of(g).to_string()));
        }
        out.push(("synth.age_min".into(), self.age_min.to_string()));
        out.push(("synth.age_max".into(), self.age_max.to_string()));
        out.push(("synth.age_effect".into(), self.age_effect.to_string()));
        out.push(("synth.out_dir".into(), self.out_dir.display().to_string()));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(SynthError::Invalid(m));
        if self.structures < 2 {
            return invalid("need at least 2 structures".into());
        }
        if self.structure_size == 0 || self.dims.contains(&0) {
            return invalid("sizes must be positive".into());
        }
        if let Some(a) = self.affected.iter().find(|&&a| a == 0 || a as usize > self.structures) {
            return invalid(format!("affected structure {a} out of range"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return invalid("noise_sd must be > 0".into());
        }
        if !self.texture.is_finite() || !self.age_effect.is_finite() {
            return invalid("texture and age_effect must be finite".into());
        }
        if self.severity.iter().any(|s| !s.is_finite()) || self.severity.windows(2).any(|w| w[0] > w[1]) {
            return invalid("severities must be ordered CN <= sMCI <= pMCI <= AD".into());
        }
        if !(self.age_min <= self.age_max) {
            return invalid("age_min must be <= age_max".into());
        }
        self.boxes().map(|_| ())
    }

    /// Axis-aligned structure boxes `[lo, hi)`; structure `s` is entry `s − 1`.
    pub fn boxes(&self) -> Result<Vec<([usize; 3], [usize; 3])>> {
        let mut m = 1;
        while m * m * m < self.structures {
            m += 1;
        }
        let cell = self.dims.map(|d| d / m);
        let size = self.structure_size;
        if let Some(&c) = cell.iter().find(|&&c| size > c) {
            return Err(SynthError::OverlappingStructures { size, cell: c });
        }
        Ok((0..self.structures)
            .map(|s| {
                let g = [s % m, (s / m) % m, s / (m * m)];
                let lo = [0, 1, 2].map(|a| g[a] * cell[a] + (cell[a] - size) / 2);
                (lo, lo.map(|l| l + size))
            })
            .collect())
    }

    /// Label map shared by every subject.
    pub fn labelmap(&self) -> Result<LabelMap> {
        let boxes = self.boxes()?;
        let n: usize = self.dims.iter().product();
        let mut labels = vec![0u32; n];
        for (s, (lo, hi)) in boxes.iter().enumerate() {
            for k in lo[2]..hi[2] {
                for j in lo[1]..hi[1] {
                    for i in lo[0]..hi[0] {
                        labels[volio::linear_index(self.dims, i, j, k)] = s as u32 + 1;
                    }
                }
            }
        }
        Ok(LabelMap::new(self.dims, [1.0; 3], labels)?)
    }

    /// Noise-free intensity per voxel for a subject of `group` at `age`.
    fn mean_image(&self, lm: &LabelMap, group: Group, age: f64) -> Result<Vec<f64>> {
        let boxes = self.boxes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, ANATOMY_STREAM));
        let anatomy: Vec<([f64; 3], f64)> = (0..self.structures)
            .map(|s| {
                let phase = [0; 3].map(|_| rng.random_range(0.0..TAU));
                (phase, 1.0 + 0.25 * s as f64)
            })
            .collect();
        let offset = self.severity_of(group) * self.noise_sd;
        let aging = self.age_effect * self.noise_sd * (age - 0.5 * (self.age_min + self.age_max));
        let period = self.structure_size.max(2) as f64;
        let [nx, ny, _] = self.dims;
        Ok(lm
            .labels()
            .iter()
            .enumerate()
            .map(|(idx, &l)| {
                if l == 0 {
                    return 0.0;
                }
                let s = l as usize - 1;
                let (lo, _) = boxes[s];
                let c = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
                let (phase, base) = anatomy[s];
                let wave: f64 = (0..3)
                    .map(|a| (TAU * (c[a] - lo[a]) as f64 / period + phase[a]).sin())
                    .product();
                let disease = if self.affected.contains(&l) { offset } else { 0.0 };
                base + self.texture * wave + disease + aging
            })
            .collect())
    }

    /// One subject's volume; `index` selects the noise stream.
    pub fn subject_volume(&self, lm: &LabelMap, group: Group, age: f64, index: u64) -> Result<Volume3D> {
        let mean = self.mean_image(lm, group, age)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index));
        let noise = Normal::new(0.0, self.noise_sd).map_err(|e| SynthError::Invalid(e.to_string()))?;
        let data = mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect();
        Ok(Volume3D::new(self.dims, [1.0; 3], data)?)
    }

    /// Subject list in manifest order with ages and sexes drawn from the seed.
    pub fn subjects(&self) -> Vec<(String, Group, f64, Sex)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, ANATOMY_STREAM - 1));
        let mut out = Vec::new();
        for g in Group::ALL {
            for i in 0..self.count_of(g) {
                let age = (rng.random_range(self.age_min..=self.age_max) * 10.0).round() / 10.0;
                let sex = if rng.random_bool(0.5) { Sex::F } else { Sex::M };
                out.push((format!("{}_{i:03}", g.as_str()), g, age, sex));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub cohort: Cohort,
}

/// Writes volumes, label maps and `manifest.csv` under `spec.out_dir`.
pub fn synth_cohort(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let out = &spec.out_dir;
    fs::create_dir_all(out.join("volumes"))?;
    fs::create_dir_all(out.join("labels"))?;
    let lm = spec.labelmap()?;
    let subjects = spec.subjects();
    let records = subjects
        .par_iter()
        .enumerate()
        .map(|(index, (id, group, age, sex))| {
            let vol = spec.subject_volume(&lm, *group, *age, index as u64)?;
            let volume_path = Path::new("volumes").join(format!("{id}.vol"));
            let label_path = Path::new("labels").join(format!("{id}.lab"));
            volio::write_volume(&vol, out.join(&volume_path))?;
            volio::write_labelmap(&lm, out.join(&label_path))?;
            Ok(SubjectRecord {
                subject_id: id.clone(),
                group: *group,
                age: *age,
                sex: *sex,
                volume_path,
                label_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.csv");
    volio::write_manifest(&Cohort { records }, &manifest)?;
    let cohort = volio::read_manifest(&manifest)?;
    Ok(SynthOutput { manifest, cohort })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            dims: [16; 3],
            structure_size: 4,
            counts: [2, 1, 1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn boxes_are_disjoint_and_labelled() {
        let spec = small();
        let lm = spec.labelmap().unwrap();
        assert_eq!(lm.structure_ids(), (1..=8).collect::<Vec<u32>>());
        for id in 1..=8u32 {
            assert_eq!(lm.labels().iter().filter(|&&l| l == id).count(), 64);
        }
        let tight = SynthSpec {
            structure_size: 9,
            ..small()
        };
        assert!(matches!(tight.validate(), Err(SynthError::OverlappingStructures { .. })));
    }

    #[test]
    fn perturbation_only_in_affected() {
        let spec = SynthSpec {
            affected: vec![3],
            ..small()
        };
        let lm = spec.labelmap().unwrap();
        let cn = spec.mean_image(&lm, Group::CN, 70.0).unwrap();
        let ad = spec.mean_image(&lm, Group::AD, 70.0).unwrap();
        for (idx, &l) in lm.labels().iter().enumerate() {
            let diff = ad[idx] - cn[idx];
            if l == 3 {
                assert!((diff - 3.0 * spec.noise_sd).abs() < 1e-12);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn severity_order_enforced() {
        let spec = SynthSpec {
            severity: [0.0, 2.0, 1.0, 3.0],
            ..small()
        };
        assert!(spec.validate().is_err());
        assert!(SynthSpec {
            affected: vec![9],
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out_a = synth_cohort(&SynthSpec {
            out_dir: a.path().to_path_buf(),
            ..small()
        })
        .unwrap();
        synth_cohort(&SynthSpec {
            out_dir: b.path().to_path_buf(),
            ..small()
        })
        .unwrap();
        assert_eq!(out_a.cohort.len(), 6);
        for r in &out_a.cohort.records {
            let rel = r.volume_path.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&r.volume_path).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join("manifest.csv")).unwrap(),
            fs::read(b.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn spec_pairs_round_trip() {
        let spec = SynthSpec {
            dims: [20, 24, 28],
            affected: vec![],
            severity: [0.0, 0.0, 1.0, 2.0],
            ..small()
        };
        let mut back = SynthSpec::default();
        for (k, v) in spec.pairs() {
            if k != "synth.out_dir" {
                back.set(&k, &v).unwrap();
            }
        }
        back.out_dir = spec.out_dir.clone();
        assert_eq!(back, spec);
    }
}
