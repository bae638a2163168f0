//! Flat `key = value` configuration with strict key checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::brain_graph::{GraphParams, SigmaMode};
use crate::classify::ForestParams;
use crate::featsel::{ElasticNetParams, L1Penalty};
use crate::grading::{GradingParams, SearchMethod};
use crate::pipeline::synth::SynthSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("`{key}`: invalid value `{value}`")]
    BadValue { key: String, value: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierChoice {
    Svm,
    Rf,
    Both,
}

impl ClassifierChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierChoice::Svm => "svm",
            ClassifierChoice::Rf => "rf",
            ClassifierChoice::Both => "both",
        }
    }

    pub fn svm(self) -> bool {
        matches!(self, ClassifierChoice::Svm | ClassifierChoice::Both)
    }

    pub fn rf(self) -> bool {
        matches!(self, ClassifierChoice::Rf | ClassifierChoice::Both)
    }
}

impl FromStr for ClassifierChoice {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "svm" => Ok(ClassifierChoice::Svm),
            "rf" => Ok(ClassifierChoice::Rf),
            "both" => Ok(ClassifierChoice::Both),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Cohort manifest.
    pub manifest: Option<PathBuf>,
    /// Optional separate template-library manifest; defaults to the CN/AD rows of `manifest`.
    pub templates: Option<PathBuf>,
    pub work_dir: PathBuf,
    /// Report path; defaults to `<work_dir>/report.txt`.
    pub report: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub grading: GradingParams,
    pub graph: GraphParams,
    pub en: ElasticNetParams,
    pub classifier: ClassifierChoice,
    pub forest: ForestParams,
    pub rf_runs: usize,
    pub cv_folds: usize,
    /// Write wall-clock timings into the report (breaks byte-identical reruns).
    pub report_timing: bool,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            templates: None,
            work_dir: PathBuf::from("work"),
            report: None,
            seed: 0,
            threads: 0,
            grading: GradingParams::default(),
            graph: GraphParams::default(),
            en: ElasticNetParams::default(),
            classifier: ClassifierChoice::Both,
            forest: ForestParams::default(),
            rf_runs: 30,
            cv_folds: 5,
            report_timing: false,
            synth: SynthSpec::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "paths.manifest",
    "paths.templates",
    "paths.work_dir",
    "paths.report",
    "seed",
    "threads",
    "grading.patch_radius",
    "grading.k",
    "grading.search_window",
    "grading.epsilon",
    "grading.method",
    "grading.pm_iterations",
    "graph.sigma",
    "graph.min_voxels",
    "en.target_nonzeros",
    "en.lambda1",
    "en.lambda2",
    "en.max_iterations",
    "en.tolerance",
    "classifier",
    "rf.n_trees",
    "rf.mtry",
    "rf.min_leaf",
    "rf.max_depth",
    "rf.runs",
    "svm.cv_folds",
    "report.timing",
    "synth.dims",
    "synth.structures",
    "synth.structure_size",
    "synth.affected",
    "synth.noise_sd",
    "synth.texture",
    "synth.severity.cn",
    "synth.severity.smci",
    "synth.severity.pmci",
    "synth.severity.ad",
    "synth.count.cn",
    "synth.count.smci",
    "synth.count.pmci",
    "synth.count.ad",
    "synth.age_min",
    "synth.age_max",
    "synth.age_effect",
    "synth.out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn opt_auto<T: FromStr>(key: &str, value: &str, auto: &str) -> Result<Option<T>, ConfigError> {
    if value == auto {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Reads `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || (t.starts_with('[') && t.ends_with(']')) {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey {
                line,
                key: k.to_string(),
            });
        }
        if out.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(ConfigError::DuplicateKey {
                line,
                key: k.to_string(),
            });
        }
    }
    Ok(out)
}

impl PipelineConfig {
    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mut c = PipelineConfig::default();
        let mut work_dir_set = false;
        let mut synth_out: Option<PathBuf> = None;
        for (key, (_, v)) in &pairs {
            let k = key.as_str();
            let v = v.as_str();
            match k {
                "paths.manifest" => c.manifest = Some(resolve(base_dir, v)),
                "paths.templates" => c.templates = Some(resolve(base_dir, v)),
                "paths.work_dir" => {
                    c.work_dir = resolve(base_dir, v);
                    work_dir_set = true;
                }
                "paths.report" => c.report = Some(resolve(base_dir, v)),
                "seed" => c.seed = parse(k, v)?,
                "threads" => c.threads = parse(k, v)?,
                "grading.patch_radius" => c.grading.patch_radius = parse(k, v)?,
                "grading.k" => c.grading.k = parse(k, v)?,
                "grading.search_window" => c.grading.search_window = parse(k, v)?,
                "grading.epsilon" => c.grading.epsilon = opt_auto(k, v, "auto")?,
                "grading.method" => c.grading.method = parse::<SearchMethod>(k, v)?,
                "grading.pm_iterations" => c.grading.pm_iterations = parse(k, v)?,
                "graph.sigma" => {
                    c.graph.sigma = match opt_auto::<f64>(k, v, "median")? {
                        Some(s) => SigmaMode::Fixed(s),
                        None => SigmaMode::MedianHeuristic,
                    }
                }
                "graph.min_voxels" => c.graph.min_voxels = parse(k, v)?,
                "en.target_nonzeros" => c.en.l1 = L1Penalty::TargetNonzeros(parse(k, v)?),
                "en.lambda1" => c.en.l1 = L1Penalty::Fixed(parse(k, v)?),
                "en.lambda2" => c.en.lambda2 = parse(k, v)?,
                "en.max_iterations" => c.en.max_iterations = parse(k, v)?,
                "en.tolerance" => c.en.tolerance = parse(k, v)?,
                "classifier" => c.classifier = parse(k, v)?,
                "rf.n_trees" => c.forest.n_trees = parse(k, v)?,
                "rf.mtry" => c.forest.mtry = opt_auto(k, v, "auto")?,
                "rf.min_leaf" => c.forest.min_leaf = parse(k, v)?,
                "rf.max_depth" => c.forest.max_depth = opt_auto(k, v, "none")?,
                "rf.runs" => c.rf_runs = parse(k, v)?,
                "svm.cv_folds" => c.cv_folds = parse(k, v)?,
                "report.timing" => c.report_timing = parse(k, v)?,
                "synth.out_dir" => synth_out = Some(resolve(base_dir, v)),
                _ => c.synth.set(k, v)?,
            }
        }
        if pairs.contains_key("en.target_nonzeros") && pairs.contains_key("en.lambda1") {
            return Err(ConfigError::Invalid(
                "en.target_nonzeros and en.lambda1 are mutually exclusive".into(),
            ));
        }
        if !work_dir_set {
            c.work_dir = base_dir.join("work");
        }
        c.synth.out_dir = synth_out.unwrap_or_else(|| c.work_dir.join("synth"));
        c.validate_params()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Checks every nested parameter block.
    pub fn validate_params(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.grading.validate().map_err(|e| invalid(&e))?;
        self.graph.validate().map_err(|e| invalid(&e))?;
        self.en.validate().map_err(|e| invalid(&e))?;
        self.forest.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if self.rf_runs == 0 {
            return Err(ConfigError::Invalid("rf.runs must be >= 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(ConfigError::Invalid("svm.cv_folds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| self.work_dir.join("report.txt"))
    }

    /// Every key with its effective value, in a form [`PipelineConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.manifest {
            kv("paths.manifest", p.display().to_string());
        }
        if let Some(p) = &self.templates {
            kv("paths.templates", p.display().to_string());
        }
        kv("paths.work_dir", self.work_dir.display().to_string());
        if let Some(p) = &self.report {
            kv("paths.report", p.display().to_string());
        }
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        let g = &self.grading;
        kv("grading.patch_radius", g.patch_radius.to_string());
        kv("grading.k", g.k.to_string());
        kv("grading.search_window", g.search_window.to_string());
        kv("grading.epsilon", g.epsilon.map_or("auto".into(), |e| e.to_string()));
        kv("grading.method", g.method.as_str().to_string());
        kv("grading.pm_iterations", g.pm_iterations.to_string());
        kv(
            "graph.sigma",
            match self.graph.sigma {
                SigmaMode::Fixed(s) => s.to_string(),
                SigmaMode::MedianHeuristic => "median".into(),
            },
        );
        kv("graph.min_voxels", self.graph.min_voxels.to_string());
        match self.en.l1 {
            L1Penalty::TargetNonzeros(t) => kv("en.target_nonzeros", t.to_string()),
            L1Penalty::Fixed(l) => kv("en.lambda1", l.to_string()),
        }
        kv("en.lambda2", self.en.lambda2.to_string());
        kv("en.max_iterations", self.en.max_iterations.to_string());
        kv("en.tolerance", self.en.tolerance.to_string());
        kv("classifier", self.classifier.as_str().to_string());
        kv("rf.n_trees", self.forest.n_trees.to_string());
        kv("rf.mtry", self.forest.mtry.map_or("auto".into(), |m| m.to_string()));
        kv("rf.min_leaf", self.forest.min_leaf.to_string());
        kv("rf.max_depth", self.forest.max_depth.map_or("none".into(), |d| d.to_string()));
        kv("rf.runs", self.rf_runs.to_string());
        kv("svm.cv_folds", self.cv_folds.to_string());
        kv("report.timing", self.report_timing.to_string());
        for (k, v) in self.synth.pairs() {
            kv(&k, v);
        }
        s
    }
}
