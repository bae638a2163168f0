//! End-to-end orchestration: grade, build graphs, select features, classify MCI.
//!
//! Each stage persists its artifacts under the work directory so the CLI can
//! run stages one at a time; [`run_pipeline`] chains them in memory.

pub mod bench;
pub mod config;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brain_graph::{self, GraphError};
use crate::classify::{self, ClassifyError, EvalReport, ForestModel, GridSearch};
use crate::featsel::{self, AgeModel, FeatselError, FeatureMatrix, SelectionMask, ZScoreModel};
use crate::grading::{self, mix_seed, GradingError, GradingMap, Status, TemplateEntry, TrainingLibrary};
use crate::volio::{self, Cohort, Group, SubjectRecord, VolioError};

pub use bench::{benchmark_grading, BenchmarkReport, BenchmarkSpec};
pub use config::{ClassifierChoice, ConfigError, PipelineConfig};
pub use synth::{synth_cohort, SynthError, SynthOutput, SynthSpec};

pub const STREAM_SYNTH: u64 = 1;
pub const STREAM_GRADING: u64 = 2;
pub const STREAM_CV: u64 = 3;
pub const STREAM_RF: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

trait Kind: fmt::Display {
    fn kind(&self) -> ErrorKind;
}

impl Kind for ConfigError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Usage
    }
}

impl Kind for VolioError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Kind for std::io::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Kind for serde_json::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Kind for GradingError {
    fn kind(&self) -> ErrorKind {
        match self {
            GradingError::InvalidParams(_) | GradingError::RadiusMismatch(..) => ErrorKind::Usage,
            GradingError::InvalidDistance(_) | GradingError::EmptyNeighborhood => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

impl Kind for GraphError {
    fn kind(&self) -> ErrorKind {
        match self {
            GraphError::InvalidParams(_) => ErrorKind::Usage,
            GraphError::NotNormalized(_) | GraphError::GradeOutOfRange(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

impl Kind for FeatselError {
    fn kind(&self) -> ErrorKind {
        match self {
            FeatselError::InvalidParams(_) => ErrorKind::Usage,
            FeatselError::NoFeatureSelected(_) | FeatselError::NonFinite { .. } | FeatselError::EmptyMask => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }
}

impl Kind for ClassifyError {
    fn kind(&self) -> ErrorKind {
        match self {
            ClassifyError::InvalidParams(_) => ErrorKind::Usage,
            ClassifyError::NonFinite => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

impl Kind for SynthError {
    fn kind(&self) -> ErrorKind {
        match self {
            SynthError::Invalid(_) | SynthError::OverlappingStructures { .. } => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

fn at<E: Kind>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.kind(), &e)
}

// ---------------------------------------------------------------- hygiene

/// Subject ids handed to each fitting routine, in call order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitAudit {
    pub entries: Vec<(String, Vec<String>)>,
}

impl FitAudit {
    fn record(&mut self, stage: &str, ids: &[String]) {
        self.entries.push((stage.to_string(), ids.to_vec()));
    }

    /// Every id seen by any fit.
    pub fn all_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().flat_map(|(_, ids)| ids.iter().map(String::as_str)).collect()
    }
}

/// Row positions of CN and AD subjects; the only rows any fit may receive.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRows {
    rows: Vec<usize>,
    cn: Vec<usize>,
}

impl TrainingRows {
    pub fn new(groups: &[Group]) -> Self {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].is_training()).collect();
        let cn = rows.iter().copied().filter(|&i| groups[i] == Group::CN).collect();
        Self { rows, cn }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cn_rows(&self) -> &[usize] {
        &self.cn
    }
}

/// Cohort columns used by the fitting stages.
#[derive(Debug, Clone)]
pub struct Subjects {
    pub ids: Vec<String>,
    pub groups: Vec<Group>,
    pub ages: Vec<f64>,
}

impl Subjects {
    pub fn of(cohort: &Cohort) -> Self {
        Self {
            ids: cohort.records.iter().map(|r| r.subject_id.clone()).collect(),
            groups: cohort.records.iter().map(|r| r.group).collect(),
            ages: cohort.records.iter().map(|r| r.age).collect(),
        }
    }

    pub fn training(&self) -> TrainingRows {
        TrainingRows::new(&self.groups)
    }

    /// CN → +1, AD → −1.
    pub fn training_labels(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&r| match self.groups[r] {
                Group::CN => 1.0,
                Group::AD => -1.0,
                g => unreachable!("{g} row in training partition"),
            })
            .collect()
    }

    pub fn test_rows(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&i| self.groups[i].is_mci()).collect()
    }
}

// ---------------------------------------------------------------- artifacts

fn grades_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("grades")
}

fn graphs_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("graphs")
}

fn grade_paths(cfg: &PipelineConfig, id: &str) -> (PathBuf, PathBuf) {
    let d = grades_dir(cfg);
    (d.join(format!("{id}.grades.vol")), d.join(format!("{id}.mask.lab")))
}

pub fn raw_features_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("features_raw.csv")
}

pub fn features_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("features.csv")
}

pub fn selection_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("selection.txt")
}

fn preprocess_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("preprocess.json")
}

fn models_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("models")
}

fn eval_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("eval.json")
}

pub fn timing_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.work_dir.join("timing.txt")
}

fn write_json<T: Serialize>(stage: &'static str, value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value).map_err(at(stage))?;
    fs::write(path, text).map_err(at(stage))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &'static str, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::new(stage, ErrorKind::Data, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(at(stage))
}

// ---------------------------------------------------------------- stages

/// Reads the cohort manifest; it must contain CN, AD and at least one MCI subject.
pub fn load_cohort(cfg: &PipelineConfig) -> Result<Cohort> {
    const STAGE: &str = "cohort";
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| PipelineError::new(STAGE, ErrorKind::Usage, "paths.manifest is not set"))?;
    let cohort = volio::read_manifest(path).map_err(at(STAGE))?;
    if cohort.count(Group::CN) == 0 || cohort.count(Group::AD) == 0 {
        return Err(PipelineError::new(STAGE, ErrorKind::Data, "cohort needs CN and AD subjects"));
    }
    if cohort.count(Group::sMCI) + cohort.count(Group::pMCI) == 0 {
        return Err(PipelineError::new(STAGE, ErrorKind::Data, "cohort has no sMCI or pMCI subject"));
    }
    Ok(cohort)
}

/// Template records: the separate template manifest if configured, else the cohort's CN/AD rows.
pub fn template_records(cfg: &PipelineConfig, cohort: &Cohort) -> Result<Vec<SubjectRecord>> {
    const STAGE: &str = "library";
    let records = match &cfg.templates {
        Some(p) => volio::read_manifest(p).map_err(at(STAGE))?.records,
        None => cohort.records.iter().filter(|r| r.group.is_training()).cloned().collect(),
    };
    if let Some(r) = records.iter().find(|r| !r.group.is_training()) {
        return Err(PipelineError::new(
            STAGE,
            ErrorKind::Data,
            format!("template {} is {}; only CN and AD may be templates", r.subject_id, r.group),
        ));
    }
    Ok(records)
}

pub fn build_library(records: &[SubjectRecord], audit: &mut FitAudit) -> Result<TrainingLibrary> {
    const STAGE: &str = "library";
    let entries = records
        .par_iter()
        .map(|r| {
            let v = volio::read_volume(&r.volume_path).map_err(at(STAGE))?;
            let l = volio::read_labelmap(&r.label_path).map_err(at(STAGE))?;
            let status = if r.group == Group::AD { Status::Ad } else { Status::Cn };
            TemplateEntry::new(v, l, status).map_err(at(STAGE))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    audit.record("grading_library", &ids);
    TrainingLibrary::new(entries).map_err(at(STAGE))
}

/// Grades every cohort subject; library members are graded leave-one-out.
pub fn stage_grade(
    cfg: &PipelineConfig,
    cohort: &Cohort,
    library: &TrainingLibrary,
    template_ids: &[String],
) -> Result<Vec<GradingMap>> {
    const STAGE: &str = "grade";
    fs::create_dir_all(grades_dir(cfg)).map_err(at(STAGE))?;
    let grading_seed = mix_seed(cfg.seed, STREAM_GRADING);
    cohort
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = volio::read_volume(&r.volume_path).map_err(at(STAGE))?;
            let l = volio::read_labelmap(&r.label_path).map_err(at(STAGE))?;
            let mut params = cfg.grading.clone();
            params.seed = mix_seed(grading_seed, i as u64);
            let exclude = template_ids.iter().position(|t| *t == r.subject_id);
            let map = grading::grade_volume_excluding(&v, &l, library, &params, exclude)
                .map_err(|e| PipelineError::new(STAGE, e.kind(), format!("{}: {e}", r.subject_id)))?;
            let (gp, mp) = grade_paths(cfg, &r.subject_id);
            map.save(gp, mp).map_err(at(STAGE))?;
            Ok(map)
        })
        .collect()
}

pub fn load_grades(cfg: &PipelineConfig, cohort: &Cohort) -> Result<Vec<GradingMap>> {
    cohort
        .records
        .iter()
        .map(|r| {
            let (gp, mp) = grade_paths(cfg, &r.subject_id);
            GradingMap::load(gp, mp).map_err(at("graph"))
        })
        .collect()
}

/// Sorted union of structure ids across the cohort's label maps.
pub fn canonical_structures(cohort: &Cohort) -> Result<Vec<u32>> {
    let mut ids = BTreeSet::new();
    for r in &cohort.records {
        let l = volio::read_labelmap(&r.label_path).map_err(at("graph"))?;
        ids.extend(l.structure_ids());
    }
    Ok(ids.into_iter().collect())
}

/// Graph per subject and the raw feature matrix; missing edges are NaN.
pub fn stage_graph(cfg: &PipelineConfig, cohort: &Cohort, maps: &[GradingMap]) -> Result<FeatureMatrix> {
    const STAGE: &str = "graph";
    fs::create_dir_all(graphs_dir(cfg)).map_err(at(STAGE))?;
    let canonical = canonical_structures(cohort)?;
    let rows = cohort
        .records
        .par_iter()
        .zip(maps)
        .map(|(r, map)| {
            let l = volio::read_labelmap(&r.label_path).map_err(at(STAGE))?;
            let g = brain_graph::build_graph(map, &l, &cfg.graph)
                .map_err(|e| PipelineError::new(STAGE, e.kind(), format!("{}: {e}", r.subject_id)))?;
            g.write_csv(graphs_dir(cfg).join(format!("{}.csv", r.subject_id)))
                .map_err(at(STAGE))?;
            let fv = brain_graph::graph_to_features(&g, &canonical).map_err(at(STAGE))?;
            Ok(fv.values)
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = cohort.records.iter().map(|r| r.subject_id.clone()).collect();
    let x = FeatureMatrix::from_rows(ids, brain_graph::feature_names(&canonical), &rows).map_err(at(STAGE))?;
    x.write_csv(raw_features_path(cfg)).map_err(at(STAGE))?;
    Ok(x)
}

/// Fitted preprocessing and selection state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub feature_names: Vec<String>,
    /// Training-row mean per column, used for missing edges.
    pub impute_means: Vec<f64>,
    pub age: AgeModel,
    pub zscore: ZScoreModel,
    pub selection: SelectionMask,
}

/// Impute, age-correct, z-score and select; every fit sees CN/AD rows only.
pub fn stage_features(
    cfg: &PipelineConfig,
    subjects: &Subjects,
    raw: &FeatureMatrix,
    audit: &mut FitAudit,
) -> Result<(FeatureMatrix, Preprocess)> {
    const STAGE: &str = "features";
    let train = subjects.training();
    let p = raw.ncols();

    let train_raw = raw.select_rows(train.rows());
    audit.record("impute", &train_raw.row_ids);
    let impute_means: Vec<f64> = (0..p)
        .map(|c| {
            let present: Vec<f64> = train_raw.column(c).into_iter().filter(|v| v.is_finite()).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    let mut x = raw.clone();
    for r in 0..x.nrows() {
        for (c, &fill) in impute_means.iter().enumerate().take(p) {
            if !x.get(r, c).is_finite() {
                x.set(r, c, fill);
            }
        }
    }

    let cn = x.select_rows(train.cn_rows());
    let cn_ages: Vec<f64> = train.cn_rows().iter().map(|&r| subjects.ages[r]).collect();
    audit.record("age_model", &cn.row_ids);
    let age = featsel::fit_age_correction(&cn, &cn_ages).map_err(at(STAGE))?;
    let x = featsel::apply_age_correction(&x, &subjects.ages, &age).map_err(at(STAGE))?;

    let tr = x.select_rows(train.rows());
    audit.record("zscore", &tr.row_ids);
    let zscore = featsel::zscore_fit(&tr).map_err(at(STAGE))?;
    let x = featsel::zscore_apply(&x, &zscore).map_err(at(STAGE))?;

    let tr = x.select_rows(train.rows());
    let y = subjects.training_labels(train.rows());
    audit.record("elastic_net", &tr.row_ids);
    let selection = featsel::elastic_net_fit(&tr, &y, &cfg.en).map_err(at(STAGE))?;

    x.write_csv(features_path(cfg)).map_err(at(STAGE))?;
    selection
        .write(&x.col_names, selection_path(cfg))
        .map_err(at(STAGE))?;
    let pre = Preprocess {
        feature_names: x.col_names.clone(),
        impute_means,
        age,
        zscore,
        selection,
    };
    write_json(STAGE, &pre, &preprocess_path(cfg))?;
    Ok((x, pre))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModels {
    pub svm: Option<GridSearch>,
    /// One forest per repeat, seeded `mix_seed(rf_seed, run)`.
    pub forests: Vec<ForestModel>,
}

fn rows_of(x: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|&r| x.row(r).to_vec()).collect()
}

/// Fits the configured classifiers on the selected CN/AD features.
pub fn stage_train(
    cfg: &PipelineConfig,
    subjects: &Subjects,
    selected: &FeatureMatrix,
    audit: &mut FitAudit,
) -> Result<TrainedModels> {
    const STAGE: &str = "train";
    let train = subjects.training();
    let x = rows_of(selected, train.rows());
    let y = subjects.training_labels(train.rows());
    let ids: Vec<String> = train.rows().iter().map(|&r| subjects.ids[r].clone()).collect();
    let svm = if cfg.classifier.svm() {
        audit.record("svm", &ids);
        Some(classify::svm_grid_search(&x, &y, cfg.cv_folds, mix_seed(cfg.seed, STREAM_CV)).map_err(at(STAGE))?)
    } else {
        None
    };
    let mut forests = Vec::new();
    if cfg.classifier.rf() {
        audit.record("rf", &ids);
        let rf_seed = mix_seed(cfg.seed, STREAM_RF);
        for run in 0..cfg.rf_runs {
            forests.push(classify::rf_train(&x, &y, &cfg.forest, mix_seed(rf_seed, run as u64)).map_err(at(STAGE))?);
        }
    }
    let models = TrainedModels { svm, forests };
    fs::create_dir_all(models_dir(cfg)).map_err(at(STAGE))?;
    if let Some(gs) = &models.svm {
        classify::save_model(&classify::Classifier::Svm(gs.model.clone()), models_dir(cfg).join("svm.json"))
            .map_err(at(STAGE))?;
    }
    if let Some(first) = models.forests.first() {
        classify::save_model(&classify::Classifier::Forest(first.clone()), models_dir(cfg).join("rf.json"))
            .map_err(at(STAGE))?;
    }
    write_json(STAGE, &models, &models_dir(cfg).join("trained.json"))?;
    Ok(models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub truth: Group,
    pub predicted: Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub svm: Option<(f64, EvalReport, Vec<Prediction>)>,
    pub rf: Option<(EvalReport, Option<f64>)>,
}

/// AD-side output (−1) predicts pMCI.
fn to_group(label: f64) -> Group {
    if label < 0.0 {
        Group::pMCI
    } else {
        Group::sMCI
    }
}

/// Applies trained models to the sMCI/pMCI rows.
pub fn stage_eval(
    cfg: &PipelineConfig,
    subjects: &Subjects,
    selected: &FeatureMatrix,
    models: &TrainedModels,
) -> Result<EvalOutcome> {
    const STAGE: &str = "eval";
    let test = subjects.test_rows();
    let x = rows_of(selected, &test);
    let truth: Vec<Group> = test.iter().map(|&r| subjects.groups[r]).collect();
    let svm = match &models.svm {
        Some(gs) => {
            let pred: Vec<Group> = gs.model.predict(&x).map_err(at(STAGE))?.into_iter().map(to_group).collect();
            let rep = classify::evaluate(&pred, &truth, &Group::pMCI).map_err(at(STAGE))?;
            let list = test
                .iter()
                .zip(&pred)
                .map(|(&r, &p)| Prediction {
                    subject_id: subjects.ids[r].clone(),
                    truth: subjects.groups[r],
                    predicted: p,
                })
                .collect();
            Some((gs.best_c, rep, list))
        }
        None => None,
    };
    let rf = if models.forests.is_empty() {
        None
    } else {
        let mut runs = Vec::new();
        for f in &models.forests {
            let pred: Vec<Group> = f.predict(&x).map_err(at(STAGE))?.into_iter().map(to_group).collect();
            runs.push(classify::evaluate(&pred, &truth, &Group::pMCI).map_err(at(STAGE))?.runs[0]);
        }
        let oob: Vec<f64> = models.forests.iter().filter_map(|f| f.oob_accuracy).collect();
        let oob_mean = (!oob.is_empty()).then(|| oob.iter().sum::<f64>() / oob.len() as f64);
        Some((EvalReport::from_runs(runs), oob_mean))
    };
    let outcome = EvalOutcome { svm, rf };
    write_json(STAGE, &outcome, &eval_path(cfg))?;
    Ok(outcome)
}

// ---------------------------------------------------------------- report

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        v.to_string()
    }
}

/// Report text with `[config]`, `[selection]`, `[metrics]` and `[timing]` sections.
pub fn render_report(
    cfg: &PipelineConfig,
    pre: &Preprocess,
    outcome: &EvalOutcome,
    timings: Option<&[(String, f64)]>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# gbsg {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(
        s,
        "# sub-seeds: synth={} grading={} cv={} rf={}",
        mix_seed(cfg.seed, STREAM_SYNTH),
        mix_seed(cfg.seed, STREAM_GRADING),
        mix_seed(cfg.seed, STREAM_CV),
        mix_seed(cfg.seed, STREAM_RF)
    );
    s.push_str("[config]\n");
    s.push_str(&cfg.to_text());

    let sel = &pre.selection;
    s.push_str("\n[selection]\n");
    let _ = writeln!(s, "age_correction = all_features");
    let _ = writeln!(s, "features_total = {}", pre.feature_names.len());
    let _ = writeln!(s, "count = {}", sel.count());
    let _ = writeln!(s, "lambda1 = {}", sel.lambda1);
    let _ = writeln!(s, "lambda2 = {}", sel.lambda2);
    let _ = writeln!(s, "converged = {}", sel.converged);
    let _ = writeln!(s, "iterations = {}", sel.iterations);
    let _ = writeln!(s, "target_met = {}", sel.target_met);
    for ((name, &on), c) in pre.feature_names.iter().zip(&sel.selected).zip(&sel.coefficients) {
        if on {
            let _ = writeln!(s, "feature.{name} = {c}");
        }
    }

    s.push_str("\n[metrics]\n");
    let _ = writeln!(s, "positive_class = pMCI");
    let mut table = Vec::new();
    let put = |s: &mut String, prefix: &str, rep: &EvalReport| {
        let m = rep.first();
        if rep.runs.len() == 1 {
            let _ = writeln!(s, "{prefix}.acc = {}", fmt_metric(m.acc));
            let _ = writeln!(s, "{prefix}.sen = {}", fmt_metric(m.sen));
            let _ = writeln!(s, "{prefix}.spe = {}", fmt_metric(m.spe));
            let _ = writeln!(s, "{prefix}.tp = {}\n{prefix}.fp = {}\n{prefix}.tn = {}\n{prefix}.fn = {}", m.tp, m.fp, m.tn, m.fn_);
        } else {
            let _ = writeln!(s, "{prefix}.runs = {}", rep.runs.len());
            for (name, mean, sd) in [
                ("acc", rep.mean.acc, rep.sd.acc),
                ("sen", rep.mean.sen, rep.sd.sen),
                ("spe", rep.mean.spe, rep.sd.spe),
            ] {
                let _ = writeln!(s, "{prefix}.{name}_mean = {}", fmt_metric(mean));
                let _ = writeln!(s, "{prefix}.{name}_sd = {}", fmt_metric(sd));
            }
        }
    };
    if let Some((c, rep, _)) = &outcome.svm {
        let _ = writeln!(s, "svm.c = {c}");
        put(&mut s, "svm", rep);
        table.push(("GBSG", "SVM", rep));
    }
    if let Some((rep, oob)) = &outcome.rf {
        if let Some(o) = oob {
            let _ = writeln!(s, "rf.oob_mean = {o}");
        }
        put(&mut s, "rf", rep);
        table.push(("GBSG", "RF", rep));
    }
    for line in classify::format_table(&table).lines() {
        let _ = writeln!(s, "# {line}");
    }

    s.push_str("\n[timing]\n");
    match timings {
        Some(t) => {
            let _ = writeln!(s, "enabled = true");
            for (stage, secs) in t {
                let _ = writeln!(s, "{stage}_s = {secs:.3}");
            }
        }
        None => {
            let _ = writeln!(s, "enabled = false");
        }
    }
    s
}

/// The `[config]` section of a report, as config text.
pub fn config_section(report: &str) -> String {
    let mut out = String::new();
    let mut inside = false;
    for line in report.lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            inside = t == "[config]";
            continue;
        }
        if inside {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: String,
    pub report_path: PathBuf,
    pub outcome: EvalOutcome,
    pub preprocess: Preprocess,
    pub audit: FitAudit,
    pub timings: Vec<(String, f64)>,
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::new("threads", ErrorKind::Usage, e))?;
    pool.install(f)
}

struct Clock {
    timings: Mutex<Vec<(String, f64)>>,
}

impl Clock {
    fn time<T>(&self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.timings
            .lock()
            .expect("timing lock")
            .push((stage.to_string(), t0.elapsed().as_secs_f64()));
        out
    }
}

/// Columns selected by the mask.
pub fn selected_matrix(x: &FeatureMatrix, pre: &Preprocess) -> Result<FeatureMatrix> {
    featsel::select_features(x, &pre.selection.selected).map_err(at("features"))
}

fn write_outputs(cfg: &PipelineConfig, report: &str, timings: &[(String, f64)]) -> Result<PathBuf> {
    const STAGE: &str = "report";
    let path = cfg.report_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(at(STAGE))?;
    }
    fs::write(&path, report).map_err(at(STAGE))?;
    let mut t = String::new();
    for (stage, secs) in timings {
        let _ = writeln!(t, "{stage} {secs:.6}");
    }
    fs::write(timing_path(cfg), t).map_err(at(STAGE))?;
    Ok(path)
}

/// Full pipeline on the configured manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate_params().map_err(at("config"))?;
    with_threads(cfg.threads, || {
        fs::create_dir_all(&cfg.work_dir).map_err(at("config"))?;
        let clock = Clock {
            timings: Mutex::new(Vec::new()),
        };
        let mut audit = FitAudit::default();
        let cohort = load_cohort(cfg)?;
        let subjects = Subjects::of(&cohort);
        let templates = template_records(cfg, &cohort)?;
        let template_ids: Vec<String> = templates.iter().map(|r| r.subject_id.clone()).collect();
        let library = clock.time("library", || build_library(&templates, &mut audit))?;
        let maps = clock.time("grade", || stage_grade(cfg, &cohort, &library, &template_ids))?;
        drop(library);
        let raw = clock.time("graph", || stage_graph(cfg, &cohort, &maps))?;
        drop(maps);
        let (x, pre) = clock.time("features", || stage_features(cfg, &subjects, &raw, &mut audit))?;
        let selected = selected_matrix(&x, &pre)?;
        let models = clock.time("train", || stage_train(cfg, &subjects, &selected, &mut audit))?;
        let outcome = clock.time("eval", || stage_eval(cfg, &subjects, &selected, &models))?;
        let timings = clock.timings.into_inner().expect("timing lock");
        let report = render_report(cfg, &pre, &outcome, cfg.report_timing.then_some(&timings[..]));
        let report_path = write_outputs(cfg, &report, &timings)?;
        Ok(RunOutput {
            report,
            report_path,
            outcome,
            preprocess: pre,
            audit,
            timings,
        })
    })
}

/// Single CLI stage reading the previous stages' artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Grade,
    Graph,
    Features,
    Train,
    Eval,
    Report,
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    cfg.validate_params().map_err(at("config"))?;
    with_threads(cfg.threads, || {
        fs::create_dir_all(&cfg.work_dir).map_err(at("config"))?;
        let cohort = load_cohort(cfg)?;
        let subjects = Subjects::of(&cohort);
        let mut audit = FitAudit::default();
        let load_x = || FeatureMatrix::read_csv(features_path(cfg)).map_err(at("features"));
        let load_pre = || read_json::<Preprocess>("features", &preprocess_path(cfg));
        Ok(match stage {
            Stage::Grade => {
                let templates = template_records(cfg, &cohort)?;
                let ids: Vec<String> = templates.iter().map(|r| r.subject_id.clone()).collect();
                let lib = build_library(&templates, &mut audit)?;
                let maps = stage_grade(cfg, &cohort, &lib, &ids)?;
                format!("graded {} subjects into {}", maps.len(), grades_dir(cfg).display())
            }
            Stage::Graph => {
                let maps = load_grades(cfg, &cohort)?;
                let raw = stage_graph(cfg, &cohort, &maps)?;
                format!("{} features written to {}", raw.ncols(), raw_features_path(cfg).display())
            }
            Stage::Features => {
                let raw = FeatureMatrix::read_csv(raw_features_path(cfg)).map_err(at("features"))?;
                check_rows(&raw, &subjects)?;
                let (_, pre) = stage_features(cfg, &subjects, &raw, &mut audit)?;
                format!("{} features selected", pre.selection.count())
            }
            Stage::Train => {
                let x = load_x()?;
                check_rows(&x, &subjects)?;
                let sel = selected_matrix(&x, &load_pre()?)?;
                let m = stage_train(cfg, &subjects, &sel, &mut audit)?;
                format!("trained svm={} forests={}", m.svm.is_some(), m.forests.len())
            }
            Stage::Eval => {
                let x = load_x()?;
                check_rows(&x, &subjects)?;
                let sel = selected_matrix(&x, &load_pre()?)?;
                let models: TrainedModels = read_json("eval", &models_dir(cfg).join("trained.json"))?;
                let out = stage_eval(cfg, &subjects, &sel, &models)?;
                summary_line(&out)
            }
            Stage::Report => {
                let pre = load_pre()?;
                let outcome: EvalOutcome = read_json("report", &eval_path(cfg))?;
                let report = render_report(cfg, &pre, &outcome, None);
                let path = write_outputs(cfg, &report, &[])?;
                format!("report written to {}", path.display())
            }
        })
    })
}

fn check_rows(x: &FeatureMatrix, subjects: &Subjects) -> Result<()> {
    if x.row_ids != subjects.ids {
        return Err(PipelineError::new(
            "features",
            ErrorKind::Data,
            "feature rows do not match the cohort manifest",
        ));
    }
    Ok(())
}

pub fn summary_line(out: &EvalOutcome) -> String {
    let mut parts = Vec::new();
    if let Some((c, rep, _)) = &out.svm {
        parts.push(format!("svm acc={:.3} (C={c})", rep.mean.acc));
    }
    if let Some((rep, _)) = &out.rf {
        parts.push(format!("rf acc={:.3}±{:.3} over {} runs", rep.mean.acc, rep.sd.acc, rep.runs.len()));
    }
    parts.join(", ")
}

/// Generates the configured synthetic cohort; its seed derives from the master seed.
pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthOutput> {
    let mut spec = cfg.synth.clone();
    spec.seed = mix_seed(cfg.seed, STREAM_SYNTH);
    with_threads(cfg.threads, || synth_cohort(&spec).map_err(at("synth")))
}
