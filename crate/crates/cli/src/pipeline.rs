//! Run-directory pipeline: staged execution with a manifest, hash-based
//! resume, and the end-to-end orchestration of generation, distillation
//! and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use dbkd_core::confidence::{
    compute_thresholds, confidence_histogram, AdaptiveThresholds, ConfidenceRecord,
    ThresholdsFile,
};
use dbkd_core::data::{
    build_few_shot, load_batch, load_dataset, save_batch, Dataset, FewShotSet, ImageBatch,
};
use dbkd_core::distill::{
    build_distill_set, generate_balanced, train_student, LabeledSyntheticSet, Objective,
    TrainSource,
};
use dbkd_core::gan::{train_gan, GanSidecar, GanStepRecord, GeneratorNet};
use dbkd_core::metrics::{
    coverage, validate_metrics_doc, CoverageSection, GanSection, MetricsDoc, QueryCount,
    StudentSection, TeacherQueries, ThresholdsSection,
};
use dbkd_core::rng::{stage_rng, stage_seed_u64};
use dbkd_core::service::RemoteTeacher;
use dbkd_core::teacher::{
    accuracy_of, train_classifier, BlackBoxTeacher, Classifier, ClassifierSidecar,
    CountingTeacher, EpochLog, InProcessTeacher,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum PipelineError {
    Config(String),
    Stage { stage: &'static str, message: String },
    MissingArtifact(String),
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "config error: {m}"),
            PipelineError::Stage { stage, message } => write!(f, "stage {stage} failed: {message}"),
            PipelineError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: e.to_string() }
}

pub const STAGES: &[&str] =
    &["teacher", "fewshot", "thresholds", "gan", "synth", "students", "evaluate"];

pub const STUDENT_VARIANTS: &[&str] = &["full", "alone", "standard_kd", "divbfkd"];

// ---------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageEntry {
    pub status: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub init_scheme: String,
    pub stage_seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageEntry>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub teacher_queries: BTreeMap<String, QueryCount>,
    pub teacher_fingerprint: String,
    pub remote_teacher: bool,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut stage_seeds = BTreeMap::new();
        for s in STAGES {
            stage_seeds.insert(s.to_string(), stage_seed_u64(cfg.master_seed, s));
        }
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.content_hash(),
            master_seed: cfg.master_seed,
            init_scheme: "fan_in_uniform".to_string(),
            stage_seeds,
            stages: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            teacher_queries: BTreeMap::new(),
            teacher_fingerprint: String::new(),
            remote_teacher: false,
        }
    }

    pub fn total_queries(&self) -> QueryCount {
        let mut total = QueryCount { calls: 0, images: 0 };
        for q in self.teacher_queries.values() {
            total.calls += q.calls;
            total.images += q.images;
        }
        total
    }

    fn save(&self, run_dir: &Path) -> std::io::Result<()> {
        let tmp = run_dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self).unwrap())?;
        std::fs::rename(tmp, run_dir.join("manifest.json"))
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let p = run_dir.join("manifest.json");
        let text = std::fs::read_to_string(&p)
            .map_err(|_| PipelineError::MissingArtifact(p.display().to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::MissingArtifact(format!("manifest unreadable: {e}")))
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as u64
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    dbkd_core::nn::serialize::file_sha256(path)
}

// ---------------------------------------------------------------------
// Lock
// ---------------------------------------------------------------------

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(_) => Err(PipelineError::Stage {
                stage: "lock",
                message: format!(
                    "another pipeline holds {} (remove the stale .lock if no run is active)",
                    path.display()
                ),
            }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------
// Teacher handle
// ---------------------------------------------------------------------

enum TeacherHandle {
    InProcess(Arc<InProcessTeacher>),
    Remote(Arc<RemoteTeacher>),
}

impl TeacherHandle {
    fn as_dyn(&self) -> Arc<dyn BlackBoxTeacher> {
        match self {
            TeacherHandle::InProcess(t) => Arc::clone(t) as Arc<dyn BlackBoxTeacher>,
            TeacherHandle::Remote(t) => Arc::clone(t) as Arc<dyn BlackBoxTeacher>,
        }
    }
}

// ---------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------

pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("run-s{}-{}", cfg.master_seed, cfg.content_hash())
}

/// Executes the pipeline into `<out_root>/<run-id>/`, optionally
/// resuming a partial run and optionally stopping after a named stage.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out_root: &Path,
    resume: bool,
    stop_after: Option<&str>,
) -> Result<PipelineOutcome, PipelineError> {
    if let Some(s) = stop_after {
        if !STAGES.contains(&s) {
            return Err(PipelineError::Config(format!("unknown stage `{s}` for --stop-after")));
        }
    }
    let run_dir = out_root.join(run_id(cfg));
    std::fs::create_dir_all(&run_dir).map_err(|e| stage_err("setup", e))?;
    let _lock = RunLock::acquire(&run_dir)?;

    let manifest_path = run_dir.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        if !resume {
            return Err(PipelineError::Stage {
                stage: "setup",
                message: format!(
                    "{} already contains a run; pass --resume to continue it",
                    run_dir.display()
                ),
            });
        }
        let m = RunManifest::load(&run_dir)?;
        if m.config_hash != cfg.content_hash() {
            return Err(PipelineError::Config(format!(
                "resume config hash {} does not match run {}",
                cfg.content_hash(),
                m.config_hash
            )));
        }
        m
    } else {
        RunManifest::new(cfg)
    };

    std::fs::write(
        run_dir.join("config.resolved.json"),
        serde_json::to_string_pretty(cfg).unwrap(),
    )
    .map_err(|e| stage_err("setup", e))?;

    let mut ctx = Ctx {
        cfg,
        run_dir: run_dir.clone(),
        dataset: None,
        teacher: None,
        fewshot: None,
        thresholds: None,
        records: None,
        generator: None,
        synth: None,
        gan_log: None,
        student_logs: BTreeMap::new(),
    };

    for &stage in STAGES {
        run_stage(&mut ctx, &mut manifest, stage)?;
        manifest.save(&run_dir).map_err(|e| stage_err("manifest", e))?;
        if stop_after == Some(stage) {
            return Ok(PipelineOutcome { run_dir, manifest });
        }
    }

    Ok(PipelineOutcome { run_dir, manifest })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    run_dir: PathBuf,
    dataset: Option<Dataset>,
    teacher: Option<TeacherHandle>,
    fewshot: Option<FewShotSet>,
    thresholds: Option<AdaptiveThresholds>,
    records: Option<Vec<ConfidenceRecord>>,
    generator: Option<GeneratorNet>,
    synth: Option<LabeledSyntheticSet>,
    gan_log: Option<Vec<GanStepRecord>>,
    student_logs: BTreeMap<String, Vec<EpochLog>>,
}

impl Ctx<'_> {
    fn dataset(&mut self) -> Result<&Dataset, PipelineError> {
        if self.dataset.is_none() {
            let mut ds = load_dataset(&self.cfg.dataset_name, &self.cfg.dataset_root)
                .map_err(|e| stage_err("dataset", e))?;
            if self.cfg.train_cap > 0 && ds.train.len() > self.cfg.train_cap {
                let idx: Vec<usize> = (0..self.cfg.train_cap).collect();
                ds.train = ds.train.select(&idx);
                ds.spec.train_count = self.cfg.train_cap;
            }
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().unwrap())
    }

    fn artifact_path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }
}

/// Runs one stage unless the manifest marks it done with intact
/// artifacts; loads stage outputs into the context either way.
fn run_stage(
    ctx: &mut Ctx<'_>,
    manifest: &mut RunManifest,
    stage: &'static str,
) -> Result<(), PipelineError> {
    let done = manifest.stages.get(stage).map(|s| s.status == "done").unwrap_or(false)
        && stage_artifacts_intact(ctx, manifest, stage);
    if done {
        load_stage_outputs(ctx, manifest, stage)?;
        return Ok(());
    }

    let started = now_ms();
    execute_stage(ctx, manifest, stage)?;
    manifest.stages.insert(
        stage.to_string(),
        StageEntry { status: "done".into(), started_unix_ms: started, finished_unix_ms: now_ms() },
    );
    Ok(())
}

fn stage_artifact_names(stage: &str) -> Vec<String> {
    match stage {
        "teacher" => vec!["teacher/weights.dbkw".into(), "teacher/meta.json".into()],
        "fewshot" => vec!["fewshot/fewshot.dbkb".into()],
        "thresholds" => vec!["thresholds/thresholds.json".into(), "thresholds/records.json".into()],
        "gan" => vec![
            "gan/generator.dbkw".into(),
            "gan/discriminator.dbkw".into(),
            "gan/log.jsonl".into(),
            "gan/meta.json".into(),
        ],
        "synth" => vec![
            "synth/synthetic.dbkb".into(),
            "synth/soft_labels.f32".into(),
            "synth/meta.json".into(),
        ],
        "students" => {
            let mut v = Vec::new();
            for variant in STUDENT_VARIANTS {
                v.push(format!("students/{variant}/weights.dbkw"));
                v.push(format!("students/{variant}/log.jsonl"));
            }
            v.push("students/summary.json".into());
            v
        }
        "evaluate" => vec!["metrics.json".into()],
        _ => vec![],
    }
}

fn stage_artifacts_intact(ctx: &Ctx<'_>, manifest: &RunManifest, stage: &str) -> bool {
    // Remote teachers leave no weights artifact.
    if stage == "teacher" && manifest.remote_teacher {
        return true;
    }
    for name in stage_artifact_names(stage) {
        let Some(entry) = manifest.artifacts.get(&name) else { return false };
        let path = ctx.artifact_path(&name);
        match sha256_file(&path) {
            Ok(h) if h == entry.sha256 => {}
            _ => return false,
        }
    }
    true
}

fn record_artifact(
    ctx: &Ctx<'_>,
    manifest: &mut RunManifest,
    stage: &'static str,
    rel: &str,
) -> Result<(), PipelineError> {
    let path = ctx.artifact_path(rel);
    let sha = sha256_file(&path).map_err(|e| stage_err(stage, e))?;
    manifest
        .artifacts
        .insert(rel.to_string(), ArtifactEntry { path: rel.to_string(), sha256: sha });
    Ok(())
}

fn record_queries(
    manifest: &mut RunManifest,
    stage: &str,
    counter: &CountingTeacher<Arc<dyn BlackBoxTeacher>>,
) {
    manifest
        .teacher_queries
        .insert(stage.to_string(), QueryCount { calls: counter.calls(), images: counter.images() });
}

fn execute_stage(
    ctx: &mut Ctx<'_>,
    manifest: &mut RunManifest,
    stage: &'static str,
) -> Result<(), PipelineError> {
    match stage {
        "teacher" => stage_teacher(ctx, manifest),
        "fewshot" => stage_fewshot(ctx, manifest),
        "thresholds" => stage_thresholds(ctx, manifest),
        "gan" => stage_gan(ctx, manifest),
        "synth" => stage_synth(ctx, manifest),
        "students" => stage_students(ctx, manifest),
        "evaluate" => stage_evaluate(ctx, manifest),
        _ => unreachable!("unknown stage"),
    }
}

fn load_stage_outputs(
    ctx: &mut Ctx<'_>,
    manifest: &RunManifest,
    stage: &'static str,
) -> Result<(), PipelineError> {
    match stage {
        "teacher" => load_teacher(ctx, manifest),
        "fewshot" => {
            let batch = load_batch(ctx.artifact_path("fewshot/fewshot.dbkb"))
                .map_err(|e| stage_err("fewshot", e))?;
            let meta: FewshotMeta =
                read_json(&ctx.artifact_path("fewshot/meta.json")).unwrap_or(FewshotMeta {
                    source_indices: vec![],
                    seed: ctx.cfg.master_seed,
                });
            ctx.fewshot = Some(FewShotSet {
                images: batch.images,
                labels: batch.labels.unwrap_or_default(),
                source_indices: meta.source_indices,
                seed: meta.seed,
            });
            Ok(())
        }
        "thresholds" => {
            let tf: ThresholdsFile = read_json(&ctx.artifact_path("thresholds/thresholds.json"))
                .map_err(|e| stage_err("thresholds", e))?;
            ctx.thresholds = Some(tf.thresholds());
            let recs: Vec<ConfidenceRecord> =
                read_json(&ctx.artifact_path("thresholds/records.json"))
                    .map_err(|e| stage_err("thresholds", e))?;
            ctx.records = Some(recs);
            Ok(())
        }
        "gan" => {
            let g = GeneratorNet::load(
                ctx.artifact_path("gan/generator.dbkw"),
                &ctx.cfg.gan_model,
            )
            .map_err(|e| stage_err("gan", e))?;
            ctx.generator = Some(g);
            ctx.gan_log = Some(read_jsonl(&ctx.artifact_path("gan/log.jsonl"))?);
            Ok(())
        }
        "synth" => {
            let synth = load_synth(ctx).map_err(|e| stage_err("synth", e))?;
            ctx.synth = Some(synth);
            Ok(())
        }
        "students" => {
            for variant in STUDENT_VARIANTS {
                let log: Vec<EpochLog> =
                    read_jsonl(&ctx.artifact_path(&format!("students/{variant}/log.jsonl")))?;
                ctx.student_logs.insert(variant.to_string(), log);
            }
            Ok(())
        }
        "evaluate" => Ok(()),
        _ => unreachable!(),
    }
}

// --------------------------- teacher ---------------------------------

fn load_teacher(ctx: &mut Ctx<'_>, manifest: &RunManifest) -> Result<(), PipelineError> {
    if manifest.remote_teacher {
        let url = ctx
            .cfg
            .teacher_url
            .as_ref()
            .ok_or_else(|| stage_err("teacher", "manifest says remote but config has no url"))?;
        let remote =
            dbkd_core::service::remote_teacher(url).map_err(|e| stage_err("teacher", e))?;
        ctx.teacher = Some(TeacherHandle::Remote(Arc::new(remote)));
        return Ok(());
    }
    let sidecar: ClassifierSidecar = read_json(&ctx.artifact_path("teacher/meta.json"))
        .map_err(|e| stage_err("teacher", e))?;
    let clf = Classifier::load(
        ctx.artifact_path("teacher/weights.dbkw"),
        sidecar.arch,
        sidecar.num_classes,
        sidecar.input_shape,
    )
    .map_err(|e| stage_err("teacher", e))?;
    ctx.teacher = Some(TeacherHandle::InProcess(Arc::new(InProcessTeacher::new(clf))));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TeacherReport {
    test_accuracy: f64,
    epochs: usize,
}

fn stage_teacher(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    if let Some(url) = ctx.cfg.teacher_url.clone() {
        let remote =
            dbkd_core::service::remote_teacher(&url).map_err(|e| stage_err("teacher", e))?;
        manifest.remote_teacher = true;
        manifest.teacher_fingerprint = remote.fingerprint().to_string();
        ctx.teacher = Some(TeacherHandle::Remote(Arc::new(remote)));
        return Ok(());
    }

    std::fs::create_dir_all(ctx.artifact_path("teacher")).map_err(|e| stage_err("teacher", e))?;
    let seed = ctx.cfg.master_seed;
    let cfg = ctx.cfg;

    let clf = if let Some(weights) = &cfg.teacher_weights {
        // Attach: load external weights via their sidecar.
        let sidecar_path = weights.with_extension("json");
        let sidecar: ClassifierSidecar =
            read_json(&sidecar_path).map_err(|e| stage_err("teacher", e))?;
        let clf = Classifier::load(weights, sidecar.arch, sidecar.num_classes, sidecar.input_shape)
            .map_err(|e| stage_err("teacher", e))?;
        let ds = ctx.dataset()?;
        let acc = accuracy_of(&clf, &ds.test).map_err(|e| stage_err("teacher", e))?;
        write_json(
            &ctx.artifact_path("teacher/report.json"),
            &TeacherReport { test_accuracy: acc, epochs: 0 },
        )
        .map_err(|e| stage_err("teacher", e))?;
        clf
    } else {
        let ds = ctx.dataset()?;
        let (clf, log) = train_classifier(
            cfg.teacher_arch,
            ds.spec.num_classes,
            ds.spec.image_shape,
            &ds.train,
            &ds.test,
            &ds.policy,
            &cfg.teacher_train,
            stage_seed_u64(seed, "teacher"),
        )
        .map_err(|e| stage_err("teacher", e))?;
        write_jsonl(&ctx.artifact_path("teacher/log.jsonl"), &log)
            .map_err(|e| stage_err("teacher", e))?;
        let acc = log.last().map(|l| l.test_accuracy).unwrap_or(0.0);
        write_json(
            &ctx.artifact_path("teacher/report.json"),
            &TeacherReport { test_accuracy: acc, epochs: log.len() },
        )
        .map_err(|e| stage_err("teacher", e))?;
        clf
    };

    clf.save(ctx.artifact_path("teacher/weights.dbkw")).map_err(|e| stage_err("teacher", e))?;
    let sidecar = ClassifierSidecar {
        arch: clf.arch,
        num_classes: clf.num_classes,
        input_shape: clf.input_shape,
        train_config_hash: ctx.cfg.content_hash(),
    };
    write_json(&ctx.artifact_path("teacher/meta.json"), &sidecar)
        .map_err(|e| stage_err("teacher", e))?;

    let teacher = InProcessTeacher::new(clf);
    manifest.teacher_fingerprint = teacher.fingerprint();
    ctx.teacher = Some(TeacherHandle::InProcess(Arc::new(teacher)));

    record_artifact(ctx, manifest, "teacher", "teacher/weights.dbkw")?;
    record_artifact(ctx, manifest, "teacher", "teacher/meta.json")?;
    Ok(())
}

// --------------------------- fewshot ---------------------------------

#[derive(Serialize, Deserialize)]
struct FewshotMeta {
    source_indices: Vec<usize>,
    seed: u64,
}

fn stage_fewshot(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    std::fs::create_dir_all(ctx.artifact_path("fewshot")).map_err(|e| stage_err("fewshot", e))?;
    let n = ctx.cfg.n_real;
    let seed = ctx.cfg.master_seed;
    let ds = ctx.dataset()?;
    let fs = build_few_shot(&ds.train, ds.spec.num_classes, n, seed)
        .map_err(|e| stage_err("fewshot", e))?;
    save_batch(ctx.artifact_path("fewshot/fewshot.dbkb"), &fs.as_batch())
        .map_err(|e| stage_err("fewshot", e))?;
    write_json(
        &ctx.artifact_path("fewshot/meta.json"),
        &FewshotMeta { source_indices: fs.source_indices.clone(), seed: fs.seed },
    )
    .map_err(|e| stage_err("fewshot", e))?;
    ctx.fewshot = Some(fs);
    record_artifact(ctx, manifest, "fewshot", "fewshot/fewshot.dbkb")?;
    Ok(())
}

// --------------------------- thresholds ------------------------------

fn stage_thresholds(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    std::fs::create_dir_all(ctx.artifact_path("thresholds"))
        .map_err(|e| stage_err("thresholds", e))?;
    let teacher = ctx.teacher.as_ref().expect("teacher stage ran").as_dyn();
    let counter = CountingTeacher::new(teacher);
    let fewshot = ctx.fewshot.as_ref().expect("fewshot stage ran");
    let (thresholds, records) = compute_thresholds(&counter, fewshot, ctx.cfg.quantile)
        .map_err(|e| stage_err("thresholds", e))?;
    record_queries(manifest, "thresholds", &counter);

    let fewshot_hash = manifest
        .artifacts
        .get("fewshot/fewshot.dbkb")
        .map(|a| a.sha256.clone())
        .unwrap_or_default();
    write_json(
        &ctx.artifact_path("thresholds/thresholds.json"),
        &ThresholdsFile::new(&thresholds, fewshot_hash),
    )
    .map_err(|e| stage_err("thresholds", e))?;
    write_json(&ctx.artifact_path("thresholds/records.json"), &records)
        .map_err(|e| stage_err("thresholds", e))?;

    ctx.thresholds = Some(thresholds);
    ctx.records = Some(records);
    record_artifact(ctx, manifest, "thresholds", "thresholds/thresholds.json")?;
    record_artifact(ctx, manifest, "thresholds", "thresholds/records.json")?;
    Ok(())
}

// --------------------------- gan -------------------------------------

fn stage_gan(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    std::fs::create_dir_all(ctx.artifact_path("gan")).map_err(|e| stage_err("gan", e))?;
    let teacher = ctx.teacher.as_ref().expect("teacher stage ran").as_dyn();
    let counter = CountingTeacher::new(teacher);
    let fewshot = ctx.fewshot.as_ref().expect("fewshot stage ran");
    let thresholds = ctx.thresholds.as_ref().expect("thresholds stage ran");

    let mut gan_cfg = ctx.cfg.gan_train.clone();
    gan_cfg.seed = stage_seed_u64(ctx.cfg.master_seed, "gan");
    let trained = train_gan(fewshot, &counter, thresholds, &ctx.cfg.gan_model, &gan_cfg)
        .map_err(|e| stage_err("gan", e))?;
    record_queries(manifest, "gan", &counter);

    trained
        .generator
        .save(ctx.artifact_path("gan/generator.dbkw"))
        .map_err(|e| stage_err("gan", e))?;
    trained
        .discriminator
        .save(ctx.artifact_path("gan/discriminator.dbkw"))
        .map_err(|e| stage_err("gan", e))?;
    write_jsonl(&ctx.artifact_path("gan/log.jsonl"), &trained.log)
        .map_err(|e| stage_err("gan", e))?;
    write_json(
        &ctx.artifact_path("gan/meta.json"),
        &GanSidecar {
            model: ctx.cfg.gan_model.clone(),
            steps: trained.log.len(),
            config_hash: ctx.cfg.content_hash(),
        },
    )
    .map_err(|e| stage_err("gan", e))?;

    ctx.gan_log = Some(trained.log);
    ctx.generator = Some(trained.generator);
    for a in stage_artifact_names("gan") {
        record_artifact(ctx, manifest, "gan", &a)?;
    }
    Ok(())
}

// --------------------------- synth -----------------------------------

#[derive(Serialize, Deserialize)]
struct SynthMeta {
    n: usize,
    m: usize,
    k: usize,
    generator_hash: String,
    teacher_fingerprint: String,
    seed: u64,
    per_class_attempts: Vec<u64>,
    attempts_total: u64,
}

fn stage_synth(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    std::fs::create_dir_all(ctx.artifact_path("synth")).map_err(|e| stage_err("synth", e))?;
    let teacher = ctx.teacher.as_ref().expect("teacher stage ran").as_dyn();
    let counter = CountingTeacher::new(teacher);
    let generator = ctx.generator.as_ref().expect("gan stage ran");
    let m = ctx.cfg.m_synthetic;
    let cap = ctx.cfg.balance_cap_factor.saturating_mul(m as u64).max(m as u64);
    let mut rng = stage_rng(ctx.cfg.master_seed, "synth");
    let synth = generate_balanced(generator, &counter, m, &mut rng, cap)
        .map_err(|e| stage_err("synth", e))?;
    record_queries(manifest, "synth", &counter);

    let labels: Vec<u16> = synth.pseudo_labels.iter().map(|&l| l as u16).collect();
    save_batch(
        ctx.artifact_path("synth/synthetic.dbkb"),
        &ImageBatch::labeled(synth.images.clone(), labels),
    )
    .map_err(|e| stage_err("synth", e))?;
    write_soft_labels(&ctx.artifact_path("synth/soft_labels.f32"), &synth.soft_labels)
        .map_err(|e| stage_err("synth", e))?;
    write_json(
        &ctx.artifact_path("synth/meta.json"),
        &SynthMeta {
            n: ctx.cfg.n_real,
            m,
            k: synth.per_class_attempts.len(),
            generator_hash: synth.generator_fingerprint.clone(),
            teacher_fingerprint: manifest.teacher_fingerprint.clone(),
            seed: stage_seed_u64(ctx.cfg.master_seed, "synth"),
            per_class_attempts: synth.per_class_attempts.clone(),
            attempts_total: synth.attempts_total,
        },
    )
    .map_err(|e| stage_err("synth", e))?;

    ctx.synth = Some(synth);
    for a in stage_artifact_names("synth") {
        record_artifact(ctx, manifest, "synth", &a)?;
    }
    Ok(())
}

fn load_synth(ctx: &Ctx<'_>) -> Result<LabeledSyntheticSet, Box<dyn std::error::Error>> {
    let batch = load_batch(ctx.artifact_path("synth/synthetic.dbkb"))?;
    let meta: SynthMeta = read_json(&ctx.artifact_path("synth/meta.json"))?;
    let soft = read_soft_labels(
        &ctx.artifact_path("synth/soft_labels.f32"),
        batch.len(),
        meta.k,
    )?;
    let pseudo: Vec<usize> =
        batch.labels.as_ref().unwrap().iter().map(|&l| l as usize).collect();
    Ok(LabeledSyntheticSet {
        images: batch.images,
        soft_labels: soft,
        pseudo_labels: pseudo,
        per_class_attempts: meta.per_class_attempts,
        attempts_total: meta.attempts_total,
        generator_fingerprint: meta.generator_hash,
    })
}

// --------------------------- students --------------------------------

#[derive(Serialize, Deserialize)]
pub struct StudentSummary {
    pub variant: String,
    pub final_accuracy: f64,
    pub epochs: usize,
}

fn stage_students(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    let teacher = ctx.teacher.as_ref().expect("teacher stage ran").as_dyn();
    let counter = CountingTeacher::new(teacher);
    let cfg = ctx.cfg;
    let student_seed = stage_seed_u64(cfg.master_seed, "students");
    let ds = ctx.dataset()?;
    let num_classes = ds.spec.num_classes;
    let input_shape = ds.spec.image_shape;
    let policy = ds.policy.clone();
    let test = ds.test.clone();
    let full_train = ds.train.clone();
    let fewshot = ctx.fewshot.as_ref().expect("fewshot stage ran");
    let synth = ctx.synth.as_ref().expect("synth stage ran");

    // Sets that need teacher soft labels; vectors are cached here and
    // reused across epochs.
    let kd_fewshot = build_distill_set(
        fewshot,
        &LabeledSyntheticSet::empty(input_shape),
        &counter,
    )
    .map_err(|e| stage_err("students", e))?;
    let kd_full = build_distill_set(fewshot, synth, &counter)
        .map_err(|e| stage_err("students", e))?;
    record_queries(manifest, "students", &counter);

    let fewshot_batch = fewshot.as_batch();
    let mut summaries = Vec::new();
    for &variant in STUDENT_VARIANTS {
        let dir = ctx.artifact_path(&format!("students/{variant}"));
        std::fs::create_dir_all(&dir).map_err(|e| stage_err("students", e))?;
        let mut train_cfg = cfg.student_train.clone();
        let (source, objective): (TrainSource<'_>, Objective) = match variant {
            "full" => {
                train_cfg.epochs = cfg.student_full_epochs;
                (TrainSource::Labeled(&full_train), Objective::PlainCe)
            }
            "alone" => (TrainSource::Labeled(&fewshot_batch), Objective::PlainCe),
            "standard_kd" => (
                TrainSource::Distill(&kd_fewshot),
                Objective::StandardKd { lambda: cfg.student_lambda },
            ),
            "divbfkd" => {
                train_cfg.epochs = cfg.student_divbfkd_epochs;
                (TrainSource::Distill(&kd_full), Objective::SoftCe)
            }
            _ => unreachable!(),
        };
        let (clf, log) = train_student(
            cfg.student_arch,
            num_classes,
            input_shape,
            &source,
            objective,
            &test,
            &policy,
            &train_cfg,
            student_seed,
        )
        .map_err(|e| stage_err("students", e))?;
        clf.save(dir.join("weights.dbkw")).map_err(|e| stage_err("students", e))?;
        write_jsonl(&dir.join("log.jsonl"), &log).map_err(|e| stage_err("students", e))?;
        let final_accuracy = log.last().map(|l| l.test_accuracy).unwrap_or(0.0);
        summaries.push(StudentSummary {
            variant: variant.to_string(),
            final_accuracy,
            epochs: log.len(),
        });
        ctx.student_logs.insert(variant.to_string(), log);
    }
    write_json(&ctx.artifact_path("students/summary.json"), &summaries)
        .map_err(|e| stage_err("students", e))?;

    for a in stage_artifact_names("students") {
        record_artifact(ctx, manifest, "students", &a)?;
    }
    Ok(())
}

// --------------------------- evaluate --------------------------------

fn stage_evaluate(ctx: &mut Ctx<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    let teacher = ctx.teacher.as_ref().expect("teacher stage ran").as_dyn();
    let counter = CountingTeacher::new(teacher);
    let cfg = ctx.cfg;
    let ds = ctx.dataset()?;
    let num_classes = ds.spec.num_classes;
    let test = ds.test.clone();
    let train_images = ds.train.images.clone();

    // Teacher accuracy through the black-box interface.
    let preds: Vec<u16> = {
        let probs = counter
            .predict_proba(&test.images)
            .map_err(|e| stage_err("evaluate", e))?;
        probs
            .iter()
            .map(|p| dbkd_core::confidence::pseudo_label(p) as u16)
            .collect()
    };
    let teacher_accuracy =
        dbkd_core::metrics::accuracy(&preds, test.labels.as_ref().unwrap())
            .map_err(|e| stage_err("evaluate", e))?;
    record_queries(manifest, "evaluate", &counter);

    let fewshot = ctx.fewshot.as_ref().expect("fewshot stage ran");
    let thresholds = ctx.thresholds.as_ref().expect("thresholds stage ran");
    let records = ctx.records.as_ref().expect("thresholds stage ran");
    let synth = ctx.synth.as_ref().expect("synth stage ran");
    let gan_log = ctx.gan_log.as_ref().expect("gan stage ran");

    // Coverage against the teacher's training split (evaluation only).
    let mut cov_cfg = cfg.coverage.clone();
    cov_cfg.subsample_seed = stage_seed_u64(cfg.master_seed, "coverage");
    let coverage_synth = coverage(&train_images, &synth.images, &cov_cfg)
        .map_err(|e| stage_err("evaluate", e))?;
    let coverage_fewshot = coverage(&train_images, &fewshot.images, &cov_cfg)
        .map_err(|e| stage_err("evaluate", e))?;

    // Per-class confidence histograms of the few-shot scores.
    let mut histograms = Vec::with_capacity(num_classes);
    let mut mean_scores = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let scores: Vec<f64> = records
            .iter()
            .zip(&fewshot.labels)
            .filter(|(_, &l)| l as usize == k)
            .map(|(r, _)| r.score)
            .collect();
        mean_scores.push(if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        });
        histograms.push(confidence_histogram(&scores, num_classes, 20));
    }

    let students: Vec<StudentSection> = STUDENT_VARIANTS
        .iter()
        .map(|&variant| {
            let log = ctx.student_logs.get(variant).cloned().unwrap_or_default();
            StudentSection {
                variant: variant.to_string(),
                final_accuracy: log.last().map(|l| l.test_accuracy).unwrap_or(0.0),
                accuracy_curve: log.iter().map(|l| l.test_accuracy).collect(),
                epochs: log.len(),
            }
        })
        .collect();

    let doc = MetricsDoc {
        schema_version: 1,
        dataset: cfg.dataset_name.clone(),
        master_seed: cfg.master_seed,
        teacher_accuracy,
        teacher_queries: TeacherQueries {
            per_stage: manifest.teacher_queries.clone(),
            total_calls: manifest.total_queries().calls,
            total_images: manifest.total_queries().images,
        },
        thresholds: ThresholdsSection {
            q: thresholds.q,
            tau: thresholds.tau.clone(),
            per_class_counts: thresholds.per_class_counts.clone(),
            histograms,
            per_class_mean_scores: mean_scores,
        },
        gan: GanSection {
            epochs: cfg.gan_train.epochs,
            steps: gan_log.len(),
            h_size_trace: gan_log.iter().map(|r| r.h_size).collect(),
            final_loss_g: gan_log.last().map(|r| r.loss_g).unwrap_or(0.0),
            final_loss_d: gan_log.last().map(|r| r.loss_d_wasserstein).unwrap_or(0.0),
        },
        students,
        coverage: CoverageSection {
            k_neighbors: cov_cfg.k_neighbors,
            max_reference: cov_cfg.max_reference,
            fewshot: coverage_fewshot,
            synthetic: coverage_synth,
        },
    };
    validate_metrics_doc(&doc).map_err(|e| stage_err("evaluate", e))?;
    write_json(&ctx.artifact_path("metrics.json"), &doc).map_err(|e| stage_err("evaluate", e))?;
    record_artifact(ctx, manifest, "evaluate", "metrics.json")?;
    Ok(())
}

/// Standalone evaluation of an existing run directory.
pub fn evaluate_run_dir(run_dir: &Path) -> Result<MetricsDoc, PipelineError> {
    let cfg_path = run_dir.join("config.resolved.json");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|_| PipelineError::MissingArtifact(cfg_path.display().to_string()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| PipelineError::MissingArtifact(format!("config.resolved.json: {e}")))?;
    let mut manifest = RunManifest::load(run_dir)?;

    let mut ctx = Ctx {
        cfg: &cfg,
        run_dir: run_dir.to_path_buf(),
        dataset: None,
        teacher: None,
        fewshot: None,
        thresholds: None,
        records: None,
        generator: None,
        synth: None,
        gan_log: None,
        student_logs: BTreeMap::new(),
    };
    for &stage in &["teacher", "fewshot", "thresholds", "gan", "synth", "students"] {
        if !stage_artifacts_intact(&ctx, &manifest, stage) {
            return Err(PipelineError::MissingArtifact(format!(
                "stage {stage} artifacts missing or modified in {}",
                run_dir.display()
            )));
        }
        load_stage_outputs(&mut ctx, &manifest, stage_static(stage))?;
    }
    stage_evaluate(&mut ctx, &mut manifest)?;
    manifest.save(run_dir).map_err(|e| stage_err("manifest", e))?;
    let text = std::fs::read_to_string(run_dir.join("metrics.json"))
        .map_err(|e| stage_err("evaluate", e))?;
    serde_json::from_str(&text).map_err(|e| stage_err("evaluate", e))
}

fn stage_static(s: &str) -> &'static str {
    STAGES.iter().find(|&&x| x == s).expect("known stage")
}

// --------------------------- io helpers ------------------------------

pub fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<T, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).unwrap())?;
    }
    f.flush()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| PipelineError::MissingArtifact(path.display().to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::MissingArtifact(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn write_soft_labels(path: &Path, probs: &[dbkd_core::confidence::ProbVector]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    f.write_all(&(probs.len() as u32).to_le_bytes())?;
    f.write_all(&(k as u32).to_le_bytes())?;
    for p in probs {
        for &v in p.values() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()
}

fn read_soft_labels(
    path: &Path,
    expect_rows: usize,
    expect_k: usize,
) -> Result<Vec<dbkd_core::confidence::ProbVector>, Box<dyn std::error::Error>> {
    use std::io::Read;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let k = u32::from_le_bytes(b4) as usize;
    if rows != expect_rows || k != expect_k {
        return Err(format!("soft label matrix {rows}x{k}, expected {expect_rows}x{expect_k}").into());
    }
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            f.read_exact(&mut b4)?;
            row.push(f32::from_le_bytes(b4) as f64);
        }
        // Re-normalize the f32-truncated vector so it passes validation.
        let sum: f64 = row.iter().sum();
        out.push(dbkd_core::confidence::ProbVector::new(
            row.into_iter().map(|v| v / sum).collect(),
        )?);
    }
    Ok(out)
}
