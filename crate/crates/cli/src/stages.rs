//! Pipeline stages. Each one checks its inputs' digest against the manifest,
//! does its work, and records outputs relative to the run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latentservo_core::analysis::{
    alpha_score, build_field_map, build_task_map, calibrate_eps, embodiment_compare, extract_time_varying,
    injectivity_metric, monotonicity_metric, select_sae_pair, shuffled_in_time, EmbodimentReport, FactorSet,
    LatentFieldMap,
};
use latentservo_core::control::{
    evaluate_episodes, goal_tolerance, train_reinforce, uvs_init_jacobian, Goal, PolicyController, ReinforceConfig,
    Sensor, ServoEnv, SuccessStats, TrainingCurve, UvsController,
};
use latentservo_core::repr::{self, EncoderSpec, Method, Model, OracleRepresentation, Representation, TrainConfig};
use latentservo_core::toyenv::{load_demo, save_demo, toy_corpus, DemoSequence, SpriteKind, TaskSpec};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{digest_of, ExperimentConfig};
use crate::manifest::{RunManifest, StageRecord, StageStatus};
use crate::svg::{self, Series};
use crate::{CliError, Common};

pub const STAGES: [&str; 10] = [
    "demo-gen",
    "train",
    "taskmap",
    "factors",
    "alpha-sweep",
    "fieldmap",
    "embodiment",
    "servo",
    "reinforce",
    "evaluate",
];

pub const ORACLE: &str = "oracle";

type StageResult = Result<Vec<PathBuf>, CliError>;

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let path = common.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Run directory named by `--out`, or by the config when only that is given.
pub fn run_dir(common: &Common) -> Result<PathBuf, CliError> {
    match (&common.out, &common.config) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(_)) => Ok(load_config(common)?.output_dir),
        (None, None) => Err(CliError::Config("report needs --out or --config".into())),
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Stage(format!("{}: {e}; run `latentservo {producer}` first", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))
}

fn mkdirs(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        s.push_str(&format!("{e},{l}\n"));
    }
    s
}

/// A learned model or the ground-truth oracle.
pub(crate) enum Subject {
    Learned(Method),
    Oracle,
}

impl Subject {
    pub fn label(&self) -> &'static str {
        match self {
            Subject::Learned(m) => m.label(),
            Subject::Oracle => ORACLE,
        }
    }
}

enum Rep {
    Model(Box<Model>),
    Oracle(OracleRepresentation),
}

impl Rep {
    fn as_dyn(&self) -> &dyn Representation {
        match self {
            Rep::Model(m) => m.as_ref(),
            Rep::Oracle(o) => o,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ModelSummary {
    pub name: String,
    pub method: Method,
    pub latent_size: usize,
    pub dataset: String,
    pub train_digest: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_recon_mse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct MethodFactors {
    pub method: Method,
    pub factors: FactorSet,
    /// Factors handed to the controllers; `None` when none can be chosen.
    pub control: Option<FactorSet>,
    pub control_error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct DofComparison {
    pub method: Method,
    pub dof2_count: usize,
    pub dof1_count: usize,
    pub dof1_factors: FactorSet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct FactorsFile {
    pub tau: f64,
    pub methods: Vec<MethodFactors>,
    pub dof_compare: Vec<DofComparison>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct AlphaRow {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct AlphaSweepFile {
    pub epochs: usize,
    /// Sorted by score, best first.
    pub rows: Vec<AlphaRow>,
    pub best_alpha: f64,
    pub best_is_interior: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct FieldMetrics {
    pub factors: Vec<usize>,
    pub monotonicity: [f64; 2],
    pub eps: f64,
    pub injectivity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct FieldEntry {
    pub subject: String,
    pub all: Option<FieldMetrics>,
    pub control: Option<FieldMetrics>,
    /// Latent goal radius for the controllers.
    pub goal_tolerance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct EmbodimentEntry {
    pub subject: String,
    pub transfer: EmbodimentReport,
    pub identical: EmbodimentReport,
    pub shuffled: EmbodimentReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ServoFile {
    pub subject: String,
    pub eps_goal: Option<f64>,
    pub jacobian_condition: Option<f64>,
    pub ill_conditioned: Option<bool>,
    pub stats: Option<SuccessStats>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ReinforceRun {
    pub seed: u64,
    pub first_decile_reward: f64,
    pub last_decile_reward: f64,
    pub improvement: f64,
    pub log_std: Vec<f64>,
    pub stats: SuccessStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ReinforceFile {
    pub subject: String,
    pub eps_goal: Option<f64>,
    pub runs: Vec<ReinforceRun>,
    pub mean_rate: Option<f64>,
    pub mean_task_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TableRow {
    pub subject: String,
    pub uvs_rate: Option<f64>,
    pub reinforce_rate: Option<f64>,
    pub uvs_latent_error: Option<f64>,
    pub reinforce_latent_error: Option<f64>,
    pub uvs_task_error: Option<f64>,
    pub reinforce_task_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct OrderingCheck {
    pub controller: String,
    pub higher: String,
    pub lower: String,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TableFile {
    pub trials: usize,
    pub rows: Vec<TableRow>,
    pub ordering: Vec<OrderingCheck>,
}

pub struct Run {
    /// Config with the global seed already folded in.
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub force: bool,
    manifest: RunManifest,
}

impl Run {
    pub fn open(common: &Common) -> Result<Run, CliError> {
        let raw = load_config(common)?;
        let dir = raw.output_dir.clone();
        let manifest = RunManifest::load(&dir)?.unwrap_or_else(|| RunManifest::new(raw.digest()));
        Ok(Run { cfg: raw.seeded(), dir, force: common.force, manifest })
    }

    pub fn dispatch(&mut self, stage: &str) -> Result<(), CliError> {
        match stage {
            "demo-gen" => self.cmd_demo_gen(),
            "train" => self.cmd_train(None, &[]),
            "taskmap" => self.cmd_taskmap(),
            "factors" => self.cmd_factors(),
            "alpha-sweep" => self.cmd_alpha_sweep(),
            "fieldmap" => self.cmd_fieldmap(),
            "embodiment" => self.cmd_embodiment(),
            "servo" => self.cmd_servo(),
            "reinforce" => self.cmd_reinforce(),
            "evaluate" => self.cmd_evaluate(),
            other => Err(CliError::Config(format!("unknown stage {other:?}"))),
        }
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn is_fresh(&self, name: &str, digest: &str) -> bool {
        !self.force
            && self.manifest.is_fresh(name, digest)
            && self.manifest.outputs(name).iter().all(|p| self.dir.join(p).exists())
    }

    fn record(&mut self, name: &str, digest: String, elapsed: f64, result: &StageResult) -> Result<(), CliError> {
        let record = match result {
            Ok(outs) => {
                let mut outputs: Vec<String> = outs.iter().map(|p| self.relative(p)).collect();
                outputs.sort();
                outputs.dedup();
                StageRecord { status: StageStatus::Completed, digest, outputs, wall_clock_s: elapsed, error: None }
            }
            Err(e) => StageRecord {
                status: StageStatus::Failed,
                digest,
                outputs: Vec::new(),
                wall_clock_s: elapsed,
                error: Some(e.to_string()),
            },
        };
        self.manifest.stages.insert(name.to_string(), record);
        self.manifest.config_digest = self.cfg.digest();
        self.manifest.save(&self.dir)
    }

    fn stage<F>(&mut self, name: &str, digest: String, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&Run) -> StageResult,
    {
        if self.is_fresh(name, &digest) {
            log::info!("{name}: up to date");
            return Ok(());
        }
        log::info!("{name}: running");
        let t = Instant::now();
        let result = body(self);
        self.record(name, digest, t.elapsed().as_secs_f64(), &result)?;
        result.map(|_| ())
    }

    fn upstream(&self, stage: &str) -> Result<String, CliError> {
        match self.manifest.stages.get(stage) {
            Some(r) if r.status == StageStatus::Completed => Ok(r.digest.clone()),
            _ => {
                let cmd = stage.split(':').next().unwrap_or(stage);
                Err(CliError::Stage(format!("stage {stage} has not completed; run `latentservo {cmd}` first")))
            }
        }
    }

    fn train_digests(&self) -> Result<Vec<String>, CliError> {
        self.cfg.methods.iter().map(|m| self.upstream(&format!("train:{}", m.encoder.method))).collect()
    }

    fn subjects(&self) -> Vec<Subject> {
        let mut s: Vec<Subject> = self.cfg.methods.iter().map(|m| Subject::Learned(m.encoder.method)).collect();
        s.push(Subject::Oracle);
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn load_set(&self, name: &str) -> Result<Vec<DemoSequence>, CliError> {
        let dir = self.path("demos").join(name);
        let mut seqs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::Stage(format!("{}: {e}; run `latentservo demo-gen` first", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        seqs.sort();
        seqs.iter().map(|p| load_demo(p).map_err(CliError::from)).collect()
    }

    fn load_model(&self, name: &str, method: Method) -> Result<Model, CliError> {
        let path = self.path("models").join(format!("{name}.lsrv"));
        if !path.exists() {
            return Err(CliError::Stage(format!("{} is missing; run `latentservo train` first", path.display())));
        }
        Ok(repr::load(&path, Some(method))?)
    }

    fn load_rep(&self, subject: &Subject) -> Result<Rep, CliError> {
        Ok(match subject {
            Subject::Learned(m) => Rep::Model(Box::new(self.load_model(m.label(), *m)?)),
            Subject::Oracle => Rep::Oracle(OracleRepresentation::default()),
        })
    }

    // ---- demo-gen ----

    pub fn cmd_demo_gen(&mut self) -> Result<(), CliError> {
        let digest = digest_of(&json!({
            "stage": "demo-gen",
            "task": self.cfg.task,
            "demos": self.cfg.demos,
            "dof1": !self.cfg.analysis.dof_compare.is_empty(),
        }));
        self.stage("demo-gen", digest, |run| {
            let (task, d) = (&run.cfg.task, &run.cfg.demos);
            let root = run.path("demos");
            if root.exists() {
                fs::remove_dir_all(&root)?;
            }
            let mut sets = vec![
                ("teacher", toy_corpus(task, d.pattern, d.teacher_sequences, d.steps, d.seed)?),
                (
                    "executor",
                    toy_corpus(
                        &task.with_sprite(SpriteKind::Executor),
                        d.pattern,
                        d.executor_sequences,
                        d.steps,
                        d.seed,
                    )?,
                ),
            ];
            if !run.cfg.analysis.dof_compare.is_empty() {
                let one = TaskSpec { dof: 1, ..task.clone() };
                sets.push(("teacher_dof1", toy_corpus(&one, d.pattern, d.teacher_sequences, d.steps, d.seed)?));
            }
            let mut outs = Vec::new();
            for (name, demos) in &sets {
                for (i, demo) in demos.iter().enumerate() {
                    let dir = root.join(name).join(format!("seq_{i:03}"));
                    save_demo(demo, &dir)?;
                    outs.push(dir);
                }
            }
            Ok(outs)
        })
    }

    // ---- train ----

    pub fn cmd_train(&mut self, only: Option<Method>, extra_dims: &[usize]) -> Result<(), CliError> {
        let demo = self.upstream("demo-gen")?;
        let mut dims: Vec<usize> = self.cfg.analysis.latent_dims.iter().chain(extra_dims).copied().collect();
        dims.sort_unstable();
        dims.dedup();

        let mut pending = Vec::new();
        for mc in self.cfg.methods.iter().filter(|m| only.is_none_or(|o| o == m.encoder.method)) {
            let m = mc.encoder.method;
            let dof1 = self.cfg.analysis.dof_compare.contains(&m);
            let dims: Vec<usize> = if m == Method::Sae { Vec::new() } else { dims.clone() };
            let name = format!("train:{m}");
            let digest = digest_of(&json!({"stage": "train", "demo": demo, "method": mc, "dof1": dof1, "dims": dims}));
            if self.is_fresh(&name, &digest) {
                log::info!("{name}: up to date");
                continue;
            }
            pending.push((name, digest, mc.clone(), dof1, dims));
        }
        if pending.is_empty() {
            return Ok(());
        }
        let teacher = self.load_set("teacher")?;
        let dof1_set = if pending.iter().any(|p| p.3) { Some(self.load_set("teacher_dof1")?) } else { None };

        // one job per weight file, trained in parallel
        let mut jobs = Vec::new();
        for (pi, (_, _, mc, dof1, dims)) in pending.iter().enumerate() {
            let m = mc.encoder.method;
            jobs.push((pi, m.label().to_string(), mc.encoder.clone(), mc.train.clone(), &teacher));
            if *dof1 {
                let set = dof1_set.as_ref().expect("loaded above");
                jobs.push((pi, format!("{m}_dof1"), mc.encoder.clone(), mc.train.clone(), set));
            }
            for &d in dims {
                let enc = EncoderSpec { latent_dim: d, ..mc.encoder.clone() };
                jobs.push((pi, format!("{m}_z{d}"), enc, mc.train.clone(), &teacher));
            }
        }
        log::info!("training {} model(s)", jobs.len());
        let models = self.path("models");
        let results: Vec<(usize, f64, StageResult)> = jobs
            .par_iter()
            .map(|(pi, name, enc, tc, data)| {
                let t = Instant::now();
                let r = train_one(&models, name, enc, tc, data, &demo);
                (*pi, t.elapsed().as_secs_f64(), r)
            })
            .collect();

        let mut first_err = None;
        for (pi, (name, digest, ..)) in pending.into_iter().enumerate() {
            let mut outs = Vec::new();
            let mut err = None;
            let mut elapsed = 0.0;
            for (_, secs, r) in results.iter().filter(|r| r.0 == pi) {
                elapsed += secs;
                match r {
                    Ok(o) => outs.extend(o.iter().cloned()),
                    Err(e) => err = err.or_else(|| Some(CliError::Stage(e.to_string()))),
                }
            }
            let result = match err {
                Some(e) => Err(e),
                None => Ok(outs),
            };
            self.record(&name, digest, elapsed, &result)?;
            if let Err(e) = result {
                first_err = first_err.or(Some(e));
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    // ---- taskmap ----

    pub fn cmd_taskmap(&mut self) -> Result<(), CliError> {
        let digest = digest_of(&json!({"stage": "taskmap", "train": self.train_digests()?}));
        self.stage("taskmap", digest, |run| {
            let teacher = run.load_set("teacher")?;
            let dir = run.path("taskmaps");
            mkdirs(&dir)?;
            let mut outs = Vec::new();
            for mc in &run.cfg.methods {
                let m = mc.encoder.method;
                let model = run.load_model(m.label(), m)?;
                for (i, demo) in teacher.iter().enumerate() {
                    let demo_name = format!("teacher_{i:03}");
                    let map = build_task_map(&model, demo, &demo_name, m.label())?;
                    let csv = dir.join(format!("{m}_{demo_name}.csv"));
                    map.save_csv(&csv)?;
                    let series: Vec<Series> = (0..map.latent_dim())
                        .map(|k| Series {
                            label: format!("z{k}"),
                            points: map.column(k).into_iter().enumerate().map(|(t, v)| (t as f64, v)).collect(),
                        })
                        .collect();
                    let title = format!("{m} task map, {demo_name}");
                    let svg = write_text(
                        &dir.join(format!("{m}_{demo_name}.svg")),
                        &svg::line_chart(&title, "time step", "latent value", &series),
                    )?;
                    outs.extend([csv, svg]);
                }
            }
            Ok(outs)
        })
    }

    // ---- factors ----

    pub fn cmd_factors(&mut self) -> Result<(), CliError> {
        let a = &self.cfg.analysis;
        let digest = digest_of(&json!({
            "stage": "factors",
            "train": self.train_digests()?,
            "tau": a.tau,
            "dof_compare": a.dof_compare,
            "dof": self.cfg.task.dof,
        }));
        self.stage("factors", digest, |run| {
            let tau = run.cfg.analysis.tau;
            let teacher = run.load_set("teacher")?;
            let mut methods = Vec::new();
            for mc in &run.cfg.methods {
                let m = mc.encoder.method;
                let model = run.load_model(m.label(), m)?;
                let factors = factor_set(&model, &teacher, tau)?;
                let control = match m {
                    Method::Sae => select_sae_pair(&factors).and_then(|(a, b)| factors.restrict(&[a, b])),
                    _ => factors.dominant(run.cfg.task.dof),
                };
                let (control, control_error) = match control {
                    Ok(c) => (Some(c), None),
                    Err(e) => {
                        log::warn!("{m}: no control factors: {e}");
                        (None, Some(e.to_string()))
                    }
                };
                methods.push(MethodFactors { method: m, factors, control, control_error });
            }
            let mut dof_compare = Vec::new();
            if !run.cfg.analysis.dof_compare.is_empty() {
                let one = run.load_set("teacher_dof1")?;
                for &m in &run.cfg.analysis.dof_compare {
                    let model = run.load_model(&format!("{m}_dof1"), m)?;
                    let dof1_factors = factor_set(&model, &one, tau)?;
                    let dof2_count = methods.iter().find(|f| f.method == m).map_or(0, |f| f.factors.len());
                    dof_compare.push(DofComparison {
                        method: m,
                        dof2_count,
                        dof1_count: dof1_factors.len(),
                        dof1_factors,
                    });
                }
            }
            let file = FactorsFile { tau, methods, dof_compare };
            Ok(vec![write_json(&run.path("factors/factors.json"), &file)?])
        })
    }

    fn factors_file(&self) -> Result<FactorsFile, CliError> {
        read_json(&self.path("factors/factors.json"), "factors")
    }

    // ---- alpha-sweep ----

    pub fn cmd_alpha_sweep(&mut self) -> Result<(), CliError> {
        let demo = self.upstream("demo-gen")?;
        let a = &self.cfg.analysis;
        if a.alpha_sweep.is_empty() {
            log::info!("alpha-sweep: no alpha values configured");
            return Ok(());
        }
        let template = self.cfg.method(Method::Bvae).cloned().expect("validated: alpha sweep needs bvae");
        let digest = digest_of(&json!({
            "stage": "alpha-sweep",
            "demo": demo,
            "bvae": template,
            "alphas": a.alpha_sweep,
            "epochs": a.alpha_sweep_epochs,
        }));
        self.stage("alpha-sweep", digest, |run| {
            let teacher = run.load_set("teacher")?;
            let epochs = run.cfg.analysis.alpha_sweep_epochs;
            let dir = run.path("alpha");
            let scored: Vec<Result<(AlphaRow, Vec<PathBuf>), CliError>> = run
                .cfg
                .analysis
                .alpha_sweep
                .par_iter()
                .map(|&alpha| {
                    let enc = EncoderSpec { alpha: Some(alpha), ..template.encoder.clone() };
                    let tc = TrainConfig { epochs, ..template.train.clone() };
                    let outs = train_one(&dir, &format!("bvae_alpha_{alpha}"), &enc, &tc, &teacher, &demo)?;
                    let model = repr::load(&outs[0], Some(Method::Bvae))?;
                    let scores = teacher.iter().map(|d| alpha_score(&model, d)).collect::<Result<Vec<_>, _>>()?;
                    let score = scores.iter().sum::<f64>() / scores.len() as f64;
                    let beta = enc.beta()?.expect("bvae has beta");
                    Ok((AlphaRow { alpha, beta, score }, outs))
                })
                .collect();
            let mut rows = Vec::new();
            let mut outs = Vec::new();
            for r in scored {
                let (row, o) = r?;
                rows.push(row);
                outs.extend(o);
            }
            rows.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.alpha.total_cmp(&b.alpha)));
            let best_alpha = rows[0].alpha;
            let lo = rows.iter().map(|r| r.alpha).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.alpha).fold(f64::NEG_INFINITY, f64::max);
            let file =
                AlphaSweepFile { epochs, best_is_interior: best_alpha > lo && best_alpha < hi, best_alpha, rows };
            let mut csv = String::from("alpha,beta,score\n");
            for r in &file.rows {
                csv.push_str(&format!("{},{},{}\n", r.alpha, r.beta, r.score));
            }
            outs.push(write_text(&dir.join("alpha_sweep.csv"), &csv)?);
            outs.push(write_json(&dir.join("alpha_sweep.json"), &file)?);
            Ok(outs)
        })
    }

    // ---- fieldmap ----

    pub fn cmd_fieldmap(&mut self) -> Result<(), CliError> {
        let digest = digest_of(&json!({
            "stage": "fieldmap",
            "factors": self.upstream("factors")?,
            "grid_n": self.cfg.analysis.grid_n,
            "goal_radius": self.cfg.control.goal_radius,
        }));
        self.stage("fieldmap", digest, |run| {
            let factors = run.factors_file()?;
            let grid_n = run.cfg.analysis.grid_n;
            let dir = run.path("fieldmap");
            mkdirs(&dir)?;
            let mut outs = Vec::new();
            let mut entries = Vec::new();
            for subject in run.subjects() {
                let label = subject.label();
                let (all, control) = match &subject {
                    Subject::Learned(m) => {
                        let f = factors.methods.iter().find(|f| f.method == *m).expect("factors cover every method");
                        (f.factors.clone(), f.control.clone())
                    }
                    Subject::Oracle => (FactorSet::all(2), Some(FactorSet::all(2))),
                };
                if all.is_empty() {
                    entries.push(FieldEntry {
                        subject: label.into(),
                        all: None,
                        control: None,
                        goal_tolerance: None,
                        error: Some("no time-varying factors".into()),
                    });
                    continue;
                }
                let rep = run.load_rep(&subject)?;
                let field = build_field_map(rep.as_dyn(), &run.cfg.task, &all, grid_n)?;
                let csv = dir.join(format!("{label}.csv"));
                field.save_csv(&csv)?;
                outs.push(csv);
                for (col, idx) in field.factor_indices.iter().enumerate() {
                    let values: Vec<f64> = field.values.iter().map(|v| v[col]).collect();
                    let title = format!("{label} factor z{idx} over the workspace");
                    outs.push(write_text(
                        &dir.join(format!("{label}_z{idx}.svg")),
                        &svg::heatmap(&title, grid_n, &values),
                    )?);
                }
                let control_field = control.as_ref().map(|c| sub_field(&field, &c.indices)).transpose()?;
                entries.push(FieldEntry {
                    subject: label.into(),
                    all: Some(field_metrics(&field)?),
                    control: control_field.as_ref().map(field_metrics).transpose()?,
                    goal_tolerance: control_field.as_ref().map(|f| goal_tolerance(f, run.cfg.control.goal_radius)),
                    error: None,
                });
            }
            outs.push(write_json(&dir.join("metrics.json"), &entries)?);
            Ok(outs)
        })
    }

    // ---- embodiment ----

    pub fn cmd_embodiment(&mut self) -> Result<(), CliError> {
        let digest = digest_of(&json!({
            "stage": "embodiment",
            "train": self.train_digests()?,
            "tau": self.cfg.analysis.tau,
            "seed": self.cfg.control.seed,
        }));
        self.stage("embodiment", digest, |run| {
            let tau = run.cfg.analysis.tau;
            let mut teacher = run.load_set("teacher")?;
            let mut executor = run.load_set("executor")?;
            let n = teacher.len().min(executor.len());
            teacher.truncate(n);
            executor.truncate(n);
            let shuffled: Vec<DemoSequence> = teacher
                .iter()
                .enumerate()
                .map(|(i, d)| shuffled_in_time(d, run.cfg.control.seed.wrapping_add(i as u64)))
                .collect();
            let mut entries = Vec::new();
            for subject in run.subjects() {
                let rep = run.load_rep(&subject)?;
                let rep = rep.as_dyn();
                entries.push(EmbodimentEntry {
                    subject: subject.label().into(),
                    transfer: embodiment_compare(rep, &teacher, &executor, tau)?,
                    identical: embodiment_compare(rep, &teacher, &teacher, tau)?,
                    shuffled: embodiment_compare(rep, &teacher, &shuffled, tau)?,
                });
            }
            Ok(vec![write_json(&run.path("embodiment/embodiment.json"), &entries)?])
        })
    }

    // ---- control ----

    fn control_digest(&self, stage: &str, extra: serde_json::Value) -> Result<String, CliError> {
        let c = &self.cfg.control;
        Ok(digest_of(&json!({
            "stage": stage,
            "fieldmap": self.upstream("fieldmap")?,
            "task": self.cfg.task,
            "trials": c.trials,
            "seed": c.seed,
            "r_goal": c.reinforce.r_goal,
            "extra": extra,
        })))
    }

    /// Representation, control factors and latent goal radius for a subject,
    /// or the reason it cannot be controlled.
    fn control_setup(
        &self,
        subject: &Subject,
        factors: &FactorsFile,
        fields: &[FieldEntry],
    ) -> Result<Result<(Rep, FactorSet, f64), String>, CliError> {
        let control = match subject {
            Subject::Learned(m) => {
                let f = factors.methods.iter().find(|f| f.method == *m).expect("factors cover every method");
                match (&f.control, &f.control_error) {
                    (Some(c), _) => c.clone(),
                    (None, e) => return Ok(Err(e.clone().unwrap_or_else(|| "no control factors".into()))),
                }
            }
            Subject::Oracle => FactorSet::all(2),
        };
        let Some(eps) = fields.iter().find(|f| f.subject == subject.label()).and_then(|f| f.goal_tolerance) else {
            return Ok(Err("no goal tolerance in the field map metrics".into()));
        };
        Ok(Ok((self.load_rep(subject)?, control, eps)))
    }

    pub fn cmd_servo(&mut self) -> Result<(), CliError> {
        let digest = self.control_digest("servo", json!(self.cfg.control.uvs))?;
        self.stage("servo", digest, |run| {
            let factors = run.factors_file()?;
            let fields: Vec<FieldEntry> = read_json(&run.path("fieldmap/metrics.json"), "fieldmap")?;
            let (task, c) = (&run.cfg.task, &run.cfg.control);
            let dir = run.path("servo");
            mkdirs(&dir.join("traces"))?;
            let mut outs = Vec::new();
            for subject in run.subjects() {
                let label = subject.label();
                let mut file = ServoFile {
                    subject: label.into(),
                    eps_goal: None,
                    jacobian_condition: None,
                    ill_conditioned: None,
                    stats: None,
                    error: None,
                };
                match run.control_setup(&subject, &factors, &fields)? {
                    Err(reason) => file.error = Some(reason),
                    Ok((rep, control, eps)) => {
                        let sensor = Sensor::new(rep.as_dyn(), &control);
                        let goal = Goal::at_target(&sensor, task, eps, c.reinforce.r_goal)?;
                        let uvs = c.uvs.clone();
                        let (stats, episodes) = evaluate_episodes(
                            &|_| Box::new(UvsController::new(uvs.clone())),
                            task,
                            &sensor,
                            &goal,
                            uvs.max_steps,
                            c.trials,
                            c.seed,
                        )?;
                        for (i, ep) in episodes.iter().enumerate() {
                            let p = dir.join("traces").join(format!("{label}_trial_{i:02}.csv"));
                            ep.save_trace_csv(&p)?;
                            outs.push(p);
                        }
                        let mut env = ServoEnv::new(task.clone(), [0.5, 0.5])?;
                        let j = uvs_init_jacobian(&mut env, &sensor, uvs.explore.unwrap_or(task.a_max), uvs.damping)?;
                        file.eps_goal = Some(eps);
                        file.jacobian_condition = Some(j.condition);
                        file.ill_conditioned = Some(j.ill_conditioned);
                        file.stats = Some(stats);
                    }
                }
                outs.push(write_json(&dir.join(format!("{label}.json")), &file)?);
            }
            Ok(outs)
        })
    }

    pub fn cmd_reinforce(&mut self) -> Result<(), CliError> {
        let c = &self.cfg.control;
        let digest = self.control_digest("reinforce", json!({"reinforce": c.reinforce, "runs": c.reinforce_runs}))?;
        self.stage("reinforce", digest, |run| {
            let factors = run.factors_file()?;
            let fields: Vec<FieldEntry> = read_json(&run.path("fieldmap/metrics.json"), "fieldmap")?;
            let (task, c) = (&run.cfg.task, &run.cfg.control);
            let dir = run.path("reinforce");
            mkdirs(&dir.join("traces"))?;
            let mut outs = Vec::new();
            for subject in run.subjects() {
                let label = subject.label();
                let mut file = ReinforceFile {
                    subject: label.into(),
                    eps_goal: None,
                    runs: Vec::new(),
                    mean_rate: None,
                    mean_task_error: None,
                    error: None,
                };
                match run.control_setup(&subject, &factors, &fields)? {
                    Err(reason) => file.error = Some(reason),
                    Ok((rep, control, eps)) => {
                        let sensor = Sensor::new(rep.as_dyn(), &control);
                        let goal = Goal::at_target(&sensor, task, eps, c.reinforce.r_goal)?;
                        let mut curves = Vec::new();
                        for r in 0..c.reinforce_runs {
                            let cfg = ReinforceConfig {
                                seed: c.reinforce.seed.wrapping_add(r as u64),
                                ..c.reinforce.clone()
                            };
                            let (policy, curve) = train_reinforce(task, &sensor, &goal, &cfg)?;
                            let curve_path = dir.join(format!("{label}_run{r}_curve.csv"));
                            curve.save_csv(&curve_path)?;
                            outs.push(curve_path);
                            outs.push(write_json(&dir.join(format!("{label}_run{r}_policy.json")), &policy)?);
                            let k_gain = cfg.k_gain;
                            let (stats, episodes) = evaluate_episodes(
                                &|_| Box::new(PolicyController::mean(policy.clone(), k_gain)),
                                task,
                                &sensor,
                                &goal,
                                cfg.horizon,
                                c.trials,
                                c.seed,
                            )?;
                            for (i, ep) in episodes.iter().enumerate() {
                                let p = dir.join("traces").join(format!("{label}_run{r}_trial_{i:02}.csv"));
                                ep.save_trace_csv(&p)?;
                                outs.push(p);
                            }
                            let (first, last) = curve.window_means(0.1);
                            file.runs.push(ReinforceRun {
                                seed: cfg.seed,
                                first_decile_reward: first,
                                last_decile_reward: last,
                                improvement: last - first,
                                log_std: policy.log_std().to_vec(),
                                stats,
                            });
                            curves.push(curve);
                        }
                        let n = file.runs.len() as f64;
                        file.eps_goal = Some(eps);
                        file.mean_rate = Some(file.runs.iter().map(|r| r.stats.rate).sum::<f64>() / n);
                        file.mean_task_error =
                            Some(file.runs.iter().map(|r| r.stats.mean_final_task_error).sum::<f64>() / n);
                        outs.push(write_text(
                            &dir.join(format!("{label}_curve.svg")),
                            &reward_svg(label, &file.runs, &curves),
                        )?);
                    }
                }
                outs.push(write_json(&dir.join(format!("{label}.json")), &file)?);
            }
            Ok(outs)
        })
    }

    // ---- evaluate ----

    pub fn cmd_evaluate(&mut self) -> Result<(), CliError> {
        let digest = digest_of(&json!({
            "stage": "evaluate",
            "servo": self.upstream("servo")?,
            "reinforce": self.upstream("reinforce")?,
        }));
        self.stage("evaluate", digest, |run| {
            let mut rows = Vec::new();
            for subject in run.subjects() {
                let label = subject.label();
                let servo: ServoFile = read_json(&run.path(&format!("servo/{label}.json")), "servo")?;
                let rl: ReinforceFile = read_json(&run.path(&format!("reinforce/{label}.json")), "reinforce")?;
                let n = rl.runs.len().max(1) as f64;
                rows.push(TableRow {
                    subject: label.into(),
                    uvs_rate: servo.stats.as_ref().map(|s| s.rate),
                    reinforce_rate: rl.mean_rate,
                    uvs_latent_error: servo.stats.as_ref().map(|s| s.mean_final_error),
                    reinforce_latent_error: (!rl.runs.is_empty())
                        .then(|| rl.runs.iter().map(|r| r.stats.mean_final_error).sum::<f64>() / n),
                    uvs_task_error: servo.stats.as_ref().map(|s| s.mean_final_task_error),
                    reinforce_task_error: rl.mean_task_error,
                });
            }
            let rate = |s: &str, f: fn(&TableRow) -> Option<f64>| {
                rows.iter().find(|r| r.subject == s).map(|r| f(r).unwrap_or(0.0))
            };
            let mut ordering = Vec::new();
            for (controller, f) in [
                ("uvs", (|r: &TableRow| r.uvs_rate) as fn(&TableRow) -> Option<f64>),
                ("reinforce", |r| r.reinforce_rate),
            ] {
                if let (Some(hi), Some(lo)) = (rate("sae", f), rate("bvae", f)) {
                    ordering.push(OrderingCheck {
                        controller: controller.into(),
                        higher: "sae".into(),
                        lower: "bvae".into(),
                        holds: hi >= lo,
                    });
                }
            }
            let table = TableFile { trials: run.cfg.control.trials, rows, ordering };
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            let mut csv = String::from("subject,uvs_rate,reinforce_rate,uvs_task_error,reinforce_task_error\n");
            for r in &table.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.subject,
                    opt(r.uvs_rate),
                    opt(r.reinforce_rate),
                    opt(r.uvs_task_error),
                    opt(r.reinforce_task_error)
                ));
            }
            Ok(vec![
                write_json(&run.path("evaluate/table.json"), &table)?,
                write_text(&run.path("evaluate/table.csv"), &csv)?,
            ])
        })
    }
}

fn train_one(
    dir: &Path,
    name: &str,
    enc: &EncoderSpec,
    tc: &TrainConfig,
    data: &[DemoSequence],
    dataset: &str,
) -> StageResult {
    let tc = TrainConfig { dataset: dataset.to_string(), ..tc.clone() };
    let (model, report) = repr::train(enc, data, &tc)?;
    let weights = dir.join(format!("{name}.lsrv"));
    mkdirs(dir)?;
    repr::save(&model, &weights)?;
    let loss = write_text(&dir.join(format!("{name}_loss.csv")), &loss_csv(&report.loss_curve))?;
    let summary = ModelSummary {
        name: name.to_string(),
        method: enc.method,
        latent_size: enc.latent_size(),
        dataset: dataset.to_string(),
        train_digest: tc.digest(enc),
        epochs: tc.epochs,
        final_loss: *report.loss_curve.last().expect("at least one epoch"),
        final_recon_mse: report.final_recon_mse,
    };
    let json = write_json(&dir.join(format!("{name}.json")), &summary)?;
    Ok(vec![weights, loss, json])
}

fn factor_set(model: &Model, demos: &[DemoSequence], tau: f64) -> Result<FactorSet, CliError> {
    let maps = demos
        .iter()
        .enumerate()
        .map(|(i, d)| build_task_map(model, d, &format!("seq_{i:03}"), model.method().label()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(extract_time_varying(&maps, tau)?)
}

fn sub_field(field: &LatentFieldMap, keep: &[usize]) -> Result<LatentFieldMap, CliError> {
    let cols: Vec<usize> = keep
        .iter()
        .map(|k| {
            field
                .factor_indices
                .iter()
                .position(|i| i == k)
                .ok_or_else(|| CliError::Stage(format!("control factor {k} is not in the field map")))
        })
        .collect::<Result<_, _>>()?;
    let values = field.values.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
    Ok(LatentFieldMap::new(field.grid_n, keep.to_vec(), values)?)
}

fn field_metrics(field: &LatentFieldMap) -> Result<FieldMetrics, CliError> {
    let eps = calibrate_eps(field);
    let injectivity = if eps > 0.0 {
        injectivity_metric(field, eps)?
    } else {
        // a constant field collapses every cell into one
        1.0
    };
    Ok(FieldMetrics {
        factors: field.factor_indices.clone(),
        monotonicity: monotonicity_metric(field)?,
        eps,
        injectivity,
    })
}

fn reward_svg(label: &str, runs: &[ReinforceRun], curves: &[TrainingCurve]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .zip(curves)
        .map(|(r, c)| Series {
            label: format!("seed {}", r.seed),
            points: c.episode_rewards.iter().enumerate().map(|(e, &v)| (e as f64, v)).collect(),
        })
        .collect();
    svg::line_chart(&format!("{label}: episode reward during guided REINFORCE"), "episode", "episode reward", &series)
}
