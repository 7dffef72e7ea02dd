//! Experiment grids: configuration, per-run execution, persisted records and reports.
//!
//! Output directory layout:
//!
//! ```text
//! results.csv            one row per completed run (fixed columns)
//! summary.csv            per (method, rank) aggregates over seeds
//! records/<run_id>.json  full record including the run's configuration
//! losses/<run_id>.csv    step, lr, loss
//! checkpoints/           backbone binaries and adapter bundles
//! plots/*.svg
//! timings.csv            wall-clock measurements (not byte-stable)
//! run.log                timestamped progress log
//! failures.json          present only when some runs failed
//! ```
//!
//! Everything except `timings.csv` and `run.log` is a pure function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterKind, Target};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Batch, FrozenBackbone, LatentSource, Model, ModelConfig, ModelMode};
use crate::nn::Activation;
use crate::plot::{emit_plot, Axes, Series};
use crate::rng::{streams, RngState};
use crate::spectral::{activation_spectrum, SpectralReport};
use crate::tasks::{
    linear_floor, next_token_pairs, teacher_task, trajectory_sequences, vocab, RegressionDataset,
    SequenceDataset, TeacherTaskParams, TrajectoryParams, FLOOR_RIDGE,
};
use crate::tensor::Tensor;
use crate::train::{measure_throughput, train_adapter, Metric, TrainConfig, TrainData};

pub const SCHEMA_VERSION: u32 = 1;
pub const TEACHER_TASK: &str = "nonlinear_teacher";
pub const LOGISTIC_TASK: &str = "logistic_trajectories";

/// Columns of `results.csv`, in order.
pub const RESULT_COLUMNS: [&str; 10] = [
    "run_id",
    "method",
    "rank",
    "seed",
    "trainable_params",
    "test_metric",
    "effective_rank",
    "auc90",
    "tokens_per_second",
    "wallclock_seconds",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralSource {
    LatentH,
    OutputDeltaD,
    DeltaW,
}

impl SpectralSource {
    pub fn name(self) -> &'static str {
        match self {
            SpectralSource::LatentH => "latent_h",
            SpectralSource::OutputDeltaD => "output_delta_d",
            SpectralSource::DeltaW => "delta_w",
        }
    }
}

impl std::str::FromStr for SpectralSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent_h" => Ok(SpectralSource::LatentH),
            "output_delta_d" => Ok(SpectralSource::OutputDeltaD),
            "delta_w" => Ok(SpectralSource::DeltaW),
            _ => Err(Error::Config(format!("unknown spectral source {s:?}"))),
        }
    }
}

fn default_source() -> SpectralSource {
    SpectralSource::LatentH
}

fn default_throughput_reps() -> usize {
    5
}

fn default_true() -> bool {
    true
}

/// A named adapter template; the grid fills in the rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub adapter: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task_id: String,
    #[serde(default)]
    pub task_params: serde_json::Value,
    pub methods: Vec<MethodSpec>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub outputs_dir: PathBuf,
    #[serde(default = "default_source")]
    pub spectral_source: SpectralSource,
    /// Rank used by the ablation grid; defaults to the first entry of `ranks`.
    #[serde(default)]
    pub ablation_rank: Option<usize>,
    #[serde(default = "default_throughput_reps")]
    pub throughput_repetitions: usize,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

/// Parsed task parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    Teacher(TeacherTaskParams),
    Logistic(TrajectoryParams),
}

impl TaskSpec {
    pub fn params_json(&self) -> serde_json::Value {
        match self {
            TaskSpec::Teacher(p) => serde_json::to_value(p),
            TaskSpec::Logistic(p) => serde_json::to_value(p),
        }
        .expect("task params serialize")
    }
}

fn params_or_default<T: for<'de> Deserialize<'de> + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("task_params: {e}")))
}

impl ExperimentConfig {
    /// Linear-ceiling sweep: LoRA versus CeRA on the value projection of a regressor.
    pub fn ceiling() -> Self {
        let wv = vec![Target::Wv];
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task_id: TEACHER_TASK.into(),
            task_params: serde_json::to_value(TeacherTaskParams::default()).expect("serializable"),
            methods: vec![
                MethodSpec {
                    name: "lora".into(),
                    adapter: AdapterConfig::lora(1).with_targets(wv.clone()),
                },
                MethodSpec {
                    name: "cera".into(),
                    adapter: AdapterConfig::cera(1).with_targets(wv),
                },
            ],
            ranks: vec![4, 8, 16, 32, 64],
            seeds: vec![1, 2, 3],
            model: ModelConfig::regressor(),
            train: TrainConfig::default(),
            outputs_dir: PathBuf::from("runs/ceiling"),
            spectral_source: SpectralSource::LatentH,
            ablation_rank: Some(16),
            throughput_repetitions: default_throughput_reps(),
            save_checkpoints: true,
        }
    }

    /// Next-token modeling of logistic trajectories on the default decoder.
    pub fn logistic_lm() -> Self {
        ExperimentConfig {
            task_id: LOGISTIC_TASK.into(),
            task_params: serde_json::to_value(TrajectoryParams::default()).expect("serializable"),
            methods: vec![
                MethodSpec {
                    name: "lora".into(),
                    adapter: AdapterConfig::lora(1),
                },
                MethodSpec {
                    name: "cera".into(),
                    adapter: AdapterConfig::cera(1),
                },
            ],
            ranks: vec![4, 16],
            seeds: vec![1],
            model: ModelConfig::desk(),
            train: TrainConfig {
                steps: 300,
                batch_size: 16,
                ..TrainConfig::default()
            },
            outputs_dir: PathBuf::from("runs/logistic"),
            ablation_rank: Some(8),
            ..ExperimentConfig::ceiling()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn task(&self) -> Result<TaskSpec> {
        match self.task_id.as_str() {
            TEACHER_TASK => Ok(TaskSpec::Teacher(params_or_default(&self.task_params)?)),
            LOGISTIC_TASK => Ok(TaskSpec::Logistic(params_or_default(&self.task_params)?)),
            other => Err(Error::Config(format!(
                "unknown task_id {other:?} (expected {TEACHER_TASK} or {LOGISTIC_TASK})"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() || self.ranks.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("methods, ranks and seeds must all be non-empty".into()));
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("method names must be unique".into()));
        }
        if self.ranks.contains(&0) {
            return Err(Error::Config("rank 0 is not a valid adapter rank".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        match self.task()? {
            TaskSpec::Teacher(_) if self.model.mode != ModelMode::Regressor => {
                return Err(Error::Config(format!("{TEACHER_TASK} needs a regressor-mode model")));
            }
            TaskSpec::Logistic(p) => {
                if self.model.mode != ModelMode::LanguageModel {
                    return Err(Error::Config(format!("{LOGISTIC_TASK} needs a language model")));
                }
                if self.model.vocab_size < vocab::SIZE {
                    return Err(Error::Config(format!("vocab_size must be at least {}", vocab::SIZE)));
                }
                let input_len = 7 * (p.n_steps + 1) - 1;
                if input_len > self.model.max_seq_len {
                    return Err(Error::Config(format!(
                        "trajectories of {} steps need max_seq_len ≥ {input_len}",
                        p.n_steps
                    )));
                }
            }
            _ => {}
        }
        for m in &self.methods {
            for &r in &self.ranks {
                m.adapter.clone().with_rank(r).validate()?;
            }
        }
        if let Some(r) = self.ablation_rank {
            if r == 0 {
                return Err(Error::Config("ablation_rank must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// The grid in method, rank, seed order.
    pub fn run_specs(&self) -> Result<Vec<RunSpec>> {
        let task = self.task()?;
        let mut specs = Vec::new();
        for m in &self.methods {
            for &r in &self.ranks {
                for &seed in &self.seeds {
                    specs.push(self.spec(&task, &m.name, m.adapter.clone().with_rank(r), seed));
                }
            }
        }
        Ok(specs)
    }

    fn spec(&self, task: &TaskSpec, method: &str, adapter: AdapterConfig, seed: u64) -> RunSpec {
        RunSpec {
            task_id: self.task_id.clone(),
            task_params: task.params_json(),
            method: method.to_string(),
            adapter,
            seed,
            model: self.model.clone(),
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            spectral_source: self.spectral_source,
        }
    }

    fn ablation_template(&self) -> AdapterConfig {
        let rank = self.ablation_rank.unwrap_or(self.ranks[0]);
        self.methods
            .iter()
            .map(|m| &m.adapter)
            .find(|a| a.kind == AdapterKind::Cera)
            .cloned()
            .unwrap_or_else(|| AdapterConfig::cera(rank))
            .with_rank(rank)
    }

    /// The five ablation variants at the ablation rank, seeds as configured.
    pub fn ablation_specs(&self) -> Result<Vec<RunSpec>> {
        let task = self.task()?;
        let full = self.ablation_template();
        let module = AdapterConfig {
            kind: AdapterKind::ParallelModule,
            targets: Vec::new(),
            ..full.clone()
        };
        let variants = [
            ("full", full.clone()),
            ("module_level", module),
            ("identity", full.clone().with_activation(Activation::Identity)),
            ("relu", full.clone().with_activation(Activation::Relu)),
            ("no_dropout", full.with_dropout(0.0)),
        ];
        let mut specs = Vec::new();
        for (name, adapter) in variants {
            adapter.validate()?;
            for &seed in &self.seeds {
                specs.push(self.spec(&task, name, adapter.clone(), seed));
            }
        }
        Ok(specs)
    }
}

/// Everything that determines one run's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task_id: String,
    pub task_params: serde_json::Value,
    pub method: String,
    pub adapter: AdapterConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spectral_source: SpectralSource,
}

impl RunSpec {
    /// First 16 hex digits of SHA-256 over the canonical (key-sorted) JSON form.
    pub fn run_id(&self) -> String {
        let value = serde_json::to_value(self).expect("run spec serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn task(&self) -> Result<TaskSpec> {
        match self.task_id.as_str() {
            TEACHER_TASK => Ok(TaskSpec::Teacher(params_or_default(&self.task_params)?)),
            LOGISTIC_TASK => Ok(TaskSpec::Logistic(params_or_default(&self.task_params)?)),
            other => Err(Error::Config(format!("unknown task_id {other:?}"))),
        }
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub trainable_params: usize,
    pub test_metric: f64,
    pub effective_rank: f64,
    pub auc90: Option<usize>,
    /// Always empty in persisted results; measured values go to `timings.csv`.
    pub tokens_per_second: Option<f64>,
    pub wallclock_seconds: Option<f64>,
}

/// Contents of `records/<run_id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub result: ResultRecord,
    pub metric: Metric,
    pub final_train_loss: f64,
    pub linear_floor: Option<f64>,
    pub spectral: SpectralReport,
    pub backbone_checksum: String,
    pub config: RunSpec,
}

/// Non-deterministic measurements of a freshly executed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub run_id: String,
    pub wallclock_seconds: f64,
    pub train_tokens_per_second: f64,
    pub eval_tokens_per_second: f64,
    pub relative_latency: f64,
}

/// A task instance owned by one run.
#[derive(Clone, Debug)]
pub enum TaskData {
    Regression(RegressionDataset),
    Sequences(SequenceDataset),
}

impl TaskData {
    pub fn as_train_data(&self) -> TrainData<'_> {
        match self {
            TaskData::Regression(d) => TrainData::Regression(d),
            TaskData::Sequences(d) => TrainData::Sequences(d),
        }
    }
}

/// Builds the task a run trains on. Depends only on the run spec and the frozen backbone.
pub fn build_task(spec: &RunSpec, model: &Model) -> Result<TaskData> {
    match spec.task()? {
        TaskSpec::Teacher(p) => Ok(TaskData::Regression(teacher_task(model, &p, spec.seed)?)),
        TaskSpec::Logistic(p) => Ok(TaskData::Sequences(trajectory_sequences(&p, spec.seed)?)),
    }
}

fn probe_inputs(task: &TaskData) -> Vec<Vec<usize>> {
    match task {
        TaskData::Sequences(ds) => next_token_pairs(&ds.test).0,
        TaskData::Regression(_) => Vec::new(),
    }
}

/// Spectrum of the chosen adapter signal over the test split (or of the weight update).
pub fn spectral_for(model: &Model, task: &TaskData, source: SpectralSource) -> Result<SpectralReport> {
    let label = source.name();
    match source {
        SpectralSource::LatentH | SpectralSource::OutputDeltaD => {
            let which = if source == SpectralSource::LatentH {
                LatentSource::LatentH
            } else {
                LatentSource::OutputDeltaD
            };
            let seqs = probe_inputs(task);
            let batches: Vec<Batch<'_>> = match task {
                TaskData::Regression(ds) => vec![Batch::Features(&ds.test_x)],
                TaskData::Sequences(_) => seqs.chunks(32).map(Batch::Tokens).collect(),
            };
            let m = model.collect_latents(&batches, which)?;
            activation_spectrum(&m, label)
        }
        SpectralSource::DeltaW => {
            if model.adapters().is_empty() {
                return Err(Error::Config("no adapter injected".into()));
            }
            // s·W_down·W_up per site; every site reads d_model inputs, so rows stack
            let parts: Vec<Tensor> = model
                .adapters()
                .values()
                .map(|a| Ok(a.state.w_down.matmul(&a.state.w_up)?.scale(a.config.scale())))
                .collect::<Result<_>>()?;
            SpectralReport::from_matrix(label, &Tensor::vstack(&parts)?, 1)
        }
    }
}

/// Result of executing one run: record, timing and the trained model.
pub struct RunOutput {
    pub record: RunRecord,
    pub timing: RunTiming,
    pub report: crate::train::TrainReport,
    pub model: Model,
    pub task: TaskData,
}

/// Builds, trains and evaluates one run. Pure given the run spec, apart from timings.
pub fn execute_run(spec: &RunSpec) -> Result<RunOutput> {
    let start = Instant::now();
    let mut model = Model::build(&spec.model, spec.seed)?;
    let task = build_task(spec, &model)?;
    let mut rng = RngState::new(spec.seed, streams::ADAPTER_BASE);
    model.inject_all(&spec.adapter, &mut rng)?;
    let report = train_adapter(&mut model, task.as_train_data(), &spec.train)?;
    let spectral = spectral_for(&model, &task, spec.spectral_source)?;
    let floor = match &task {
        TaskData::Regression(ds) => Some(linear_floor(ds, FLOOR_RIDGE)?),
        TaskData::Sequences(_) => None,
    };
    let baseline = Model::new(model.backbone().clone());
    let seqs = probe_inputs(&task);
    let probe = match &task {
        TaskData::Regression(ds) => Batch::Features(&ds.test_x),
        TaskData::Sequences(_) => Batch::Tokens(&seqs[..seqs.len().min(32)]),
    };
    let throughput = measure_throughput(&model, &baseline, probe, 3)?;
    let result = ResultRecord {
        run_id: spec.run_id(),
        method: spec.method.clone(),
        rank: spec.adapter.rank,
        seed: spec.seed,
        trainable_params: report.trainable_params,
        test_metric: report.test_metric,
        effective_rank: spectral.effective_rank,
        auc90: spectral.auc90_index,
        tokens_per_second: None,
        wallclock_seconds: None,
    };
    let timing = RunTiming {
        run_id: result.run_id.clone(),
        wallclock_seconds: start.elapsed().as_secs_f64(),
        train_tokens_per_second: report.tokens_per_second,
        eval_tokens_per_second: throughput.tokens_per_second,
        relative_latency: throughput.relative_latency,
    };
    let record = RunRecord {
        result,
        metric: report.metric,
        final_train_loss: report.final_train_loss,
        linear_floor: floor,
        spectral,
        backbone_checksum: report.backbone_checksum.clone(),
        config: spec.clone(),
    };
    Ok(RunOutput {
        record,
        timing,
        report,
        model,
        task,
    })
}

/// A run that did not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: String,
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    /// Completed runs in grid order.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Present for runs executed now; reused runs have none.
    pub timings: Vec<RunTiming>,
}

impl GridOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn timestamp() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

/// Appends a timestamped line to `run.log`.
pub fn append_log(out: &Path, line: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(out.join("run.log"))?;
    writeln!(f, "[{}] {line}", timestamp())?;
    Ok(())
}

fn record_path(out: &Path, run_id: &str) -> PathBuf {
    out.join("records").join(format!("{run_id}.json"))
}

fn load_record(out: &Path, spec: &RunSpec) -> Option<RunRecord> {
    let text = fs::read_to_string(record_path(out, &spec.run_id())).ok()?;
    let rec: RunRecord = serde_json::from_str(&text).ok()?;
    (rec.config == *spec).then_some(rec)
}

fn persist_run(out: &Path, output: &RunOutput, checkpoints: bool) -> Result<()> {
    let id = &output.record.result.run_id;
    output.report.write_loss_csv(&out.join("losses").join(format!("{id}.csv")))?;
    if checkpoints {
        let bb = out
            .join("checkpoints")
            .join(format!("backbone-{}.bin", &output.record.backbone_checksum[..16]));
        if !bb.exists() {
            output.model.backbone().save(&bb)?;
        }
        output
            .model
            .adapter_bundle()
            .save(&out.join("checkpoints").join(format!("{id}.adapters.json")))?;
    }
    let mut json = serde_json::to_string_pretty(&output.record)?;
    json.push('\n');
    write_atomic(&record_path(out, id), json.as_bytes())
}

/// Runs (or reuses) every spec on a pool of `jobs` threads and writes `results.csv`.
///
/// A run whose record already exists with an identical configuration is not re-executed.
/// Failed runs are reported, never written, and do not affect other runs.
pub fn run_grid(specs: &[RunSpec], out: &Path, jobs: usize, checkpoints: bool, results_name: &str) -> Result<GridOutcome> {
    for sub in ["records", "losses", "plots", "checkpoints"] {
        fs::create_dir_all(out.join(sub))
            .map_err(|e| Error::Config(format!("outputs dir {} is not writable: {e}", out.display())))?;
    }
    append_log(out, &format!("grid of {} runs, {} job(s)", specs.len(), jobs.max(1)))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;

    type Outcome = std::result::Result<(RunRecord, Option<RunTiming>), RunFailure>;
    let outcomes: Vec<Outcome> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let id = spec.run_id();
                if let Some(rec) = load_record(out, spec) {
                    let _ = append_log(out, &format!("reuse {id} ({} r={} seed={})", spec.method, spec.adapter.rank, spec.seed));
                    return Ok((rec, None));
                }
                let _ = append_log(out, &format!("start {id} ({} r={} seed={})", spec.method, spec.adapter.rank, spec.seed));
                let result = execute_run(spec).and_then(|output| {
                    persist_run(out, &output, checkpoints)?;
                    Ok(output)
                });
                match result {
                    Ok(output) => {
                        let _ = append_log(
                            out,
                            &format!(
                                "done {id} metric={:.6e} er={:.4} wall={:.2}s",
                                output.record.result.test_metric,
                                output.record.result.effective_rank,
                                output.timing.wallclock_seconds
                            ),
                        );
                        Ok((output.record, Some(output.timing)))
                    }
                    Err(e) => {
                        warn!("run {id} failed: {e}");
                        let _ = append_log(out, &format!("FAILED {id}: {e}"));
                        Err(RunFailure {
                            run_id: id,
                            method: spec.method.clone(),
                            rank: spec.adapter.rank,
                            seed: spec.seed,
                            error: e.to_string(),
                        })
                    }
                }
            })
            .collect()
    });

    let mut outcome = GridOutcome::default();
    for o in outcomes {
        match o {
            Ok((rec, timing)) => {
                outcome.records.push(rec);
                outcome.timings.extend(timing);
            }
            Err(f) => outcome.failures.push(f),
        }
    }
    write_results_csv(&out.join(results_name), &outcome.records)?;
    write_timings(out, &outcome.timings)?;
    let failures = out.join("failures.json");
    if outcome.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(&failures)?;
        }
    } else {
        let mut json = serde_json::to_string_pretty(&outcome.failures)?;
        json.push('\n');
        write_atomic(&failures, json.as_bytes())?;
    }
    info!(
        "{} run(s) completed, {} failed",
        outcome.records.len(),
        outcome.failures.len()
    );
    Ok(outcome)
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Writes `results.csv` with the fixed column set.
pub fn write_results_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS)?;
    for rec in records {
        let r = &rec.result;
        w.write_record([
            r.run_id.clone(),
            r.method.clone(),
            r.rank.to_string(),
            r.seed.to_string(),
            r.trainable_params.to_string(),
            fmt_f64(r.test_metric),
            fmt_f64(r.effective_rank),
            r.auc90.map(|a| a.to_string()).unwrap_or_default(),
            r.tokens_per_second.map(fmt_f64).unwrap_or_default(),
            r.wallclock_seconds.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads the rows of a `results.csv`.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RESULT_COLUMNS.iter().copied()) {
        return Err(Error::Input(format!("{} does not have the results columns", path.display())));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Input(format!("bad number {s:?}")))
        }
    };
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Input(format!("bad number {s:?}"))) };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Input(format!("bad integer {s:?}"))) };
    r.records()
        .map(|row| {
            let row = row?;
            Ok(ResultRecord {
                run_id: row[0].to_string(),
                method: row[1].to_string(),
                rank: int(&row[2])? as usize,
                seed: int(&row[3])?,
                trainable_params: int(&row[4])? as usize,
                test_metric: num(&row[5])?,
                effective_rank: num(&row[6])?,
                auc90: if row[7].is_empty() { None } else { Some(int(&row[7])? as usize) },
                tokens_per_second: opt(&row[8])?,
                wallclock_seconds: opt(&row[9])?,
            })
        })
        .collect()
}

fn write_timings(out: &Path, timings: &[RunTiming]) -> Result<()> {
    if timings.is_empty() {
        return Ok(());
    }
    let path = out.join("timings.csv");
    let fresh = !path.exists();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(fs::OpenOptions::new().create(true).append(true).open(&path)?);
    if fresh {
        w.write_record([
            "run_id",
            "wallclock_seconds",
            "train_tokens_per_second",
            "eval_tokens_per_second",
            "relative_latency",
        ])?;
    }
    for t in timings {
        w.write_record([
            t.run_id.clone(),
            t.wallclock_seconds.to_string(),
            t.train_tokens_per_second.to_string(),
            t.eval_tokens_per_second.to_string(),
            t.relative_latency.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per `(method, rank)` aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub rank: usize,
    pub n_seeds: usize,
    pub metric_mean: f64,
    pub metric_min: f64,
    pub metric_max: f64,
    pub effective_rank_mean: f64,
    pub auc90_mean: Option<f64>,
    pub linear_floor_mean: Option<f64>,
}

/// Aggregates records by method (first-appearance order) and ascending rank.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for rec in records {
        let m = &rec.result.method;
        let mi = match order.iter().position(|o| o == m) {
            Some(i) => i,
            None => {
                order.push(m.clone());
                order.len() - 1
            }
        };
        groups.entry((mi, rec.result.rank)).or_default().push(rec);
    }
    groups
        .into_iter()
        .map(|((mi, rank), recs)| {
            let n = recs.len() as f64;
            let metrics: Vec<f64> = recs.iter().map(|r| r.result.test_metric).collect();
            let aucs: Vec<f64> = recs.iter().filter_map(|r| r.result.auc90.map(|a| a as f64)).collect();
            let floors: Vec<f64> = recs.iter().filter_map(|r| r.linear_floor).collect();
            SummaryRow {
                method: order[mi].clone(),
                rank,
                n_seeds: recs.len(),
                metric_mean: metrics.iter().sum::<f64>() / n,
                metric_min: metrics.iter().copied().fold(f64::INFINITY, f64::min),
                metric_max: metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                effective_rank_mean: recs.iter().map(|r| r.result.effective_rank).sum::<f64>() / n,
                auc90_mean: (aucs.len() == recs.len()).then(|| aucs.iter().sum::<f64>() / n),
                linear_floor_mean: (floors.len() == recs.len()).then(|| floors.iter().sum::<f64>() / n),
            }
        })
        .collect()
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "rank",
        "n_seeds",
        "metric_mean",
        "metric_min",
        "metric_max",
        "effective_rank_mean",
        "auc90_mean",
        "linear_floor_mean",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.rank.to_string(),
            r.n_seeds.to_string(),
            fmt_f64(r.metric_mean),
            fmt_f64(r.metric_min),
            fmt_f64(r.metric_max),
            fmt_f64(r.effective_rank_mean),
            r.auc90_mean.map(fmt_f64).unwrap_or_default(),
            r.linear_floor_mean.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Renders metric-vs-rank and ER-vs-rank charts from result rows (means over seeds).
pub fn plot_results(out: &Path, rows: &[ResultRecord], metric_label: &str) -> Result<()> {
    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let mi = match order.iter().position(|o| *o == r.method) {
            Some(i) => i,
            None => {
                order.push(&r.method);
                order.len() - 1
            }
        };
        let e = acc.entry((mi, r.rank)).or_insert((0.0, 0.0, 0));
        e.0 += r.test_metric;
        e.1 += r.effective_rank;
        e.2 += 1;
    }
    let series = |pick: fn(&(f64, f64, usize)) -> f64| -> Vec<Series> {
        order
            .iter()
            .enumerate()
            .map(|(mi, name)| {
                let pts = acc
                    .iter()
                    .filter(|((m, _), _)| *m == mi)
                    .map(|((_, rank), v)| (*rank as f64, pick(v)))
                    .collect();
                Series::new(*name, pts)
            })
            .collect()
    };
    emit_plot(
        &series(|v| v.0 / v.2 as f64),
        &Axes {
            title: format!("{metric_label} vs rank"),
            x_label: "rank".into(),
            y_label: metric_label.into(),
            x_log: true,
            y_log: false,
        },
        &out.join("plots").join("metric_vs_rank.svg"),
    )?;
    emit_plot(
        &series(|v| v.1 / v.2 as f64),
        &Axes {
            title: "effective rank vs rank".into(),
            x_label: "rank".into(),
            y_label: "effective rank".into(),
            x_log: true,
            y_log: false,
        },
        &out.join("plots").join("er_vs_rank.svg"),
    )
}

fn metric_label(records: &[RunRecord]) -> &'static str {
    match records.first().map(|r| r.metric) {
        Some(Metric::Perplexity) => "test perplexity",
        _ => "test MSE",
    }
}

/// Sweep outcome plus the derived summary.
pub struct SweepOutcome {
    pub grid: GridOutcome,
    pub summary: Vec<SummaryRow>,
}

/// Runs the full method × rank × seed grid and writes results, summary and plots.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let specs = cfg.run_specs()?;
    let grid = run_grid(&specs, out, jobs, cfg.save_checkpoints, "results.csv")?;
    let summary = summarize(&grid.records);
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    if !grid.records.is_empty() {
        let rows: Vec<ResultRecord> = grid.records.iter().map(|r| r.result.clone()).collect();
        plot_results(out, &rows, metric_label(&grid.records))?;
    }
    Ok(SweepOutcome { grid, summary })
}

/// One ablation variant aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub position: usize,
    pub variant: String,
    pub rank: usize,
    pub n_seeds: usize,
    pub metric_mean: f64,
    pub metric_min: f64,
    pub metric_max: f64,
    pub effective_rank_mean: f64,
}

pub struct AblationOutcome {
    pub grid: GridOutcome,
    /// Sorted by mean metric, best first.
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.metric_mean)
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<4} {:<14} {:>5} {:>6} {:>14} {:>14} {:>14} {:>9}\n",
            "#", "variant", "rank", "seeds", "mean", "min", "max", "ER"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<4} {:<14} {:>5} {:>6} {:>14.6e} {:>14.6e} {:>14.6e} {:>9.3}\n",
                r.position, r.variant, r.rank, r.n_seeds, r.metric_mean, r.metric_min, r.metric_max, r.effective_rank_mean
            ));
        }
        s
    }
}

/// Runs the five ablation variants and writes `ablation.csv` plus `ablation_results.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<AblationOutcome> {
    cfg.validate()?;
    let specs = cfg.ablation_specs()?;
    let grid = run_grid(&specs, out, jobs, cfg.save_checkpoints, "ablation_results.csv")?;
    let mut rows: Vec<AblationRow> = summarize(&grid.records)
        .into_iter()
        .map(|s| AblationRow {
            position: 0,
            variant: s.method,
            rank: s.rank,
            n_seeds: s.n_seeds,
            metric_mean: s.metric_mean,
            metric_min: s.metric_min,
            metric_max: s.metric_max,
            effective_rank_mean: s.effective_rank_mean,
        })
        .collect();
    rows.sort_by(|a, b| a.metric_mean.total_cmp(&b.metric_mean).then_with(|| a.variant.cmp(&b.variant)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.position = i + 1;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["position", "variant", "rank", "n_seeds", "metric_mean", "metric_min", "metric_max", "effective_rank_mean"])?;
    for r in &rows {
        w.write_record([
            r.position.to_string(),
            r.variant.clone(),
            r.rank.to_string(),
            r.n_seeds.to_string(),
            fmt_f64(r.metric_mean),
            fmt_f64(r.metric_min),
            fmt_f64(r.metric_max),
            fmt_f64(r.effective_rank_mean),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join("ablation.csv"), &bytes)?;
    Ok(AblationOutcome { grid, rows })
}

/// Recomputes a stored run's spectrum from its checkpoints and writes JSON plus plots.
pub fn cmd_spectral(out: &Path, run_id: &str, source: Option<SpectralSource>) -> Result<SpectralReport> {
    let path = record_path(out, run_id);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Input(format!("no record for run {run_id} in {}: {e}", out.display())))?;
    let rec: RunRecord = serde_json::from_str(&text)?;
    let ckpt = out.join("checkpoints");
    let bb = ckpt.join(format!("backbone-{}.bin", &rec.backbone_checksum[..16]));
    let ad = ckpt.join(format!("{run_id}.adapters.json"));
    if !bb.exists() || !ad.exists() {
        return Err(Error::Input(format!("checkpoint for run {run_id} is missing under {}", ckpt.display())));
    }
    let backbone = FrozenBackbone::load(&bb)?;
    if backbone.checksum() != rec.backbone_checksum {
        return Err(Error::Input(format!("backbone checkpoint {} does not match the record", bb.display())));
    }
    let mut model = Model::new(backbone);
    model.load_adapters(&crate::model::AdapterBundle::load(&ad)?)?;
    let task = build_task(&rec.config, &model)?;
    let source = source.unwrap_or(rec.config.spectral_source);
    let report = spectral_for(&model, &task, source)?;

    let stem = format!("{run_id}-{}", source.name());
    let mut json = report.to_json()?;
    json.push('\n');
    write_atomic(&out.join("spectral").join(format!("{stem}.json")), json.as_bytes())?;
    let points: Vec<(f64, f64)> = report
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| ((i + 1) as f64, s))
        .collect();
    emit_plot(
        &[Series::new(format!("{} r={}", rec.result.method, rec.result.rank), points)],
        &Axes {
            title: format!("singular spectrum ({})", source.name()),
            x_label: "index".into(),
            y_label: "singular value".into(),
            x_log: false,
            y_log: true,
        },
        &out.join("plots").join(format!("spectrum-{stem}.svg")),
    )?;
    if let Some(curve) = (!report.energy_curve.is_empty()).then_some(&report.energy_curve) {
        let pts = curve.iter().enumerate().map(|(i, &c)| ((i + 1) as f64, c)).collect();
        emit_plot(
            &[Series::new("cumulative energy", pts)],
            &Axes {
                title: format!("cumulative spectral energy, AUC-90 = {:?}", report.auc90_index),
                x_label: "components".into(),
                y_label: "energy fraction".into(),
                ..Axes::default()
            },
            &out.join("plots").join(format!("energy-{stem}.svg")),
        )?;
    }
    let results = out.join("results.csv");
    if results.exists() {
        let rows = read_results_csv(&results)?;
        if !rows.is_empty() {
            plot_results(out, &rows, metric_label(std::slice::from_ref(&rec)))?;
        }
    }
    Ok(report)
}

/// Re-renders sweep plots from an output directory's `results.csv`.
pub fn cmd_plot(out: &Path) -> Result<()> {
    let rows = read_results_csv(&out.join("results.csv"))?;
    if rows.is_empty() {
        return Err(Error::Input("results.csv has no rows to plot".into()));
    }
    plot_results(out, &rows, "test metric")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub preset: String,
    pub method: String,
    pub rank: usize,
    pub params: u64,
}

/// Adapted-matrix geometry for a named preset.
pub fn preset_geometry(preset: &str) -> Result<Vec<crate::adapters::MatrixGeometry>> {
    match preset {
        "llama3-8b" => Ok(crate::adapters::llama3_8b_geometry()),
        "desk" | "desk-default" => Ok(crate::model::model_geometry(&ModelConfig::desk(), &[Target::Wq, Target::Wv])),
        other => Err(Error::Config(format!("unknown geometry preset {other:?} (expected llama3-8b or desk)"))),
    }
}

/// Parameter audit for every rank and both weight-level methods.
pub fn cmd_params(preset: &str, geometry: &[crate::adapters::MatrixGeometry], ranks: &[usize]) -> Result<Vec<ParamRow>> {
    let mut rows = Vec::new();
    for &r in ranks {
        for cfg in [AdapterConfig::lora(r), AdapterConfig::cera(r)] {
            rows.push(ParamRow {
                preset: preset.to_string(),
                method: cfg.kind.name().to_string(),
                rank: r,
                params: crate::adapters::param_count(&cfg, geometry)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogisticReport {
    pub r: f64,
    pub x0: f64,
    pub values: Vec<f64>,
    pub display: Vec<String>,
    pub collapse: Option<crate::tasks::Collapse>,
}

/// Ground-truth trajectory at four-decimal display with a repetition diagnosis.
pub fn cmd_logistic(r: f64, x0: f64, n: usize, full_precision: bool) -> Result<LogisticReport> {
    let step = if full_precision { None } else { Some(crate::tasks::TRAJECTORY_DECIMALS) };
    let values = crate::tasks::logistic_map(r, x0, n, step)?;
    Ok(diagnose_sequence(r, x0, values))
}

/// Repetition diagnosis of an arbitrary sequence, e.g. a model's generated values.
pub fn diagnose_sequence(r: f64, x0: f64, values: Vec<f64>) -> LogisticReport {
    let d = crate::tasks::TRAJECTORY_DECIMALS;
    LogisticReport {
        r,
        x0,
        display: values.iter().map(|v| format!("{v:.*}", d as usize)).collect(),
        collapse: crate::tasks::detect_state_collapse(&values, d, 3),
        values,
    }
}
