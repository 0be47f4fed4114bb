//! Experiment drivers behind the command-line tool: joint training,
//! evaluation, frozen-backbone transfer, the ablation grid and the
//! parameter-scaling report.
//!
//! Every command writes into an output directory guarded by a lock file,
//! and every CSV starts with a `# config_hash=` comment line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::data::{load_samples, DatasetSplits, Sample, SampleCache, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::heads::{head_param_count, HeadKind, HeadOptions, SpatialAttention, TaskSpec};
use crate::losses::{delta_mtl, read_metrics_csv, write_delta_csv, write_metrics_csv, MtlDelta, TaskPerformance};
use crate::model::Medusa;
use crate::training::{attach_and_train_heads, evaluate, train_multitask, TaskEval, TrainConfig, TrainReport};

const EXPERIMENT_KEY: &str = "experiment";
const LOCK_FILE: &str = ".medusa.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise: f64,
    pub n_train: u64,
    pub n_val: u64,
    pub n_test: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            seed: scene.seed,
            image_size: scene.image_size,
            min_shapes: scene.min_shapes,
            max_shapes: scene.max_shapes,
            noise: scene.noise,
            n_train: 128,
            n_val: 32,
            n_test: 64,
        }
    }
}

impl DataConfig {
    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            image_size: self.image_size,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            noise: self.noise,
        }
    }

    pub fn splits(&self) -> Result<DatasetSplits> {
        DatasetSplits::new(self.n_train, self.n_val, self.n_test)
    }

    /// Samples of one split, read through the environment's cache if set.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        let cache = SampleCache::from_env();
        load_samples(&self.scene(), self.splits()?.range(split), cache.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tasks: Vec<String>,
    pub head: HeadKind,
    pub sfa: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tasks: vec!["depth".into(), "segm".into()],
            head: HeadKind::Msa,
            sfa: true,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn options(&self) -> HeadOptions {
        HeadOptions {
            kind: self.head,
            sfa: self.sfa,
        }
    }

    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks.iter().map(|t| TaskSpec::by_name(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Tasks scored against single-task baselines. Empty means every task.
    pub tasks: Vec<String>,
    pub split: Split,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub tasks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Head used by the single-task reference networks.
    pub baseline_head: HeadKind,
    pub baseline_sfa: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            baseline_head: HeadKind::HrHead,
            baseline_sfa: false,
        }
    }
}

impl AblationConfig {
    pub fn baseline_options(&self) -> HeadOptions {
        HeadOptions {
            kind: self.baseline_head,
            sfa: self.baseline_sfa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub evaluation: EvaluationConfig,
    pub transfer: TransferConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "custom".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            evaluation: EvaluationConfig::default(),
            transfer: TransferConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Command-line overrides of config fields. `None` leaves a field alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub tasks: Option<Vec<String>>,
    pub head: Option<HeadKind>,
    pub sfa: Option<bool>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub base_lr: Option<f64>,
    pub backbone_lr_scale: Option<f64>,
    pub poly_power: Option<f64>,
    pub batch_size: Option<usize>,
    pub intermediate_loss_weight: Option<f64>,
    pub task_loss_weights: Vec<(String, f64)>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.is_empty() || self.scenario.contains(['/', '\\', ' ']) {
            return Err(Error::Config(format!("bad scenario name {:?}", self.scenario)));
        }
        if self.model.tasks.is_empty() {
            return Err(Error::Config("task roster is empty".into()));
        }
        let specs = self.model.specs()?;
        for (i, t) in self.model.tasks.iter().enumerate() {
            if self.model.tasks[..i].contains(t) {
                return Err(Error::Config(format!("task {t} listed twice")));
            }
        }
        for t in &self.evaluation.tasks {
            if !self.model.tasks.contains(t) {
                return Err(Error::Config(format!("evaluation task {t} is not in the roster")));
            }
        }
        for t in &self.transfer.tasks {
            TaskSpec::by_name(t)?;
        }
        for s in &specs {
            s.validate()?;
        }
        self.model.backbone.validate()?;
        self.train.validate()?;
        self.data.scene().validate()?;
        self.data.splits()?;
        self.model
            .backbone
            .check_input(self.data.image_size, self.data.image_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = &o.scenario {
            self.scenario = v.clone();
        }
        if let Some(v) = &o.tasks {
            self.model.tasks = v.clone();
        }
        if let Some(v) = o.head {
            self.model.head = v;
        }
        if let Some(v) = o.sfa {
            self.model.sfa = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.base_lr {
            self.train.base_lr = v;
        }
        if let Some(v) = o.backbone_lr_scale {
            self.train.backbone_lr_scale = v;
        }
        if let Some(v) = o.poly_power {
            self.train.poly_power = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.intermediate_loss_weight {
            self.train.intermediate_loss_weight = v;
        }
        for (t, w) in &o.task_loss_weights {
            self.train.task_loss_weights.insert(t.clone(), *w);
        }
        self.evaluation.tasks.retain(|t| self.model.tasks.contains(t));
        self.validate()
    }

    /// Tasks scored against baselines.
    pub fn scored_tasks(&self) -> Vec<String> {
        if self.evaluation.tasks.is_empty() {
            self.model.tasks.clone()
        } else {
            self.evaluation.tasks.clone()
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn save_checkpoint(model: &Medusa, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut a = checkpoint::to_archive(model)?;
    a.meta.insert(EXPERIMENT_KEY.into(), cfg.to_toml());
    a.save(path)
}

/// Loads a checkpoint together with the experiment config stored in it.
pub fn load_checkpoint(path: &Path) -> Result<(Medusa, ExperimentConfig)> {
    let archive = Archive::load(path)?;
    let model = checkpoint::from_archive(&archive)?;
    let cfg = match archive.meta.get(EXPERIMENT_KEY) {
        Some(text) => ExperimentConfig::from_toml(text).map_err(|e| Error::Version(e.to_string()))?,
        None => return Err(Error::Version("checkpoint carries no experiment config".into())),
    };
    let expected = cfg.model.specs()?;
    if model.heads().len() < expected.len()
        || expected
            .iter()
            .any(|s| model.head(&s.name).map(|h| h.spec()) != Some(s))
    {
        return Err(Error::Version(
            "checkpoint heads do not match its embedded config".into(),
        ));
    }
    Ok((model, cfg))
}

fn build_model(cfg: &ExperimentConfig, options: HeadOptions, tasks: &[String]) -> Result<Medusa> {
    let mut m = Medusa::new(cfg.model.backbone.clone(), cfg.train.seed)?;
    for t in tasks {
        m.add_head(TaskSpec::by_name(t)?, options)?;
    }
    Ok(m)
}

fn performances(evals: &[TaskEval]) -> Vec<TaskPerformance> {
    evals.iter().map(TaskEval::performance).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Trains the configured roster jointly and writes `<scenario>.ckpt`,
/// `<scenario>.report.csv` and `<scenario>.metrics.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let train = cfg.data.load(Split::Train)?;
    let val = cfg.data.load(Split::Val)?;
    let mut model = build_model(cfg, cfg.model.options(), &cfg.model.tasks)?;
    let report = train_multitask(&mut model, &cfg.model.tasks, &train, &val, &cfg.train)?;
    let hash = cfg.hash();
    let outcome = TrainOutcome {
        checkpoint: out.join(format!("{}.ckpt", cfg.scenario)),
        report_csv: out.join(format!("{}.report.csv", cfg.scenario)),
        metrics_csv: out.join(format!("{}.metrics.csv", cfg.scenario)),
        report,
    };
    save_checkpoint(&model, cfg, &outcome.checkpoint)?;
    outcome.report.write_csv(create(&outcome.report_csv)?, &hash)?;
    write_metrics_csv(create(&outcome.metrics_csv)?, &hash, &outcome.report.performances())?;
    Ok(outcome)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub evals: Vec<TaskEval>,
    pub delta: Option<MtlDelta>,
    pub metrics_csv: PathBuf,
    pub delta_csv: Option<PathBuf>,
}

/// Reads baseline metric CSVs into performances, one per task.
pub fn read_baselines(paths: &[PathBuf]) -> Result<BTreeMap<String, TaskPerformance>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for (task, kind, value) in read_metrics_csv(File::open(p)?)? {
            let spec = TaskSpec::by_name(&task)?;
            if spec.metric_kind != kind {
                return Err(Error::InvalidData(format!(
                    "{}: task {task} scored with {kind}, expected {}",
                    p.display(),
                    spec.metric_kind
                )));
            }
            out.insert(task, TaskPerformance { task: spec, value });
        }
    }
    Ok(out)
}

/// Δ-MTL of `perf` over the tasks that have a baseline.
pub fn delta_against(
    perf: &[TaskPerformance],
    baselines: &BTreeMap<String, TaskPerformance>,
    tasks: &[String],
) -> Result<MtlDelta> {
    let mut m = Vec::new();
    let mut b = Vec::new();
    for t in tasks {
        if let (Some(p), Some(base)) = (perf.iter().find(|p| &p.task.name == t), baselines.get(t)) {
            m.push(p.clone());
            b.push(base.clone());
        }
    }
    if m.is_empty() {
        return Err(Error::InvalidArgument("no task has both a score and a baseline".into()));
    }
    delta_mtl(&m, &b)
}

/// Scores every head of a checkpoint on one split. With baseline CSVs, also
/// writes the Δ-MTL over the scored tasks.
pub fn cmd_eval(checkpoint: &Path, split: Split, baselines: &[PathBuf], out: &Path) -> Result<EvalOutcome> {
    let (mut model, cfg) = load_checkpoint(checkpoint)?;
    let _lock = OutputLock::acquire(out)?;
    let samples = cfg.data.load(split)?;
    let tasks = model.task_names();
    let evals = evaluate(&mut model, &tasks, &samples, cfg.train.batch_size)?;
    let perf = performances(&evals);
    let hash = cfg.hash();
    let metrics_csv = out.join(format!("{}.eval_{split}.csv", cfg.scenario));
    write_metrics_csv(create(&metrics_csv)?, &hash, &perf)?;
    let (delta, delta_csv) = if baselines.is_empty() {
        (None, None)
    } else {
        let base = read_baselines(baselines)?;
        let d = delta_against(&perf, &base, &cfg.scored_tasks())?;
        let path = out.join(format!("{}.delta_{split}.csv", cfg.scenario));
        write_delta_csv(create(&path)?, &hash, &d)?;
        (Some(d), Some(path))
    };
    Ok(EvalOutcome {
        evals,
        delta,
        metrics_csv,
        delta_csv,
    })
}

#[derive(Debug)]
pub struct TransferOutcome {
    pub report: TrainReport,
    /// Validation scores of the previously trained tasks, before and after.
    pub prior_before: Vec<TaskEval>,
    pub prior_after: Vec<TaskEval>,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Freezes a trained model, attaches heads for `cfg.transfer.tasks` and
/// trains only those. Writes the combined checkpoint, the transfer report
/// and validation metrics of all heads.
pub fn cmd_transfer(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<TransferOutcome> {
    cfg.validate()?;
    if cfg.transfer.tasks.is_empty() {
        return Err(Error::Config("no transfer tasks given".into()));
    }
    let (mut model, source_cfg) = load_checkpoint(checkpoint)?;
    let _lock = OutputLock::acquire(out)?;
    let new: Vec<(TaskSpec, HeadOptions)> = cfg
        .transfer
        .tasks
        .iter()
        .map(|t| Ok((TaskSpec::by_name(t)?, cfg.model.options())))
        .collect::<Result<_>>()?;

    let train = cfg.data.load(Split::Train)?;
    let val = cfg.data.load(Split::Val)?;
    let prior = model.task_names();
    model.freeze_backbone();
    let prior_before = evaluate(&mut model, &prior, &val, cfg.train.batch_size)?;
    let report = attach_and_train_heads(&mut model, &new, &train, &val, &cfg.train)?;
    let prior_after = evaluate(&mut model, &prior, &val, cfg.train.batch_size)?;

    // The combined model keeps the source roster and appends the new tasks.
    let mut combined = source_cfg.clone();
    combined.scenario = cfg.scenario.clone();
    combined.transfer = cfg.transfer.clone();
    let hash = cfg.hash();
    let outcome = TransferOutcome {
        checkpoint: out.join(format!("{}.ckpt", cfg.scenario)),
        report_csv: out.join(format!("{}.report.csv", cfg.scenario)),
        metrics_csv: out.join(format!("{}.metrics.csv", cfg.scenario)),
        report,
        prior_before,
        prior_after,
    };
    save_checkpoint(&model, &combined, &outcome.checkpoint)?;
    outcome.report.write_csv(create(&outcome.report_csv)?, &hash)?;
    let mut all = performances(&outcome.prior_after);
    all.extend(outcome.report.performances());
    write_metrics_csv(create(&outcome.metrics_csv)?, &hash, &all)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceRow {
    pub tasks: usize,
    pub medusa: usize,
    pub single_task: usize,
    pub pairwise: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResourceReport {
    pub backbone: usize,
    pub head: usize,
    pub pair_block: usize,
    pub rows: Vec<ResourceRow>,
    /// Smallest task count at which the pairwise model outgrows separate
    /// single-task networks.
    pub crossover: Option<usize>,
}

const CROSSOVER_SEARCH_LIMIT: usize = 100_000;

/// Parameter counts for 1..=max_tasks tasks, all using the head of the
/// first roster task:
///
/// * shared backbone with independent heads: `B + T·H`
/// * separate single-task networks: `T·(B + H)`
/// * a stylized pairwise-distillation design that adds one spatial-attention
///   block per scale for every ordered task pair: `B + T·H + T(T−1)·P`
pub fn resource_report(cfg: &ExperimentConfig, max_tasks: usize) -> Result<ResourceReport> {
    if max_tasks == 0 {
        return Err(Error::InvalidArgument("max_tasks must be at least 1".into()));
    }
    let bb = &cfg.model.backbone;
    let task = TaskSpec::by_name(&cfg.model.tasks[0])?;
    let backbone = bb.param_count();
    let head = head_param_count(bb, &task, cfg.model.options());
    let pair_block: usize = bb.channels.iter().map(|&c| SpatialAttention::param_count(c)).sum();
    let row = |t: usize| ResourceRow {
        tasks: t,
        medusa: backbone + t * head,
        single_task: t * (backbone + head),
        pairwise: backbone + t * head + t * (t - 1) * pair_block,
    };
    let crossover = (1..=CROSSOVER_SEARCH_LIMIT).find(|&t| {
        let r = row(t);
        r.pairwise > r.single_task
    });
    Ok(ResourceReport {
        backbone,
        head,
        pair_block,
        rows: (1..=max_tasks).map(row).collect(),
        crossover,
    })
}

pub fn cmd_resources(cfg: &ExperimentConfig, max_tasks: usize, out: &Path) -> Result<(ResourceReport, PathBuf)> {
    cfg.validate()?;
    let report = resource_report(cfg, max_tasks)?;
    let _lock = OutputLock::acquire(out)?;
    let path = out.join(format!("{}.resources.csv", cfg.scenario));
    let mut f = create(&path)?;
    writeln!(f, "# config_hash={}", cfg.hash())?;
    writeln!(
        f,
        "# params_pairwise is a stylized stand-in for pairwise task-interaction decoders: \
         one spatial-attention block per scale for every ordered task pair"
    )?;
    writeln!(
        f,
        "# backbone={} head={} pair_block={} crossover_tasks={}",
        report.backbone,
        report.head,
        report.pair_block,
        report.crossover.map(|c| c.to_string()).unwrap_or_else(|| "none".into())
    )?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["T", "params_medusa", "params_st", "params_pairwise"])?;
    for r in &report.rows {
        w.write_record([
            r.tasks.to_string(),
            r.medusa.to_string(),
            r.single_task.to_string(),
            r.pairwise.to_string(),
        ])?;
    }
    w.flush()?;
    Ok((report, path))
}

/// The four architecture cells of the ablation grid.
pub const ABLATION_CELLS: [HeadOptions; 4] = [
    HeadOptions {
        kind: HeadKind::Msa,
        sfa: true,
    },
    HeadOptions {
        kind: HeadKind::Msa,
        sfa: false,
    },
    HeadOptions {
        kind: HeadKind::HrHead,
        sfa: true,
    },
    HeadOptions {
        kind: HeadKind::HrHead,
        sfa: false,
    },
];

pub fn cell_name(o: HeadOptions) -> String {
    format!("{}_{}", o.kind, if o.sfa { "sfa" } else { "plain" })
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub seed: u64,
    pub options: HeadOptions,
    pub evals: Vec<TaskEval>,
    pub delta: MtlDelta,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub seed: u64,
    pub task: String,
    pub eval: TaskEval,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub baselines: Vec<BaselineResult>,
    pub cells: Vec<CellResult>,
    pub csv: PathBuf,
    pub summary_csv: PathBuf,
}

impl AblationOutcome {
    /// Mean Δ-MTL of one cell over all seeds.
    pub fn mean_delta(&self, options: HeadOptions) -> Option<f64> {
        let ds: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.options == options)
            .map(|c| c.delta.aggregate)
            .collect();
        (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    }

    pub fn baseline_checkpoint(&self, seed: u64, task: &str) -> Option<&Path> {
        self.baselines
            .iter()
            .find(|b| b.seed == seed && b.task == task)
            .map(|b| b.checkpoint.as_path())
    }

    pub fn cell_checkpoint(&self, seed: u64, options: HeadOptions) -> Option<&Path> {
        self.cells
            .iter()
            .find(|c| c.seed == seed && c.options == options)
            .map(|c| c.checkpoint.as_path())
    }
}

/// For every seed: trains one single-task reference network per scored
/// task, then the full roster under each ablation cell, and scores each
/// cell's Δ-MTL against the references on the evaluation split.
pub fn cmd_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<AblationOutcome> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let train = cfg.data.load(Split::Train)?;
    let val = cfg.data.load(Split::Val)?;
    let scored_split = cfg.data.load(cfg.evaluation.split)?;
    let scored = cfg.scored_tasks();
    let mut baselines = Vec::new();
    let mut cells = Vec::new();

    for &seed in &cfg.ablation.seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;

        let mut base_perf = BTreeMap::new();
        for task in &scored {
            let mut st_cfg = run_cfg.clone();
            st_cfg.model.tasks = vec![task.clone()];
            st_cfg.model.head = cfg.ablation.baseline_head;
            st_cfg.model.sfa = cfg.ablation.baseline_sfa;
            st_cfg.evaluation.tasks.clear();
            let tasks = [task.clone()];
            let mut model = build_model(&st_cfg, cfg.ablation.baseline_options(), &tasks)?;
            train_multitask(&mut model, &tasks, &train, &val, &st_cfg.train)?;
            let eval = evaluate(&mut model, &tasks, &scored_split, cfg.train.batch_size)?.remove(0);
            let path = out.join(format!("{}.seed{seed}.st_{task}.ckpt", cfg.scenario));
            save_checkpoint(&model, &st_cfg, &path)?;
            base_perf.insert(task.clone(), eval.performance());
            baselines.push(BaselineResult {
                seed,
                task: task.clone(),
                eval,
                checkpoint: path,
            });
        }

        for options in ABLATION_CELLS {
            let mut cell_cfg = run_cfg.clone();
            cell_cfg.model.head = options.kind;
            cell_cfg.model.sfa = options.sfa;
            let mut model = build_model(&cell_cfg, options, &cfg.model.tasks)?;
            train_multitask(&mut model, &cfg.model.tasks, &train, &val, &cell_cfg.train)?;
            let evals = evaluate(&mut model, &scored, &scored_split, cfg.train.batch_size)?;
            let delta = delta_against(&performances(&evals), &base_perf, &scored)?;
            let path = out.join(format!("{}.seed{seed}.{}.ckpt", cfg.scenario, cell_name(options)));
            save_checkpoint(&model, &cell_cfg, &path)?;
            cells.push(CellResult {
                seed,
                options,
                evals,
                delta,
                checkpoint: path,
            });
        }
    }

    let hash = cfg.hash();
    let csv_path = out.join(format!("{}.ablation.csv", cfg.scenario));
    {
        let mut f = create(&csv_path)?;
        writeln!(f, "# config_hash={hash}")?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["seed", "model", "task", "metric_kind", "value", "relative"])?;
        for b in &baselines {
            w.write_record([
                b.seed.to_string(),
                format!("st_{}", b.task),
                b.task.clone(),
                b.eval.task.metric_kind.to_string(),
                format!("{:.17e}", b.eval.metric),
                String::new(),
            ])?;
        }
        for c in &cells {
            for e in &c.evals {
                let rel = c
                    .delta
                    .tasks
                    .iter()
                    .position(|t| t == &e.task.name)
                    .map(|i| format!("{:.17e}", c.delta.per_task_relative[i]))
                    .unwrap_or_default();
                w.write_record([
                    c.seed.to_string(),
                    cell_name(c.options),
                    e.task.name.clone(),
                    e.task.metric_kind.to_string(),
                    format!("{:.17e}", e.metric),
                    rel,
                ])?;
            }
            w.write_record([
                c.seed.to_string(),
                cell_name(c.options),
                "aggregate".into(),
                "delta_mtl".into(),
                String::new(),
                format!("{:.17e}", c.delta.aggregate),
            ])?;
        }
        w.flush()?;
    }

    let outcome = AblationOutcome {
        baselines,
        cells,
        csv: csv_path,
        summary_csv: out.join(format!("{}.ablation_summary.csv", cfg.scenario)),
    };
    let mut f = create(&outcome.summary_csv)?;
    writeln!(f, "# config_hash={hash}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["head", "sfa", "seeds", "mean_delta_mtl", "mean_delta_percent"])?;
    for options in ABLATION_CELLS {
        let mean = outcome.mean_delta(options).unwrap_or(f64::NAN);
        w.write_record([
            options.kind.to_string(),
            if options.sfa { "on" } else { "off" }.to_string(),
            cfg.ablation.seeds.len().to_string(),
            format!("{mean:.17e}"),
            format!("{:.4}", 100.0 * mean),
        ])?;
    }
    w.flush()?;
    Ok(outcome)
}
