//! Experiment drivers: single runs, layer sweeps, transfer and cost reports.
//!
//! Every driver returns an [`ExperimentReport`]: one aggregated row per
//! configuration cell plus the per-seed [`RunSummary`] values behind it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint::config_hash;
use crate::data::{make_synthetic, Example, SyntheticSpec, TaskDataset, EOS, SEP};
use crate::error::{Error, Result};
use crate::methods::{MethodConfig, MethodKind, ParamCount};
use crate::model::PeftModel;
use crate::trainer::{evaluate, train, AdamW, EvalMetrics, TrainConfig, TrainData, TrainRecord};

pub const REPORT_SCHEMA: &str = "promptlab-report/1";

pub const REPORT_COLUMNS: [&str; 12] = [
    "experiment",
    "method",
    "layer",
    "config_hash",
    "metric_mean",
    "metric_stddev",
    "seeds",
    "method_params",
    "head_params",
    "total_params",
    "train_secs_per_sample",
    "infer_secs_per_sample",
];

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Few-shot budget used when none is given.
pub const DEFAULT_FEW_SHOT_K: usize = 100;

/// Where a task comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// A directory in the layout of [`TaskDataset::write_dir`].
    Dir {
        path: PathBuf,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<TaskDataset> {
        match self {
            DatasetSource::Synthetic(spec) => make_synthetic(spec),
            DatasetSource::Dir { path } => TaskDataset::load_dir(path),
        }
    }

    /// Directory the source reads from, if any.
    pub fn path(&self) -> Option<&Path> {
        match self {
            DatasetSource::Dir { path } => Some(path),
            DatasetSource::Synthetic(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TransferMode {
    ZeroShot,
    FewShot { k: usize },
}

impl TransferMode {
    pub fn name(self) -> &'static str {
        match self {
            TransferMode::ZeroShot => "zero_shot",
            TransferMode::FewShot { .. } => "few_shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub methods: Vec<MethodKind>,
    /// Empty means every layer of the backbone.
    pub layers: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            methods: vec![MethodKind::IdSpam],
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSettings {
    pub target: DatasetSource,
    #[serde(flatten)]
    pub mode: TransferMode,
    #[serde(default)]
    pub methods: Vec<MethodKind>,
    /// Training settings for the target phase; defaults to the main ones.
    #[serde(default)]
    pub few_shot_train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSettings {
    pub hidden: Vec<usize>,
    pub layers: Vec<usize>,
    pub methods: Vec<MethodKind>,
    pub repetitions: usize,
    pub workload: usize,
    pub seq_len: usize,
}

impl Default for CostSettings {
    fn default() -> Self {
        Self {
            hidden: vec![16, 32, 64],
            layers: vec![2, 4],
            methods: MethodKind::ALL.to_vec(),
            repetitions: 5,
            workload: 8,
            seq_len: 12,
        }
    }
}

/// The JSON file every CLI subcommand reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub transfer: Option<TransferSettings>,
    #[serde(default)]
    pub cost: CostSettings,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            backbone: BackboneConfig::default(),
            method: MethodConfig::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            sweep: SweepSettings::default(),
            transfer: None,
            cost: CostSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// The shared method settings with a different kind.
    pub fn method_for(&self, kind: MethodKind) -> MethodConfig {
        MethodConfig {
            kind,
            ..self.method.clone()
        }
    }

    pub fn sweep_spec(&self, dataset: TaskDataset) -> SweepSpec {
        let layers = if self.sweep.layers.is_empty() {
            (0..self.backbone.layers).collect()
        } else {
            self.sweep.layers.clone()
        };
        SweepSpec {
            dataset,
            backbone: self.backbone.clone(),
            methods: self
                .sweep
                .methods
                .iter()
                .map(|&k| self.method_for(k))
                .collect(),
            layers,
            seeds: self.seeds.clone(),
            train: self.train.clone(),
        }
    }

    pub fn transfer_spec(&self, source: TaskDataset, target: TaskDataset) -> Result<TransferSpec> {
        let settings = self
            .transfer
            .as_ref()
            .ok_or_else(|| Error::Config("config has no \"transfer\" section".into()))?;
        let methods = if settings.methods.is_empty() {
            vec![self.method.clone()]
        } else {
            settings
                .methods
                .iter()
                .map(|&k| self.method_for(k))
                .collect()
        };
        Ok(TransferSpec {
            source,
            target,
            mode: settings.mode,
            methods,
            seeds: self.seeds.clone(),
            backbone: self.backbone.clone(),
            train: self.train.clone(),
            few_shot_train: settings
                .few_shot_train
                .clone()
                .unwrap_or_else(|| self.train.clone()),
        })
    }

    pub fn cost_spec(&self) -> CostSpec {
        let backbones = self
            .cost
            .hidden
            .iter()
            .flat_map(|&n| {
                self.cost.layers.iter().map(move |&layers| BackboneConfig {
                    hidden: n,
                    layers,
                    ffn_dim: 2 * n,
                    ..self.backbone.clone()
                })
            })
            .collect();
        CostSpec {
            backbones,
            methods: self
                .cost
                .methods
                .iter()
                .map(|&k| self.method_for(k))
                .collect(),
            repetitions: self.cost.repetitions,
            workload: self.cost.workload,
            seq_len: self.cost.seq_len,
            seed: self.seeds.first().copied().unwrap_or(0),
        }
    }
}

/// Backbone config sized to the dataset's vocabulary and label space.
pub fn fit_backbone(backbone: &BackboneConfig, dataset: &TaskDataset) -> BackboneConfig {
    BackboneConfig {
        vocab_size: dataset.vocab.len(),
        num_classes: dataset.num_classes,
        ..backbone.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    pub target: String,
    pub mode: TransferMode,
    /// Source dev metric of the source-trained model.
    pub source_dev_metric: f64,
    pub target_metric: f64,
    pub target_optimizer_steps: u64,
    pub target_examples: usize,
    pub target_record: Option<TrainRecord>,
}

/// One seed of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub dataset: String,
    pub method: MethodKind,
    /// Injection layer for prompt methods.
    pub layer: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    pub params: ParamCount,
    pub record: TrainRecord,
    pub dev: EvalMetrics,
    pub test: Option<EvalMetrics>,
    /// The reported value: test metric, else dev metric, else transfer target metric.
    pub metric: f64,
    pub transfer: Option<TransferStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub method: MethodKind,
    pub layer: Option<usize>,
    pub config_hash: String,
    pub metric_mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub metric_stddev: Option<f64>,
    pub seeds: usize,
    pub params: ParamCount,
    pub train_secs_per_sample: f64,
    pub infer_secs_per_sample: f64,
}

impl ReportRow {
    fn key(&self) -> (&str, &str, Option<usize>, &str) {
        (
            &self.experiment,
            self.method.name(),
            self.layer,
            &self.config_hash,
        )
    }

    fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let fields = [
            self.experiment.clone(),
            self.method.to_string(),
            self.layer.map(|m| m.to_string()).unwrap_or_default(),
            self.config_hash.clone(),
            opt(self.metric_mean),
            opt(self.metric_stddev),
            self.seeds.to_string(),
            self.params.method_params.to_string(),
            self.params.head_params.to_string(),
            self.params.total.to_string(),
            self.train_secs_per_sample.to_string(),
            self.infer_secs_per_sample.to_string(),
        ];
        fields.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    /// Sorted by (experiment, method, layer, config hash).
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunSummary>,
}

impl ExperimentReport {
    pub fn new(mut rows: Vec<ReportRow>, runs: Vec<RunSummary>) -> Self {
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        Self {
            schema: REPORT_SCHEMA.to_string(),
            rows,
            runs,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {REPORT_SCHEMA}\n{}\n", REPORT_COLUMNS.join(","));
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }

    pub fn row(&self, method: MethodKind, layer: Option<usize>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.layer == layer)
    }
}

#[derive(Serialize)]
struct CellKey<'a> {
    experiment: &'a str,
    dataset: &'a str,
    backbone: &'a BackboneConfig,
    method: &'a MethodConfig,
    train: &'a TrainConfig,
    seeds: &'a [u64],
}

/// Hash of everything that determines a cell's results.
pub fn cell_hash(
    experiment: &str,
    dataset: &str,
    backbone: &BackboneConfig,
    method: &MethodConfig,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<String> {
    config_hash(&CellKey {
        experiment,
        dataset,
        backbone,
        method,
        train,
        seeds,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation, `None` below two values.
pub fn stddev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// One row summarising `runs` (non-empty) of the same cell.
pub fn aggregate(runs: &[RunSummary], config_hash: String) -> ReportRow {
    let first = &runs[0];
    let metrics: Vec<f64> = runs.iter().map(|r| r.metric).collect();
    let train_t: Vec<f64> = runs
        .iter()
        .map(|r| r.record.timing.train_secs_per_sample)
        .collect();
    let infer_t: Vec<f64> = runs
        .iter()
        .map(|r| r.record.timing.infer_secs_per_sample)
        .collect();
    ReportRow {
        experiment: first.experiment.clone(),
        method: first.method,
        layer: first.layer,
        config_hash,
        metric_mean: Some(mean(&metrics)),
        metric_stddev: stddev(&metrics),
        seeds: runs.len(),
        params: first.params,
        train_secs_per_sample: mean(&train_t),
        infer_secs_per_sample: mean(&infer_t),
    }
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

/// Trains one method on `dataset` with one seed and evaluates it.
pub fn run_single(
    experiment: &str,
    dataset: &TaskDataset,
    backbone: &BackboneConfig,
    method: &MethodConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(PeftModel, RunSummary)> {
    let bc = fit_backbone(backbone, dataset);
    let mut model = PeftModel::build(bc.clone(), method.clone(), seed)?;
    let tc = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let record = train(&mut model, TrainData::from_dataset(dataset), &tc)?;
    let eval = |examples: &[Example]| {
        evaluate(
            &model,
            examples,
            &dataset.vocab,
            dataset.num_classes,
            dataset.metric_kind,
        )
    };
    let dev = eval(&dataset.dev)?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        Some(eval(&dataset.test)?)
    };
    let summary = RunSummary {
        experiment: experiment.to_string(),
        dataset: dataset.name.clone(),
        method: method.kind,
        layer: method.kind.injects().then_some(model.inject_layer),
        seed,
        config_hash: cell_hash(experiment, &dataset.name, &bc, method, &tc, &[seed])?,
        params: model.param_count(),
        record,
        dev,
        test,
        metric: test.unwrap_or(dev).metric,
        transfer: None,
    };
    Ok((model, summary))
}

/// Runs each method over `seeds` and reports one row per method.
pub fn run_methods(
    experiment: &str,
    dataset: &TaskDataset,
    backbone: &BackboneConfig,
    methods: &[MethodConfig],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    require_seeds(seeds)?;
    let bc = fit_backbone(backbone, dataset);
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for mc in methods {
        let runs = seeds
            .iter()
            .map(|&s| run_single(experiment, dataset, &bc, mc, train_cfg, s).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let hash = cell_hash(experiment, &dataset.name, &bc, mc, train_cfg, seeds)?;
        rows.push(aggregate(&runs, hash));
        all.extend(runs);
    }
    Ok(ExperimentReport::new(rows, all))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub dataset: TaskDataset,
    pub backbone: BackboneConfig,
    pub methods: Vec<MethodConfig>,
    pub layers: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

/// One row per (method, injection layer), aggregated over seeds.
pub fn run_layer_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    require_seeds(&spec.seeds)?;
    if spec.layers.is_empty() || spec.methods.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one method and one layer".into(),
        ));
    }
    let depth = spec.backbone.layers;
    if let Some(&layer) = spec.layers.iter().find(|&&m| m >= depth) {
        return Err(Error::LayerOutOfRange {
            layer,
            layers: depth,
        });
    }
    if let Some(mc) = spec.methods.iter().find(|mc| !mc.kind.injects()) {
        return Err(Error::Config(format!(
            "method {} has no injection layer to sweep",
            mc.kind
        )));
    }
    let experiment = format!("sweep/{}", spec.dataset.name);
    let bc = fit_backbone(&spec.backbone, &spec.dataset);
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for base in &spec.methods {
        for &m in &spec.layers {
            let mc = MethodConfig {
                inject_layer: Some(m),
                ..base.clone()
            };
            let runs = spec
                .seeds
                .iter()
                .map(|&s| {
                    run_single(&experiment, &spec.dataset, &bc, &mc, &spec.train, s).map(|(_, r)| r)
                })
                .collect::<Result<Vec<_>>>()?;
            let hash = cell_hash(
                &experiment,
                &spec.dataset.name,
                &bc,
                &mc,
                &spec.train,
                &spec.seeds,
            )?;
            rows.push(aggregate(&runs, hash));
            all.extend(runs);
        }
    }
    Ok(ExperimentReport::new(rows, all))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpec {
    pub source: TaskDataset,
    pub target: TaskDataset,
    pub mode: TransferMode,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// Target-phase settings for few-shot runs; best-epoch selection is
    /// always off there.
    pub few_shot_train: TrainConfig,
}

/// Up to `k` examples, cycling through labels in ascending order so classes
/// stay as balanced as the pool allows.
pub fn few_shot_sample(pool: &[Example], k: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for e in pool {
        by_label.entry(e.label).or_default().push(e);
    }
    for group in by_label.values_mut() {
        group.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(k);
    let mut round = 0;
    while out.len() < k.min(pool.len()) {
        for group in by_label.values() {
            if out.len() == k {
                break;
            }
            if let Some(e) = group.get(round) {
                out.push((*e).clone());
            }
        }
        round += 1;
    }
    out
}

/// Trains on the source task and evaluates on the target dev split, with
/// target text mapped through the source vocabulary. The source head is
/// reused as is.
pub fn run_transfer(spec: &TransferSpec) -> Result<ExperimentReport> {
    require_seeds(&spec.seeds)?;
    let (source, target) = (&spec.source, &spec.target);
    if source.name == target.name {
        return Err(Error::Config(format!(
            "transfer source and target are the same task {:?}",
            source.name
        )));
    }
    let source_ids = source.example_ids();
    let mut overlap: Vec<&str> = target
        .example_ids()
        .into_iter()
        .filter(|id| source_ids.contains(id))
        .collect();
    overlap.sort_unstable();
    if let Some(id) = overlap.first() {
        return Err(Error::Config(format!(
            "{} example ids shared by source and target, e.g. {id:?}",
            overlap.len()
        )));
    }
    if source.num_classes != target.num_classes {
        return Err(Error::Config(format!(
            "source has {} classes, target {}",
            source.num_classes, target.num_classes
        )));
    }
    if target.dev.is_empty() {
        return Err(Error::NoExamples);
    }
    if let TransferMode::FewShot { k } = spec.mode {
        if k == 0 || k > target.train.len() {
            return Err(Error::Config(format!(
                "few-shot k = {k} must be in 1..={}",
                target.train.len()
            )));
        }
    }

    let experiment = format!(
        "transfer/{}->{}/{}",
        source.name,
        target.name,
        spec.mode.name()
    );
    let bc = fit_backbone(&spec.backbone, source);
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for mc in &spec.methods {
        let mut runs = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let (mut model, mut summary) =
                run_single(&experiment, source, &bc, mc, &spec.train, seed)?;
            let (steps, examples, target_record) = match spec.mode {
                TransferMode::ZeroShot => (0, 0, None),
                TransferMode::FewShot { k } => {
                    let sample = few_shot_sample(&target.train, k, seed);
                    let tc = TrainConfig {
                        seed,
                        select_best: false,
                        ..spec.few_shot_train.clone()
                    };
                    let data = TrainData {
                        train: &sample,
                        dev: &target.dev,
                        vocab: &source.vocab,
                        num_classes: target.num_classes,
                        metric_kind: target.metric_kind,
                    };
                    let record = train(&mut model, data, &tc)?;
                    (record.optimizer_steps, record.examples_seen, Some(record))
                }
            };
            let target_metric = evaluate(
                &model,
                &target.dev,
                &source.vocab,
                target.num_classes,
                target.metric_kind,
            )?
            .metric;
            summary.metric = target_metric;
            summary.transfer = Some(TransferStats {
                target: target.name.clone(),
                mode: spec.mode,
                source_dev_metric: summary.dev.metric,
                target_metric,
                target_optimizer_steps: steps,
                target_examples: examples,
                target_record,
            });
            runs.push(summary);
        }
        let hash = cell_hash(&experiment, &source.name, &bc, mc, &spec.train, &spec.seeds)?;
        rows.push(aggregate(&runs, hash));
        all.extend(runs);
    }
    Ok(ExperimentReport::new(rows, all))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub backbones: Vec<BackboneConfig>,
    pub methods: Vec<MethodConfig>,
    /// Measured repetitions, after one warm-up.
    pub repetitions: usize,
    /// Samples per repetition.
    pub workload: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Random `[SEP] .. [EOS]` sequences with random labels.
fn synthetic_workload(
    model: &PeftModel,
    count: usize,
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, usize)> {
    let cfg = &model.backbone.config;
    let len = seq_len.clamp(3, model.encoding_budget().max(3));
    (0..count)
        .map(|_| {
            let mut tokens = vec![SEP];
            tokens.extend(
                (0..len - 2).map(|_| rng.random_range(EOS + 1..cfg.vocab_size.max(EOS + 2))),
            );
            tokens.push(EOS);
            (tokens, rng.random_range(0..cfg.num_classes))
        })
        .collect()
}

/// Parameter breakdown and median per-sample train/infer wall-clock time
/// for every (backbone, method) pair.
pub fn run_cost_report(spec: &CostSpec) -> Result<ExperimentReport> {
    if spec.repetitions < 5 {
        return Err(Error::Config(format!(
            "timing needs >= 5 repetitions, got {}",
            spec.repetitions
        )));
    }
    if spec.workload == 0 {
        return Err(Error::Config("timing workload must be >= 1 sample".into()));
    }
    let mut rows = Vec::new();
    for bc in &spec.backbones {
        let bc = BackboneConfig {
            vocab_size: bc.vocab_size.max(EOS + 2),
            ..bc.clone()
        };
        let experiment = format!("cost/n{}-L{}", bc.hidden, bc.layers);
        for mc in &spec.methods {
            let mut model = PeftModel::build(bc.clone(), mc.clone(), spec.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let work = synthetic_workload(&model, spec.workload, spec.seq_len, &mut rng);
            let mut opt = AdamW::new(0.0);
            let mut train_t = Vec::with_capacity(spec.repetitions);
            let mut infer_t = Vec::with_capacity(spec.repetitions);
            for rep in 0..=spec.repetitions {
                let started = Instant::now();
                for (tokens, label) in &work {
                    let (_, grads) = model.loss_and_grads(tokens, *label, None)?;
                    opt.step(&mut model.trainable_tensors_mut(), &grads, 1e-4)?;
                }
                let train_secs = started.elapsed().as_secs_f64();
                let started = Instant::now();
                for (tokens, _) in &work {
                    model.logits(tokens)?;
                }
                let infer_secs = started.elapsed().as_secs_f64();
                if rep > 0 {
                    train_t.push(train_secs / work.len() as f64);
                    infer_t.push(infer_secs / work.len() as f64);
                }
            }
            let layer = mc.kind.injects().then_some(model.inject_layer);
            rows.push(ReportRow {
                experiment: experiment.clone(),
                method: mc.kind,
                layer,
                config_hash: config_hash(&(&bc, mc))?,
                metric_mean: None,
                metric_stddev: None,
                seeds: 1,
                params: model.param_count(),
                train_secs_per_sample: median(&mut train_t),
                infer_secs_per_sample: median(&mut infer_t),
            });
        }
    }
    Ok(ExperimentReport::new(rows, Vec::new()))
}

/// Settings for a finite-difference check on a small random model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub kind: MethodKind,
    pub hidden: usize,
    pub prompt_len: usize,
    /// `None` means `n / 2`.
    pub bottleneck: Option<usize>,
    pub layers: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub step: f64,
}

impl GradcheckSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            hidden: 8,
            prompt_len: 2,
            bottleneck: None,
            layers: 2,
            classes: 3,
            seq_len: 6,
            seed: 0,
            step: 1e-5,
        }
    }
}

/// A model whose every trainable tensor, LoRA up-projections included, is
/// filled with O(1) random values so no gradient is trivially zero.
pub fn gradcheck_model(spec: &GradcheckSpec) -> Result<PeftModel> {
    let n = spec.hidden;
    let bc = BackboneConfig {
        vocab_size: 16,
        hidden: n,
        layers: spec.layers,
        heads: 2,
        ffn_dim: 2 * n,
        max_seq: spec.seq_len + spec.prompt_len + 2,
        num_classes: spec.classes,
        init_std: 0.3,
    };
    let mc = MethodConfig {
        kind: spec.kind,
        prompt_len: spec.prompt_len,
        bottleneck: Some(spec.bottleneck.unwrap_or(n / 2)),
        d_k: Some(n),
        d_v: Some(n),
        lora_rank: 2.min(n),
        init_std: 0.5,
        ..MethodConfig::default()
    };
    let mut model = PeftModel::build(bc, mc, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9c);
    for t in model.trainable_tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<crate::model::GradCheck> {
    let model = gradcheck_model(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(17));
    let mut tokens = vec![SEP];
    tokens.extend((0..spec.seq_len).map(|_| rng.random_range(EOS + 1..16)));
    tokens.push(EOS);
    let label = rng.random_range(0..spec.classes);
    model.gradient_check(&tokens, label, spec.step)
}
