//! Experiment front-end: configuration files, the `scl` subcommands and the
//! CSV tables they emit.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, validate_thresholds, write_detections, EvalResult};
use crate::losses::{default_level_kinds, IlossKind, LossConfig, LossKind};
use crate::netarch::{checkpoint, BackboneSpec, DetectorModel, ModelSpec};
use crate::synthdata::{generate_pair_dataset, load_dataset, load_split, write_dataset, PairDataset, SceneSpec, Split, CLASS_NAMES};
use crate::tensor::Tensor;
use crate::trainer::{detect_all, run_training, RunOutputs, TrainConfig};

pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            n_source: 500,
            n_target: 500,
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Split scored by `train`, `ablate` and `sweep`.
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.5],
            split: Split::TargetTest,
        }
    }
}

/// Everything one experiment needs, read from a TOML file with the
/// sections `[scene]`, `[data]`, `[model]`, `[train]`, `[loss]`, `[eval]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub data: DataSizes,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::InvalidInput(format!("config file {} not found", path.display())));
        }
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Overrides both the scene seed and the training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scene.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let d = &self.data;
        if d.n_source == 0 || d.n_target == 0 || d.n_test == 0 {
            return Err(Error::Config("data sizes must be at least 1".into()));
        }
        self.model.backbone.validate()?;
        if self.model.backbone.input_size != [self.scene.height, self.scene.width] {
            return Err(Error::Config(format!(
                "model input {:?} differs from the {}x{} scenes",
                self.model.backbone.input_size, self.scene.height, self.scene.width
            )));
        }
        self.loss.validate()?;
        if self.loss.k() != self.model.backbone.k {
            return Err(Error::Config(format!(
                "{} level kinds for K = {}",
                self.loss.k(),
                self.model.backbone.k
            )));
        }
        self.train.validate()?;
        self.train.policy(&self.loss).validate(self.loss.lambda > 0.0)?;
        validate_thresholds(&self.eval.thresholds)
    }

    pub fn dataset(&self) -> Result<PairDataset> {
        generate_pair_dataset(&self.scene, self.data.n_source, self.data.n_target, self.data.n_test)
    }
}

// ---- command line -----------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "scl", version, about = "Domain-adaptive detection experiments on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scene and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = cfg.with_seed(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    K,
    Lambda,
    Gamma,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Source,
    Target,
    TargetTest,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Source => Split::Source,
            SplitArg::Target => Split::Target,
            SplitArg::TargetTest => Split::TargetTest,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source/target dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and save its checkpoint and step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split at one or more IoU thresholds.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated IoU thresholds; the config's list when omitted.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, value_enum, default_value = "target-test")]
        split: SplitArg,
    },
    /// Train and score every loss configuration of a grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grid file (TOML) with `[[rows]]` and/or `[axes]`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and score once per value of K, lambda or gamma.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export pooled top-level backbone features for both domains.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Images per domain.
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Render channel-mean heatmaps of the top backbone feature map.
    DumpHeatmaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG images to render.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
    },
}

/// Refuses a non-empty `dir` unless `force`; creates it otherwise.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::NotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} {} not found", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} {} not found", p.display())))
    }
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(e.to_string())
}

fn load_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<PairDataset> {
    match data {
        Some(d) => {
            require_dir(d, "dataset directory")?;
            load_dataset(d)
        }
        None => cfg.dataset(),
    }
}

// ---- generate / train / evaluate ---------------------------------------------------------

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<PairDataset> {
    prepare_out(out, force)?;
    for split in Split::ALL {
        let d = out.join(split.dir_name());
        if d.exists() {
            fs::remove_dir_all(&d)?;
        }
    }
    let data = cfg.dataset()?;
    write_dataset(&data, out)?;
    write_config(cfg, out)?;
    Ok(data)
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub eval: EvalResult,
}

/// Trains in `f32`, saves the checkpoint and log and scores the configured split.
pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, out: &Path, force: bool) -> Result<TrainSummary> {
    let dataset = load_data(cfg, data)?;
    prepare_out(out, force)?;
    write_config(cfg, out)?;
    let outputs = RunOutputs {
        log: Some(out.join("train_log.jsonl")),
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let outcome = run_training::<f32>(cfg.model.clone(), cfg.loss.clone(), cfg.train.clone(), &dataset, &outputs)?;
    let (dets, gts) = detect_all(&outcome.model, dataset.split(cfg.eval.split))?;
    let eval = evaluate(&dets, &gts, &cfg.eval.thresholds, CLASS_NAMES.len())?;
    fs::write(out.join("eval.csv"), eval.to_csv(&CLASS_NAMES))?;
    Ok(TrainSummary {
        checkpoint: out.join("checkpoints").join("final.json"),
        log: outputs.log.unwrap(),
        eval,
    })
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    data: &Path,
    thresholds: &[f64],
    split: Split,
    out: &Path,
    force: bool,
) -> Result<EvalResult> {
    require_file(checkpoint_path, "checkpoint")?;
    require_dir(data, "dataset directory")?;
    let thresholds = if thresholds.is_empty() { cfg.eval.thresholds.clone() } else { thresholds.to_vec() };
    validate_thresholds(&thresholds)?;
    let (model, _) = checkpoint::load::<f32>(checkpoint_path)?;
    let samples = load_split(data, split)?;
    if samples.iter().all(|s| s.boxes.is_empty()) {
        return Err(Error::InvalidInput(format!("split {} carries no boxes to score against", split.dir_name())));
    }
    prepare_out(out, force)?;
    let mut used = cfg.clone();
    used.eval.thresholds = thresholds.clone();
    used.eval.split = split;
    write_config(&used, out)?;
    let (dets, gts) = detect_all(&model, &samples)?;
    write_detections(&dets, &out.join("detections.jsonl"))?;
    let r = evaluate(&dets, &gts, &thresholds, CLASS_NAMES.len())?;
    fs::write(out.join("eval.csv"), r.to_csv(&CLASS_NAMES))?;
    Ok(r)
}

// ---- ablation grid --------------------------------------------------------------------

/// Partial loss configuration applied on top of the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOverride {
    pub level_kinds: Option<Vec<LossKind>>,
    pub iloss_kind: Option<IlossKind>,
    pub use_context: Option<bool>,
    pub use_iloss: Option<bool>,
    pub use_detach: Option<bool>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

impl LossOverride {
    pub fn apply(&self, base: &LossConfig) -> LossConfig {
        let mut c = base.clone();
        if let Some(v) = &self.level_kinds {
            c.level_kinds = v.clone();
        }
        if let Some(v) = self.iloss_kind {
            c.iloss_kind = v;
        }
        if let Some(v) = self.use_context {
            c.use_context = v;
        }
        if let Some(v) = self.use_iloss {
            c.use_iloss = v;
        }
        if let Some(v) = self.use_detach {
            c.use_detach = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        c
    }
}

/// Value lists whose cartesian product forms grid rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub level_kinds: Vec<Vec<LossKind>>,
    pub iloss_kind: Vec<IlossKind>,
    pub use_context: Vec<bool>,
    pub use_iloss: Vec<bool>,
    pub use_detach: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub rows: Vec<LossOverride>,
    pub axes: Option<GridAxes>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        require_file(path, "grid file")?;
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    /// Explicit rows first, then the axes product. Product combinations that
    /// fail validation (ILoss without Context) are skipped; invalid explicit
    /// rows are kept so they surface as failed rows.
    pub fn expand(&self, base: &LossConfig) -> Vec<LossConfig> {
        let mut out: Vec<LossConfig> = self.rows.iter().map(|r| r.apply(base)).collect();
        if let Some(a) = &self.axes {
            fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
                if v.is_empty() {
                    vec![d]
                } else {
                    v.to_vec()
                }
            }
            for lk in or(&a.level_kinds, base.level_kinds.clone()) {
                for ik in or(&a.iloss_kind, base.iloss_kind) {
                    for ctx in or(&a.use_context, base.use_context) {
                        for il in or(&a.use_iloss, base.use_iloss) {
                            for det in or(&a.use_detach, base.use_detach) {
                                let o = LossOverride {
                                    level_kinds: Some(lk.clone()),
                                    iloss_kind: Some(ik),
                                    use_context: Some(ctx),
                                    use_iloss: Some(il),
                                    use_detach: Some(det),
                                    ..LossOverride::default()
                                };
                                let c = o.apply(base);
                                if c.validate().is_ok() {
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub loss: LossConfig,
    /// Per-class AP at the first configured threshold; empty for failed rows.
    pub ap: Vec<f64>,
    pub map: Option<f64>,
    pub status: String,
}

pub const ABLATION_COLUMNS: [&str; 11] = [
    "label",
    "level_kinds",
    "iloss_kind",
    "context",
    "iloss",
    "detach",
    "AP_circle",
    "AP_square",
    "AP_triangle",
    "mAP",
    "status",
];

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let header: Vec<String> = ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect();
    let yes = |b: bool| if b { "yes" } else { "no" }.to_string();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let l = &r.loss;
            let mut v = vec![
                r.label.clone(),
                l.level_kinds.iter().map(|k| k.label()).collect::<Vec<_>>().join("|"),
                if l.use_iloss { l.iloss_kind.label().to_string() } else { "-".into() },
                yes(l.use_context),
                yes(l.use_iloss),
                yes(l.use_detach),
            ];
            for c in 0..CLASS_NAMES.len() {
                v.push(r.ap.get(c).map(|a| format!("{a:.6}")).unwrap_or_default());
            }
            v.push(r.map.map(|m| format!("{m:.6}")).unwrap_or_default());
            v.push(r.status.clone());
            v
        })
        .collect();
    csv_string(&header, &body)
}

/// Trains one configuration on `data` and scores it; the log is written to
/// `log` when given.
pub fn train_and_score(cfg: &ExperimentConfig, data: &PairDataset, log: Option<PathBuf>) -> Result<EvalResult> {
    cfg.validate()?;
    let outputs = RunOutputs {
        log,
        checkpoint_dir: None,
    };
    let outcome = run_training::<f32>(cfg.model.clone(), cfg.loss.clone(), cfg.train.clone(), data, &outputs)?;
    let (dets, gts) = detect_all(&outcome.model, data.split(cfg.eval.split))?;
    evaluate(&dets, &gts, &cfg.eval.thresholds, CLASS_NAMES.len())
}

pub fn cmd_ablate(cfg: &ExperimentConfig, grid: &GridSpec, data: Option<&Path>, out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    let dataset = load_data(cfg, data)?;
    let configs = grid.expand(&cfg.loss);
    if configs.is_empty() {
        return Err(Error::Config("the grid expands to no rows".into()));
    }
    prepare_out(out, force)?;
    write_config(cfg, out)?;
    fs::write(out.join("grid.toml"), toml::to_string(grid).expect("grid serializes"))?;
    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, loss) in configs.into_iter().enumerate() {
        let label = loss.label();
        eprintln!("[ablate {}/{}] {label}", i + 1, rows.capacity());
        let mut run = cfg.clone();
        run.loss = loss.clone();
        let row = match train_and_score(&run, &dataset, Some(logs.join(format!("row_{:03}.jsonl", i + 1)))) {
            Ok(r) => AblationRow {
                label,
                loss,
                ap: r.classes.iter().map(|c| c.ap[0]).collect(),
                map: Some(r.map[0]),
                status: "ok".into(),
            },
            Err(e) => AblationRow {
                label,
                loss,
                ap: Vec::new(),
                map: None,
                status: format!("error: {e}"),
            },
        };
        rows.push(row);
        fs::write(out.join("ablation.csv"), ablation_csv(&rows)?)?;
    }
    Ok(rows)
}

// ---- sweeps --------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub label: String,
    pub map: Option<f64>,
    pub status: String,
}

pub const SWEEP_COLUMNS: [&str; 5] = ["param", "value", "label", "mAP", "status"];

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.param.name().to_string(),
                format!("{}", r.value),
                r.label.clone(),
                r.map.map(|m| format!("{m:.6}")).unwrap_or_default(),
                r.status.clone(),
            ]
        })
        .collect();
    csv_string(&header, &body)
}

/// The config for one sweep point, or a usage error for an invalid value.
pub fn sweep_point(base: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match param {
        SweepParam::K => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("K must be a positive integer, got {value}")));
            }
            let k = value as usize;
            c.model.backbone = BackboneSpec {
                input_size: base.model.backbone.input_size,
                ..BackboneSpec::for_k(k)
            };
            c.loss.level_kinds = default_level_kinds(k);
        }
        SweepParam::Lambda => {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("lambda must be >= 0, got {value}")));
            }
            c.loss.lambda = value;
        }
        SweepParam::Gamma => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("gamma must be > 0, got {value}")));
            }
            c.loss.gamma = value;
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    data: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let points: Vec<ExperimentConfig> = values.iter().map(|v| sweep_point(cfg, param, *v)).collect::<Result<_>>()?;
    let dataset = load_data(cfg, data)?;
    prepare_out(out, force)?;
    write_config(cfg, out)?;
    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, (v, run)) in values.iter().zip(points).enumerate() {
        eprintln!("[sweep {}/{}] {}={v}", i + 1, values.len(), param.name());
        let log = logs.join(format!("{}_{}.jsonl", param.name(), v));
        let (map, status) = match train_and_score(&run, &dataset, Some(log)) {
            Ok(r) => (Some(r.map[0]), "ok".to_string()),
            Err(e) => (None, format!("error: {e}")),
        };
        rows.push(SweepRow {
            param,
            value: *v,
            label: run.loss.label(),
            map,
            status,
        });
        fs::write(out.join(format!("sweep_{}.csv", param.name())), sweep_csv(&rows)?)?;
    }
    Ok(rows)
}

// ---- feature and heatmap exports ------------------------------------------------------------

/// Channel means of a `[C, H, W]` map.
pub fn pooled(feat: &Tensor<f32>) -> Vec<f64> {
    let hw: usize = feat.shape[1..].iter().product();
    feat.data.chunks(hw).map(|c| c.iter().map(|v| *v as f64).sum::<f64>() / hw as f64).collect()
}

pub struct FeatureRow {
    pub image: String,
    pub domain: &'static str,
    pub features: Vec<f64>,
}

pub fn cmd_dump_features(checkpoint_path: &Path, data: &Path, n: usize, out: &Path, force: bool) -> Result<Vec<FeatureRow>> {
    require_file(checkpoint_path, "checkpoint")?;
    require_dir(data, "dataset directory")?;
    let (model, _) = checkpoint::load::<f32>(checkpoint_path)?;
    let mut rows = Vec::new();
    for (split, tag) in [(Split::Source, "source"), (Split::Target, "target")] {
        for s in load_split(data, split)?.iter().take(n) {
            let f = model.backbone_forward(&s.tensor())?;
            rows.push(FeatureRow {
                image: s.image.clone(),
                domain: tag,
                features: pooled(f.features.last().unwrap()),
            });
        }
    }
    prepare_out(out, force)?;
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut header = vec!["image".to_string(), "domain".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.image.clone(), r.domain.to_string()];
            v.extend(r.features.iter().map(|x| format!("{x}")));
            v
        })
        .collect();
    fs::write(out.join("features.csv"), csv_string(&header, &body)?)?;
    fs::write(out.join("source_checkpoint.txt"), format!("{}\n", checkpoint_path.display()))?;
    Ok(rows)
}

/// Channel mean of `[C, h, w]`, min-max normalized to `[0, 1]` and
/// nearest-neighbour upsampled to `height x width`. A constant map gives
/// all zeros.
pub fn heatmap(feat: &Tensor<f32>, height: usize, width: usize) -> Result<Vec<f64>> {
    let (c, h, w) = feat.chw()?;
    let mut mean = vec![0.0f64; h * w];
    for ch in feat.data.chunks(h * w) {
        for (m, v) in mean.iter_mut().zip(ch) {
            *m += *v as f64 / c as f64;
        }
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = mean.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(norm[(y * h / height) * w + x * w / width]);
        }
    }
    Ok(out)
}

pub fn cmd_dump_heatmaps(checkpoint_path: &Path, images: &[PathBuf], out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    require_file(checkpoint_path, "checkpoint")?;
    for p in images {
        require_file(p, "image")?;
    }
    let (model, _): (DetectorModel<f32>, _) = checkpoint::load(checkpoint_path)?;
    prepare_out(out, force)?;
    let [h, w] = model.spec.backbone.input_size;
    let mut written = Vec::with_capacity(images.len());
    for p in images {
        let img = image::open(p)?.to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::InvalidInput(format!(
                "{} is {}x{}, the model expects {h}x{w}",
                p.display(),
                img.height(),
                img.width()
            )));
        }
        let sample = crate::synthdata::DomainSample {
            image: p.display().to_string(),
            domain: crate::losses::Domain::Target,
            width: w,
            height: h,
            pixels: img.into_raw(),
            boxes: Vec::new(),
        };
        let f = model.backbone_forward(&sample.tensor())?;
        let map = heatmap(f.features.last().unwrap(), h, w)?;
        let gray: Vec<u8> = map.iter().map(|v| (v * 255.0).round() as u8).collect();
        let stem = p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let dest = out.join(format!("{stem}_heatmap.png"));
        image::save_buffer(&dest, &gray, w as u32, h as u32, image::ExtendedColorType::L8)?;
        written.push(dest);
    }
    Ok(written)
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.config()?;
            let d = cmd_generate(&cfg, &common.out, common.force)?;
            println!(
                "wrote {} source, {} target, {} target_test images to {}",
                d.source.len(),
                d.target.len(),
                d.target_test.len(),
                common.out.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = common.config()?;
            let s = cmd_train(&cfg, data.as_deref(), &common.out, common.force)?;
            println!("checkpoint: {}", s.checkpoint.display());
            print!("{}", s.eval.to_csv(&CLASS_NAMES));
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            thresholds,
            split,
        } => {
            let cfg = common.config()?;
            let r = cmd_evaluate(&cfg, &checkpoint, &data, &thresholds, split.into(), &common.out, common.force)?;
            print!("{}", r.to_csv(&CLASS_NAMES));
        }
        Command::Ablate { common, grid, data } => {
            let cfg = common.config()?;
            let g = GridSpec::load(&grid)?;
            let rows = cmd_ablate(&cfg, &g, data.as_deref(), &common.out, common.force)?;
            print!("{}", ablation_csv(&rows)?);
        }
        Command::Sweep {
            common,
            param,
            values,
            data,
        } => {
            let cfg = common.config()?;
            let rows = cmd_sweep(&cfg, param, &values, data.as_deref(), &common.out, common.force)?;
            print!("{}", sweep_csv(&rows)?);
        }
        Command::DumpFeatures {
            common,
            checkpoint,
            data,
            n,
        } => {
            let rows = cmd_dump_features(&checkpoint, &data, n, &common.out, common.force)?;
            println!("wrote {} feature rows to {}", rows.len(), common.out.join("features.csv").display());
        }
        Command::DumpHeatmaps {
            common,
            checkpoint,
            images,
        } => {
            for p in cmd_dump_heatmaps(&checkpoint, &images, &common.out, common.force)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_toml(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let e = ExperimentConfig::parse("[train]\nstepz = 3\n", "x.toml").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = ExperimentConfig::parse("[loss]\nlevel_kinds = [\"LS\", \"FL\"]\n", "x.toml").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.is_usage());
    }

    #[test]
    fn documented_sections_parse() {
        let text = r#"
[scene]
shift = { fog = 0.5, blur = 1, hue_rotation = 60.0 }

[train]
steps = 5000
grl_scale = 0.03

[loss]
level_kinds = ["LS", "CE", "FL"]
iloss_kind = "FL"

[eval]
thresholds = [0.5]
split = "target_test"
"#;
        assert_eq!(ExperimentConfig::parse(text, "doc").unwrap(), ExperimentConfig::default());
        let g: GridSpec = toml::from_str("[axes]\nlevel_kinds = [[\"LS\", \"CE\", \"FL\"], [\"CE\", \"CE\", \"CE\"]]\n").unwrap();
        assert_eq!(g.expand(&LossConfig::default()).len(), 2);
    }

    #[test]
    fn grid_expansion() {
        let g: GridSpec = toml::from_str("[axes]\nuse_detach = [true, false]\n").unwrap();
        let rows = g.expand(&LossConfig::default());
        assert_eq!(rows.len(), 2);
        assert_ne!(rows[0].label(), rows[1].label());
        let g: GridSpec = toml::from_str("[axes]\nuse_context = [true, false]\nuse_iloss = [true, false]\n").unwrap();
        // ILoss without Context is skipped
        assert_eq!(g.expand(&LossConfig::default()).len(), 3);
    }

    #[test]
    fn sweep_points() {
        let base = ExperimentConfig::default();
        let k4 = sweep_point(&base, SweepParam::K, 4.0).unwrap();
        assert_eq!(k4.model.backbone.widths, vec![32, 64, 128, 256]);
        assert_eq!(k4.loss.label().split(' ').next().unwrap(), "LS|CE|CE|FL");
        assert!(sweep_point(&base, SweepParam::K, 2.5).is_err());
        assert!(sweep_point(&base, SweepParam::Gamma, 0.0).is_err());
        assert_eq!(sweep_point(&base, SweepParam::Lambda, 0.5).unwrap().loss.lambda, 0.5);
    }

    #[test]
    fn heatmap_rules() {
        let flat = Tensor::from_vec(&[2, 4, 4], vec![3.0f32; 32]).unwrap();
        assert!(heatmap(&flat, 8, 8).unwrap().iter().all(|v| *v == 0.0));
        let ramp = Tensor::from_vec(&[1, 2, 2], vec![0.0f32, 1.0, 2.0, 4.0]).unwrap();
        let m = heatmap(&ramp, 4, 4).unwrap();
        assert_eq!(m.len(), 16);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((m[0], m[15]), (0.0, 1.0));
    }
}
