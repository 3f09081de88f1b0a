//! Run configuration, on-disk artifacts and the stage-by-stage pipeline
//! behind the command-line tool.
//!
//! A run lives under one root directory:
//!
//! ```text
//! data/features.ndjson  data/split.json
//! checkpoints/{local,global,gate}.json  checkpoints/calibration.json
//! logs/{local,global,gate}.ndjson
//! reports/<cohort>.<mode>.json  reports/<cohort>.<mode>.predictions.ndjson
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, generate, random_split, CohortSplit, Dataset, FeatureRecord, Format, SynthConfig, Taxonomy,
};
use crate::error::{Error, Result};
use crate::experts::{ExpertDims, GlobalExpert, LocalExpert};
use crate::gate::{
    calibrate_thresholds, fuse, reliability, safe_decide, stats_matrix, GateNet, GateNetConfig,
    Path as GatePath, Reliability, ThresholdSearch, Thresholds,
};
use crate::math::{Matrix, ProbVector};
use crate::metrics::{metric_report, render_csv, render_markdown, MetricReport, ReportEntry, ReportOptions};
use crate::params::ParamStore;
use crate::projection::ProjectionMatrix;
use crate::seed;
use crate::training::{
    expert_probs, train_gate, train_global, train_local, ExpertLoss, GateStageOptions, GlobalStageOptions,
    LogEntry, Split, Stage, StageOutcome, StagePlan,
};

pub const CHECKPOINT_SCHEMA: &str = "nuclass-ckpt/1";
pub const SPLIT_SCHEMA: &str = "nuclass-split/1";
pub const LOG_SCHEMA: &str = "nuclass-log/1";
pub const CALIBRATION_SCHEMA: &str = "nuclass-calib/1";
pub const REPORT_SCHEMA: &str = "nuclass-report/1";
pub const PREDICTIONS_SCHEMA: &str = "nuclass-pred/1";
pub const SUMMARY_SCHEMA: &str = "nuclass-summary/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Gate,
    Safe,
    Local,
    Global,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Gate, Mode::Safe, Mode::Local, Mode::Global];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Gate => "gate",
            Mode::Safe => "safe",
            Mode::Local => "local",
            Mode::Global => "global",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?} (gate|safe|local|global)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output root.
    pub root: PathBuf,
    /// Precomputed features to ingest instead of generating synthetic data.
    pub features: Option<PathBuf>,
    /// Taxonomy JSON (`{"classes": [...], "tissues": [...]}`), needed for CSV features.
    pub taxonomy: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("run"),
            features: None,
            taxonomy: None,
        }
    }
}

impl Paths {
    pub fn data_file(&self) -> PathBuf {
        self.root.join("data").join("features.ndjson")
    }

    pub fn split_file(&self) -> PathBuf {
        self.root.join("data").join("split.json")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.json", stage.name()))
    }

    pub fn failed_checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.failed.json", stage.name()))
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("checkpoints").join("calibration.json")
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.ndjson", stage.name()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, cohort: &str, mode: Mode) -> PathBuf {
        self.reports().join(format!("{cohort}.{}.json", mode.name()))
    }

    pub fn predictions(&self, cohort: &str, mode: Mode) -> PathBuf {
        self.reports()
            .join(format!("{cohort}.{}.predictions.ndjson", mode.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Used when no feature file is configured. Its seed is replaced by the run seed.
    pub synth: SynthConfig,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::complementary(3500, 0),
            val: 4000,
            test: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub name: String,
    /// Features labelled with training class names; the run's test split when absent.
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// Built-in projection name or projection file; identity when absent.
    /// Projected probabilities are rescaled by the mass kept on mapped classes.
    #[serde(default)]
    pub projection: Option<String>,
}

impl CohortConfig {
    pub fn test_split() -> Self {
        Self {
            name: "test".into(),
            features: None,
            projection: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Plans {
    pub local: StagePlan,
    pub global: StagePlan,
    pub gate: StagePlan,
}

impl Default for Plans {
    fn default() -> Self {
        Self {
            local: StagePlan {
                lr: 2e-3,
                ..StagePlan::local()
            },
            global: StagePlan {
                lr: 2e-3,
                ..StagePlan::global()
            },
            gate: StagePlan {
                lr: 8e-3,
                ..StagePlan::gate()
            },
        }
    }
}

/// Everything a run needs. Defaults describe the synthetic desk benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Deployment mode used by `evaluate` when none is given.
    pub mode: Mode,
    pub paths: Paths,
    pub data: DataConfig,
    pub dims: ExpertDims,
    pub gate_net: GateNetConfig,
    pub loss: ExpertLoss,
    pub global: GlobalStageOptions,
    pub gate: GateStageOptions,
    pub plans: Plans,
    pub cohorts: Vec<CohortConfig>,
    pub report: ReportOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Gate,
            paths: Paths::default(),
            data: DataConfig::default(),
            dims: ExpertDims {
                tissue_embed: 64,
                film_hidden: 128,
                head_hidden: 64,
                proj: 64,
            },
            gate_net: GateNetConfig {
                proj: 32,
                hidden: vec![32],
            },
            loss: ExpertLoss::default(),
            global: GlobalStageOptions::default(),
            gate: GateStageOptions::default(),
            plans: Plans::default(),
            cohorts: vec![CohortConfig::test_split()],
            report: ReportOptions::default(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl RunConfig {
    /// Parses a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pushes the root seed into every sub-config that carries one and checks
    /// that referenced files exist.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.synth.seed = self.seed;
        self.report.seed = self.seed;
        for p in [&self.plans.local, &self.plans.global, &self.plans.gate] {
            p.validate()?;
        }
        self.gate.loss.validate()?;
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::config(format!("{what} {} does not exist", p.display())))
            }
        };
        if let Some(f) = &self.paths.features {
            exists(f, "feature file")?;
        }
        if let Some(t) = &self.paths.taxonomy {
            exists(t, "taxonomy file")?;
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.cohorts {
            if c.name.is_empty() || c.name.contains(['/', '\\', '.']) {
                return Err(Error::config(format!(
                    "cohort name {:?} is not a plain identifier",
                    c.name
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::config(format!("cohort {:?} listed twice", c.name)));
            }
            if let Some(f) = &c.features {
                exists(f, "cohort feature file")?;
            }
            if let Some(p) = &c.projection {
                if !ProjectionMatrix::builtin_names().any(|n| n == p) {
                    exists(Path::new(p), "projection file")?;
                }
            }
        }
        if self.cohorts.is_empty() {
            return Err(Error::config("at least one cohort is required"));
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON of everything except output paths and
    /// the evaluation mode, so relocated runs and per-mode evaluations share it.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
            m.remove("mode");
        }
        let digest = Sha256::digest(serde_json::to_string(&v)?.as_bytes());
        Ok(hex::encode(digest))
    }
}

/// Provenance carried by every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub best_val_macro_f1: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

impl From<&StageOutcome> for OutcomeSummary {
    fn from(o: &StageOutcome) -> Self {
        Self {
            best_val_macro_f1: o.best_val_macro_f1,
            best_step: o.best_step,
            steps: o.steps,
            stopped_early: o.stopped_early,
        }
    }
}

/// Named parameters of one or more models plus what is needed to rebuild them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub stage: Stage,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub taxonomy: Taxonomy,
    pub d_local: usize,
    pub d_ctx: usize,
    pub dims: ExpertDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_net: Option<GateNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeSummary>,
    /// `local`, `global` and/or `gate` → parameter name → value.
    pub stores: BTreeMap<String, BTreeMap<String, Matrix>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub reliability: Reliability,
    pub search: ThresholdSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub cohort: String,
    pub mode: Mode,
    pub projection: String,
    pub eval_classes: Vec<String>,
    /// Labelled records before dropping those whose class has no evaluation counterpart.
    pub records: usize,
    pub dropped_records: usize,
    pub mean_dropped_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_acceptance: Option<f64>,
    pub report: MetricReport,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    #[serde(flatten)]
    stamp: Stamp,
    records: usize,
    split: CohortSplit,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    cell_id: &'a str,
    label: &'a str,
    pred: &'a str,
    probs: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    gate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'static str>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSummary {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub classes: usize,
    pub tissues: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: Stage,
    #[serde(flatten)]
    pub outcome: OutcomeSummary,
    pub checkpoint: PathBuf,
}

/// Report output format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Md,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Csv => "csv",
            OutputFormat::Md => "md",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            "md" => Ok(OutputFormat::Md),
            _ => Err(Error::config(format!("unknown format {s:?} (json|csv|md)"))),
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    if !path.is_file() {
        return Err(Error::Prerequisite(format!(
            "{what} {} not found",
            path.display()
        )));
    }
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn check_schema(stamp: &Stamp, want: &str, path: &Path) -> Result<()> {
    if stamp.schema != want {
        return Err(Error::invalid(format!(
            "{} has schema {:?}, expected {want:?}",
            path.display(),
            stamp.schema
        )));
    }
    Ok(())
}

/// Re-indexes `ds` onto `taxonomy` by class and tissue name.
fn align_dataset(ds: Dataset, taxonomy: &Taxonomy) -> Result<Dataset> {
    let mut out = Dataset::new(taxonomy.clone(), ds.d_local, ds.d_ctx);
    for (line, r) in ds.records.into_iter().enumerate() {
        let tissue_name = &ds.taxonomy.tissues()[r.tissue];
        let tissue = taxonomy
            .tissue_index(tissue_name)
            .ok_or_else(|| Error::data(line + 2, format!("tissue {tissue_name:?} unknown to the model")))?;
        let label =
            match r.label {
                None => None,
                Some(y) => {
                    let name = &ds.taxonomy.classes()[y];
                    Some(taxonomy.class_index(name).ok_or_else(|| {
                        Error::data(line + 2, format!("class {name:?} unknown to the model"))
                    })?)
                }
            };
        out.records.push(FeatureRecord { tissue, label, ..r });
    }
    Ok(out)
}

/// A resolved configuration plus its hash; every pipeline step hangs off this.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
}

struct Experts {
    taxonomy: Taxonomy,
    d_local: usize,
    d_ctx: usize,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let hash = cfg.hash()?;
        Ok(Self { cfg, hash })
    }

    fn stamp(&self, schema: &str) -> Stamp {
        Stamp {
            schema: schema.into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
        }
    }

    fn paths(&self) -> &Paths {
        &self.cfg.paths
    }

    fn read_source(&self) -> Result<(Dataset, String)> {
        match &self.cfg.paths.features {
            None => Ok((generate(&self.cfg.data.synth)?, "synthetic".into())),
            Some(path) => {
                let taxonomy = match &self.cfg.paths.taxonomy {
                    Some(t) => Some(
                        serde_json::from_str::<Taxonomy>(&read_text(t)?)
                            .map_err(|e| Error::config(format!("taxonomy {}: {e}", t.display())))?,
                    ),
                    None => None,
                };
                let ds = data::read_records(path, Format::from_path(path), taxonomy.as_ref())?;
                Ok((ds, path.display().to_string()))
            }
        }
    }

    /// Generates or ingests the dataset and draws the train/val/test split.
    pub fn gen_data(&self) -> Result<DataSummary> {
        let (ds, source) = self.read_source()?;
        ds.all_labels()?;
        let split = random_split(
            ds.len(),
            self.cfg.data.val,
            self.cfg.data.test,
            &mut seed::stream(self.cfg.seed, "split"),
        )?;
        if split.train.is_empty() || split.val.is_empty() {
            return Err(Error::config("train and validation splits must be non-empty"));
        }
        let path = self.paths().data_file();
        create_parent(&path)?;
        data::write_records(&ds, &path, Format::Ndjson)?;
        write_json(
            &self.paths().split_file(),
            &SplitFile {
                stamp: self.stamp(SPLIT_SCHEMA),
                records: ds.len(),
                split: split.clone(),
            },
        )?;
        Ok(DataSummary {
            records: ds.len(),
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
            classes: ds.taxonomy.num_classes(),
            tissues: ds.taxonomy.num_tissues(),
            source,
        })
    }

    pub fn load_data(&self) -> Result<(Dataset, CohortSplit)> {
        let path = self.paths().data_file();
        if !path.is_file() {
            return Err(Error::Prerequisite(format!(
                "dataset {} not found; run gen-data first",
                path.display()
            )));
        }
        let ds = data::read_records(&path, Format::Ndjson, None)?;
        let split_path = self.paths().split_file();
        let sf: SplitFile = read_json(&split_path, "split")?;
        check_schema(&sf.stamp, SPLIT_SCHEMA, &split_path)?;
        if sf.records != ds.len() {
            return Err(Error::invalid("split and dataset disagree on the record count"));
        }
        sf.split.validate(ds.len())?;
        Ok((ds, sf.split))
    }

    fn splits(&self) -> Result<(Dataset, Split, Split)> {
        let (ds, split) = self.load_data()?;
        let train = Split::from_dataset(&ds, &split.train)?;
        let val = Split::from_dataset(&ds, &split.val)?;
        Ok((ds, train, val))
    }

    fn checkpoint(
        &self,
        stage: Stage,
        shape: &Experts,
        stores: &[(&str, &ParamStore)],
        outcome: Option<&StageOutcome>,
        failure: Option<&Error>,
    ) -> Checkpoint {
        Checkpoint {
            stamp: self.stamp(CHECKPOINT_SCHEMA),
            stage,
            failed: failure.is_some(),
            reason: failure.map(|e| e.to_string()),
            taxonomy: shape.taxonomy.clone(),
            d_local: shape.d_local,
            d_ctx: shape.d_ctx,
            dims: self.cfg.dims.clone(),
            gate_net: (stage == Stage::Gate).then(|| self.cfg.gate_net.clone()),
            outcome: outcome.map(OutcomeSummary::from),
            stores: stores
                .iter()
                .map(|(k, s)| (k.to_string(), s.to_named()))
                .collect(),
        }
    }

    /// Writes the checkpoint, log and summary of a finished stage, or a failed
    /// checkpoint holding the last good parameters before passing the error on.
    fn finish_stage(
        &self,
        stage: Stage,
        shape: &Experts,
        stores: &[(&str, &ParamStore)],
        result: Result<StageOutcome>,
    ) -> Result<StageSummary> {
        match result {
            Ok(outcome) => {
                let path = self.paths().checkpoint(stage);
                write_json(
                    &path,
                    &self.checkpoint(stage, shape, stores, Some(&outcome), None),
                )?;
                self.write_log(stage, &outcome.log)?;
                Ok(StageSummary {
                    stage,
                    outcome: OutcomeSummary::from(&outcome),
                    checkpoint: path,
                })
            }
            Err(e) => {
                if matches!(e, Error::Numerical(_)) {
                    let path = self.paths().failed_checkpoint(stage);
                    write_json(&path, &self.checkpoint(stage, shape, stores, None, Some(&e)))?;
                }
                Err(e)
            }
        }
    }

    fn write_log(&self, stage: Stage, log: &[LogEntry]) -> Result<()> {
        let path = self.paths().log(stage);
        create_parent(&path)?;
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&path, e);
        writeln!(w, "{}", serde_json::to_string(&self.stamp(LOG_SCHEMA))?).map_err(io)?;
        for entry in log {
            writeln!(w, "{}", serde_json::to_string(entry)?).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    fn load_checkpoint(&self, stage: Stage, shape: &Experts) -> Result<Checkpoint> {
        let path = self.paths().checkpoint(stage);
        let ck: Checkpoint =
            read_json(&path, &format!("{} checkpoint", stage.name())).map_err(|e| match e {
                Error::Prerequisite(m) => {
                    Error::Prerequisite(format!("{m}; run train-{} first", stage.name()))
                }
                other => other,
            })?;
        check_schema(&ck.stamp, CHECKPOINT_SCHEMA, &path)?;
        if ck.stage != stage || ck.failed {
            return Err(Error::invalid(format!(
                "{} is not a usable {} checkpoint",
                path.display(),
                stage.name()
            )));
        }
        if ck.taxonomy != shape.taxonomy || ck.d_local != shape.d_local || ck.d_ctx != shape.d_ctx {
            return Err(Error::config(format!(
                "{} was trained on different data",
                path.display()
            )));
        }
        if ck.dims != self.cfg.dims {
            return Err(Error::config(format!(
                "{} has different layer widths",
                path.display()
            )));
        }
        Ok(ck)
    }

    fn shape_of(ds: &Dataset) -> Experts {
        Experts {
            taxonomy: ds.taxonomy.clone(),
            d_local: ds.d_local,
            d_ctx: ds.d_ctx,
        }
    }

    fn new_local(&self, shape: &Experts) -> LocalExpert {
        let mut rng = seed::stream(self.cfg.seed, "init.local");
        LocalExpert::new(
            &self.cfg.dims,
            shape.d_local,
            shape.taxonomy.num_classes(),
            shape.taxonomy.num_tissues(),
            &mut rng,
        )
    }

    fn new_global(&self, shape: &Experts) -> GlobalExpert {
        let mut rng = seed::stream(self.cfg.seed, "init.global");
        GlobalExpert::new(
            &self.cfg.dims,
            shape.d_local,
            shape.d_ctx,
            shape.taxonomy.num_classes(),
            shape.taxonomy.num_tissues(),
            &mut rng,
        )
    }

    fn new_gate(&self, cfg: &GateNetConfig, shape: &Experts) -> GateNet {
        let mut rng = seed::stream(self.cfg.seed, "init.gate");
        GateNet::new(cfg, shape.d_local, 2 * self.cfg.dims.proj, &mut rng)
    }

    fn store_of<'a>(ck: &'a Checkpoint, name: &str) -> Result<&'a BTreeMap<String, Matrix>> {
        ck.stores
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks the {name} store")))
    }

    fn local_from(&self, ck: &Checkpoint, shape: &Experts) -> Result<LocalExpert> {
        let mut m = self.new_local(shape);
        m.store.load_named(Self::store_of(ck, "local")?)?;
        Ok(m)
    }

    fn global_from(&self, ck: &Checkpoint, shape: &Experts) -> Result<GlobalExpert> {
        let mut m = self.new_global(shape);
        m.store.load_named(Self::store_of(ck, "global")?)?;
        Ok(m)
    }

    fn gate_bundle(&self, shape: &Experts) -> Result<(LocalExpert, GlobalExpert, GateNet)> {
        let ck = self.load_checkpoint(Stage::Gate, shape)?;
        let cfg = ck
            .gate_net
            .clone()
            .ok_or_else(|| Error::invalid("gate checkpoint lacks its network config"))?;
        let mut gate = self.new_gate(&cfg, shape);
        gate.store.load_named(Self::store_of(&ck, "gate")?)?;
        Ok((self.local_from(&ck, shape)?, self.global_from(&ck, shape)?, gate))
    }

    pub fn train_local(&self) -> Result<StageSummary> {
        let (ds, train, val) = self.splits()?;
        let shape = Self::shape_of(&ds);
        let mut local = self.new_local(&shape);
        let out = train_local(
            &mut local,
            &train,
            &val,
            &self.cfg.plans.local,
            &self.cfg.loss,
            self.cfg.seed,
        );
        self.finish_stage(Stage::Local, &shape, &[("local", &local.store)], out)
    }

    pub fn train_global(&self) -> Result<StageSummary> {
        let (ds, train, val) = self.splits()?;
        let shape = Self::shape_of(&ds);
        let local = self.local_from(&self.load_checkpoint(Stage::Local, &shape)?, &shape)?;
        let mut global = self.new_global(&shape);
        let out = train_global(
            &mut global,
            &local,
            &train,
            &val,
            &self.cfg.plans.global,
            &self.cfg.loss,
            &self.cfg.global,
            self.cfg.seed,
        );
        self.finish_stage(Stage::Global, &shape, &[("global", &global.store)], out)
    }

    pub fn train_gate(&self) -> Result<StageSummary> {
        let (ds, train, val) = self.splits()?;
        let shape = Self::shape_of(&ds);
        let mut local = self.local_from(&self.load_checkpoint(Stage::Local, &shape)?, &shape)?;
        let mut global = self.global_from(&self.load_checkpoint(Stage::Global, &shape)?, &shape)?;
        let mut gate = self.new_gate(&self.cfg.gate_net, &shape);
        let out = train_gate(
            &mut gate,
            &mut local,
            &mut global,
            &train,
            &val,
            &self.cfg.plans.gate,
            &self.cfg.loss,
            &self.cfg.gate,
            self.cfg.seed,
        );
        self.finish_stage(
            Stage::Gate,
            &shape,
            &[
                ("gate", &gate.store),
                ("local", &local.store),
                ("global", &global.store),
            ],
            out,
        )
    }

    /// Fits per-class path reliabilities and the safe-gate thresholds on the validation split.
    pub fn calibrate_gate(&self) -> Result<Calibration> {
        let (ds, _, val) = self.splits()?;
        let shape = Self::shape_of(&ds);
        let (local, global, gate) = self.gate_bundle(&shape)?;
        let (l, g) = expert_probs(&local, &global, &val)?;
        let gv = gate.predict(&l.features, &g.features, &stats_matrix(&l.probs, &g.probs)?)?;
        let rel = reliability(&l.probs, &g.probs, &val.labels, val.classes)?;
        let search = calibrate_thresholds(&l.probs, &g.probs, &gv, &val.labels, &rel)?;
        let cal = Calibration {
            stamp: self.stamp(CALIBRATION_SCHEMA),
            reliability: rel,
            search,
        };
        write_json(&self.paths().calibration(), &cal)?;
        Ok(cal)
    }

    fn load_calibration(&self) -> Result<Calibration> {
        let path = self.paths().calibration();
        let cal: Calibration = read_json(&path, "calibration").map_err(|e| match e {
            Error::Prerequisite(m) => Error::Prerequisite(format!("{m}; run calibrate-gate first")),
            other => other,
        })?;
        check_schema(&cal.stamp, CALIBRATION_SCHEMA, &path)?;
        Ok(cal)
    }

    fn cohort_data(&self, cohort: &CohortConfig, ds: &Dataset, split: &CohortSplit) -> Result<Dataset> {
        let data = match &cohort.features {
            None => ds.subset(&split.test),
            Some(path) => {
                let taxonomy = Some(&ds.taxonomy);
                align_dataset(
                    data::read_records(path, Format::from_path(path), taxonomy)?,
                    &ds.taxonomy,
                )?
            }
        };
        if data.d_local != ds.d_local || data.d_ctx != ds.d_ctx {
            return Err(Error::dim(format!(
                "cohort {} features have different widths",
                cohort.name
            )));
        }
        Ok(data)
    }

    /// Runs `mode` over the configured cohorts (or just `only`), projects onto
    /// each cohort's evaluation classes and writes reports and predictions.
    pub fn evaluate(&self, mode: Mode, only: Option<&str>) -> Result<Vec<EvalReport>> {
        let cohorts: Vec<&CohortConfig> = self
            .cfg
            .cohorts
            .iter()
            .filter(|c| only.is_none_or(|n| n == c.name))
            .collect();
        if cohorts.is_empty() {
            return Err(Error::config(format!(
                "no cohort named {:?}",
                only.unwrap_or_default()
            )));
        }
        let (ds, split) = self.load_data()?;
        let shape = Self::shape_of(&ds);
        let models = Predictor::load(self, mode, &shape)?;
        cohorts
            .into_iter()
            .map(|c| self.evaluate_cohort(c, mode, &models, &ds, &split))
            .collect()
    }

    fn evaluate_cohort(
        &self,
        cohort: &CohortConfig,
        mode: Mode,
        models: &Predictor,
        ds: &Dataset,
        split: &CohortSplit,
    ) -> Result<EvalReport> {
        let data = self.cohort_data(cohort, ds, split)?;
        let idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.records[i].label.is_some())
            .collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!(
                "cohort {} has no labelled records",
                cohort.name
            )));
        }
        let view = Split::from_dataset(&data, &idx)?;
        let pred = models.predict(&view)?;
        let train_classes = ds.taxonomy.classes();
        let (projection, proj_name) = match &cohort.projection {
            None => (ProjectionMatrix::identity(train_classes)?, "identity".to_string()),
            Some(p) => (ProjectionMatrix::load(p)?.aligned_to(train_classes)?, p.clone()),
        };
        let eval_classes = projection.eval_classes().to_vec();

        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let mut kept = Vec::new();
        let mut dropped_mass = 0.0;
        for (i, &y) in view.labels.iter().enumerate() {
            let Some(ey) = projection.project_label(y) else {
                continue;
            };
            let out = projection.project(pred.dist[i].as_slice(), true)?;
            dropped_mass += out.dropped_mass;
            probs.push(out.as_prob()?);
            labels.push(ey);
            kept.push(i);
        }
        if kept.is_empty() {
            return Err(Error::invalid(format!(
                "every record of cohort {} falls on a dropped class",
                cohort.name
            )));
        }
        let rows: Vec<usize> = kept.iter().map(|&i| idx[i]).collect();
        let features = data.local_matrix(&rows);
        let report = metric_report(&probs, &labels, &eval_classes, Some(&features), &self.cfg.report)?;

        let pred_path = self.paths().predictions(&cohort.name, mode);
        create_parent(&pred_path)?;
        let f = File::create(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&pred_path, e);
        let header = serde_json::json!({
            "schema": PREDICTIONS_SCHEMA,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "cohort": cohort.name,
            "mode": mode,
            "eval_classes": eval_classes,
        });
        writeln!(w, "{header}").map_err(io)?;
        for (k, &i) in kept.iter().enumerate() {
            let line = PredictionLine {
                cell_id: &data.records[idx[i]].cell_id,
                label: &eval_classes[labels[k]],
                pred: &eval_classes[probs[k].argmax()],
                probs: probs[k].as_slice(),
                gate: pred.gate.as_ref().map(|g| g[i]),
                path: pred.path.as_ref().map(|p| match p[i] {
                    GatePath::Local => "local",
                    GatePath::Global => "global",
                }),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let gate_acceptance = pred
            .accepted
            .as_ref()
            .map(|a| kept.iter().filter(|&&i| a[i]).count() as f64 / kept.len() as f64);
        let rep = EvalReport {
            stamp: self.stamp(REPORT_SCHEMA),
            cohort: cohort.name.clone(),
            mode,
            projection: proj_name,
            eval_classes,
            records: idx.len(),
            dropped_records: idx.len() - kept.len(),
            mean_dropped_mass: dropped_mass / kept.len() as f64,
            thresholds: models.thresholds(),
            gate_acceptance,
            report,
        };
        write_json(&self.paths().report(&cohort.name, mode), &rep)?;
        Ok(rep)
    }

    /// Every evaluation report of the run, ordered by cohort then mode.
    pub fn collect_reports(&self) -> Result<Vec<EvalReport>> {
        let dir = self.paths().reports();
        let mut out = Vec::new();
        for c in &self.cfg.cohorts {
            for mode in Mode::ALL {
                let path = self.paths().report(&c.name, mode);
                if path.is_file() {
                    let r: EvalReport = read_json(&path, "report")?;
                    check_schema(&r.stamp, REPORT_SCHEMA, &path)?;
                    out.push(r);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Prerequisite(format!(
                "no evaluation reports under {}; run evaluate first",
                dir.display()
            )));
        }
        Ok(out)
    }

    /// Renders all evaluation reports in one document and writes it to
    /// `reports/summary.<ext>`.
    pub fn report(&self, format: OutputFormat) -> Result<(PathBuf, String)> {
        let reports = self.collect_reports()?;
        let entries: Vec<ReportEntry> = reports
            .iter()
            .map(|r| ReportEntry {
                cohort: r.cohort.clone(),
                mode: r.mode.name().to_string(),
                report: r.report.clone(),
            })
            .collect();
        let text = match format {
            OutputFormat::Json => {
                let doc = serde_json::json!({
                    "schema": SUMMARY_SCHEMA,
                    "config_hash": self.hash,
                    "seed": self.cfg.seed,
                    "entries": entries,
                });
                let mut s = serde_json::to_string_pretty(&doc)?;
                s.push('\n');
                s
            }
            OutputFormat::Csv => render_csv(&entries)?,
            OutputFormat::Md => {
                let notes = vec![
                    format!("schema: {SUMMARY_SCHEMA}"),
                    format!("config_hash: {}", self.hash),
                    format!("seed: {}", self.cfg.seed),
                ];
                render_markdown("NuClass evaluation", &notes, &entries)
            }
        };
        let path = self
            .paths()
            .reports()
            .join(format!("summary.{}", format.extension()));
        create_parent(&path)?;
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        Ok((path, text))
    }
}

/// Per-sample output of a deployment mode in the training label space.
struct Prediction {
    dist: Vec<ProbVector>,
    gate: Option<Vec<f64>>,
    path: Option<Vec<GatePath>>,
    accepted: Option<Vec<bool>>,
}

enum Predictor {
    Local(LocalExpert),
    Global(GlobalExpert),
    Gate(LocalExpert, GlobalExpert, GateNet),
    Safe(LocalExpert, GlobalExpert, GateNet, Calibration),
}

impl Predictor {
    fn load(run: &Run, mode: Mode, shape: &Experts) -> Result<Self> {
        Ok(match mode {
            Mode::Local => {
                Predictor::Local(run.local_from(&run.load_checkpoint(Stage::Local, shape)?, shape)?)
            }
            Mode::Global => {
                Predictor::Global(run.global_from(&run.load_checkpoint(Stage::Global, shape)?, shape)?)
            }
            Mode::Gate => {
                let (l, g, n) = run.gate_bundle(shape)?;
                Predictor::Gate(l, g, n)
            }
            Mode::Safe => {
                let (l, g, n) = run.gate_bundle(shape)?;
                let cal = run.load_calibration()?;
                if cal.reliability.local.len() != shape.taxonomy.num_classes() {
                    return Err(Error::invalid("calibration does not match the model's classes"));
                }
                Predictor::Safe(l, g, n, cal)
            }
        })
    }

    fn thresholds(&self) -> Option<Thresholds> {
        match self {
            Predictor::Safe(.., cal) => Some(cal.search.thresholds),
            _ => None,
        }
    }

    fn predict(&self, view: &Split) -> Result<Prediction> {
        let only = |dist| Prediction {
            dist,
            gate: None,
            path: None,
            accepted: None,
        };
        match self {
            Predictor::Local(l) => Ok(only(l.predict(&view.local, &view.tissues)?.probs)),
            Predictor::Global(g) => Ok(only(g.predict(&view.local, &view.ctx, &view.tissues)?.probs)),
            Predictor::Gate(l, g, n) | Predictor::Safe(l, g, n, _) => {
                let (lo, go) = expert_probs(l, g, view)?;
                let gv = n.predict(&lo.features, &go.features, &stats_matrix(&lo.probs, &go.probs)?)?;
                if let Predictor::Safe(.., cal) = self {
                    let decisions: Vec<_> = (0..gv.len())
                        .map(|i| {
                            safe_decide(
                                &lo.probs[i],
                                &go.probs[i],
                                gv[i],
                                &cal.reliability,
                                cal.search.thresholds,
                            )
                        })
                        .collect();
                    return Ok(Prediction {
                        path: Some(decisions.iter().map(|d| d.path).collect()),
                        accepted: Some(decisions.iter().map(|d| d.gate_accepted).collect()),
                        dist: decisions.into_iter().map(|d| d.dist).collect(),
                        gate: Some(gv),
                    });
                }
                let dist = (0..gv.len())
                    .map(|i| fuse(&lo.probs[i], &go.probs[i], gv[i]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Prediction {
                    dist,
                    gate: Some(gv),
                    path: None,
                    accepted: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_paths_and_mode() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.root = PathBuf::from("elsewhere");
        b.mode = Mode::Local;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn config_round_trip_and_strictness() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert!(matches!(
            RunConfig::from_json(r#"{"sed": 1}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resolve_checks_files_and_seeds() {
        let mut cfg = RunConfig {
            seed: 9,
            ..Default::default()
        };
        let r = cfg.clone().resolve().unwrap();
        assert_eq!((r.data.synth.seed, r.report.seed), (9, 9));
        cfg.cohorts[0].projection = Some("/no/such/projection.json".into());
        assert!(matches!(cfg.clone().resolve(), Err(Error::Config(_))));
        cfg.cohorts[0].projection = Some("lung".into());
        cfg.resolve().unwrap();
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("fused".parse::<Mode>().is_err());
    }
}
