//! Config-driven comparison of the three training protocols.
//!
//! * `P1_pretrained_lti`: pretrained backbone trained on synthetic images.
//! * `P2_pretrained_finetune`: pretrained backbone, fresh classification
//!   layer fitted on a small real subset.
//! * `P3_pretrained_lti_finetune`: the P1 model with its classification
//!   layer refitted on that same subset.
//!
//! Every protocol is evaluated on the held-out real split. Output layout
//! under the run directory:
//!
//! ```text
//! config.toml                      snapshot of the resolved config
//! synthetic/                       generated images + manifest.jsonl
//! real_split/{finetune,eval}.jsonl
//! runs/run_000/<protocol>/run.json report.txt model.json cams/
//! comparison.json comparison.txt panels/
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ingest_real, load_image, split_real, PreprocessConfig, RealDatasetSource, SplitSpec};
use crate::evaluation::{
    aggregate_runs, cam_panel, evaluate, grad_cam_tensor, overlay, overlay_file_name, CamMap, EvalReport,
    RunAggregate,
};
use crate::generation::{
    build_synthetic_dataset, http_backend, mock_backend, BuildOptions, GenerationBackend, Secret,
};
use crate::manifest::{DatasetManifest, ImageRecord, MANIFEST_FILE};
use crate::prompt::parse_spec_file;
use crate::seed::{derive_seed, sha256_hex};
use crate::training::{
    finetune_logits, initial_model, save_model, select_finetune_subset, train, FinetuneConfig, TrainConfig,
    TrainedModel,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Validation(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl ExperimentError {
    fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        ExperimentError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }

    /// Process exit code: 1 for validation errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Validation(_) => 1,
            ExperimentError::Stage { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    #[serde(rename = "P1_pretrained_lti")]
    PretrainedLti,
    #[serde(rename = "P2_pretrained_finetune")]
    PretrainedFinetune,
    #[serde(rename = "P3_pretrained_lti_finetune")]
    PretrainedLtiFinetune,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 3] = [
        ProtocolId::PretrainedLti,
        ProtocolId::PretrainedFinetune,
        ProtocolId::PretrainedLtiFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::PretrainedLti => "P1_pretrained_lti",
            ProtocolId::PretrainedFinetune => "P2_pretrained_finetune",
            ProtocolId::PretrainedLtiFinetune => "P3_pretrained_lti_finetune",
        }
    }

    /// Column heading in the comparison table.
    pub fn heading(self) -> &'static str {
        match self {
            ProtocolId::PretrainedLti => "Pretrained + LTI",
            ProtocolId::PretrainedFinetune => "Pretrained + Finetune",
            ProtocolId::PretrainedLtiFinetune => "Pretrained + LTI + Finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s) || p.name()[..2].eq_ignore_ascii_case(s))
    }

    pub fn uses_synthetic(self) -> bool {
        self != ProtocolId::PretrainedFinetune
    }

    pub fn uses_real_finetune(self) -> bool {
        self != ProtocolId::PretrainedLti
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        #[serde(default = "one")]
        strength: f64,
    },
    Http {
        endpoint: String,
        /// Environment variable holding the API token.
        #[serde(default)]
        auth_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: usize,
    },
}

fn one() -> f64 {
    1.0
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> usize {
    3
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn GenerationBackend>, ExperimentError> {
        match self {
            BackendConfig::Mock { strength } => Ok(Box::new(mock_backend(*strength))),
            BackendConfig::Http {
                endpoint,
                auth_env,
                timeout_secs,
                retries,
            } => {
                let auth = match auth_env {
                    Some(var) => Some(Secret::from_env(var).ok_or_else(|| {
                        ExperimentError::Validation(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let backend = http_backend(endpoint, auth, Duration::from_secs(*timeout_secs), *retries)
                    .map_err(|e| ExperimentError::Validation(e.to_string()))?;
                Ok(Box::new(backend))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub width: u32,
    pub height: u32,
    /// Existing synthetic manifest; skips generation when set.
    pub manifest: Option<PathBuf>,
    pub item_retries: usize,
    pub retry_budget: usize,
    /// Prompt enumeration seed; defaults to the base seed.
    pub prompt_seed: Option<u64>,
    pub backend_params: BTreeMap<String, String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let b = BuildOptions::default();
        SyntheticConfig {
            per_class: 1000,
            width: b.width,
            height: b.height,
            manifest: None,
            item_retries: b.item_retries,
            retry_budget: b.retry_budget,
            prompt_seed: None,
            backend_params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RealConfig {
    pub root: PathBuf,
    #[serde(default)]
    pub skip_unreadable: bool,
}

fn default_protocols() -> Vec<ProtocolId> {
    ProtocolId::ALL.to_vec()
}
fn default_runs() -> usize {
    5
}
fn default_cam_samples() -> usize {
    8
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn yes() -> bool {
    true
}
fn default_backend() -> BackendConfig {
    BackendConfig::Mock { strength: 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Condition spec file; needed whenever synthetic data must be generated.
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
    #[serde(default = "default_backend")]
    pub backend: BackendConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Required by `run`; stage commands only read the other sections.
    #[serde(default)]
    pub real: RealConfig,
    #[serde(default)]
    pub split: SplitSpec,
    /// Applied to real images (logo removal included).
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<ProtocolId>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Nest outputs in a timestamped subdirectory.
    #[serde(default = "yes")]
    pub timestamped: bool,
    #[serde(default)]
    pub deterministic: bool,
    /// Eval images per class that get CAM overlays (first N in manifest order).
    #[serde(default = "default_cam_samples")]
    pub cam_samples_per_class: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ExperimentError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.spec_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.synthetic.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.train.pretrained_checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.real.root);
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn needs_synthetic(&self) -> bool {
        self.protocols.iter().any(|p| p.uses_synthetic())
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Validation(m));
        if self.n_runs < 1 {
            return bad("n_runs must be at least 1".into());
        }
        if self.protocols.is_empty() {
            return bad("no protocols selected".into());
        }
        if self.needs_synthetic() {
            match (&self.synthetic.manifest, &self.spec_file) {
                (Some(m), _) if !m.is_file() => return bad(format!("synthetic manifest {} not found", m.display())),
                (Some(_), _) => {}
                (None, None) => return bad("spec_file is required to generate synthetic data".into()),
                (None, Some(s)) if !s.is_file() => return bad(format!("spec file {} not found", s.display())),
                (None, Some(_)) => {
                    if self.synthetic.per_class < 1 {
                        return bad("synthetic.per_class must be at least 1".into());
                    }
                }
            }
        }
        if self.real.root.as_os_str().is_empty() {
            return bad("real.root is not set".into());
        }
        if !self.real.root.is_dir() {
            return bad(format!("real dataset root {} not found", self.real.root.display()));
        }
        if let Some(p) = &self.train.pretrained_checkpoint {
            if !p.is_file() {
                return bad(format!("pretrained checkpoint {} not found", p.display()));
            }
        }
        self.train.validate().map_err(|e| ExperimentError::Validation(e.to_string()))?;
        self.finetune.validate().map_err(|e| ExperimentError::Validation(e.to_string()))?;
        self.preprocess.validate().map_err(|e| ExperimentError::Validation(e.to_string()))?;
        if !(self.split.finetune_fraction > 0.0 && self.split.finetune_fraction < 1.0) {
            return bad("split.finetune_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Preprocessing for synthetic images: same geometry, no logo removal.
    pub fn synthetic_preprocess(&self) -> PreprocessConfig {
        self.preprocess.without_logo_removal()
    }
}

/// One input dataset a protocol run read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub role: String,
    pub records_digest: String,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_seed: u64,
    pub run_seed: u64,
    /// Named seeds derived from `run_seed`.
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRef>,
    /// Checksum of the synthetic-trained model the run started from.
    pub synthetic_checkpoint: Option<String>,
    pub model_checksum: String,
}

impl Provenance {
    pub fn read_roles(&self) -> Vec<&str> {
        self.inputs.iter().map(|i| i.role.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub protocol: ProtocolId,
    pub run_index: usize,
    pub report: EvalReport,
    pub provenance: Provenance,
}

/// Seeds one run derives from `base_seed + run_index`.
pub fn run_seeds(base_seed: u64, run_index: usize) -> (u64, BTreeMap<String, u64>) {
    let run_seed = base_seed.wrapping_add(run_index as u64);
    let seeds = [
        ("synthetic_train", derive_seed(run_seed, &["synthetic", "train"])),
        ("real_head_init", derive_seed(run_seed, &["real", "head-init"])),
        ("finetune_subset", derive_seed(run_seed, &["finetune", "subset"])),
        ("finetune_fit", derive_seed(run_seed, &["finetune", "fit"])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    (run_seed, seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: ProtocolId,
    /// Accuracy in percent.
    pub accuracy: RunAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<ProtocolSummary>,
    /// P1 confusion, counts pooled over runs.
    pub synthetic_only_confusion: Option<EvalReport>,
    pub runs: Vec<ProtocolRun>,
    pub failures: Vec<String>,
}

impl ComparisonReport {
    pub fn from_runs(runs: Vec<ProtocolRun>, failures: Vec<String>) -> Self {
        let mut columns = Vec::new();
        for p in ProtocolId::ALL {
            let values: Vec<f64> = runs
                .iter()
                .filter(|r| r.protocol == p)
                .map(|r| 100.0 * r.report.accuracy)
                .collect();
            if let Ok(accuracy) = aggregate_runs(&values) {
                columns.push(ProtocolSummary { protocol: p, accuracy });
            }
        }
        let p1: Vec<&ProtocolRun> = runs.iter().filter(|r| r.protocol == ProtocolId::PretrainedLti).collect();
        let synthetic_only_confusion = p1.first().map(|first| {
            let k = first.report.label_order.len();
            let mut counts = vec![vec![0u64; k]; k];
            for r in &p1 {
                for (i, row) in r.report.confusion_counts.iter().enumerate() {
                    for (j, c) in row.iter().enumerate() {
                        counts[i][j] += c;
                    }
                }
            }
            EvalReport::from_counts(counts, first.report.label_order.clone())
        });
        ComparisonReport {
            columns,
            synthetic_only_confusion,
            runs,
            failures,
        }
    }

    pub fn column(&self, protocol: ProtocolId) -> Option<&RunAggregate> {
        self.columns.iter().find(|c| c.protocol == protocol).map(|c| &c.accuracy)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Accuracy (%) on the real evaluation split\n\n");
        let cells: Vec<(String, String)> = self
            .columns
            .iter()
            .map(|c| (c.protocol.heading().to_string(), c.accuracy.display()))
            .collect();
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        out.push_str("| ");
        for ((h, _), w) in cells.iter().zip(&widths) {
            out.push_str(&format!("{h:^w$} | "));
        }
        out.push_str("\n| ");
        for ((_, v), w) in cells.iter().zip(&widths) {
            out.push_str(&format!("{v:^w$} | "));
        }
        out.push('\n');
        let runs = self.columns.iter().map(|c| c.accuracy.n_runs).max().unwrap_or(0);
        out.push_str(&format!(
            "\nmean ± sample standard deviation (n - 1 denominator) over {runs} run(s)\n"
        ));
        if let Some(conf) = &self.synthetic_only_confusion {
            out.push_str("\nSynthetic-only model (P1), counts pooled over runs\n");
            out.push_str(&conf.render_table());
        }
        if !self.failures.is_empty() {
            out.push_str("\nFailures:\n");
            for f in &self.failures {
                out.push_str(&format!("  - {f}\n"));
            }
        }
        out
    }
}

/// Prepared inputs and the synthetic-model cache for one invocation.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub synthetic: Option<DatasetManifest>,
    pub finetune_pool: DatasetManifest,
    pub eval: DatasetManifest,
    cache: HashMap<(String, String), TrainedModel>,
}

impl Experiment {
    /// Validates the config, then generates or loads synthetic data and
    /// ingests and splits the real data.
    pub fn prepare(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let out_dir = if config.timestamped {
            config
                .output_dir
                .join(chrono::Local::now().format("%Y%m%d-%H%M%S%.3f").to_string())
        } else {
            config.output_dir.clone()
        };
        fs::create_dir_all(&out_dir).map_err(|e| ExperimentError::stage("setup", e))?;
        fs::write(out_dir.join("config.toml"), config.to_toml()).map_err(|e| ExperimentError::stage("setup", e))?;

        let synthetic = if config.needs_synthetic() {
            Some(prepare_synthetic(&config, &out_dir)?)
        } else {
            None
        };

        let real = ingest_real(&RealDatasetSource {
            root: config.real.root.clone(),
            skip_unreadable: config.real.skip_unreadable,
        })
        .map_err(|e| ExperimentError::stage("ingest", e))?;
        if let Some(s) = &synthetic {
            if s.class_labels != real.class_labels {
                return Err(ExperimentError::Validation(format!(
                    "synthetic classes {:?} differ from real classes {:?}",
                    s.class_labels, real.class_labels
                )));
            }
        }
        if real.class_labels.len() != config.train.num_classes {
            return Err(ExperimentError::Validation(format!(
                "train.num_classes is {} but the data has {} classes",
                config.train.num_classes,
                real.class_labels.len()
            )));
        }
        let (finetune_pool, eval) = split_real(&real, &config.split).map_err(|e| ExperimentError::stage("split", e))?;
        let split_dir = out_dir.join("real_split");
        for (name, m) in [("finetune.jsonl", &finetune_pool), ("eval.jsonl", &eval)] {
            write_listing(m, &split_dir.join(name)).map_err(|e| ExperimentError::stage("split", e))?;
        }
        Ok(Experiment {
            config,
            out_dir,
            synthetic,
            finetune_pool,
            eval,
            cache: HashMap::new(),
        })
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            deterministic: self.config.deterministic || self.config.train.deterministic,
            ..self.config.train.clone()
        }
    }

    fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            seed,
            deterministic: self.config.deterministic || self.config.finetune.deterministic,
            ..self.config.finetune.clone()
        }
    }

    /// Synthetic-trained model for a run, trained once per
    /// (manifest digest, train config) and reused afterwards.
    fn synthetic_model(&mut self, seed: u64) -> Result<TrainedModel, ExperimentError> {
        let manifest = self
            .synthetic
            .as_ref()
            .ok_or_else(|| ExperimentError::stage("train", "no synthetic manifest prepared"))?;
        let config = self.train_config(seed);
        let key = (
            manifest.records_digest(),
            sha256_hex(serde_json::to_string(&config).expect("config serializes").as_bytes()),
        );
        if let Some(model) = self.cache.get(&key) {
            return Ok(model.clone());
        }
        let model = train(manifest, &self.config.synthetic_preprocess(), &config)
            .map_err(|e| ExperimentError::stage("train", e))?;
        self.cache.insert(key, model.clone());
        Ok(model)
    }

    pub fn run_dir(&self, protocol: ProtocolId, run_index: usize) -> PathBuf {
        self.out_dir
            .join("runs")
            .join(format!("run_{run_index:03}"))
            .join(protocol.name())
    }

    /// Runs one protocol and writes its artifacts.
    pub fn run_protocol(&mut self, protocol: ProtocolId, run_index: usize) -> Result<ProtocolRun, ExperimentError> {
        let (run_seed, seeds) = run_seeds(self.config.base_seed, run_index);
        let mut inputs = Vec::new();
        let input = |role: &str, m: &DatasetManifest| InputRef {
            role: role.to_string(),
            records_digest: m.records_digest(),
            n_records: m.len(),
        };
        let subset = if protocol.uses_real_finetune() {
            let s = select_finetune_subset(
                &self.finetune_pool,
                self.config.finetune.per_class_count,
                seeds["finetune_subset"],
            )
            .map_err(|e| ExperimentError::stage("select_subset", e))?;
            Some(s)
        } else {
            None
        };

        let mut synthetic_checkpoint = None;
        let model = match protocol {
            ProtocolId::PretrainedLti | ProtocolId::PretrainedLtiFinetune => {
                let synthetic = self.synthetic.as_ref().expect("validated: synthetic prepared");
                inputs.push(input("synthetic_train", synthetic));
                let base = self.synthetic_model(seeds["synthetic_train"])?;
                synthetic_checkpoint = Some(base.checksum());
                if protocol == ProtocolId::PretrainedLti {
                    base
                } else {
                    let subset = subset.as_ref().expect("finetune protocols select a subset");
                    inputs.push(input("real_finetune", subset));
                    finetune_logits(
                        &base,
                        subset,
                        &self.config.preprocess,
                        &self.finetune_config(seeds["finetune_fit"]),
                    )
                    .map_err(|e| ExperimentError::stage("finetune", e))?
                }
            }
            ProtocolId::PretrainedFinetune => {
                let subset = subset.as_ref().expect("finetune protocols select a subset");
                inputs.push(input("real_finetune", subset));
                let base = initial_model(
                    &self.finetune_pool.class_labels,
                    &self.train_config(seeds["synthetic_train"]),
                    seeds["real_head_init"],
                )
                .map_err(|e| ExperimentError::stage("init", e))?;
                finetune_logits(
                    &base,
                    subset,
                    &self.config.preprocess,
                    &self.finetune_config(seeds["finetune_fit"]),
                )
                .map_err(|e| ExperimentError::stage("finetune", e))?
            }
        };

        inputs.push(input("real_eval", &self.eval));
        let report =
            evaluate(&model, &self.eval, &self.config.preprocess).map_err(|e| ExperimentError::stage("evaluate", e))?;

        let run = ProtocolRun {
            protocol,
            run_index,
            report,
            provenance: Provenance {
                base_seed: self.config.base_seed,
                run_seed,
                seeds,
                inputs,
                synthetic_checkpoint,
                model_checksum: model.checksum(),
            },
        };
        let dir = self.run_dir(protocol, run_index);
        self.write_run(&dir, &run, &model)
            .map_err(|e| ExperimentError::stage("write_artifacts", e))?;
        Ok(run)
    }

    fn write_run(&self, dir: &Path, run: &ProtocolRun, model: &TrainedModel) -> Result<(), String> {
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        save_model(model, &dir.join("model.json")).map_err(|e| e.to_string())?;
        fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(run).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        fs::write(dir.join("report.txt"), run.report.render_table()).map_err(|e| e.to_string())?;
        let cam_dir = dir.join("cams");
        for record in self.cam_sample() {
            let (cam, original) = self.cam_for(model, record).map_err(|e| e.to_string())?;
            fs::create_dir_all(&cam_dir).map_err(|e| e.to_string())?;
            overlay(&cam, &original)
                .save(cam_dir.join(overlay_file_name(&record.stem(), &cam.target_class)))
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// First `cam_samples_per_class` eval records of each class.
    pub fn cam_sample(&self) -> Vec<&ImageRecord> {
        self.eval
            .by_class()
            .into_iter()
            .flat_map(|(_, records)| records.into_iter().take(self.config.cam_samples_per_class))
            .collect()
    }

    /// Grad-CAM for the record's ground-truth class.
    fn cam_for(&self, model: &TrainedModel, record: &ImageRecord) -> Result<(CamMap, image::RgbImage), String> {
        let img = load_image(&self.eval.resolve(record)).map_err(|e| e.to_string())?;
        let x = crate::data::preprocess(&img, &self.config.preprocess).map_err(|e| e.to_string())?;
        let class = model
            .label_index(&record.condition_label)
            .ok_or_else(|| format!("unknown class {}", record.condition_label))?;
        let (channel_weights, heatmap) = grad_cam_tensor(&model.network, &x, class);
        let original = crate::data::remove_logo(&img.to_rgb8(), &self.config.preprocess).map_err(|e| e.to_string())?;
        Ok((
            CamMap {
                heatmap,
                target_class: record.condition_label.clone(),
                input_ref: Some(record.relative_path.clone()),
                channel_weights,
            },
            original,
        ))
    }

    /// Runs every selected protocol `n_runs` times and writes the comparison.
    pub fn run_all(&mut self) -> Result<ComparisonReport, ExperimentError> {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        let mut protocols = self.config.protocols.clone();
        protocols.sort();
        protocols.dedup();
        for run_index in 0..self.config.n_runs {
            for &p in &protocols {
                log::info!("run {run_index}: {}", p.name());
                match self.run_protocol(p, run_index) {
                    Ok(r) => runs.push(r),
                    Err(e) => {
                        log::error!("run {run_index} {}: {e}", p.name());
                        failures.push(format!("run {run_index} {}: {e}", p.name()));
                    }
                }
            }
            // the cached synthetic model is only shared within a run
            self.cache.clear();
        }
        let report = ComparisonReport::from_runs(runs, failures);
        write_comparison(&self.out_dir, &report).map_err(|e| ExperimentError::stage("report", e))?;
        if let Err(e) = self.write_panels(&protocols) {
            log::warn!("CAM panels not written: {e}");
        }
        if report.runs.is_empty() {
            return Err(ExperimentError::stage(
                "run",
                format!("every protocol run failed: {}", report.failures.join("; ")),
            ));
        }
        Ok(report)
    }

    /// Original | P2 | P1 | P3 panels from run 0's checkpoints.
    fn write_panels(&self, protocols: &[ProtocolId]) -> Result<(), String> {
        let order = [
            ProtocolId::PretrainedFinetune,
            ProtocolId::PretrainedLti,
            ProtocolId::PretrainedLtiFinetune,
        ];
        let models: Vec<TrainedModel> = order
            .iter()
            .filter(|p| protocols.contains(p))
            .filter_map(|p| crate::training::load_model(&self.run_dir(*p, 0).join("model.json")).ok())
            .collect();
        if models.is_empty() {
            return Ok(());
        }
        let dir = self.out_dir.join("panels");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        for record in self.cam_sample() {
            let mut original = None;
            let mut tiles = Vec::new();
            for m in &models {
                let (cam, orig) = self.cam_for(m, record)?;
                tiles.push(overlay(&cam, &orig));
                original = Some(orig);
            }
            let panel = cam_panel(&original.expect("at least one model"), &tiles);
            panel
                .save(dir.join(format!("{}__panel.png", record.stem())))
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn prepare_synthetic(config: &ExperimentConfig, out_dir: &Path) -> Result<DatasetManifest, ExperimentError> {
    if let Some(path) = &config.synthetic.manifest {
        return DatasetManifest::read(path).map_err(|e| ExperimentError::stage("load_synthetic", e));
    }
    let spec_file = config.spec_file.as_ref().expect("validated: spec file present");
    let specs = parse_spec_file(spec_file).map_err(|e| ExperimentError::Validation(e.to_string()))?;
    let backend = config.backend.build()?;
    let options = BuildOptions {
        width: config.synthetic.width,
        height: config.synthetic.height,
        item_retries: config.synthetic.item_retries,
        retry_budget: config.synthetic.retry_budget,
        backend_params: config.synthetic.backend_params.clone(),
        prompt_seed: config.synthetic.prompt_seed,
    };
    build_synthetic_dataset(
        &specs,
        config.synthetic.per_class,
        backend.as_ref(),
        &out_dir.join("synthetic"),
        config.base_seed,
        &options,
    )
    .map_err(|e| ExperimentError::stage("generate", e))
}

/// Writes a split listing whose paths still resolve against the source root.
fn write_listing(manifest: &DatasetManifest, path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, manifest.to_jsonl())
}

fn write_comparison(dir: &Path, report: &ComparisonReport) -> std::io::Result<()> {
    fs::write(
        dir.join("comparison.json"),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    fs::write(dir.join("comparison.txt"), report.render())
}

/// Runs one protocol from scratch.
pub fn run_protocol(
    protocol: ProtocolId,
    config: &ExperimentConfig,
    run_index: usize,
) -> Result<ProtocolRun, ExperimentError> {
    let mut config = config.clone();
    config.protocols = vec![protocol];
    Experiment::prepare(config)?.run_protocol(protocol, run_index)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<(PathBuf, ComparisonReport), ExperimentError> {
    let mut experiment = Experiment::prepare(config.clone())?;
    let report = experiment.run_all()?;
    Ok((experiment.out_dir.clone(), report))
}

/// Rebuilds the comparison from the `run.json` files under `dir` and
/// rewrites `comparison.{json,txt}`.
pub fn rebuild_report(dir: &Path) -> Result<ComparisonReport, ExperimentError> {
    let runs_dir = dir.join("runs");
    let mut runs = Vec::new();
    let read_dir = |p: &Path| {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| ExperimentError::Validation(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        Ok::<_, ExperimentError>(entries)
    };
    for run_dir in read_dir(&runs_dir)? {
        for protocol_dir in read_dir(&run_dir)? {
            let path = protocol_dir.join("run.json");
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| ExperimentError::stage("report", e))?;
            let run: ProtocolRun =
                serde_json::from_str(&text).map_err(|e| ExperimentError::stage("report", format!("{}: {e}", path.display())))?;
            runs.push(run);
        }
    }
    if runs.is_empty() {
        return Err(ExperimentError::Validation(format!("no stored runs under {}", runs_dir.display())));
    }
    runs.sort_by_key(|r| (r.run_index, r.protocol));
    let report = ComparisonReport::from_runs(runs, Vec::new());
    write_comparison(dir, &report).map_err(|e| ExperimentError::stage("report", e))?;
    Ok(report)
}

/// Generates a class-per-folder image tree with the mock backend, for use as
/// a stand-in real dataset. Seeds should differ from the synthetic set's.
pub fn write_mock_real_pool(
    spec_file: &Path,
    per_class: usize,
    strength: f64,
    size: u32,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest, ExperimentError> {
    let specs = parse_spec_file(spec_file).map_err(|e| ExperimentError::Validation(e.to_string()))?;
    let options = BuildOptions {
        width: size,
        height: size,
        ..BuildOptions::default()
    };
    let manifest = build_synthetic_dataset(&specs, per_class, &mock_backend(strength), root, seed, &options)
        .map_err(|e| ExperimentError::stage("generate", e))?;
    // the tree is read back as real data; drop the generation manifest
    let _ = fs::remove_file(root.join(MANIFEST_FILE));
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_parse() {
        for p in ProtocolId::ALL {
            assert_eq!(ProtocolId::parse(p.name()), Some(p));
        }
        assert_eq!(ProtocolId::parse("p3"), Some(ProtocolId::PretrainedLtiFinetune));
        assert_eq!(ProtocolId::parse("P4"), None);
    }

    #[test]
    fn isolation_flags() {
        assert!(!ProtocolId::PretrainedFinetune.uses_synthetic());
        assert!(!ProtocolId::PretrainedLti.uses_real_finetune());
        assert!(ProtocolId::PretrainedLtiFinetune.uses_synthetic());
        assert!(ProtocolId::PretrainedLtiFinetune.uses_real_finetune());
    }

    #[test]
    fn run_seeds_follow_base_plus_index() {
        let (a, sa) = run_seeds(10, 2);
        let (b, sb) = run_seeds(12, 0);
        assert_eq!(a, 12);
        assert_eq!((a, &sa), (b, &sb));
        assert_ne!(run_seeds(10, 3).1, sb);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
spec_file = "specs.toml"
protocols = ["P2_pretrained_finetune"]
n_runs = 3
[real]
root = "real"
[backend]
kind = "mock"
strength = 0.5
[train]
architecture = "small_cnn"
epochs = 2
"#;
        let c: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(c.protocols, vec![ProtocolId::PretrainedFinetune]);
        assert_eq!(c.backend, BackendConfig::Mock { strength: 0.5 });
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.learning_rate, 1e-4);
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_spec_file_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            spec_file: Some(dir.path().join("nope.toml")),
            backend: default_backend(),
            synthetic: SyntheticConfig::default(),
            real: RealConfig {
                root: dir.path().to_path_buf(),
                skip_unreadable: false,
            },
            split: SplitSpec::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            protocols: default_protocols(),
            n_runs: 1,
            base_seed: 0,
            output_dir: dir.path().join("out"),
            timestamped: false,
            deterministic: true,
            cam_samples_per_class: 0,
        };
        let err = Experiment::prepare(config).err().unwrap();
        assert_eq!(err.exit_code(), 1);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn comparison_aggregates_percentages() {
        let report = |acc: f64| EvalReport {
            accuracy: acc,
            ..EvalReport::from_counts(vec![vec![1, 0], vec![0, 1]], vec!["a".into(), "b".into()])
        };
        let prov = Provenance {
            base_seed: 0,
            run_seed: 0,
            seeds: BTreeMap::new(),
            inputs: vec![],
            synthetic_checkpoint: None,
            model_checksum: String::new(),
        };
        let runs = [0.63, 0.61, 0.65]
            .iter()
            .enumerate()
            .map(|(i, a)| ProtocolRun {
                protocol: ProtocolId::PretrainedFinetune,
                run_index: i,
                report: report(*a),
                provenance: prov.clone(),
            })
            .collect();
        let c = ComparisonReport::from_runs(runs, vec![]);
        assert_eq!(c.columns.len(), 1);
        let agg = c.column(ProtocolId::PretrainedFinetune).unwrap();
        assert!((agg.mean - 63.0).abs() < 1e-9 && (agg.std - 2.0).abs() < 1e-9);
        assert!(c.render().contains("63.0 ± 2.0"));
    }
}
