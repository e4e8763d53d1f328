//! Classifier training, logit-layer finetuning and checkpoints.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{preprocess_file, DataError, PreprocessConfig};
use crate::manifest::{DatasetManifest, ImageRecord};
use crate::nn::{self, argmax, softmax_cross_entropy, Adam, Network, Tensor3};
use crate::seed::{derive_seed, Rng};

/// Seed of the shared backbone initialization used when `pretrained` is set
/// and no backbone checkpoint is given.
pub const PRETRAINED_INIT_SEED: u64 = 0x005e_ed0f_1a6e;

pub const CHECKPOINT_FORMAT: &str = "dermsynth-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("manifest has {manifest} classes but config expects {config}")]
    ManifestMismatch { manifest: usize, config: usize },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: String,
    pub pretrained: bool,
    /// Checkpoint whose backbone seeds the network instead of the shared
    /// initialization.
    pub pretrained_checkpoint: Option<PathBuf>,
    pub num_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub loss: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Single-threaded execution.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: "resnet_mini".into(),
            pretrained: true,
            pretrained_checkpoint: None,
            num_classes: 4,
            epochs: 50,
            learning_rate: 1e-4,
            optimizer: "adam".into(),
            loss: "cross_entropy".into(),
            batch_size: 32,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.optimizer != "adam" {
            return bad(format!("unsupported optimizer {:?}", self.optimizer));
        }
        if self.loss != "cross_entropy" {
            return bad(format!("unsupported loss {:?}", self.loss));
        }
        if !nn::ARCHITECTURES.contains(&self.architecture.as_str()) {
            return bad(format!(
                "unknown architecture {:?} (available: {})",
                self.architecture,
                nn::ARCHITECTURES.join(", ")
            ));
        }
        Ok(())
    }
}

/// Only the final classification layer is ever finetuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    #[default]
    FinalLayerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub scope: FinetuneScope,
    pub per_class_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            scope: FinetuneScope::FinalLayerOnly,
            per_class_count: 10,
            epochs: 50,
            learning_rate: 1e-4,
            optimizer: "adam".into(),
            batch_size: 32,
            seed: 0,
            deterministic: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.per_class_count < 1 {
            return Err(TrainError::InvalidConfig("per_class_count must be at least 1".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.optimizer != "adam" {
            return Err(TrainError::InvalidConfig(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub config: FinetuneConfig,
    pub history: Vec<EpochStats>,
    /// Records-digest of the subset the layer was fitted on.
    pub subset_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub architecture: String,
    pub labels: Vec<String>,
    pub network: Network,
    pub history: Vec<EpochStats>,
    pub config: TrainConfig,
    /// Finetune passes applied after training, oldest first.
    #[serde(default)]
    pub finetunes: Vec<FinetuneRecord>,
}

impl TrainedModel {
    pub fn predict(&self, x: &Tensor3) -> Array1<f64> {
        self.network.predict(x)
    }

    /// Predicted class index (into `labels`), ties toward the lowest index.
    pub fn classify(&self, x: &Tensor3) -> usize {
        argmax(&self.predict(x))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// SHA-256 over all parameters.
    pub fn checksum(&self) -> String {
        let joined: String = self
            .network
            .layer_checksums()
            .into_iter()
            .map(|(n, h)| format!("{n}={h};"))
            .collect();
        crate::seed::sha256_hex(joined.as_bytes())
    }
}

/// Builds a model for the given labels: backbone from the pretrained source,
/// classification layer freshly initialized from `head_seed`.
pub fn initial_model(labels: &[String], config: &TrainConfig, head_seed: u64) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    if labels.len() != config.num_classes {
        return Err(TrainError::ManifestMismatch {
            manifest: labels.len(),
            config: config.num_classes,
        });
    }
    let backbone_seed = if config.pretrained {
        PRETRAINED_INIT_SEED
    } else {
        derive_seed(config.seed, &["backbone-init"])
    };
    let mut network = nn::build(&config.architecture, labels.len(), &mut Rng::new(backbone_seed))
        .ok_or_else(|| TrainError::InvalidConfig(format!("unknown architecture {}", config.architecture)))?;
    if let (true, Some(path)) = (config.pretrained, &config.pretrained_checkpoint) {
        let source = load_model(path)?;
        if source.architecture != config.architecture {
            return Err(TrainError::IncompatibleCheckpoint(format!(
                "backbone checkpoint is {}, config wants {}",
                source.architecture, config.architecture
            )));
        }
        network.backbone = source.network.backbone;
        network.hidden = source.network.hidden;
    }
    network.reset_classifier(labels.len(), &mut Rng::new(head_seed));
    Ok(TrainedModel {
        architecture: config.architecture.clone(),
        labels: labels.to_vec(),
        network,
        history: Vec::new(),
        config: config.clone(),
        finetunes: Vec::new(),
    })
}

/// Loads and preprocesses every record, labelled by position in `labels`.
pub fn load_samples(
    manifest: &DatasetManifest,
    labels: &[String],
    preprocess: &PreprocessConfig,
) -> Result<Vec<(Tensor3, usize)>, TrainError> {
    manifest
        .records
        .par_iter()
        .map(|r| load_sample(manifest, r, labels, preprocess))
        .collect()
}

fn load_sample(
    manifest: &DatasetManifest,
    record: &ImageRecord,
    labels: &[String],
    preprocess: &PreprocessConfig,
) -> Result<(Tensor3, usize), TrainError> {
    let class = labels
        .iter()
        .position(|l| l == &record.condition_label)
        .ok_or_else(|| TrainError::LabelMismatch(format!("unknown label {}", record.condition_label)))?;
    let path = manifest.resolve(record);
    let x = preprocess_file(&path, preprocess).map_err(|e| match e {
        DataError::UnreadableImage { path, reason } => TrainError::UnreadableImage { path, reason },
        other => TrainError::Data(other),
    })?;
    Ok((x, class))
}

fn with_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    } else {
        f()
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, &["epoch", &epoch.to_string()])).shuffle(&mut order);
    order
}

/// Trains every parameter of a fresh model on the manifest.
pub fn train(
    manifest: &DatasetManifest,
    preprocess: &PreprocessConfig,
    config: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(TrainError::InvalidConfig("training manifest is empty".into()));
    }
    if manifest.class_labels.len() != config.num_classes {
        return Err(TrainError::ManifestMismatch {
            manifest: manifest.class_labels.len(),
            config: config.num_classes,
        });
    }
    let mut model = initial_model(
        &manifest.class_labels,
        config,
        derive_seed(config.seed, &["head-init"]),
    )?;
    with_pool(config.deterministic, || {
        let samples = load_samples(manifest, &model.labels, preprocess)?;
        model.history = fit_all(&mut model.network, &samples, config);
        Ok(model)
    })
}

fn fit_all(net: &mut Network, samples: &[(Tensor3, usize)], config: &TrainConfig) -> Vec<EpochStats> {
    let shapes: Vec<usize> = net.named_params().iter().map(|(_, p)| p.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(samples.len(), config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let frozen: &Network = net;
            let per_sample: Vec<(f64, bool, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = &samples[i];
                    let trace = frozen.forward(x);
                    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, *y);
                    let mut grads = frozen.zero_grads();
                    frozen.backward(&trace, &dlogits, &mut grads);
                    (loss, argmax(&trace.logits) == *y, grads)
                })
                .collect();
            let mut total = net.zero_grads();
            for (loss, hit, grads) in &per_sample {
                loss_sum += loss;
                correct += *hit as usize;
                for (t, g) in total.iter_mut().zip(grads) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(&mut net.params_mut(), &total);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        log::info!("epoch {epoch}: loss {:.4} acc {:.3}", stats.loss, stats.accuracy);
        history.push(stats);
    }
    history
}

/// Fits only the classification layer on `subset`; returns a new model.
pub fn finetune_logits(
    model: &TrainedModel,
    subset: &DatasetManifest,
    preprocess: &PreprocessConfig,
    config: &FinetuneConfig,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    for r in &subset.records {
        if model.label_index(&r.condition_label).is_none() {
            return Err(TrainError::LabelMismatch(format!(
                "subset label {} unknown to the model",
                r.condition_label
            )));
        }
    }
    for label in &model.labels {
        if !subset.records.iter().any(|r| &r.condition_label == label) {
            return Err(TrainError::LabelMismatch(format!("subset has no samples of class {label}")));
        }
    }
    let mut out = model.clone();
    let history = with_pool(config.deterministic, || -> Result<_, TrainError> {
        let samples = load_samples(subset, &model.labels, preprocess)?;
        let embedded: Vec<(Array1<f64>, usize)> = samples
            .par_iter()
            .map(|(x, y)| (model.network.embed(x), *y))
            .collect();
        Ok(fit_classifier(&mut out.network.classifier, &embedded, config))
    })?;
    out.finetunes.push(FinetuneRecord {
        config: config.clone(),
        history,
        subset_digest: subset.records_digest(),
    });
    Ok(out)
}

fn fit_classifier(layer: &mut nn::Dense, samples: &[(Array1<f64>, usize)], config: &FinetuneConfig) -> Vec<EpochStats> {
    let mut adam = Adam::new(config.learning_rate, &[layer.weight.len(), layer.bias.len()]);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(samples.len(), config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut gw = vec![0.0; layer.weight.len()];
            let mut gb = vec![0.0; layer.bias.len()];
            for &i in batch {
                let (x, y) = &samples[i];
                let logits = layer.forward(x);
                let (loss, dlogits) = softmax_cross_entropy(&logits, *y);
                loss_sum += loss;
                correct += (argmax(&logits) == *y) as usize;
                layer.backward(x, &dlogits, &mut gw, &mut gb);
            }
            let scale = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= scale);
            let mut params = [
                layer.weight.as_slice_mut().expect("contiguous"),
                layer.bias.as_slice_mut().expect("contiguous"),
            ];
            adam.step(&mut params, &[gw, gb]);
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    history
}

/// Seeded pick of `min(per_class_count, class size)` records per class.
pub fn select_finetune_subset(
    manifest: &DatasetManifest,
    per_class_count: usize,
    seed: u64,
) -> Result<DatasetManifest, TrainError> {
    let mut chosen = Vec::new();
    for (label, mut records) in manifest.by_class() {
        if records.is_empty() {
            return Err(TrainError::LabelMismatch(format!("class {label} has no records")));
        }
        records.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        Rng::new(derive_seed(seed, &["finetune-subset", &label])).shuffle(&mut records);
        chosen.extend(records.into_iter().take(per_class_count).cloned());
    }
    Ok(manifest.with_records(chosen))
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    model: &'a TrainedModel,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: TrainedModel,
}

/// Path of the structured training history written next to a checkpoint.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.json")
}

/// Writes the checkpoint (JSON) and the training history beside it.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string(&CheckpointOut {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        model,
    })
    .map_err(|e| io(io::Error::new(io::ErrorKind::InvalidData, e)))?;
    fs::write(path, text).map_err(io)?;
    let history = serde_json::json!({
        "train": model.history,
        "finetunes": model.finetunes.iter().map(|f| &f.history).collect::<Vec<_>>(),
    });
    fs::write(history_path(path), serde_json::to_string_pretty(&history).expect("history serializes"))
        .map_err(io)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, TrainError> {
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = fs::read_to_string(path).map_err(io)?;
    let ckpt: CheckpointIn = serde_json::from_str(&text).map_err(|e| {
        if e.is_eof() {
            io(io::Error::new(io::ErrorKind::UnexpectedEof, e))
        } else if e.is_data() {
            TrainError::IncompatibleCheckpoint(e.to_string())
        } else {
            io(io::Error::new(io::ErrorKind::InvalidData, e))
        }
    })?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::IncompatibleCheckpoint(format!(
            "format {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
            ckpt.format, ckpt.version
        )));
    }
    let model = ckpt.model;
    check_architecture(&model)?;
    Ok(model)
}

fn check_architecture(model: &TrainedModel) -> Result<(), TrainError> {
    let reference = nn::build(&model.architecture, model.labels.len(), &mut Rng::new(0)).ok_or_else(|| {
        TrainError::IncompatibleCheckpoint(format!("unknown architecture {:?}", model.architecture))
    })?;
    let shape = |n: &Network| -> Vec<(String, usize)> {
        n.named_params().into_iter().map(|(k, v)| (k, v.len())).collect()
    };
    if shape(&reference) != shape(&model.network) || model.network.num_classes() != model.labels.len() {
        return Err(TrainError::IncompatibleCheckpoint(format!(
            "parameters do not match architecture {}",
            model.architecture
        )));
    }
    Ok(())
}
