//! Real-image ingestion, preprocessing and finetune/eval splitting.

mod inpaint;

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, DynamicImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, ImageRecord, Source};
use crate::prompt::is_valid_label;
use crate::seed::{derive_seed, sha256_hex, Rng};

pub use inpaint::{harmonic_fill, MaskRegion};

/// ImageNet channel statistics, the usual convention for pretrained backbones.
pub const IMAGENET_MEANS: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STDS: [f64; 3] = [0.229, 0.224, 0.225];

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("class folder {0} contains no images")]
    EmptyClass(String),
    #[error("class folder name {0:?} is not a valid label ([a-z0-9_]+)")]
    InvalidLabel(String),
    #[error("no class folders under {0}")]
    NoClasses(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("mask {mask:?} exceeds image bounds {width}x{height}")]
    MaskOutOfBounds {
        mask: MaskRegion,
        width: u32,
        height: u32,
    },
    #[error("class {label} has {size} items, needs at least {needed}")]
    InsufficientClassSize {
        label: String,
        size: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealDatasetSource {
    pub root: PathBuf,
    /// Skip undecodable files with a warning instead of failing.
    pub skip_unreadable: bool,
}

impl RealDatasetSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RealDatasetSource {
            root: root.into(),
            skip_unreadable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub finetune_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
    pub min_per_class: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            finetune_fraction: 0.10,
            seed: 0,
            stratified: true,
            min_per_class: 1,
        }
    }
}

impl SplitSpec {
    /// Finetune items drawn from a class of `size` items.
    pub fn finetune_count(&self, size: usize) -> usize {
        // the epsilon guards products like 0.1 * 130 landing just below an integer
        let floor = (self.finetune_fraction * size as f64 + 1e-9).floor() as usize;
        floor.max(self.min_per_class)
    }

    /// Smallest class size the stratified split accepts.
    pub fn min_class_size(&self) -> usize {
        (self.min_per_class as f64 / self.finetune_fraction - 1e-9).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LogoRemoval {
    None,
    MaskInpaint { mask: Option<MaskRegion> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// (width, height)
    pub target_size: (u32, u32),
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
    pub logo_removal: LogoRemoval,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: (224, 224),
            channel_means: IMAGENET_MEANS,
            channel_stds: IMAGENET_STDS,
            logo_removal: LogoRemoval::None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(DataError::InvalidConfig("target size must be positive".into()));
        }
        if self.channel_stds.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(DataError::InvalidConfig("channel stds must be positive".into()));
        }
        Ok(())
    }

    /// Same config with logo removal disabled.
    pub fn without_logo_removal(&self) -> Self {
        PreprocessConfig {
            logo_removal: LogoRemoval::None,
            ..self.clone()
        }
    }
}

/// Builds a manifest from `<root>/<label>/*.{jpg,jpeg,png}`.
pub fn ingest_real(source: &RealDatasetSource) -> Result<DatasetManifest, DataError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&source.root).map_err(io(&source.root))? {
        let entry = entry.map_err(io(&source.root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().is_dir() {
            continue;
        }
        if !is_valid_label(&name) {
            return Err(DataError::InvalidLabel(name));
        }
        class_dirs.push((name, entry.path()));
    }
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(source.root.display().to_string()));
    }
    class_dirs.sort();

    let labels = class_dirs.iter().map(|(l, _)| l.clone()).collect();
    let mut manifest = DatasetManifest::new(labels, &source.root);
    for (label, dir) in &class_dirs {
        let mut files: Vec<String> = Vec::new();
        for entry in fs::read_dir(dir).map_err(io(dir))? {
            let entry = entry.map_err(io(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let ext = Path::new(&name)
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !name.starts_with('.') && entry.path().is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                files.push(name);
            }
        }
        files.sort();
        let mut kept = 0;
        for name in files {
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(io(&path))?;
            if let Err(e) = image::load_from_memory(&bytes) {
                if source.skip_unreadable {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    continue;
                }
                return Err(DataError::UnreadableImage {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
            manifest.records.push(ImageRecord {
                relative_path: format!("{label}/{name}"),
                condition_label: label.clone(),
                source: Source::Real,
                prompt_rendered: String::new(),
                seed: None,
                skin_tone: None,
                location: None,
                backend_id: None,
                checksum: sha256_hex(&bytes),
            });
            kept += 1;
        }
        if kept == 0 {
            return Err(DataError::EmptyClass(dir.display().to_string()));
        }
    }
    manifest.sort();
    Ok(manifest)
}

/// Applies the configured logo removal. Pixels outside the mask are untouched.
pub fn remove_logo(img: &RgbImage, config: &PreprocessConfig) -> Result<RgbImage, DataError> {
    match &config.logo_removal {
        LogoRemoval::None | LogoRemoval::MaskInpaint { mask: None } => Ok(img.clone()),
        LogoRemoval::MaskInpaint { mask: Some(mask) } => {
            let (width, height) = img.dimensions();
            if !mask.fits(width, height) {
                return Err(DataError::MaskOutOfBounds {
                    mask: *mask,
                    width,
                    height,
                });
            }
            Ok(harmonic_fill(img, *mask))
        }
    }
}

/// Splits into (finetune, eval). Both keep the input's header.
pub fn split_real(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(spec.finetune_fraction > 0.0 && spec.finetune_fraction < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "finetune_fraction {} not in (0, 1)",
            spec.finetune_fraction
        )));
    }
    let mut finetune = Vec::new();
    let mut eval = Vec::new();
    if spec.stratified {
        let needed = spec.min_class_size();
        for (label, records) in manifest.by_class() {
            if records.len() < needed {
                return Err(DataError::InsufficientClassSize {
                    label,
                    size: records.len(),
                    needed,
                });
            }
            let mut order: Vec<&ImageRecord> = records;
            order.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
            Rng::new(derive_seed(spec.seed, &["split", &label])).shuffle(&mut order);
            let take = spec.finetune_count(order.len());
            finetune.extend(order[..take].iter().map(|r| (*r).clone()));
            eval.extend(order[take..].iter().map(|r| (*r).clone()));
        }
    } else {
        let mut order: Vec<&ImageRecord> = manifest.records.iter().collect();
        order.sort_by(|a, b| {
            (&a.condition_label, &a.relative_path).cmp(&(&b.condition_label, &b.relative_path))
        });
        Rng::new(derive_seed(spec.seed, &["split"])).shuffle(&mut order);
        let take = ((spec.finetune_fraction * order.len() as f64 + 1e-9).floor() as usize).max(1);
        finetune.extend(order[..take].iter().map(|r| (*r).clone()));
        eval.extend(order[take..].iter().map(|r| (*r).clone()));
    }
    Ok((manifest.with_records(finetune), manifest.with_records(eval)))
}

/// Logo removal, bilinear resize, scaling to [0, 1] and per-channel
/// standardization. Output shape is (3, height, width).
pub fn preprocess(img: &DynamicImage, config: &PreprocessConfig) -> Result<Array3<f64>, DataError> {
    config.validate()?;
    let rgb = remove_logo(&img.to_rgb8(), config)?;
    let (tw, th) = config.target_size;
    let resized = if rgb.dimensions() == (tw, th) {
        rgb
    } else {
        image::imageops::resize(&rgb, tw, th, FilterType::Triangle)
    };
    let mut out = Array3::<f64>::zeros((3, th as usize, tw as usize));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] =
                (px[c] as f64 / 255.0 - config.channel_means[c]) / config.channel_stds[c];
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn preprocess_file(path: &Path, config: &PreprocessConfig) -> Result<Array3<f64>, DataError> {
    preprocess(&load_image(path)?, config)
}
