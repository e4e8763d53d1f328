//! Text-to-image backends and the synthetic dataset builder.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::manifest::{DatasetManifest, ImageRecord, ManifestError, Source, MANIFEST_FILE};
use crate::prompt::{enumerate_instantiations, ConditionSpec, PromptInstantiation};
use crate::seed::{derive_seed, sha256_hex};

pub use http::{http_backend, HttpBackend, HttpBackendConfig, Secret};
pub use mock::{mock_backend, MockBackend};

pub const DEFAULT_IMAGE_SIZE: u32 = 256;
pub const MIN_IMAGE_SIZE: u32 = 32;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend rejected prompt {prompt:?}: {reason}")]
    BackendRejected { prompt: String, reason: String },
    #[error("backend returned undecodable image: {0}")]
    DecodeError(String),
    #[error("backend authentication failed: {0}")]
    AuthError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("generation stopped after {failures} backend failures; partial manifest at {manifest}: {cause}")]
    Incomplete {
        manifest: PathBuf,
        failures: usize,
        cause: Box<GenerationError>,
    },
}

impl GenerationError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerationError::BackendUnavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub instantiation: PromptInstantiation,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Passed through to the backend untouched.
    pub backend_params: BTreeMap<String, String>,
}

impl GenerationRequest {
    pub fn new(instantiation: PromptInstantiation, seed: u64) -> Self {
        GenerationRequest {
            instantiation,
            seed,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            backend_params: BTreeMap::new(),
        }
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.width < MIN_IMAGE_SIZE || self.height < MIN_IMAGE_SIZE {
            return Err(GenerationError::InvalidRequest(format!(
                "image size {}x{} below minimum {MIN_IMAGE_SIZE}",
                self.width, self.height
            )));
        }
        if self.instantiation.rendered.is_empty() {
            return Err(GenerationError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }
}

/// A text-to-image service.
///
/// Implementations must be callable from several threads at once unless
/// [`max_concurrency`](GenerationBackend::max_concurrency) returns 1.
pub trait GenerationBackend: Send + Sync {
    /// Stable identifier recorded in manifests.
    fn id(&self) -> String;

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    /// Encoded image bytes for one request.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<u8>, GenerationError>;
}

/// Calls the backend and checks that the result decodes to the requested size.
pub fn backend_generate(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest,
) -> Result<Vec<u8>, GenerationError> {
    request.validate()?;
    let bytes = backend.generate(request)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| GenerationError::DecodeError(e.to_string()))?;
    if img.width() != request.width || img.height() != request.height {
        return Err(GenerationError::DecodeError(format!(
            "expected {}x{}, got {}x{}",
            request.width,
            request.height,
            img.width(),
            img.height()
        )));
    }
    Ok(bytes)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub width: u32,
    pub height: u32,
    /// Retries of the same seed after a retryable failure.
    pub item_retries: usize,
    /// Total failed backend calls tolerated across the whole build.
    pub retry_budget: usize,
    pub backend_params: BTreeMap<String, String>,
    /// Seed for prompt enumeration; `None` uses the generation seed.
    pub prompt_seed: Option<u64>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            item_retries: 3,
            retry_budget: 64,
            backend_params: BTreeMap::new(),
            prompt_seed: None,
        }
    }
}

/// Seed for generation attempt `round` of item `index` of class `label`.
/// Round 0 is the primary seed; later rounds are seed advances.
pub fn item_seed(seed: u64, label: &str, index: usize, round: usize) -> u64 {
    let index = index.to_string();
    if round == 0 {
        derive_seed(seed, &[label, &index])
    } else {
        derive_seed(seed, &[label, &index, "advance", &round.to_string()])
    }
}

pub fn image_relative_path(label: &str, index: usize) -> String {
    format!("{label}/{label}_{index:05}.png")
}

struct BuildState {
    failures: AtomicUsize,
    abort: AtomicBool,
}

/// Generates `per_class` images per condition under `out_dir/<label>/` and
/// writes `out_dir/manifest.jsonl`.
pub fn build_synthetic_dataset(
    specs: &[ConditionSpec],
    per_class: usize,
    backend: &dyn GenerationBackend,
    out_dir: &Path,
    seed: u64,
    options: &BuildOptions,
) -> Result<DatasetManifest, GenerationError> {
    if per_class == 0 {
        return Err(GenerationError::InvalidRequest("per_class must be at least 1".into()));
    }
    if specs.is_empty() {
        return Err(GenerationError::InvalidRequest("no condition specs".into()));
    }
    let mut labels: Vec<String> = specs.iter().map(|s| s.label.clone()).collect();
    {
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(GenerationError::InvalidRequest("duplicate condition labels".into()));
        }
    }
    labels.sort();

    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| GenerationError::Io { path, source }
    };
    for spec in specs {
        let dir = out_dir.join(&spec.label);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
    }

    let prompt_seed = options.prompt_seed.unwrap_or(seed);
    let jobs: Vec<(usize, PromptInstantiation)> = specs
        .iter()
        .flat_map(|spec| {
            enumerate_instantiations(spec, per_class, prompt_seed)
                .into_iter()
                .enumerate()
        })
        .collect();

    let state = BuildState {
        failures: AtomicUsize::new(0),
        abort: AtomicBool::new(false),
    };
    let threads = backend
        .max_concurrency()
        .clamp(1, rayon::current_num_threads().max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| GenerationError::BackendUnavailable(e.to_string()))?;

    let results: Vec<Result<ImageRecord, GenerationError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(index, inst)| {
                generate_item(backend, inst, *index, seed, out_dir, options, &state)
            })
            .collect()
    });

    let mut manifest = DatasetManifest::new(labels, out_dir);
    let mut first_error = None;
    for result in results {
        match result {
            Ok(record) => manifest.records.push(record),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    manifest.sort();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if let Some(err) = first_error {
        if !matches!(
            err,
            GenerationError::BackendUnavailable(_)
                | GenerationError::BackendRejected { .. }
                | GenerationError::DecodeError(_)
        ) {
            return Err(err);
        }
        manifest.complete = false;
        manifest.write(&manifest_path)?;
        return Err(GenerationError::Incomplete {
            manifest: manifest_path,
            failures: state.failures.load(Ordering::SeqCst),
            cause: Box::new(err),
        });
    }
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

fn generate_item(
    backend: &dyn GenerationBackend,
    inst: &PromptInstantiation,
    index: usize,
    seed: u64,
    out_dir: &Path,
    options: &BuildOptions,
    state: &BuildState,
) -> Result<ImageRecord, GenerationError> {
    let label = &inst.condition_label;
    let mut last_err = None;
    for round in 0.. {
        let item = item_seed(seed, label, index, round);
        let mut request = GenerationRequest::new(inst.clone(), item).with_size(options.width, options.height);
        request.backend_params = options.backend_params.clone();
        for attempt in 0..=options.item_retries {
            if state.abort.load(Ordering::SeqCst) {
                return Err(last_err.unwrap_or_else(|| {
                    GenerationError::BackendUnavailable("build aborted".into())
                }));
            }
            match backend_generate(backend, &request) {
                Ok(bytes) => {
                    let relative_path = image_relative_path(label, index);
                    let path = out_dir.join(&relative_path);
                    fs::write(&path, &bytes).map_err(|source| GenerationError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    return Ok(ImageRecord {
                        relative_path,
                        condition_label: label.clone(),
                        source: Source::Synthetic,
                        prompt_rendered: inst.rendered.clone(),
                        seed: Some(item),
                        skin_tone: Some(inst.slots.skin_tone.clone()),
                        location: Some(inst.slots.physical_location.clone()),
                        backend_id: Some(backend.id()),
                        checksum: sha256_hex(&bytes),
                    });
                }
                Err(e @ (GenerationError::InvalidRequest(_) | GenerationError::AuthError(_))) => {
                    state.abort.store(true, Ordering::SeqCst);
                    return Err(e);
                }
                Err(e) => {
                    let failures = state.failures.fetch_add(1, Ordering::SeqCst) + 1;
                    match &e {
                        GenerationError::BackendRejected { prompt, reason } => {
                            log::warn!("backend rejected prompt {prompt:?} (seed {item}): {reason}")
                        }
                        other => log::warn!(
                            "{label}[{index}] seed {item} attempt {}: {other}",
                            attempt + 1
                        ),
                    }
                    let retryable = e.is_retryable();
                    last_err = Some(e);
                    if failures > options.retry_budget {
                        state.abort.store(true, Ordering::SeqCst);
                        return Err(last_err.expect("error recorded"));
                    }
                    if !retryable {
                        break;
                    }
                }
            }
        }
        log::info!("{label}[{index}]: advancing seed after round {round}");
    }
    unreachable!("seed rounds are unbounded")
}
