use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dermsynth::data::{ingest_real, load_image, split_real, PreprocessConfig, RealDatasetSource};
use dermsynth::evaluation::{evaluate, grad_cam, overlay};
use dermsynth::experiment::{rebuild_report, run_experiment, BackendConfig, ExperimentConfig, ExperimentError};
use dermsynth::generation::{build_synthetic_dataset, BuildOptions};
use dermsynth::prompt::{enumerate_instantiations, parse_spec_file};
use dermsynth::training::{finetune_logits, load_model, save_model, select_finetune_subset, train};
use dermsynth::{DatasetManifest, Source};

#[derive(Parser)]
#[command(name = "dermsynth", version, about = "Synthetic skin-condition datasets and classifier experiments")]
struct Cli {
    /// Experiment config (TOML). Stage commands read their sections from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print prompt instantiations as JSON lines.
    CompilePrompts {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        per_condition: usize,
    },
    /// Generate a synthetic dataset into --out.
    Generate(GenerateArgs),
    /// Build a manifest from a class-per-folder image tree.
    Ingest {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        skip_unreadable: bool,
    },
    /// Split a real manifest into finetune.jsonl and eval.jsonl under --out.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train a classifier on a manifest; writes the checkpoint to --out.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Refit the classification layer on a seeded per-class subset.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Accuracy and confusion matrix of a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Grad-CAM overlay for one image.
    Cam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class; defaults to the prediction.
        #[arg(long)]
        class: Option<String>,
    },
    /// Full protocol comparison from --config.
    Run,
    /// Re-render comparison tables from a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Mock backend class-signal strength in [0, 1].
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the HTTP backend token.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long)]
    size: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

/// Exit 1 for validation problems, 2 when a stage fails at runtime.
enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e.exit_code() {
            1 => Failure::Validation(e.into()),
            _ => Failure::Stage(e.into()),
        }
    }
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn stage<E: Into<anyhow::Error>>(what: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Stage(e.into().context(what))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.base_seed = seed;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    config.train.deterministic |= config.deterministic;
    config.finetune.deterministic |= config.deterministic;
    Ok(config)
}

fn require_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| invalid("--out is required for this command"))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    if !path.is_file() {
        return Err(invalid(format!("manifest {} not found", path.display())));
    }
    DatasetManifest::read(path).map_err(invalid)
}

/// Real images get logo removal; synthetic ones do not.
fn preprocess_for(config: &ExperimentConfig, manifest: &DatasetManifest) -> PreprocessConfig {
    if manifest.records.iter().all(|r| r.source == Source::Synthetic) {
        config.synthetic_preprocess()
    } else {
        config.preprocess.clone()
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::CompilePrompts { spec, per_condition } => {
            let spec = spec.as_ref().or(config.spec_file.as_ref()).ok_or_else(|| invalid("--spec is required"))?;
            if *per_condition < 1 {
                return Err(invalid("--per-condition must be at least 1"));
            }
            let specs = parse_spec_file(spec).map_err(invalid)?;
            let mut text = String::new();
            for s in &specs {
                for item in enumerate_instantiations(s, *per_condition, config.base_seed) {
                    text.push_str(&serde_json::to_string(&item).expect("prompt serializes"));
                    text.push('\n');
                }
            }
            match &cli.out {
                Some(path) => fs::write(path, text).map_err(stage("writing prompts"))?,
                None => std::io::stdout().write_all(text.as_bytes()).map_err(stage("writing prompts"))?,
            }
        }
        Command::Generate(args) => {
            let out = require_out(&cli)?;
            let spec = args
                .spec
                .as_ref()
                .or(config.spec_file.as_ref())
                .ok_or_else(|| invalid("--spec is required"))?;
            let specs = parse_spec_file(spec).map_err(invalid)?;
            let backend = match (args.backend, &config.backend) {
                (Some(BackendKind::Http), _) | (None, BackendConfig::Http { .. }) => {
                    let mut b = config.backend.clone();
                    if let Some(endpoint) = &args.endpoint {
                        b = BackendConfig::Http {
                            endpoint: endpoint.clone(),
                            auth_env: args.auth_env.clone(),
                            timeout_secs: 120,
                            retries: 3,
                        };
                    }
                    if !matches!(b, BackendConfig::Http { .. }) {
                        return Err(invalid("--endpoint is required for the http backend"));
                    }
                    b
                }
                _ => {
                    let configured = match config.backend {
                        BackendConfig::Mock { strength } => strength,
                        _ => 1.0,
                    };
                    BackendConfig::Mock {
                        strength: args.strength.unwrap_or(configured),
                    }
                }
            };
            let backend = backend.build()?;
            let size = args.size;
            let options = BuildOptions {
                width: size.unwrap_or(config.synthetic.width),
                height: size.unwrap_or(config.synthetic.height),
                item_retries: config.synthetic.item_retries,
                retry_budget: config.synthetic.retry_budget,
                backend_params: config.synthetic.backend_params.clone(),
                prompt_seed: config.synthetic.prompt_seed,
            };
            let per_class = args.per_class.unwrap_or(config.synthetic.per_class);
            let manifest = build_synthetic_dataset(&specs, per_class, backend.as_ref(), out, config.base_seed, &options)
                .map_err(stage("generate"))?;
            println!("{} images in {}", manifest.len(), out.display());
        }
        Command::Ingest { root, skip_unreadable } => {
            let out = require_out(&cli)?;
            let root = match root {
                Some(r) => r.clone(),
                None if !config.real.root.as_os_str().is_empty() => config.real.root.clone(),
                None => return Err(invalid("--root is required")),
            };
            if !root.is_dir() {
                return Err(invalid(format!("dataset root {} not found", root.display())));
            }
            let root = root.canonicalize().map_err(stage("ingest"))?;
            let manifest = ingest_real(&RealDatasetSource {
                root,
                skip_unreadable: *skip_unreadable || config.real.skip_unreadable,
            })
            .map_err(stage("ingest"))?;
            manifest.write(out).map_err(stage("ingest"))?;
            for (label, n) in manifest.class_counts() {
                println!("{label}: {n}");
            }
        }
        Command::Split { manifest, fraction } => {
            let out = require_out(&cli)?;
            let m = read_manifest(manifest)?;
            let mut spec = config.split.clone();
            if let Some(f) = fraction {
                spec.finetune_fraction = *f;
            }
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let (ft, ev) = split_real(&m, &spec).map_err(stage("split"))?;
            fs::create_dir_all(out).map_err(stage("split"))?;
            ft.write(&out.join("finetune.jsonl")).map_err(stage("split"))?;
            ev.write(&out.join("eval.jsonl")).map_err(stage("split"))?;
            println!("finetune {} / eval {}", ft.len(), ev.len());
        }
        Command::Train { manifest, epochs, arch } => {
            let out = require_out(&cli)?;
            let m = read_manifest(manifest)?;
            let mut tc = config.train.clone();
            tc.seed = config.base_seed;
            tc.num_classes = m.class_labels.len();
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(a) = arch {
                tc.architecture = a.clone();
            }
            tc.validate().map_err(invalid)?;
            let model = train(&m, &preprocess_for(&config, &m), &tc).map_err(stage("train"))?;
            save_model(&model, out).map_err(stage("train"))?;
            if let Some(last) = model.history.last() {
                println!("final epoch: loss {:.4}, train accuracy {:.3}", last.loss, last.accuracy);
            }
        }
        Command::Finetune {
            model,
            manifest,
            per_class,
        } => {
            let out = require_out(&cli)?;
            let m = read_manifest(manifest)?;
            let base = load_model(model).map_err(invalid)?;
            let mut fc = config.finetune.clone();
            fc.seed = config.base_seed;
            if let Some(n) = per_class {
                fc.per_class_count = *n;
            }
            fc.validate().map_err(invalid)?;
            let subset = select_finetune_subset(&m, fc.per_class_count, config.base_seed).map_err(stage("finetune"))?;
            let tuned = finetune_logits(&base, &subset, &preprocess_for(&config, &m), &fc).map_err(stage("finetune"))?;
            save_model(&tuned, out).map_err(stage("finetune"))?;
            println!("finetuned on {} images", subset.len());
        }
        Command::Evaluate { model, manifest } => {
            let m = read_manifest(manifest)?;
            let model = load_model(model).map_err(invalid)?;
            let report = evaluate(&model, &m, &preprocess_for(&config, &m)).map_err(stage("evaluate"))?;
            print!("{}", report.render_table());
            if let Some(out) = &cli.out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                fs::write(out, json).map_err(stage("evaluate"))?;
            }
        }
        Command::Cam { model, image, class } => {
            let out = require_out(&cli)?;
            let model = load_model(model).map_err(invalid)?;
            if !image.is_file() {
                return Err(invalid(format!("image {} not found", image.display())));
            }
            let img = load_image(image).map_err(stage("cam"))?;
            let cam = grad_cam(&model, &img, &config.preprocess, class.as_deref()).map_err(stage("cam"))?;
            overlay(&cam, &img.to_rgb8()).save(out).map_err(stage("cam"))?;
            println!("class {}", cam.target_class);
        }
        Command::Run => {
            if cli.config.is_none() {
                return Err(invalid("run needs --config"));
            }
            let mut config = config;
            if let Some(out) = &cli.out {
                config.output_dir = out.clone();
            }
            let (dir, report) = run_experiment(&config)?;
            print!("{}", report.render());
            println!("results in {}", dir.display());
            if !report.failures.is_empty() {
                return Err(Failure::Stage(anyhow!("{} protocol run(s) failed", report.failures.len())));
            }
        }
        Command::Report { dir } => {
            let report = rebuild_report(dir)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}
