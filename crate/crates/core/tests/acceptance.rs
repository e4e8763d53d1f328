//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so criteria execute in order
//! and the summary prints even under `cargo test`'s output capture.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use dermsynth::data::{split_real, PreprocessConfig, SplitSpec};
use dermsynth::evaluation::{aggregate_runs, cam_from_features, grad_cam_tensor, normalize_confusion};
use dermsynth::experiment::{
    run_seeds, write_mock_real_pool, BackendConfig, Experiment, ExperimentConfig, ProtocolId, RealConfig,
    SyntheticConfig,
};
use dermsynth::generation::{build_synthetic_dataset, mock_backend, BuildOptions};
use dermsynth::nn::{self, Dense, Layer, Network, Tensor3};
use dermsynth::prompt::{enumerate_instantiations, parse_spec_file};
use dermsynth::seed::Rng;
use dermsynth::training::{finetune_logits, train, FinetuneConfig, TrainConfig};
use dermsynth::{ConditionSpec, DatasetManifest, FitzpatrickGrade, ImageRecord, SkinTone, Source};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

fn spec_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/conditions.toml")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ---------------------------------------------------------------------

fn pool(prefix: &'static str, min: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", min..5)
        .prop_map(move |v| v.into_iter().enumerate().map(|(i, s)| format!("{prefix}{i} {s}")).collect())
}

fn condition() -> impl Strategy<Value = ConditionSpec> {
    (
        "[a-z][a-z0-9_]{0,10}",
        pool("cue", 1),
        pool("feel", 0),
        pool("loc", 1),
        prop::sample::subsequence(FitzpatrickGrade::ALL.to_vec(), 1..=6),
    )
        .prop_map(|(label, cues, sensations, locations, grades)| ConditionSpec {
            display_name: label.clone(),
            label,
            visual_cues_pool: cues,
            sensation_pool: sensations,
            location_pool: locations,
            tones: grades.into_iter().map(SkinTone::default_for).collect(),
        })
}

fn criterion_1() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(condition(), 1usize..120, any::<u64>()), |(spec, n, seed)| {
            let items = enumerate_instantiations(&spec, n, seed);
            prop_assert_eq!(items.len(), n);
            let mut tone_counts = BTreeMap::new();
            for it in &items {
                let ix = &it.slot_indices;
                let mut parts = vec![spec.visual_cues_pool[ix.visual_cue].as_str()];
                match ix.sensation {
                    Some(s) => parts.push(spec.sensation_pool[s].as_str()),
                    None => prop_assert!(spec.sensation_pool.is_empty()),
                }
                parts.push(spec.location_pool[ix.location].as_str());
                parts.push(spec.tones[ix.tone].descriptor.as_str());
                prop_assert_eq!(&it.rendered, &parts.join(", "));
                *tone_counts.entry(ix.tone).or_insert(0usize) += 1;
            }
            let max = tone_counts.values().max().copied().unwrap_or(0);
            let min = if tone_counts.len() < spec.tones.len() {
                0
            } else {
                tone_counts.values().min().copied().unwrap_or(0)
            };
            prop_assert!(max - min <= 1, "tone counts {:?}", tone_counts);
            prop_assert_eq!(items, enumerate_instantiations(&spec, n, seed));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 cases".into())
}

// 2 ---------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let specs = parse_spec_file(&spec_path()).map_err(|e| e.to_string())?;
    let backend = mock_backend(1.0);
    let options = BuildOptions {
        width: 64,
        height: 64,
        ..BuildOptions::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let built: Vec<DatasetManifest> = dirs
        .iter()
        .map(|d| build_synthetic_dataset(&specs, 24, &backend, d.path(), 11, &options).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    ensure(built[0].len() == 96, || format!("{} records", built[0].len()))?;
    ensure(built[0].records == built[1].records, || "manifest records differ".into())?;
    ensure(built[0].records_digest() == built[1].records_digest(), || "digests differ".into())?;
    for r in &built[0].records {
        let a = std::fs::read(built[0].resolve(r)).map_err(|e| e.to_string())?;
        let b = std::fs::read(built[1].resolve(r)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{} differs between builds", r.relative_path))?;
        ensure(dermsynth::seed::sha256_hex(&a) == r.checksum, || "checksum mismatch".into())?;
    }
    Ok("96 images identical".into())
}

// 3 ---------------------------------------------------------------------

fn record(label: &str, i: usize) -> ImageRecord {
    ImageRecord {
        relative_path: format!("{label}/{i:04}.jpg"),
        condition_label: label.into(),
        source: Source::Real,
        prompt_rendered: String::new(),
        seed: None,
        skin_tone: None,
        location: None,
        backend_id: None,
        checksum: String::new(),
    }
}

fn criterion_3() -> Outcome {
    let sizes = [
        ("atopic_dermatitis", 115),
        ("scabies", 55),
        ("urticaria_hives", 66),
        ("warts", 131),
    ];
    let mut m = DatasetManifest::new(sizes.iter().map(|(l, _)| l.to_string()).collect(), Path::new("."));
    for (l, n) in sizes {
        m.records.extend((0..n).map(|i| record(l, i)));
    }
    m.sort();
    // floor(0.1 * n): 11.5, 5.5, 6.6, 13.1
    let expected = [11usize, 5, 6, 13];
    for seed in 0..100 {
        let spec = SplitSpec {
            seed,
            ..SplitSpec::default()
        };
        let (ft, ev) = split_real(&m, &spec).map_err(|e| e.to_string())?;
        let counts: Vec<usize> = ft.class_counts().into_values().collect();
        ensure(counts == expected, || format!("seed {seed}: finetune counts {counts:?}"))?;
        let a: HashSet<&str> = ft.records.iter().map(|r| r.relative_path.as_str()).collect();
        let b: HashSet<&str> = ev.records.iter().map(|r| r.relative_path.as_str()).collect();
        ensure(a.is_disjoint(&b) && a.len() + b.len() == m.len(), || format!("seed {seed}: not a partition"))?;
        let again = split_real(&m, &spec).map_err(|e| e.to_string())?;
        ensure(again == (ft, ev), || format!("seed {seed}: not deterministic"))?;
    }
    Ok("(11, 5, 6, 13) over 100 seeds".into())
}

// 4 ---------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let specs = parse_spec_file(&spec_path()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let options = BuildOptions {
        width: 32,
        height: 32,
        ..BuildOptions::default()
    };
    let data = build_synthetic_dataset(&specs, 6, &mock_backend(1.0), dir.path(), 4, &options)
        .map_err(|e| e.to_string())?;
    let pre = PreprocessConfig {
        target_size: (16, 16),
        ..PreprocessConfig::default()
    };
    let cfg = TrainConfig {
        architecture: "small_cnn".into(),
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        deterministic: true,
        ..TrainConfig::default()
    };
    let model = train(&data, &pre, &cfg).map_err(|e| e.to_string())?;
    let ft = FinetuneConfig {
        epochs: 5,
        learning_rate: 1e-2,
        deterministic: true,
        ..FinetuneConfig::default()
    };
    let tuned = finetune_logits(&model, &data, &pre, &ft).map_err(|e| e.to_string())?;
    let before = model.network.layer_checksums();
    let after = tuned.network.layer_checksums();
    let changed: Vec<&str> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    ensure(changed == ["classifier"], || format!("changed layers: {changed:?}"))?;

    let frozen = finetune_logits(
        &model,
        &data,
        &pre,
        &FinetuneConfig {
            learning_rate: 0.0,
            ..ft
        },
    )
    .map_err(|e| e.to_string())?;
    let bits = |n: &Network| -> Vec<u64> {
        n.named_params().iter().flat_map(|(_, p)| p.iter().map(|v| v.to_bits())).collect()
    };
    ensure(bits(&frozen.network) == bits(&model.network), || "lr = 0 changed parameters".into())?;
    Ok(format!("{} layers, only classifier changed", before.len()))
}

// 5 ---------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let n = normalize_confusion(&[vec![2, 0], vec![1, 1]]);
    ensure(n.matrix == vec![vec![1.0, 0.0], vec![0.5, 0.5]], || format!("{:?}", n.matrix))?;
    let a = aggregate_runs(&[63.0, 61.0, 65.0]).map_err(|e| e.to_string())?;
    ensure(a.mean == 63.0 && a.std == 2.0 && a.display() == "63.0 ± 2.0", || a.display())?;
    let mut rng = Rng::new(5);
    for case in 0..1000 {
        let k = 2 + rng.index(6);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| {
                let empty = rng.index(8) == 0;
                (0..k).map(|_| if empty { 0 } else { rng.index(500) as u64 }).collect()
            })
            .collect();
        let n = normalize_confusion(&counts);
        for (i, row) in n.matrix.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if counts[i].iter().sum::<u64>() == 0 {
                ensure(s == 0.0 && n.zero_rows.contains(&i), || format!("case {case}: empty row {i}"))?;
            } else {
                ensure((s - 1.0).abs() <= 1e-9, || format!("case {case}: row {i} sums to {s}"))?;
            }
        }
    }
    Ok("hand values exact, 1000 random matrices".into())
}

// 6 ---------------------------------------------------------------------

/// conv(2->3) -> relu -> GAP -> dense(3->4) -> relu -> dense(4->3)
fn fixture_network(seed: u64) -> Network {
    let mut rng = Rng::new(seed);
    Network {
        input_channels: 2,
        backbone: vec![Layer::Conv(nn::Conv2d::new(2, 3, &mut rng)), Layer::Relu],
        hidden: vec![Dense::new(3, 4, &mut rng)],
        classifier: Dense::new(4, 3, &mut rng),
    }
}

fn criterion_6() -> Outcome {
    // zero gradients
    let features = Tensor3::from_elem((3, 5, 5), 1.5);
    let (_, map) = cam_from_features(&features, &Tensor3::zeros((3, 5, 5)));
    ensure(map.iter().all(|v| *v == 0.0), || "zero gradients gave a nonzero map".into())?;

    // 2 channels, 2x2: weights (0.25, 0.75); sum = [[1, .75], [.25, 1]] / max
    let features = Tensor3::from_shape_vec((2, 2, 2), vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    let grads = Tensor3::from_shape_vec((2, 2, 2), vec![0.1, 0.2, 0.3, 0.4, 0.75, 0.75, 0.75, 0.75]).unwrap();
    let (w, map) = cam_from_features(&features, &grads);
    let hand_w = [0.25, 0.75];
    let hand_map = [[1.0, 0.75], [0.25, 1.0]];
    for k in 0..2 {
        ensure((w[k] - hand_w[k]).abs() < 1e-6, || format!("weight {k}: {}", w[k]))?;
    }
    for y in 0..2 {
        for x in 0..2 {
            ensure((map[[y, x]] - hand_map[y][x]).abs() < 1e-6, || format!("map {map:?}"))?;
        }
    }

    // channel weights against finite differences of the class score
    let mut rng = Rng::new(66);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let net = fixture_network(100 + trial);
        let x = Tensor3::from_shape_fn((2, 6, 6), |_| rng.normal());
        let feats = net.features(&x);
        let (c, h, wd) = feats.dim();
        for class in 0..3 {
            let (weights, _) = grad_cam_tensor(&net, &x, class);
            for k in 0..c {
                let eps = 1e-5;
                let shifted = |d: f64| {
                    let mut f = feats.clone();
                    f.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| v + d);
                    net.head(&f)[class]
                };
                let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps) / (h * wd) as f64;
                let err = (weights[k] - fd).abs() / fd.abs().max(1e-6);
                worst = worst.max(err);
                ensure(err < 1e-3, || format!("trial {trial} class {class} channel {k}: {} vs {fd}", weights[k]))?;
            }
        }
    }

    // shape and range over random inputs
    let net = nn::build("small_cnn", 4, &mut Rng::new(6)).expect("known architecture");
    for i in 0..100 {
        let (h, w) = (8 + 4 * (i % 4), 8 + 4 * ((i / 4) % 4));
        let x = Tensor3::from_shape_fn((3, h, w), |_| rng.normal());
        let (_, heat) = grad_cam_tensor(&net, &x, i % 4);
        ensure(heat.dim() == (h, w), || format!("input {i}: shape {:?}", heat.dim()))?;
        ensure(heat.iter().all(|v| (0.0..=1.0).contains(v)), || format!("input {i}: out of range"))?;
        let max = heat.fold(0.0f64, |a, &b| a.max(b));
        ensure(max == 0.0 || (max - 1.0).abs() < 1e-12, || format!("input {i}: max {max}"))?;
    }
    Ok(format!("worst finite-difference relative error {worst:.1e}"))
}

// 7 + 8 -----------------------------------------------------------------

const SYNTHETIC_SEED: u64 = 7;
const REAL_POOL_SEED: u64 = 7_000_007;

fn small_config(out: &Path, real_root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        spec_file: Some(spec_path()),
        backend: BackendConfig::Mock { strength: 1.0 },
        synthetic: SyntheticConfig {
            per_class: 200,
            width: 64,
            height: 64,
            ..SyntheticConfig::default()
        },
        real: RealConfig {
            root: real_root.to_path_buf(),
            skip_unreadable: false,
        },
        split: SplitSpec {
            finetune_fraction: 0.1,
            seed: 3,
            ..SplitSpec::default()
        },
        preprocess: PreprocessConfig {
            target_size: (32, 32),
            ..PreprocessConfig::default()
        },
        train: TrainConfig {
            architecture: "small_cnn".into(),
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: 16,
            ..TrainConfig::default()
        },
        finetune: FinetuneConfig {
            per_class_count: 10,
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 8,
            ..FinetuneConfig::default()
        },
        protocols: ProtocolId::ALL.to_vec(),
        n_runs: 5,
        base_seed: SYNTHETIC_SEED,
        output_dir: out.to_path_buf(),
        timestamped: false,
        deterministic: true,
        cam_samples_per_class: 2,
    }
}

struct EndToEnd {
    experiment: Experiment,
    report: dermsynth::experiment::ComparisonReport,
    config: ExperimentConfig,
    _dir: tempfile::TempDir,
}

fn end_to_end() -> Result<EndToEnd, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let real_root = dir.path().join("real");
    write_mock_real_pool(&spec_path(), 60, 1.0, 64, REAL_POOL_SEED, &real_root).map_err(|e| e.to_string())?;
    let config = small_config(&dir.path().join("out_a"), &real_root);
    let mut experiment = Experiment::prepare(config.clone()).map_err(|e| e.to_string())?;
    let report = experiment.run_all().map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        experiment,
        report,
        config,
        _dir: dir,
    })
}

fn criterion_7(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e = e2e.as_ref().map_err(|m| m.clone())?;
    let r = &e.report;
    ensure(r.failures.is_empty(), || format!("failures: {:?}", r.failures))?;
    let p1 = r.column(ProtocolId::PretrainedLti).ok_or("no P1 column")?;
    let p2 = r.column(ProtocolId::PretrainedFinetune).ok_or("no P2 column")?;
    let p3 = r.column(ProtocolId::PretrainedLtiFinetune).ok_or("no P3 column")?;
    let summary = format!("P1 {} | P2 {} | P3 {}", p1.display(), p2.display(), p3.display());
    ensure(p1.n_runs == 5 && p2.n_runs == 5 && p3.n_runs == 5, || format!("run counts: {summary}"))?;
    ensure(p1.values.iter().all(|v| *v >= 90.0), || format!("P1 below 90%: {:?}", p1.values))?;
    ensure(p3.mean >= p2.mean, || format!("mean(P3) < mean(P2): {summary}"))?;
    Ok(summary)
}

fn criterion_8(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e = e2e.as_ref().map_err(|m| m.clone())?;
    let exp = &e.experiment;
    let synthetic_digest = exp.synthetic.as_ref().ok_or("no synthetic manifest")?.records_digest();
    let eval_digest = exp.eval.records_digest();

    // the real split is a partition and never overlaps the synthetic pool
    let ft: HashSet<&str> = exp.finetune_pool.records.iter().map(|r| r.checksum.as_str()).collect();
    let ev: HashSet<&str> = exp.eval.records.iter().map(|r| r.checksum.as_str()).collect();
    let syn: HashSet<&str> = exp
        .synthetic
        .as_ref()
        .unwrap()
        .records
        .iter()
        .map(|r| r.checksum.as_str())
        .collect();
    ensure(ft.is_disjoint(&ev), || "finetune pool overlaps eval".into())?;
    ensure(syn.is_disjoint(&ev) && syn.is_disjoint(&ft), || "synthetic images appear in the real pool".into())?;

    for run in &e.report.runs {
        let p = &run.provenance;
        let tag = format!("run {} {}", run.run_index, run.protocol.name());
        let (run_seed, seeds) = run_seeds(e.config.base_seed, run.run_index);
        ensure(p.run_seed == run_seed && p.seeds == seeds, || format!("{tag}: seed chain differs"))?;
        let roles = p.read_roles();
        let expected: &[&str] = match run.protocol {
            ProtocolId::PretrainedLti => &["synthetic_train", "real_eval"],
            ProtocolId::PretrainedFinetune => &["real_finetune", "real_eval"],
            ProtocolId::PretrainedLtiFinetune => &["synthetic_train", "real_finetune", "real_eval"],
        };
        ensure(roles == expected, || format!("{tag}: read {roles:?}"))?;
        for input in &p.inputs {
            match input.role.as_str() {
                "synthetic_train" => ensure(input.records_digest == synthetic_digest, || format!("{tag}: synthetic digest"))?,
                "real_eval" => ensure(input.records_digest == eval_digest, || format!("{tag}: eval digest"))?,
                _ => {}
            }
        }
        if run.protocol == ProtocolId::PretrainedLtiFinetune {
            let p1 = e
                .report
                .runs
                .iter()
                .find(|r| r.protocol == ProtocolId::PretrainedLti && r.run_index == run.run_index)
                .ok_or_else(|| format!("{tag}: no matching P1 run"))?;
            ensure(p.synthetic_checkpoint.as_ref() == Some(&p1.provenance.model_checksum), || {
                format!("{tag}: did not start from the evaluated P1 model")
            })?;
            let p2 = e
                .report
                .runs
                .iter()
                .find(|r| r.protocol == ProtocolId::PretrainedFinetune && r.run_index == run.run_index)
                .ok_or_else(|| format!("{tag}: no matching P2 run"))?;
            let subset = |r: &dermsynth::experiment::ProtocolRun| {
                r.provenance.inputs.iter().find(|i| i.role == "real_finetune").cloned()
            };
            ensure(subset(run) == subset(p2), || format!("{tag}: P2 and P3 used different subsets"))?;
        }
    }

    // replay in a fresh output directory
    let mut config = e.config.clone();
    config.output_dir = e.experiment.out_dir.with_file_name("out_b");
    let mut replay = Experiment::prepare(config).map_err(|e| e.to_string())?;
    let again = replay.run_all().map_err(|e| e.to_string())?;
    let numbers = |r: &dermsynth::experiment::ComparisonReport| {
        r.runs
            .iter()
            .map(|x| (x.protocol, x.run_index, x.report.clone(), x.provenance.clone()))
            .collect::<Vec<_>>()
    };
    ensure(numbers(&again) == numbers(&e.report), || "replay produced different reports".into())?;
    ensure(again.columns == e.report.columns, || "replay produced different aggregates".into())?;
    Ok(format!("{} protocol runs replayed exactly", again.runs.len()))
}

// -----------------------------------------------------------------------

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    print_line(id, name, limit, start.elapsed(), outcome)
}

fn print_line(id: usize, name: &str, limit: Duration, took: Duration, outcome: Outcome) -> bool {
    let (ok, detail) = match outcome {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {id} [{name}]: {} ({took:.1?}) {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() {
    let filter: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |id: usize| filter.as_ref().is_none_or(|f| f.contains(&id));
    let secs = Duration::from_secs;
    let mut results = Vec::new();
    if wanted(1) {
        results.push(report(1, "prompt grammar", secs(10), criterion_1));
    }
    if wanted(2) {
        results.push(report(2, "mock reproducibility", secs(30), criterion_2));
    }
    if wanted(3) {
        results.push(report(3, "split arithmetic", secs(5), criterion_3));
    }
    if wanted(4) {
        results.push(report(4, "finetune scope", secs(120), criterion_4));
    }
    if wanted(5) {
        results.push(report(5, "confusion and aggregates", secs(5), criterion_5));
    }
    if wanted(6) {
        results.push(report(6, "grad-cam", secs(60), criterion_6));
    }
    if wanted(7) || wanted(8) {
        let start = Instant::now();
        let e2e = end_to_end();
        let outcome = criterion_7(&e2e);
        let took = start.elapsed();
        if wanted(7) {
            results.push(print_line(7, "end-to-end ordering", secs(20 * 60), took, outcome));
        }
        if wanted(8) {
            results.push(report(8, "isolation and replay", Duration::MAX, || criterion_8(&e2e)));
        }
    }
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
