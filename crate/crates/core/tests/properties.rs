use std::collections::HashSet;
use std::path::Path;

use dermsynth::data::{split_real, SplitSpec};
use dermsynth::evaluation::{aggregate_runs, upsample_bilinear, EvalReport};
use dermsynth::seed::{derive_seed, Rng};
use dermsynth::{DatasetManifest, FitzpatrickGrade, ImageRecord, SkinTone, Source};
use ndarray::Array2;
use proptest::prelude::*;

fn record(label: &str, i: usize, source: Source) -> ImageRecord {
    let synthetic = source == Source::Synthetic;
    ImageRecord {
        relative_path: format!("{label}/{i:05}.png"),
        condition_label: label.into(),
        source,
        prompt_rendered: if synthetic { format!("prompt {i}") } else { String::new() },
        seed: synthetic.then_some(i as u64),
        skin_tone: synthetic.then(|| SkinTone::default_for(FitzpatrickGrade::ALL[i % 6])),
        location: None,
        backend_id: synthetic.then(|| "mock(strength=1)".into()),
        checksum: format!("{:064x}", derive_seed(i as u64, &[label])),
    }
}

fn manifest(sizes: &[usize], source: Source) -> DatasetManifest {
    let labels: Vec<String> = (0..sizes.len()).map(|i| format!("class_{i}")).collect();
    let mut m = DatasetManifest::new(labels.clone(), Path::new("."));
    for (l, n) in labels.iter().zip(sizes) {
        m.records.extend((0..*n).map(|i| record(l, i, source)));
    }
    m.sort();
    m
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn stratified_split_counts_and_partition(
        sizes in prop::collection::vec(2usize..150, 1..6),
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let m = manifest(&sizes, Source::Real);
        let spec = SplitSpec { finetune_fraction: fraction, seed, ..SplitSpec::default() };
        // a class must be large enough for its fractional share to reach one item
        if sizes.iter().any(|n| fraction * (*n as f64) < 1.0 - 1e-9) {
            prop_assert!(split_real(&m, &spec).is_err());
            return Ok(());
        }
        let (ft, ev) = split_real(&m, &spec).unwrap();
        for (i, n) in sizes.iter().enumerate() {
            let label = format!("class_{i}");
            let expected = (fraction * *n as f64 + 1e-9).floor() as usize;
            prop_assert_eq!(ft.class_counts().get(&label).copied().unwrap_or(0), expected);
            prop_assert_eq!(ev.class_counts().get(&label).copied().unwrap_or(0), n - expected);
        }
        let a: HashSet<_> = ft.records.iter().map(|r| &r.relative_path).collect();
        let b: HashSet<_> = ev.records.iter().map(|r| &r.relative_path).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), m.len());
        prop_assert_eq!(split_real(&m, &spec).unwrap(), (ft, ev));
    }

    #[test]
    fn manifest_survives_write_and_read(
        sizes in prop::collection::vec(1usize..20, 1..5),
        synthetic in any::<bool>(),
        shuffle_seed in any::<u64>(),
    ) {
        let mut m = manifest(&sizes, if synthetic { Source::Synthetic } else { Source::Real });
        Rng::new(shuffle_seed).shuffle(&mut m.records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        m.sort();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(&back.class_labels, &m.class_labels);
        prop_assert_eq!(back.records_digest(), m.records_digest());
    }

    #[test]
    fn aggregate_matches_textbook_formula(values in prop::collection::vec(0.0f64..100.0, 2..12)) {
        let a = aggregate_runs(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        prop_assert!((a.mean - mean).abs() < 1e-9);
        prop_assert!((a.std - var.sqrt()).abs() < 1e-9);
        prop_assert_eq!(a.n_runs, values.len());
    }

    #[test]
    fn report_accuracy_is_trace_over_total(
        counts in prop::collection::vec(prop::collection::vec(0u64..40, 3), 3),
    ) {
        let r = EvalReport::from_counts(counts.clone(), vec!["a".into(), "b".into(), "c".into()]);
        let total: u64 = counts.iter().flatten().sum();
        let trace = counts[0][0] + counts[1][1] + counts[2][2];
        if total > 0 {
            prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-12);
        }
        for (i, row) in r.confusion_normalized.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if counts[i].iter().sum::<u64>() > 0 {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn upsampling_stays_within_input_range(
        h in 1usize..6, w in 1usize..6, oh in 1usize..40, ow in 1usize..40, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let map = Array2::from_shape_fn((h, w), |_| rng.unit());
        let up = upsample_bilinear(&map, oh, ow);
        let lo = map.fold(f64::MAX, |a, &b| a.min(b));
        let hi = map.fold(f64::MIN, |a, &b| a.max(b));
        prop_assert_eq!(up.dim(), (oh, ow));
        prop_assert!(up.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn derived_seeds_depend_on_every_part(parent in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assume!(a != b);
        prop_assert_eq!(derive_seed(parent, &[&a]), derive_seed(parent, &[&a]));
        prop_assert_ne!(derive_seed(parent, &[&a]), derive_seed(parent, &[&b]));
        prop_assert_ne!(derive_seed(parent, &[&a, &b]), derive_seed(parent, &[&b, &a]));
    }
}
