use proptest::prelude::*;
use tendency_core::data::GeneratorConfig;
use tendency_core::harness::{
    attention_fidelity, dump_attention, efficiency_report, mean_attention, pre_post_from, run_experiment, run_variant,
    spearman, sparse_sweep, ExperimentSpec, HarnessError, VariantReport,
};
use tendency_core::model::{Model, ModelConfig, Variant};
use tendency_core::train::TrainConfig;

fn tiny(tokens: usize) -> ExperimentSpec {
    let generator = GeneratorConfig {
        num_samples: 240,
        num_annotators: 3,
        num_classes: 3,
        num_tokens: tokens,
        raw_dim: 4,
        correlation_groups: vec![vec![0, 1], vec![2]],
        noise_rate: 0.1,
        decision_jitter: 0.2,
        seed: 0,
    };
    ExperimentSpec {
        generator,
        model: ModelConfig { hidden_dim: 8, num_heads: 2, ffn_dim: 16, ..ModelConfig::default() },
        train: TrainConfig { max_epochs: 3, patience: 2, batch_size: 32, base_lr: 1e-3, ..TrainConfig::default() },
        split: (0.7, 0.15, 0.15),
        variants: vec![Variant::Full, Variant::NoSelfAttn],
        sparsity_rates: vec![0.0],
        seeds: vec![3],
        jobs: 1,
    }
}

/// Average ranks by counting, independent of the sort-based implementation.
fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = (0..a.len()).map(|i| (ra[i] - ma) * (rb[i] - mb)).sum();
    let sa: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
    let sb: f64 = rb.iter().map(|x| (x - mb).powi(2)).sum::<f64>().sqrt();
    if sa == 0.0 || sb == 0.0 {
        0.0
    } else {
        cov / (sa * sb)
    }
}

proptest! {
    #[test]
    fn spearman_matches_counting_oracle(pairs in proptest::collection::vec((0u8..5, 0u8..5), 2..12)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let got = spearman(&a, &b);
        prop_assert!((got - oracle_spearman(&a, &b)).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&got));
        prop_assert!((got - spearman(&b, &a)).abs() < 1e-12);
    }
}

#[test]
fn rate_zero_row_equals_plain_run() {
    let spec = tiny(4);
    let report = sparse_sweep(&spec, &[0.0, 0.4]).unwrap();
    let seed = spec.seeds[0];
    let splits = spec.splits(seed).unwrap();
    for &v in &spec.variants {
        let plain = run_variant(v, &splits, &spec.model_config(seed), &spec.train_config(seed, v)).unwrap();
        let row = report.row(v, seed, 0.0).unwrap();
        assert_eq!(row.report, plain.report);
        assert_eq!(row.best_val_loss.to_bits(), plain.history.best_val_loss().to_bits());
        assert_eq!(row.relative_drop, Some(0.0));
        let sparse = report.row(v, seed, 0.4).unwrap();
        let expected = (row.accuracy() - sparse.accuracy()) / row.accuracy();
        assert_eq!(sparse.relative_drop, Some(expected));
    }
    assert_eq!(report.aggregates.len(), 4);
}

#[test]
fn rows_do_not_depend_on_sweep_context_or_jobs() {
    let alone = run_experiment(&ExperimentSpec { seeds: vec![3], ..tiny(4) }).unwrap();
    let both = run_experiment(&ExperimentSpec { seeds: vec![1, 3], jobs: 3, ..tiny(4) }).unwrap();
    for r in &alone.rows {
        assert_eq!(both.row(r.variant, r.seed, r.sparsity_rate).unwrap().report, r.report);
    }
    let serial = run_experiment(&ExperimentSpec { seeds: vec![1, 3], ..tiny(4) }).unwrap();
    assert_eq!(serial.to_csv(), both.to_csv());
    assert_eq!(serial.aggregates_csv(), both.aggregates_csv());
    assert_eq!(both.rows.len(), 4);
    assert!(both.summary().contains("full"));
}

#[test]
fn consensus_rows_carry_a_consensus_report() {
    let spec = ExperimentSpec { variants: vec![Variant::PooledPremv, Variant::Full], ..tiny(4) };
    let report = run_experiment(&spec).unwrap();
    let pooled = report.row(Variant::PooledPremv, 3, 0.0).unwrap();
    assert!(matches!(pooled.report, VariantReport::Consensus(_)));
    assert!(pooled.report.eval().is_none());
    let csv = report.to_csv();
    let line = csv.lines().find(|l| l.starts_with("pooledPremv")).unwrap();
    assert_eq!(line.split(',').count(), 12);
    let agg = report.aggregates.iter().find(|a| a.variant == Variant::PooledPremv).unwrap();
    assert!(agg.dic_mean.is_none());
}

#[test]
fn pre_post_scores_are_accuracies_and_reject_swapped_models() {
    let spec = tiny(4);
    let splits = spec.splits(3).unwrap();
    let cfg = spec.model_config(3);
    let pooled = run_variant(Variant::PooledPremv, &splits, &cfg, &spec.train_config(3, Variant::PooledPremv)).unwrap();
    let full = run_variant(Variant::Full, &splits, &cfg, &spec.train_config(3, Variant::Full)).unwrap();
    let (pre, post) = pre_post_from(&pooled.model, &full.model, &splits.test).unwrap();
    assert!((0.0..=1.0).contains(&pre) && (0.0..=1.0).contains(&post));
    match &pooled.report {
        VariantReport::Consensus(c) => assert_eq!(c.accuracy, pre),
        other => panic!("unexpected {other:?}"),
    }
    match &full.report {
        VariantReport::PerAnnotator(e) => assert_eq!(e.copr_accuracy, post),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(pre_post_from(&full.model, &pooled.model, &splits.test), Err(HarnessError::Spec(_))));
}

#[test]
fn attention_rows_are_distributions_and_fidelity_is_bounded() {
    let spec = tiny(4);
    let splits = spec.splits(0).unwrap();
    let model = Model::new(spec.model_config(0), Variant::Full).unwrap();
    for row in mean_attention(&model, &splits.test).unwrap() {
        assert_eq!(row.len(), 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let rho = attention_fidelity(&model, &splits.test).unwrap();
    assert_eq!(rho.len(), 3);
    assert!(rho.iter().all(|r| (-1.0..=1.0).contains(r)));

    let base = Model::new(spec.model_config(0), Variant::Base).unwrap();
    assert!(attention_fidelity(&base, &splits.test).is_err());
    let mut bare = splits.test.clone();
    bare.profiles = None;
    assert!(matches!(attention_fidelity(&model, &bare), Err(HarnessError::NoProfiles)));
}

#[test]
fn dump_writes_csv_and_square_heatmaps() {
    let spec = tiny(16);
    let splits = spec.splits(0).unwrap();
    let model = Model::new(spec.model_config(0), Variant::Full).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = dump_attention(&model, &splits.test, dir.path(), Some(2)).unwrap();
    assert_eq!(files.len(), 2 * (1 + 3));
    let csv = std::fs::read_to_string(dir.path().join("sample_1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let pred = model.predict(&splits.test.samples[1].raw_tokens).unwrap();
    let weights = pred.attention.unwrap().weights;
    for (k, line) in csv.lines().enumerate() {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals, weights.row(k));
    }
    let pgm = std::fs::read(dir.path().join("sample_0_a2.pgm")).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 16);
    assert_eq!(pixels.iter().min(), Some(&0));
    assert_eq!(pixels.iter().max(), Some(&255));
}

#[test]
fn efficiency_counts_parameters_and_times_inference() {
    let spec = tiny(4);
    let splits = spec.splits(0).unwrap();
    let model = Model::new(spec.model_config(0), Variant::Full).unwrap();
    let eff = efficiency_report(&model, &splits.test, 3).unwrap();
    assert_eq!(eff.parameter_count, model.count_parameters());
    assert_eq!(eff.per_repetition.len(), 3);
    assert!(eff.mean_inference_seconds > 0.0);
    assert!(efficiency_report(&model, &splits.test, 0).is_err());
}

#[test]
fn invalid_specs_are_rejected_before_training() {
    let bad_rate = ExperimentSpec { sparsity_rates: vec![-0.1], ..tiny(4) };
    assert!(matches!(run_experiment(&bad_rate), Err(HarnessError::Spec(_))));
    let mut bad_model = tiny(4);
    bad_model.model.num_heads = 3;
    assert!(run_experiment(&bad_model).is_err());
    let bad_jobs = ExperimentSpec { jobs: 0, ..tiny(4) };
    assert!(run_experiment(&bad_jobs).is_err());
}

#[test]
fn spearman_reference_cases() {
    let a = [0.1, 0.4, 0.2, 0.3];
    assert_eq!(spearman(&a, &a), 1.0);
    let rev: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((spearman(&a, &rev) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&a, &[0.25; 4]), 0.0);
}

#[test]
fn untrained_attention_is_uncorrelated_with_focus() {
    let spec = tiny(16);
    let mut total = 0.0;
    let mut count = 0.0;
    for seed in 0..5 {
        let splits = spec.splits(seed).unwrap();
        let model = Model::new(spec.model_config(seed), Variant::Full).unwrap();
        for r in attention_fidelity(&model, &splits.test).unwrap() {
            total += r.abs();
            count += 1.0;
        }
    }
    let mean_abs = total / count;
    assert!(mean_abs < 0.3, "mean |rho| {mean_abs}");
}

#[test]
fn base_has_fewer_parameters_than_query_variants() {
    let cfg = tiny(4).model_config(0);
    let base = Model::new(cfg.clone(), Variant::Base).unwrap().count_parameters();
    for v in [Variant::Full, Variant::NoSelfAttn, Variant::UnifiedHead] {
        assert!(base < Model::new(cfg.clone(), v).unwrap().count_parameters(), "{v:?}");
    }
}
