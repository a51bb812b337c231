mod common;

use common::kappa_oracle;
use proptest::prelude::*;
use tendency_core::data::{Dataset, Label, Sample};
use tendency_core::metrics::*;
use tendency_core::numerics::Matrix;

fn labels(classes: usize, len: impl Into<proptest::collection::SizeRange>) -> impl Strategy<Value = Vec<Label>> {
    proptest::collection::vec(prop_oneof![1 => Just(None), 6 => (0..classes).prop_map(Some)], len)
}

fn pair() -> impl Strategy<Value = (usize, Vec<Label>, Vec<Label>)> {
    (2usize..=5, 1usize..=20).prop_flat_map(|(c, len)| (Just(c), labels(c, len), labels(c, len)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kappa_equals_contingency_oracle((c, a, b) in pair()) {
        match kappa_oracle(&a, &b, c) {
            Some(want) => prop_assert_eq!(cohen_kappa(&a, &b, c).unwrap().to_bits(), want.to_bits()),
            None => prop_assert!(matches!(cohen_kappa(&a, &b, c), Err(MetricsError::NoPairs))),
        }
    }
}

proptest! {
    #[test]
    fn kappa_bounded_and_one_on_identical((c, a, b) in pair()) {
        if let Ok(k) = cohen_kappa(&a, &b, c) {
            prop_assert!((-1.0..=1.0).contains(&k));
        }
        if let Ok(k) = cohen_kappa(&a, &a, c) {
            prop_assert_eq!(k, 1.0);
        }
    }

    #[test]
    fn kappa_invariant_under_class_relabeling((c, a, b) in pair(), shift in 1usize..5) {
        let relabel = |v: &[Label]| -> Vec<Label> { v.iter().map(|l| l.map(|x| (x + shift) % c)).collect() };
        if let Ok(k) = cohen_kappa(&a, &b, c) {
            prop_assert_eq!(k, cohen_kappa(&relabel(&a), &relabel(&b), c).unwrap());
        }
    }

    #[test]
    fn consistency_matrix_is_symmetric_with_unit_diagonal(sets in proptest::collection::vec(proptest::collection::vec(0usize..3, 12), 2..6)) {
        let sets: Vec<Vec<Label>> = sets.into_iter().map(|s| s.into_iter().map(Some).collect()).collect();
        let m = consistency_matrix(&sets, 3, ConsistencyKind::GroundTruth).unwrap();
        for i in 0..sets.len() {
            prop_assert_eq!(m.values.get(i, i), 1.0);
            for j in 0..sets.len() {
                prop_assert_eq!(m.values.get(i, j), m.values.get(j, i));
                prop_assert!((-1.0..=1.0).contains(&m.values.get(i, j)));
            }
        }
    }

    #[test]
    fn dic_is_a_metric(a in proptest::collection::vec(proptest::collection::vec(0usize..3, 15), 4),
                       b in proptest::collection::vec(proptest::collection::vec(0usize..3, 15), 4),
                       c in proptest::collection::vec(proptest::collection::vec(0usize..3, 15), 4)) {
        let mk = |s: Vec<Vec<usize>>| {
            let s: Vec<Vec<Label>> = s.into_iter().map(|r| r.into_iter().map(Some).collect()).collect();
            consistency_matrix(&s, 3, ConsistencyKind::Predicted).unwrap()
        };
        let (ma, mb, mc) = (mk(a), mk(b), mk(c));
        prop_assert_eq!(dic(&ma, &ma).unwrap(), 0.0);
        prop_assert_eq!(dic(&ma, &mb).unwrap(), dic(&mb, &ma).unwrap());
        prop_assert!(dic(&ma, &mc).unwrap() <= dic(&ma, &mb).unwrap() + dic(&mb, &mc).unwrap() + 1e-12);
    }
}

#[test]
fn degenerate_constant_labels_follow_convention() {
    let ones: Vec<Label> = vec![Some(1); 6];
    let zeros: Vec<Label> = vec![Some(0); 6];
    assert_eq!(cohen_kappa(&ones, &ones, 3).unwrap(), 1.0);
    assert_eq!(kappa_oracle(&ones, &ones, 3), Some(1.0));
    assert_eq!(cohen_kappa(&ones, &zeros, 3).unwrap(), 0.0);
    assert_eq!(kappa_oracle(&ones, &zeros, 3), Some(0.0));
    let partial = vec![Some(1), None, Some(1)];
    assert_eq!(cohen_kappa(&partial, &[Some(1), Some(0), Some(1)], 2).unwrap(), 1.0);
}

#[test]
fn majority_vote_matches_counting_oracle() {
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) % 4) as usize
    };
    let grid: Vec<Vec<usize>> = (0..5).map(|_| (0..50).map(|_| next()).collect()).collect();
    let got = majority_vote_predictions(&grid).unwrap();
    for (i, g) in got.iter().enumerate() {
        let mut counts = [0; 4];
        for row in &grid {
            counts[row[i]] += 1;
        }
        let best = counts.iter().max().unwrap();
        let want = counts.iter().position(|c| c == best).unwrap();
        assert_eq!(*g, want, "sample {i}");
    }
}

fn toy_dataset() -> Dataset {
    let truth: [[i64; 3]; 4] = [[0, 0, 1], [1, -1, 1], [0, 1, -1], [1, 1, 0]];
    Dataset {
        num_annotators: 3,
        num_classes: 2,
        num_tokens: 1,
        raw_dim: 1,
        samples: truth
            .iter()
            .map(|row| Sample {
                raw_tokens: Matrix::zeros(1, 1),
                labels: row.iter().map(|&v| if v < 0 { None } else { Some(v as usize) }).collect(),
            })
            .collect(),
        profiles: None,
    }
}

const TOY_PREDS: [[usize; 3]; 4] = [[0, 1, 1], [1, 0, 1], [1, 1, 0], [1, 1, 0]];

#[test]
fn toy_report_matches_hand_computation() {
    let preds: Vec<Vec<usize>> = TOY_PREDS.iter().map(|r| r.to_vec()).collect();
    let r = evaluate_predictions(&preds, &toy_dataset(), ConsistencyMode::Restricted).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let acc: Vec<f64> = r.per_annotator_accuracy().into_iter().map(Option::unwrap).collect();
    let f1: Vec<f64> = r.per_annotator_f1().into_iter().map(Option::unwrap).collect();
    assert!(close(acc[0], 0.75) && close(acc[1], 2.0 / 3.0) && close(acc[2], 1.0));
    assert!(close(f1[0], 11.0 / 15.0) && close(f1[1], 0.4) && close(f1[2], 1.0));
    assert!(close(r.avg_accuracy, 29.0 / 36.0));
    assert!(close(r.avg_f1, 32.0 / 45.0));
    assert!(close(r.copr_accuracy, 0.5));
    assert!(close(r.copr_f1, 1.0 / 3.0));
    let m = [[1.0, 0.4, -0.5], [0.4, 1.0, -1.0], [-0.5, -1.0, 1.0]];
    let mp = [[1.0, 0.0, -0.5], [0.0, 1.0, 0.0], [-0.5, 0.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!(close(r.m.values.get(i, j), m[i][j]), "M[{i}][{j}]");
            assert!(close(r.m_prime.values.get(i, j), mp[i][j]), "M'[{i}][{j}]");
        }
    }
    assert!(close(r.dic, 2.32f64.sqrt()));
    assert!(r.absent.is_empty());

    let full = evaluate_predictions(&preds, &toy_dataset(), ConsistencyMode::Full).unwrap();
    assert!(close(full.m_prime.values.get(0, 1), -1.0 / 3.0));
    assert_eq!(full.m, r.m);
}

#[test]
fn report_csv_mirrors_table_layout() {
    let preds: Vec<Vec<usize>> = TOY_PREDS.iter().map(|r| r.to_vec()).collect();
    let r = evaluate_predictions(&preds, &toy_dataset(), ConsistencyMode::Restricted).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,A_1,A_2,A_3,Avg,CoPr");
    for line in &lines[1..] {
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let mean = vals[..3].iter().sum::<f64>() / 3.0;
        assert!((vals[3] - mean).abs() < 1e-12);
    }
    let m_csv = r.m.to_csv();
    let parsed: Vec<Vec<f64>> = m_csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(parsed.len(), 3);
    assert_eq!(parsed[0][1], r.m.values.get(0, 1));
    assert!(r.to_json().contains("\"coprAccuracy\""));
}

#[test]
fn perfect_predictions_give_unit_scores_and_zero_dic() {
    let d = toy_dataset();
    let preds: Vec<Vec<usize>> =
        d.samples.iter().map(|s| s.labels.iter().map(|l| l.unwrap_or(0)).collect()).collect();
    let r = evaluate_predictions(&preds, &d, ConsistencyMode::Restricted).unwrap();
    assert!(r.per_annotator.iter().all(|a| a.accuracy == Some(1.0) && a.f1 == Some(1.0)));
    assert_eq!(r.dic, 0.0);
    assert_eq!(r, evaluate_predictions(&preds, &d, ConsistencyMode::Restricted).unwrap());
}

#[test]
fn annotator_without_labels_is_absent_and_excluded() {
    let mut d = toy_dataset();
    for s in &mut d.samples {
        s.labels[1] = None;
    }
    let preds: Vec<Vec<usize>> = TOY_PREDS.iter().map(|r| r.to_vec()).collect();
    let r = evaluate_predictions(&preds, &d, ConsistencyMode::Restricted).unwrap();
    assert_eq!(r.absent, vec![1]);
    assert_eq!(r.per_annotator[1].accuracy, None);
    assert!((r.avg_accuracy - (0.75 + 1.0) / 2.0).abs() < 1e-12);
    assert!(r.to_csv().lines().nth(1).unwrap().contains(",,"));
}

#[test]
fn report_columns_follow_annotator_permutation() {
    let d = toy_dataset();
    let perm = [2, 0, 1];
    let permuted = d.with_samples(
        d.samples.iter().map(|s| Sample { raw_tokens: s.raw_tokens.clone(), labels: perm.iter().map(|&k| s.labels[k]).collect() }).collect(),
    );
    let preds: Vec<Vec<usize>> = TOY_PREDS.iter().map(|r| r.to_vec()).collect();
    let ppreds: Vec<Vec<usize>> = TOY_PREDS.iter().map(|r| perm.iter().map(|&k| r[k]).collect()).collect();
    let a = evaluate_predictions(&preds, &d, ConsistencyMode::Restricted).unwrap();
    let b = evaluate_predictions(&ppreds, &permuted, ConsistencyMode::Restricted).unwrap();
    for (i, &k) in perm.iter().enumerate() {
        assert_eq!(b.per_annotator[i].accuracy, a.per_annotator[k].accuracy);
        for (j, &l) in perm.iter().enumerate() {
            assert_eq!(b.m_prime.values.get(i, j), a.m_prime.values.get(k, l));
        }
    }
    assert!((a.dic - b.dic).abs() < 1e-12);
    assert!((a.avg_accuracy - b.avg_accuracy).abs() < 1e-12);
}
