mod common;

use common::{oracle_dcf, oracle_eer, random_scores, sweep};
use dmha::eval::{
    compute_eer, compute_min_dcf, evaluate, operating_points, parse_scores, parse_trials, scores_to_text, DcfConfig,
    EmbeddingSet, Trial,
};
use dmha::head::SpeakerEmbedding;
use dmha::Error;
use proptest::prelude::*;

const T: [f64; 3] = [0.8, 0.6, 0.4];
const N: [f64; 3] = [0.7, 0.5, 0.3];

#[test]
fn fixture_metrics() {
    assert_eq!(compute_eer(&T, &N).unwrap(), 1.0 / 3.0);
    assert_eq!(oracle_eer(&T, &N), 1.0 / 3.0);
    // best threshold sits between 0.7 and 0.8: two of three targets missed
    let dcf = compute_min_dcf(&T, &N, &DcfConfig::default()).unwrap();
    assert!((dcf - 0.01 * 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(dcf, oracle_dcf(&T, &N, 1.0, 1.0, 0.01));
}

#[test]
fn trivial_examples() {
    assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.0);
    assert_eq!(compute_eer(&[0.1], &[0.9]).unwrap(), 1.0);
    assert_eq!(compute_min_dcf(&[0.9, 0.8], &[0.1, 0.2], &DcfConfig::default()).unwrap(), 0.0);
    assert!(compute_eer(&[0.5], &[]).is_err());
    assert!(compute_min_dcf(&[], &[0.5], &DcfConfig::default()).is_err());
}

#[test]
fn operating_points_match_the_sweep() {
    for seed in 0..50 {
        let (t, n) = random_scores(seed, 40);
        let op = operating_points(&t, &n).unwrap();
        let pts: Vec<(f64, f64)> = op.p_miss.iter().cloned().zip(op.p_fa.iter().cloned()).collect();
        assert_eq!(pts, sweep(&t, &n));
    }
}

#[test]
fn misses_only_limit() {
    let cfg = DcfConfig { p_t: 0.999, ..DcfConfig::default() };
    for seed in 0..50 {
        let (t, n) = random_scores(seed, 60);
        let dcf = compute_min_dcf(&t, &n, &cfg).unwrap();
        assert_eq!(dcf, oracle_dcf(&t, &n, 1.0, 1.0, 0.999));
        let best = sweep(&t, &n)
            .into_iter()
            .min_by(|a, b| (0.999 * a.0 + 0.001 * a.1).total_cmp(&(0.999 * b.0 + 0.001 * b.1)))
            .unwrap();
        let fa_weight = 1.0 - 0.999;
        assert!((dcf - 0.999 * best.0).abs() <= fa_weight);
        assert!(dcf <= fa_weight);
    }
}

fn emb(id: &str, v: &[f64]) -> SpeakerEmbedding {
    SpeakerEmbedding { id: id.into(), vector: v.to_vec() }
}

#[test]
fn scoring_keeps_trial_order_and_duplicates() {
    let set = EmbeddingSet::new(vec![emb("a", &[1.0, 0.0]), emb("b", &[1.0, 1.0]), emb("c", &[-1.0, 0.0])]).unwrap();
    let trials = parse_trials("1 a b\n0 a c\n1 a b\n").unwrap();
    let (scores, report) = evaluate(&trials, &set, &DcfConfig::default()).unwrap();
    let text = scores_to_text(&scores);
    assert_eq!(text, "a b 0.707106781\na c -1.000000000\na b 0.707106781\n");
    assert_eq!(parse_scores(&text, &trials).unwrap().len(), 3);
    assert_eq!(report.num_trials, 3);
    assert_eq!(report.eer, 0.0);
}

#[test]
fn scoring_rejects_empty_and_missing() {
    let set = EmbeddingSet::new(vec![emb("a", &[1.0, 0.0])]).unwrap();
    assert!(evaluate(&[], &set, &DcfConfig::default()).is_err());
    let trials = vec![Trial { target: true, enroll: "a".into(), test: "zz".into() }];
    match evaluate(&trials, &set, &DcfConfig::default()) {
        Err(Error::MissingUtterances(ids)) => assert_eq!(ids, vec!["zz".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn embedding_file_round_trip() {
    let set = EmbeddingSet::new(vec![emb("x", &[0.1, -2.5e-7, 3.0]), emb("y", &[1.0 / 3.0, 0.0, -1.0])]).unwrap();
    let text = set.to_text();
    let back = EmbeddingSet::parse(&text).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.to_text(), text);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_exhaustive_sweep(seed in any::<u64>()) {
        let (t, n) = random_scores(seed, 200);
        prop_assert_eq!(compute_eer(&t, &n).unwrap(), oracle_eer(&t, &n));
        let cfg = DcfConfig::default();
        prop_assert_eq!(compute_min_dcf(&t, &n, &cfg).unwrap(), oracle_dcf(&t, &n, 1.0, 1.0, 0.01));
    }

    #[test]
    fn metrics_ignore_increasing_transforms(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let (t, n) = random_scores(seed, 120);
        let f = |s: &f64| a * s.powi(3) + b + s;
        let (t2, n2): (Vec<f64>, Vec<f64>) = (t.iter().map(f).collect(), n.iter().map(f).collect());
        let cfg = DcfConfig::default();
        prop_assert_eq!(compute_eer(&t, &n).unwrap(), compute_eer(&t2, &n2).unwrap());
        prop_assert_eq!(compute_min_dcf(&t, &n, &cfg).unwrap(), compute_min_dcf(&t2, &n2, &cfg).unwrap());
    }

    #[test]
    fn eer_symmetric_under_swap_and_negation(seed in any::<u64>()) {
        let (t, n) = random_scores(seed, 120);
        let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<f64>>();
        let a = compute_eer(&t, &n).unwrap();
        let b = compute_eer(&neg(&n), &neg(&t)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn dcf_never_exceeds_accept_everything(seed in any::<u64>()) {
        let (t, n) = random_scores(seed, 100);
        prop_assert!(compute_min_dcf(&t, &n, &DcfConfig::default()).unwrap() <= 0.99);
    }
}
