use proptest::prelude::*;
use readmit_core::metrics::{auprc, auroc, paired_t_test, student_t_two_sided_p};

/// Concordant-pair count over every positive/negative pair.
fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Precision recomputed from scratch at each positive's rank. An example
/// ranks ahead of another when its score is higher, or equal with a lower
/// input index.
fn brute_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let ahead = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut total = 0.0;
    let mut n_pos = 0.0;
    for i in 0..n {
        if !labels[i] {
            continue;
        }
        n_pos += 1.0;
        let rank = 1 + (0..n).filter(|&j| j != i && ahead(j, i)).count();
        let hits = 1 + (0..n).filter(|&j| j != i && labels[j] && ahead(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    total / n_pos
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            // coarse grid so ties show up often
            prop::collection::vec((0u32..40).prop_map(|k| k as f64 / 40.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn auroc_matches_pair_count((s, l) in instance()) {
        prop_assert!((auroc(&s, &l).unwrap() - brute_auroc(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn auprc_matches_rank_scan((s, l) in instance()) {
        prop_assert!((auprc(&s, &l).unwrap() - brute_auprc(&s, &l)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_invariant_under_increasing_transform((s, l) in instance()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        prop_assert_eq!(auprc(&s, &l).unwrap(), auprc(&t, &l).unwrap());
    }

    #[test]
    fn negated_auroc_complements(n in 2usize..100, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        l[0] = true;
        l[1] = false;
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn worked_examples_exact() {
    assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(auprc(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
}

/// Closed-form two-sided tail probabilities for 1, 2 and 3 degrees of freedom.
fn closed_form_p(t: f64, df: u32) -> f64 {
    let t = t.abs();
    let pi = std::f64::consts::PI;
    let upper = match df {
        1 => 0.5 - t.atan() / pi,
        2 => 0.5 - t / (2.0 * (2.0 + t * t).sqrt()),
        3 => {
            let u = t / 3f64.sqrt();
            0.5 - (u / (1.0 + u * u) + u.atan()) / pi
        }
        _ => unreachable!(),
    };
    2.0 * upper
}

#[test]
fn t_distribution_tail_matches_closed_forms() {
    for df in [1u32, 2, 3] {
        for t in [0.1, 0.5, 1.0, 2.0, 4.898979485566356, 10.0, 50.0] {
            let p = student_t_two_sided_p(t, df as f64);
            assert!((p - closed_form_p(t, df)).abs() < 1e-8, "df {df} t {t}: {p}");
        }
    }
}

#[test]
fn paired_t_fixture() {
    let r = paired_t_test(&[0.2, 0.1, 0.3, 0.2]).unwrap();
    let sd = (0.02f64 / 3.0).sqrt();
    assert!((r.t - 0.2 / (sd / 2.0)).abs() < 1e-12);
    assert!((r.t - 4.899).abs() < 1e-3);
    assert_eq!(r.df, 3.0);
    assert!((r.p_value - closed_form_p(r.t, 3)).abs() < 1e-8);
}
