use proptest::prelude::*;
use zerocd_core::adapt::{simulate_logs, PeerMatch};
use zerocd_core::data::PracticeLog;
use zerocd_core::metrics::{acc, auc, rmse};

fn preds_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0f64..1.0, n),
            proptest::collection::vec(proptest::bool::ANY.prop_map(|b| f64::from(u8::from(b))), n),
        )
    })
}

proptest! {
    #[test]
    fn acc_and_rmse_ignore_joint_permutation((p, y) in preds_labels(), seed in 0u64..1000) {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let n = idx.len();
        for i in 0..n {
            idx.swap(i, (seed as usize + i * 7) % n);
        }
        let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let y2: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(acc(&p, &y).unwrap(), acc(&p2, &y2).unwrap());
        prop_assert!((rmse(&p, &y).unwrap() - rmse(&p2, &y2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform((p, y) in preds_labels()) {
        prop_assume!(y.contains(&1.0) && y.contains(&0.0));
        let t: Vec<f64> = p.iter().map(|x| (3.0 * x).exp() - 2.0).collect();
        prop_assert_eq!(auc(&p, &y).unwrap(), auc(&t, &y).unwrap());
    }

    #[test]
    fn metrics_stay_in_range((p, y) in preds_labels()) {
        let a = acc(&p, &y).unwrap();
        let r = rmse(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn simulated_set_cardinality_bounds(
        n_eb in 1usize..4,
        n_peer in 1usize..6,
        n_q in 1usize..6,
        sims in proptest::collection::vec(-1.0f64..1.0, 30),
        picks in proptest::collection::vec(proptest::bool::ANY, 90),
    ) {
        let mut logs = Vec::new();
        for e in 0..n_eb {
            for q in 0..n_q {
                if picks[e * 6 + q] {
                    logs.push(PracticeLog {
                        student_id: format!("e{e}"),
                        question_id: format!("q{q}"),
                        score: u8::from(picks[e * 6 + q + 30]),
                        domain_id: "t".into(),
                    });
                }
            }
        }
        let matches: Vec<PeerMatch> = (0..n_eb)
            .map(|e| PeerMatch {
                early_bird_id: format!("e{e}"),
                reference_domain: "s".into(),
                peers: (0..n_peer)
                    .filter(|p| picks[60 + e * 6 + p])
                    .map(|p| (format!("u{p}"), sims[e * 6 + p]))
                    .collect(),
            })
            .collect();
        let set = simulate_logs(&logs, &matches);
        let upper: usize = matches
            .iter()
            .map(|m| m.peers.len() * logs.iter().filter(|l| l.student_id == m.early_bird_id).count())
            .sum();
        prop_assert!(set.len() <= upper);
        let mut seen = std::collections::HashSet::new();
        for l in &set.logs {
            prop_assert!(seen.insert((l.student_id.clone(), l.question_id.clone())));
            prop_assert!(logs.iter().any(|d| d.student_id == l.donor_id && d.question_id == l.question_id && d.score == l.score));
            prop_assert!((-1.0..=1.0).contains(&l.similarity));
        }
        // every (peer, question) reachable from some donor is present exactly once
        let mut reachable = std::collections::HashSet::new();
        for m in &matches {
            for (p, _) in &m.peers {
                for l in logs.iter().filter(|l| l.student_id == m.early_bird_id) {
                    reachable.insert((p.clone(), l.question_id.clone()));
                }
            }
        }
        prop_assert_eq!(reachable.len(), set.len());
    }
}
