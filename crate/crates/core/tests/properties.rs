use proptest::prelude::*;

use dms_core::costmodel::dense_reads;
use dms_core::hyperscale::{avg_improvement, dominates, majority, pareto_extract, BudgetConfig, FrontierPoint, Improvement};
use dms_core::kvcache::{DecodeEngine, DelayedEviction, ReadLedger, Vanilla};
use dms_core::rng::{normal, stream};
use dms_core::{AttentionConfig, ProjectionSet};

fn ledger(stores: usize, steps: &[(u64, u64)], prefill: (usize, u64, u64), live: &[usize]) -> ReadLedger {
    let mut l = ReadLedger::new(stores);
    l.record_prefill(prefill.0, prefill.1, prefill.2, live.to_vec());
    for &(r, res) in steps {
        l.record_step(r, res, live.to_vec());
    }
    l
}

fn ledger_strategy() -> impl Strategy<Value = ReadLedger> {
    (
        prop::collection::vec((0u64..1000, 0u64..500), 0..12),
        (0usize..50, 0u64..1000, 0u64..500),
        prop::collection::vec(0usize..40, 2),
    )
        .prop_map(|(s, p, live)| ledger(2, &s, p, &live))
}

fn points(v: &[(f64, f64)]) -> Vec<FrontierPoint> {
    let c = BudgetConfig { l: 1, w: 1, cr: 1.0 };
    v.iter().map(|&(b, a)| FrontierPoint::new(b, a, c, "m")).collect()
}

fn frontier_strategy() -> impl Strategy<Value = Vec<FrontierPoint>> {
    prop::collection::vec((0u32..40, 0u32..100), 1..10)
        .prop_map(|v| points(&v.iter().map(|&(b, a)| (b as f64 / 4.0, a as f64 / 100.0)).collect::<Vec<_>>()))
}

proptest! {
    #[test]
    fn ledger_merge_commutes(a in ledger_strategy(), b in ledger_strategy()) {
        prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
    }

    #[test]
    fn ledger_merge_associates(a in ledger_strategy(), b in ledger_strategy(), c in ledger_strategy()) {
        let left = a.merge(&b).unwrap().merge(&c).unwrap();
        let right = a.merge(&b.merge(&c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn ledger_merge_adds_totals(a in ledger_strategy(), b in ledger_strategy()) {
        let m = a.merge(&b).unwrap();
        prop_assert_eq!(m.reads_raw(), a.reads_raw() + b.reads_raw());
        prop_assert_eq!(m.prefill_reads_raw(), a.prefill_reads_raw() + b.prefill_reads_raw());
        prop_assert_eq!(m.peak_raw(), a.peak_raw() + b.peak_raw());
        prop_assert_eq!(m.steps(), a.steps().max(b.steps()));
        prop_assert_eq!(m.per_step().iter().sum::<u64>(), m.reads_raw());
    }

    #[test]
    fn self_improvement_is_zero(a in frontier_strategy()) {
        let f = pareto_extract(&a);
        match avg_improvement(&f, &f) {
            Improvement::Value(v) => prop_assert_eq!(v, 0.0),
            Improvement::Disjoint => prop_assert!(f.iter().all(|p| p.budget == f[0].budget)),
        }
    }

    #[test]
    fn improvement_is_antisymmetric(a in frontier_strategy(), b in frontier_strategy()) {
        let (fa, fb) = (pareto_extract(&a), pareto_extract(&b));
        match (avg_improvement(&fa, &fb), avg_improvement(&fb, &fa)) {
            (Improvement::Value(x), Improvement::Value(y)) => prop_assert_eq!(x, -y),
            (Improvement::Disjoint, Improvement::Disjoint) => {}
            other => prop_assert!(false, "asymmetric overlap {:?}", other),
        }
    }

    #[test]
    fn frontier_is_nondominated_and_covers(a in frontier_strategy()) {
        let f = pareto_extract(&a);
        for p in &f {
            prop_assert!(!a.iter().any(|q| dominates(q, p)));
        }
        for q in &a {
            prop_assert!(f.iter().any(|p| p == q || dominates(p, q)
                || (p.budget == q.budget && p.accuracy == q.accuracy)));
        }
        prop_assert!(f.windows(2).all(|w| w[0].budget < w[1].budget && w[0].accuracy < w[1].accuracy));
        prop_assert_eq!(pareto_extract(&f), f.clone());
    }

    #[test]
    fn majority_is_a_most_frequent_value(v in prop::collection::vec(0u8..4, 1..20)) {
        let m = majority(&v).unwrap();
        let count = |x: u8| v.iter().filter(|&&y| y == x).count();
        let best = (0u8..4).map(count).max().unwrap();
        prop_assert_eq!(count(m), best);
        let first = v.iter().position(|&x| count(x) == best).unwrap();
        prop_assert_eq!(m, v[first]);
    }

    #[test]
    fn delayed_cache_live_count(
        decisions in prop::collection::vec(prop::collection::vec(any::<bool>(), 24), 2),
        window in 1usize..6,
        seed in 0u64..1000,
    ) {
        let cfg = AttentionConfig::new(16, 4, 2).unwrap();
        let mut rng = stream(seed, "prop/live");
        let proj = ProjectionSet::random(&cfg, &mut rng);
        let mut engine = DecodeEngine::new(cfg, 1, 4, Box::new(DelayedEviction { window })).unwrap();
        for t in 0..24 {
            let h: Vec<f64> = (0..16).map(|_| normal(&mut rng)).collect();
            let d: Vec<bool> = decisions.iter().map(|row| row[t]).collect();
            engine.decode_step(&h, &proj, &d).unwrap();
            for (head, row) in decisions.iter().enumerate() {
                let expected = (0..=t).filter(|&j| !row[j] || j + window > t).count();
                prop_assert_eq!(engine.cache().live(0, head), expected);
                let flagged_live = (0..=t).filter(|&j| row[j] && j + window > t).count();
                prop_assert!(flagged_live <= window);
            }
        }
    }

    #[test]
    fn vanilla_reads_are_dense(p in 0usize..20, n in 1usize..20, seed in 0u64..1000) {
        let cfg = AttentionConfig::new(8, 2, 1).unwrap();
        let mut rng = stream(seed, "prop/dense");
        let proj = ProjectionSet::random(&cfg, &mut rng);
        let mut engine = DecodeEngine::new(cfg, 1, 4, Box::new(Vanilla)).unwrap();
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..8).map(|_| normal(&mut rng)).collect()).collect();
        if p > 0 {
            let h = dms_core::numerics::Tensor::from_rows(&rows).unwrap();
            engine.prefill(&h, &proj, &[vec![false; p]]).unwrap();
        }
        for _ in 0..n {
            let h: Vec<f64> = (0..8).map(|_| normal(&mut rng)).collect();
            engine.decode_step(&h, &proj, &[false]).unwrap();
        }
        prop_assert_eq!(engine.ledger().reads_raw(), dense_reads(p as u64, n as u64));
        prop_assert_eq!(engine.ledger().peak_raw(), (p + n) as u64);
    }
}
