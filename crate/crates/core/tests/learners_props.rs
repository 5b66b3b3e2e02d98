use std::collections::BTreeMap;

use proptest::prelude::*;
use subgoal_hrl::hrl::{AbstractMdp, AbstractState};
use subgoal_hrl::learners::{
    fixed_meta, reuse_select, value_iteration, LinearSchedule, QTable, ReusePolicy, VI_TOLERANCE,
};
use subgoal_hrl::rng::seeded;
use subgoal_hrl::tsc::{FactorSubgoals, Subgoal, SubgoalSet};

fn updates() -> impl Strategy<Value = Vec<(u8, usize, f64, u8, bool, u32)>> {
    prop::collection::vec((0u8..6, 0usize..3, -1.0f64..1.0, 0u8..6, any::<bool>(), 1u32..5), 1..300)
}

/// Random finite MDP: per (s, a) a distribution over two successors.
fn mdp() -> impl Strategy<Value = (usize, usize, Vec<Vec<(usize, usize, f64)>>, Vec<f64>, Vec<bool>)> {
    (2usize..8, 1usize..4).prop_flat_map(|(n, m)| {
        (
            Just(n),
            Just(m),
            prop::collection::vec(prop::collection::vec((0..n, 0..n, 0.0f64..=1.0), m), n),
            prop::collection::vec(-1.0f64..1.0, n * m),
            prop::collection::vec(prop::bool::weighted(0.2), n),
        )
    })
}

fn chain_mdp(n: usize) -> AbstractMdp {
    let subgoals = (0..n)
        .map(|i| Subgoal {
            subgoal_id: i,
            factor_id: 0,
            target: vec![i as f64 * 10.0],
            threshold: 1.0,
            support: 1.0,
        })
        .collect();
    let set = SubgoalSet {
        factors: vec![FactorSubgoals {
            factor_id: 0,
            name: "x".into(),
            mask: vec![0],
            subgoals,
        }],
        seed: 0,
        config_hash: String::new(),
    };
    AbstractMdp::new(set, 0.99, 10, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn q_update_matches_formula_and_stays_bounded(ups in updates(), gamma in 0.0f64..0.99, alpha in 0.01f64..=1.0) {
        let mut q = QTable::new(3, alpha, 0.1, gamma).unwrap();
        let bound = 1.0 / (1.0 - gamma);
        for (s, a, r, s2, terminal, pow) in ups {
            let (s, s2) = (s.to_string(), s2.to_string());
            let old = q.get(&s, a);
            let next_max = (0..3).map(|b| q.get(&s2, b)).fold(f64::NEG_INFINITY, f64::max);
            let next_max = if q.entries().iter().any(|e| e.0 == s2) { next_max } else { 0.0 };
            let target = r + if terminal { 0.0 } else { gamma.powf(pow as f64) * next_max };
            let new = q.q_update(&s, a, r, &s2, terminal, pow).unwrap();
            prop_assert!((new - (old + alpha * (target - old))).abs() < 1e-12);
            prop_assert!(q.max_abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn greedy_choice_is_scale_invariant(
        values in prop::collection::vec(-3i32..3, 4),
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
        mask in 1u8..16,
    ) {
        let allowed: Vec<usize> = (0..4).filter(|a| mask & (1 << a) != 0).collect();
        let mut a = QTable::new(4, 0.5, 0.0, 0.9).unwrap();
        let mut b = a.clone();
        for (i, &v) in values.iter().enumerate() {
            a.set("s", i, v as f64);
            b.set("s", i, v as f64 * scale);
        }
        prop_assert_eq!(a.greedy_set("s", &allowed), b.greedy_set("s", &allowed));
        let best = allowed.iter().map(|&x| values[x]).max().unwrap();
        let mut rng = seeded(seed);
        for _ in 0..20 {
            let pick = a.select_action("s", &allowed, &mut rng).unwrap();
            prop_assert!(allowed.contains(&pick));
            prop_assert_eq!(values[pick], best);
        }
    }

    #[test]
    fn schedule_is_linear_then_flat(start in 0.0f64..1.0, end in 0.0f64..1.0, horizon in 1u64..10_000, n in 0u64..20_000) {
        let s = LinearSchedule { start, end, horizon };
        let v = s.value(n);
        if n >= horizon {
            prop_assert_eq!(v, end);
        } else {
            let lo = start.min(end) - 1e-12;
            let hi = start.max(end) + 1e-12;
            prop_assert!(v >= lo && v <= hi);
            // Equal increments over equal steps.
            if n + 2 <= horizon {
                let d1 = s.value(n + 1) - v;
                let d2 = s.value(n + 2) - s.value(n + 1);
                prop_assert!((d1 - d2).abs() < 1e-12);
                prop_assert!((d1 - (end - start) / horizon as f64).abs() < 1e-12);
            }
        }
        prop_assert_eq!(s.value(0), if horizon == 0 { end } else { start });
    }

    #[test]
    fn value_iteration_contracts_to_a_bellman_fixed_point((n, m, succ, rew, term) in mdp(), gamma in 0.0f64..0.95) {
        let trans = |s: usize, a: usize| {
            let (x, y, p) = succ[s][a];
            vec![(x, p), (y, 1.0 - p)]
        };
        let reward = |s: usize, a: usize, _s2: usize| rew[s * m + a];
        let vi = value_iteration(n, m, trans, reward, |s| term[s], gamma, VI_TOLERANCE).unwrap();
        for w in vi.deltas.windows(2) {
            prop_assert!(w[1] <= gamma * w[0] + 1e-12, "{:?}", vi.deltas);
        }
        for s in 0..n {
            if term[s] {
                prop_assert_eq!(vi.values[s], 0.0);
                continue;
            }
            let qs: Vec<f64> = (0..m)
                .map(|a| trans(s, a).iter().map(|&(s2, p)| p * (reward(s, a, s2) + gamma * vi.values[s2])).sum())
                .collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((best - vi.values[s]).abs() < 1e-8);
            prop_assert!(!vi.greedy[s].is_empty());
            for &a in &vi.greedy[s] {
                prop_assert!(qs[a] >= best - 1e-6);
            }
        }
    }

    #[test]
    fn qtable_checkpoint_roundtrip(entries in prop::collection::vec((0u8..20, 0usize..4, -1e6f64..1e6), 0..50)) {
        let mut q = QTable::new(4, 0.3, 0.2, 0.95).unwrap();
        for (s, a, v) in entries {
            q.set(&format!("{s},1.5"), a, v);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.qtable.json");
        q.save(&path).unwrap();
        let back = QTable::load(&path, 4).unwrap();
        prop_assert_eq!(back.entries(), q.entries());
        prop_assert_eq!((back.alpha, back.epsilon, back.gamma), (q.alpha, q.epsilon, q.gamma));
    }

    #[test]
    fn reuse_probability_decays_linearly_and_clamps(start in 0.0f64..=1.0, horizon in 1u64..50, calls in 0usize..100, seed in any::<u64>()) {
        let sched = LinearSchedule { start, end: 0.0, horizon };
        let mut demo = BTreeMap::new();
        demo.insert(AbstractState(vec![None]), 1usize);
        let mut reuse = ReusePolicy::new(demo, sched);
        let table = QTable::new(3, 0.2, 0.1, 0.99).unwrap();
        let mut rng = seeded(seed);
        for i in 0..calls {
            prop_assert!((reuse.reuse_prob() - sched.value(i as u64)).abs() < 1e-15);
            let o = reuse_select(&mut reuse, &table, &AbstractState(vec![None]), &[0, 1, 2], &mut rng).unwrap();
            prop_assert!(o < 3);
        }
        prop_assert_eq!(reuse.decisions, calls as u64);
        prop_assert!((0.0..=1.0).contains(&reuse.reuse_prob()));
    }
}

#[test]
fn full_reuse_copies_the_demonstrated_option() {
    let mut demo = BTreeMap::new();
    demo.insert(AbstractState(vec![None]), 2usize);
    let sched = LinearSchedule {
        start: 1.0,
        end: 1.0,
        horizon: 10,
    };
    let mut reuse = ReusePolicy::new(demo, sched);
    let table = QTable::new(3, 0.2, 0.1, 0.99).unwrap();
    let mut rng = seeded(4);
    for _ in 0..50 {
        let o = reuse_select(&mut reuse, &table, &AbstractState(vec![None]), &[0, 1, 2], &mut rng).unwrap();
        assert_eq!(o, 2);
    }
    // Not allowed here, so the table decides.
    let o = reuse_select(&mut reuse, &table, &AbstractState(vec![None]), &[0, 1], &mut rng).unwrap();
    assert!(o < 2);
}

#[test]
fn fixed_plan_skips_achieved_entries_and_repeats_the_last() {
    let mdp = chain_mdp(4);
    let plan = [0, 1, 2, 3];
    assert_eq!(fixed_meta(&plan, &mdp, &AbstractState(vec![None]), 0).unwrap(), (0, 0));
    assert_eq!(fixed_meta(&plan, &mdp, &AbstractState(vec![Some(1)]), 1).unwrap(), (2, 2));
    assert_eq!(fixed_meta(&plan, &mdp, &AbstractState(vec![Some(2)]), 2).unwrap(), (3, 3));
    assert_eq!(fixed_meta(&plan, &mdp, &AbstractState(vec![Some(3)]), 3).unwrap(), (3, 4));
    assert!(fixed_meta(&[], &mdp, &AbstractState(vec![None]), 0).is_err());
    assert!(fixed_meta(&[7], &mdp, &AbstractState(vec![None]), 0).is_err());
}
