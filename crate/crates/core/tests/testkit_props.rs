use proptest::prelude::*;
use subgoal_hrl::demos::{load_demos, save_demos};
use subgoal_hrl::testkit::{generate_slds, match_count, score_recovery, Schedule, SyntheticSlds};

fn times() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..200, 0..12).prop_map(|s| s.into_iter().collect())
}

fn spec() -> impl Strategy<Value = (SyntheticSlds, usize)> {
    (1usize..4, 20usize..80, 0.0f64..0.5, any::<u64>()).prop_flat_map(|(regimes, horizon, sigma, seed)| {
        let schedule = (0..regimes, prop::collection::btree_set(1..horizon - 1, 0..4), prop::collection::vec(0..regimes, 4))
            .prop_map(|(initial, ts, rs)| Schedule {
                initial,
                switches: ts.into_iter().zip(rs).collect(),
            });
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), regimes),
            prop::collection::vec(schedule, 1..3),
        )
            .prop_map(move |(drifts, schedules)| {
                (
                    SyntheticSlds {
                        drifts,
                        sigma,
                        schedules,
                        seed,
                    },
                    horizon,
                )
            })
    })
}

/// Maximum bipartite matching by augmenting paths; the greedy scorer can
/// never beat it.
fn max_matching(detected: &[usize], truth: &[usize], tol: usize) -> usize {
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = truth
        .iter()
        .map(|&g| (0..detected.len()).filter(|&j| detected[j].abs_diff(g) <= tol).collect())
        .collect();
    let mut owner = vec![None; detected.len()];
    (0..truth.len())
        .filter(|&i| augment(i, &adj, &mut vec![false; detected.len()], &mut owner))
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scoring_is_shift_symmetric(d in times(), g in times(), tol in 0usize..6, shift in 0usize..1000) {
        let ds: Vec<usize> = d.iter().map(|t| t + shift).collect();
        let gs: Vec<usize> = g.iter().map(|t| t + shift).collect();
        prop_assert_eq!(score_recovery(&d, &g, tol), score_recovery(&ds, &gs, tol));
    }

    #[test]
    fn scores_are_rates_and_matching_is_one_to_one(d in times(), g in times(), tol in 0usize..6) {
        let (recall, precision) = score_recovery(&d, &g, tol);
        prop_assert!((0.0..=1.0).contains(&recall) && (0.0..=1.0).contains(&precision));
        let m = match_count(&d, &g, tol);
        prop_assert!(m <= d.len().min(g.len()));
        prop_assert!(m <= max_matching(&d, &g, tol));
        prop_assert_eq!(score_recovery(&g, &d, tol), (precision, recall));
        prop_assert_eq!(score_recovery(&d, &d, tol), (1.0, 1.0));
    }

    #[test]
    fn generator_roundtrips_through_demo_files((spec, horizon) in spec(), n in 1usize..5) {
        let (demos, truth) = generate_slds(&spec, n, horizon).unwrap();
        prop_assert_eq!(truth.len(), n);
        for (i, t) in truth.iter().enumerate() {
            prop_assert_eq!(t, &spec.schedules[i % spec.schedules.len()].times());
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slds.jsonl");
        save_demos(&demos, &path).unwrap();
        let back = load_demos(&path).unwrap();
        prop_assert_eq!(back.trajectories.len(), n);
        for (a, b) in demos.trajectories.iter().zip(&back.trajectories) {
            prop_assert_eq!(&a.traj_id, &b.traj_id);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.steps.iter().zip(&b.steps) {
                for (u, v) in x.features.iter().zip(&y.features) {
                    prop_assert!((u - v).abs() <= 1e-8 * (1.0 + u.abs()));
                }
            }
        }
        // A second save of the loaded copy is byte-identical.
        let again = dir.path().join("again.jsonl");
        save_demos(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn noiseless_increments_follow_the_schedule((spec, horizon) in spec()) {
        let mut spec = spec;
        spec.sigma = 0.0;
        let (demos, _) = generate_slds(&spec, 1, horizon).unwrap();
        let sched = &spec.schedules[0];
        let steps = &demos.trajectories[0].steps;
        for t in 0..horizon - 1 {
            let z = sched.switches.iter().take_while(|s| s.0 <= t).last().map_or(sched.initial, |s| s.1);
            for j in 0..2 {
                let inc = steps[t + 1].features[j] - steps[t].features[j];
                prop_assert!((inc - spec.drifts[z][j]).abs() < 1e-9);
            }
        }
    }
}
