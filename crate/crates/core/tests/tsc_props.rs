use std::collections::BTreeMap;

use proptest::prelude::*;
use subgoal_hrl::demos::{generate_demos, DemoSet, Step, Trajectory};
use subgoal_hrl::envs::make_env;
use subgoal_hrl::factors::{identify_factors, Factor, Factorization};
use subgoal_hrl::segmentation::SwitchPoint;
use subgoal_hrl::tsc::kmeans::{kmeans, lloyd};
use subgoal_hrl::tsc::{cluster_subgoals, discover, propagate_switch_times, DiscoverConfig};

/// Three features, factors {0,1} and {2}; integer random walks.
fn demos_and_switches() -> impl Strategy<Value = (DemoSet, Vec<SwitchPoint>)> {
    prop::collection::vec(prop::collection::vec((-1i32..=1, -1i32..=1, -1i32..=1), 5..30), 1..5)
        .prop_flat_map(|walks| {
            let trajectories: Vec<Trajectory> = walks
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let mut x = [0.0f64; 3];
                    let n = w.len();
                    let steps = w
                        .iter()
                        .enumerate()
                        .map(|(t, &(a, b, c))| {
                            let s = Step {
                                t,
                                features: x.to_vec(),
                                action: if t + 1 == n { -1 } else { 0 },
                                reward: 0.0,
                                done: t + 1 == n,
                            };
                            x[0] += a as f64;
                            x[1] += b as f64;
                            x[2] += c as f64;
                            s
                        })
                        .collect();
                    Trajectory {
                        traj_id: format!("t{i}"),
                        steps,
                    }
                })
                .collect();
            let names = vec!["a".into(), "b".into(), "c".into()];
            let demos = DemoSet::new(trajectories, names, 1).unwrap();
            let lens: Vec<usize> = walks.iter().map(|w| w.len()).collect();
            let picks = prop::collection::vec((0..lens.len(), any::<prop::sample::Index>(), 0usize..2), 0..20);
            (Just(demos), picks)
        })
        .prop_map(|(demos, picks)| {
            let fz = factorization();
            let switches = picks
                .into_iter()
                .map(|(ti, ix, f)| {
                    let traj = &demos.trajectories[ti];
                    let t = ix.index(traj.len());
                    SwitchPoint {
                        traj_id: traj.traj_id.clone(),
                        t,
                        factor_id: f,
                        state: fz.factors[f].project(&traj.steps[t].features),
                        propagated: false,
                    }
                })
                .collect();
            (demos, switches)
        })
}

fn factorization() -> Factorization {
    Factorization::new(
        vec![
            Factor {
                factor_id: 0,
                name: "ab".into(),
                mask: vec![0, 1],
                threshold: 0.0,
            },
            Factor {
                factor_id: 1,
                name: "c".into(),
                mask: vec![2],
                threshold: 0.0,
            },
        ],
        3,
    )
    .unwrap()
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 3..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagation_aligns_times_across_factors((demos, switches) in demos_and_switches()) {
        let fz = factorization();
        let out = propagate_switch_times(&switches, &demos, &fz).unwrap();
        let mut times: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
        for sp in &out {
            let traj = demos.trajectory(&sp.traj_id).unwrap();
            prop_assert_eq!(&sp.state, &fz.factors[sp.factor_id].project(&traj.steps[sp.t].features));
            times.entry((sp.traj_id.clone(), sp.factor_id)).or_default().push(sp.t);
        }
        for traj in &demos.trajectories {
            let a = times.get(&(traj.traj_id.clone(), 0)).cloned().unwrap_or_default();
            let b = times.get(&(traj.traj_id.clone(), 1)).cloned().unwrap_or_default();
            prop_assert_eq!(a, b);
        }
        // Originals are never marked as propagated copies.
        for sp in &switches {
            prop_assert!(out.iter().any(|o| o.traj_id == sp.traj_id && o.t == sp.t
                && o.factor_id == sp.factor_id && !o.propagated));
        }
    }

    #[test]
    fn clusters_are_bounded_and_inside_the_switch_hull(
        (demos, switches) in demos_and_switches(),
        k_max in 1usize..6,
        min_support in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let fz = factorization();
        let out = propagate_switch_times(&switches, &demos, &fz).unwrap();
        for f in &fz.factors {
            let own: Vec<SwitchPoint> = out.iter().filter(|s| s.factor_id == f.factor_id).cloned().collect();
            let res = cluster_subgoals(&own, f, &demos, k_max, min_support, seed);
            prop_assert!(res.subgoals.len() <= k_max);
            prop_assert_eq!(res.subgoals.len(), res.mean_times.len());
            prop_assert!(res.mean_times.windows(2).all(|w| w[0] <= w[1]));
            for sg in &res.subgoals {
                prop_assert!(sg.support >= min_support && sg.support <= 1.0);
                prop_assert!(sg.threshold > 0.0);
                for (j, &v) in sg.target.iter().enumerate() {
                    let lo = own.iter().map(|s| s.state[j]).fold(f64::INFINITY, f64::min);
                    let hi = own.iter().map(|s| s.state[j]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn kmeans_centers_are_member_means(pts in points(), k in 1usize..5, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let c = kmeans(&pts, k, seed);
        prop_assert_eq!(c.assignment.len(), pts.len());
        let mut inertia = 0.0;
        for j in 0..c.k() {
            let m = c.members(j);
            if m.is_empty() {
                continue;
            }
            for d in 0..2 {
                let mean = m.iter().map(|&i| pts[i][d]).sum::<f64>() / m.len() as f64;
                prop_assert!((mean - c.centers[j][d]).abs() < 1e-9);
            }
            for &i in &m {
                let own: f64 = (0..2).map(|d| (pts[i][d] - c.centers[j][d]).powi(2)).sum();
                inertia += own;
                // Lloyd's fixed point: no point is strictly closer to another center.
                for other in &c.centers {
                    let d2: f64 = (0..2).map(|d| (pts[i][d] - other[d]).powi(2)).sum();
                    prop_assert!(own <= d2 + 1e-9);
                }
            }
        }
        prop_assert!((inertia - c.inertia).abs() < 1e-6 * (1.0 + inertia));
    }

    #[test]
    fn lloyd_is_a_function_of_its_rng(pts in points(), k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let a = lloyd(&pts, k, &mut subgoal_hrl::rng::seeded(seed));
        let b = lloyd(&pts, k, &mut subgoal_hrl::rng::seeded(seed));
        prop_assert_eq!(a, b);
    }
}

#[test]
fn discovery_ignores_trajectory_order() {
    let mut env = make_env("keydoor-20").unwrap();
    let demos = generate_demos(env.as_mut(), 6, 0.05, 11).unwrap();
    let fz = identify_factors(&demos, 0.2).unwrap();
    let cfg = DiscoverConfig::default();
    let a = discover(&demos, &fz, &cfg, 3, "h").unwrap();
    let mut shuffled = demos.clone();
    shuffled.trajectories.reverse();
    shuffled.trajectories.rotate_left(2);
    let b = discover(&shuffled, &fz, &cfg, 3, "h").unwrap();
    assert_eq!(a.subgoals, b.subgoals);
    assert_eq!(a.switches, b.switches);
}

#[test]
fn subgoal_ids_are_global_and_dense() {
    let mut env = make_env("keydoor-20").unwrap();
    let demos = generate_demos(env.as_mut(), 6, 0.05, 2).unwrap();
    let fz = identify_factors(&demos, 0.2).unwrap();
    let d = discover(&demos, &fz, &DiscoverConfig::default(), 9, "h").unwrap();
    d.subgoals.validate().unwrap();
    let ids: Vec<usize> = d.subgoals.subgoals().map(|s| s.subgoal_id).collect();
    assert_eq!(ids, (0..ids.len()).collect::<Vec<_>>());
    for f in &d.subgoals.factors {
        assert!(f.subgoals.len() <= DiscoverConfig::default().cluster_k_max);
        for s in &f.subgoals {
            assert_eq!(s.target.len(), f.mask.len());
        }
    }
}
