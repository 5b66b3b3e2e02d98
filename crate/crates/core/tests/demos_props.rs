use proptest::prelude::*;
use subgoal_hrl::demos::{
    generate_demos, load_demos, round_sig9, save_demos, scripted_demonstrate, DemoSet, Step, Trajectory,
    FINAL_ACTION,
};
use subgoal_hrl::envs::make_env;
use subgoal_hrl::Error;

fn trajectory(id: String, features: Vec<Vec<f64>>, actions: Vec<i64>, done: bool) -> Trajectory {
    let last = features.len() - 1;
    let steps = features
        .into_iter()
        .enumerate()
        .map(|(t, f)| Step {
            t,
            features: f.into_iter().map(round_sig9).collect(),
            action: if t == last { FINAL_ACTION } else { actions[t % actions.len()] },
            reward: if t == last && done { 1.5 } else { 0.0 },
            done: done && t == last,
        })
        .collect();
    Trajectory { traj_id: id, steps }
}

fn demo_set() -> impl Strategy<Value = DemoSet> {
    (1usize..4, 1usize..4).prop_flat_map(|(dim, n)| {
        prop::collection::vec(
            (
                prop::collection::vec(prop::collection::vec(-1e6f64..1e6, dim), 1..8),
                prop::collection::vec(0i64..4, 1..4),
                any::<bool>(),
            ),
            n,
        )
        .prop_map(move |trajs| {
            let trajectories = trajs
                .into_iter()
                .enumerate()
                .map(|(i, (f, a, d))| trajectory(format!("tr-{i}"), f, a, d))
                .collect();
            let names = (0..dim).map(|j| format!("f{j}")).collect();
            DemoSet::new(trajectories, names, 4).unwrap()
        })
    })
}

fn located(e: &Error) -> bool {
    let msg = e.to_string();
    matches!(e, Error::Parse { .. }) || msg.contains("trajectory")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_is_identity(set in demo_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_demos(&set, &path).unwrap();
        prop_assert_eq!(load_demos(&path).unwrap(), set);
    }

    #[test]
    fn single_field_corruption_is_valid_or_located(
        set in demo_set(),
        line_pick in any::<prop::sample::Index>(),
        field in 0usize..5,
        value in -3i64..12,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_demos(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let i = line_pick.index(lines.len());
        let mut rec: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
        match field {
            0 => rec["t"] = serde_json::json!(value),
            1 => rec["action"] = serde_json::json!(value),
            2 => rec["done"] = serde_json::json!(value % 2 == 0),
            3 => rec["features"].as_array_mut().unwrap().push(serde_json::json!(value)),
            _ => rec["reward"] = serde_json::json!("x"),
        }
        lines[i] = rec.to_string();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_demos(&path) {
            Ok(loaded) => prop_assert!(loaded.validate().is_ok()),
            Err(e) => prop_assert!(located(&e), "unlocated error: {}", e),
        }
    }

    #[test]
    fn scripted_demonstrations_are_pure(seed in 0u64..1000, noise in 0.0f64..0.3) {
        let mut a = make_env("keydoor-20").unwrap();
        let mut b = make_env("keydoor-20").unwrap();
        let wp = a.demo_waypoints();
        let ta = scripted_demonstrate(a.as_mut(), &wp, noise, seed, "d").unwrap();
        let tb = scripted_demonstrate(b.as_mut(), &wp, noise, seed, "d").unwrap();
        prop_assert_eq!(ta, tb);
    }
}

#[test]
fn keydoor_demos_return_400() {
    let mut env = make_env("keydoor-20").unwrap();
    let demos = generate_demos(env.as_mut(), 10, 0.05, 3).unwrap();
    assert_eq!(demos.trajectories.len(), 10);
    for t in &demos.trajectories {
        assert_eq!(t.total_reward(), 400.0, "{}", t.traj_id);
        assert!(t.ends_done());
    }
}

#[test]
fn maze_demos_reach_goal() {
    let mut env = make_env("maze-25").unwrap();
    let demos = generate_demos(env.as_mut(), 15, 0.05, 3).unwrap();
    assert_eq!(demos.trajectories.len(), 15);
    assert!(demos.trajectories.iter().all(|t| t.ends_done() && t.total_reward() == 1.0));
}
