use std::sync::OnceLock;

use proptest::prelude::*;
use subgoal_hrl::demos::{generate_demos, DemoSet};
use subgoal_hrl::envs::make_env;
use subgoal_hrl::factors::identify_factors;
use subgoal_hrl::hrl::Outcome;
use subgoal_hrl::testkit::{audit_meta_accounting, replay_option_learning};
use subgoal_hrl::train::{train_in_memory, MetaVariant, RunConfig, TrainOutcome};
use subgoal_hrl::tsc::{discover, DiscoverConfig, SubgoalSet};

fn inputs() -> &'static (SubgoalSet, DemoSet) {
    static CELL: OnceLock<(SubgoalSet, DemoSet)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut env = make_env("keydoor-20").unwrap();
        let demos = generate_demos(env.as_mut(), 10, 0.05, 7).unwrap();
        let fz = identify_factors(&demos, 0.2).unwrap();
        let d = discover(&demos, &fz, &DiscoverConfig::default(), 7, "t").unwrap();
        (d.subgoals, demos)
    })
}

fn variant() -> impl Strategy<Value = MetaVariant> {
    prop_oneof![Just(MetaVariant::Qlearn), Just(MetaVariant::Reuse), Just(MetaVariant::Fixed)]
}

fn run(meta: MetaVariant, seed: u64, share: bool, timeout: usize, budget: u64) -> (RunConfig, TrainOutcome) {
    let (subgoals, demos) = inputs();
    let config = RunConfig {
        env: "keydoor-20".into(),
        seed,
        meta,
        budget,
        option_timeout: timeout,
        share_experience: share,
        ..Default::default()
    };
    let out = train_in_memory(&config, Some(subgoals.clone()), Some(demos), true).unwrap();
    (config, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn executions_partition_the_step_stream(
        meta in variant(),
        seed in 0u64..1000,
        share in any::<bool>(),
        timeout in 5usize..200,
    ) {
        let (config, out) = run(meta, seed, share, timeout, 8_000);
        let trace = out.trainer.trace.as_ref().unwrap();
        let mdp = out.trainer.agent.mdp.as_ref().unwrap();
        prop_assert_eq!(trace.steps.len() as u64, out.trainer.env_steps);
        prop_assert_eq!(out.trainer.env_steps, config.budget);
        let total_len: usize = out.records.iter().map(|r| r.ep_len).sum();
        prop_assert_eq!(total_len as u64, out.trainer.env_steps);
        prop_assert_eq!(out.records.last().unwrap().env_steps, out.trainer.env_steps);

        let mut k = 0;
        for (i, ex) in trace.executions.iter().enumerate() {
            prop_assert!(ex.duration >= 1 && ex.duration <= timeout);
            let steps = &trace.steps[k..k + ex.duration];
            prop_assert!(steps.iter().all(|s| s.execution == Some(i) && s.option == Some(ex.option_id)));
            prop_assert!(mdp.initiation_allowed(mdp.option(ex.option_id), &ex.start_abstract));
            let last = steps.last().unwrap();
            let opt = mdp.option(ex.option_id);
            match ex.outcome {
                Outcome::SubgoalReached => prop_assert!(opt.reached(&last.next_state)),
                Outcome::EpisodeEnd => prop_assert!(!opt.reached(&last.next_state)),
                Outcome::Timeout => {
                    prop_assert!(!opt.reached(&last.next_state) && !last.done);
                    prop_assert_eq!(ex.duration, timeout);
                }
            }
            // Only the last step of an execution may end its option.
            for s in &steps[..steps.len() - 1] {
                prop_assert!(!opt.reached(&s.next_state) && !s.done);
            }
            let next_start = trace.executions.get(i + 1).map(|n| &n.start_abstract);
            if let Some(n) = next_start {
                if trace.steps.get(k + ex.duration).map(|s| s.episode) == Some(last.episode) {
                    prop_assert_eq!(n, &ex.end_abstract);
                }
            }
            k += ex.duration;
        }
        prop_assert_eq!(k, trace.steps.len());
    }

    #[test]
    fn meta_books_balance(meta in variant(), seed in 0u64..1000, timeout in 5usize..200) {
        let (config, out) = run(meta, seed, true, timeout, 8_000);
        let trace = out.trainer.trace.as_ref().unwrap();
        let learns = matches!(meta, MetaVariant::Qlearn | MetaVariant::Reuse);
        let bad = audit_meta_accounting(trace, config.gamma, 1e-9, learns);
        prop_assert!(bad.is_empty(), "{:?}", bad);
    }

    #[test]
    fn option_tables_equal_a_replay_of_the_step_log(
        meta in variant(),
        seed in 0u64..1000,
        share in any::<bool>(),
        timeout in 5usize..200,
    ) {
        let (config, out) = run(meta, seed, share, timeout, 8_000);
        let trace = out.trainer.trace.as_ref().unwrap();
        let mdp = out.trainer.agent.mdp.as_ref().unwrap();
        let replayed = replay_option_learning(trace, mdp, &config, 4).unwrap();
        for (o, (a, b)) in out.trainer.agent.options.iter().zip(&replayed).enumerate() {
            prop_assert!(a.entries() == b.entries(), "option {} differs", o);
        }
    }
}

#[test]
fn routing_adds_updates_only_when_enabled() {
    let (_, off) = run(MetaVariant::Qlearn, 3, false, 100, 20_000);
    let (_, on) = run(MetaVariant::Qlearn, 3, true, 100, 20_000);
    let stored = |o: &TrainOutcome| o.trainer.agent.options.iter().map(|t| t.len()).sum::<usize>();
    assert!(stored(&on) > stored(&off));
}

#[test]
fn identical_runs_are_identical() {
    let (_, a) = run(MetaVariant::Reuse, 11, true, 50, 10_000);
    let (_, b) = run(MetaVariant::Reuse, 11, true, 50, 10_000);
    assert_eq!(a.records, b.records);
    assert_eq!(a.trainer.trace, b.trainer.trace);
}

#[test]
fn flat_baseline_steps_carry_no_option() {
    let config = RunConfig {
        env: "keydoor-20".into(),
        meta: MetaVariant::FlatBaseline,
        budget: 3_000,
        ..Default::default()
    };
    let out = train_in_memory(&config, None, None, true).unwrap();
    let trace = out.trainer.trace.as_ref().unwrap();
    assert_eq!(trace.steps.len(), 3_000);
    assert!(trace.steps.iter().all(|s| s.execution.is_none() && s.option.is_none()));
    assert!(trace.executions.is_empty() && trace.meta_updates.is_empty());
}

#[test]
fn hierarchical_runs_need_subgoals() {
    let config = RunConfig {
        env: "keydoor-20".into(),
        meta: MetaVariant::Qlearn,
        budget: 100,
        ..Default::default()
    };
    assert!(train_in_memory(&config, None, None, false).is_err());
}
