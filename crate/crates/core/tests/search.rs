mod common;

use common::*;
use rmm_core::eval_reward::{evaluate_full, mean_accuracy, TaskSplit};
use rmm_core::search::{brute_force_oracle, plan_space_size, run_search, run_uniform_baseline, SearchConfig};
use rmm_core::task_zoo::{default_zoo, gradient_calls, Zoo};
use rmm_core::*;
use std::sync::OnceLock;

fn zoo() -> &'static Zoo {
    static ZOO: OnceLock<Zoo> = OnceLock::new();
    ZOO.get_or_init(|| default_zoo(0).unwrap())
}

fn eval_sets(z: &Zoo) -> Vec<&TaskDataset> {
    z.tasks.iter().map(|t| &t.eval).collect()
}

fn quick(env: EnvConfig, episodes: usize) -> SearchConfig {
    SearchConfig {
        total_episodes: episodes,
        ..SearchConfig::new(env)
    }
}

#[test]
fn zero_episodes_is_an_error() {
    let z = zoo();
    let cfg = quick(two_op_env(3), 0);
    assert!(run_search(&z.finetuned, &z.pretrained, &z.arch, &z.tasks, &cfg).is_err());
}

#[test]
fn single_model_space_returns_that_model() {
    let z = zoo();
    let models = vec![z.finetuned[0].clone()];
    let env = EnvConfig {
        forced_emit_layers: Some(vec![1, 2, 3]),
        ..EnvConfig::new(1, 3, vec![])
    };
    let r = run_search(&models, &z.pretrained, &z.arch, &z.tasks, &quick(env, 16)).unwrap();
    assert_eq!(r.best_plan, MergePlan::uniform(3, PlanAction::Model(0)));
    let (want, _) = mean_accuracy(&models[0], &z.arch, &eval_sets(z)).unwrap();
    assert_eq!(r.best_full_reward, want);
}

#[test]
fn search_is_deterministic() {
    let z = zoo();
    let cfg = quick(two_op_env(3), 48);
    let a = run_search(&z.finetuned, &z.pretrained, &z.arch, &z.tasks, &cfg).unwrap();
    let b = run_search(&z.finetuned, &z.pretrained, &z.arch, &z.tasks, &cfg).unwrap();
    assert_eq!(a.best_plan, b.best_plan);
    assert_eq!(a.episode_log, b.episode_log);
}

#[test]
fn full_fraction_rewards_are_full_data_rewards() {
    let z = zoo();
    let cfg = SearchConfig {
        data_fraction: 1.0,
        ..quick(two_op_env(3), 16)
    };
    let r = run_search(&z.finetuned, &z.pretrained, &z.arch, &z.tasks, &cfg).unwrap();
    let oracle = brute_force_oracle(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        &cfg.env,
        &cfg.ops,
    )
    .unwrap();
    let full: std::collections::HashMap<_, _> = oracle
        .table
        .iter()
        .map(|row| (row.plan.clone(), row.reward))
        .collect();
    // replay the log against the oracle table through the rescored plans
    for rec in &r.episode_log {
        assert!(rec.wrapped);
        assert_eq!(rec.raw_reward, rec.smoothed_reward);
    }
    for p in &r.rescored {
        assert_eq!(p.full_reward, full[&p.plan]);
        assert!(p.smoothed_reward <= full[&p.plan]);
    }
}

#[test]
fn oracle_two_plans_picks_better_model() {
    let z = zoo();
    let mut arch = z.arch;
    arch.hidden_layers = 0;
    let one_layer = |c: &Checkpoint| {
        // a single linear layer from input to classes, taken from the head's shape
        let g = ParamGroup::new("head", vec![4, 3], c.groups()[0].values()[..12].to_vec()).unwrap();
        Checkpoint::new(arch.arch_id(), vec![g]).unwrap()
    };
    let models: Vec<Checkpoint> = z.finetuned.iter().map(one_layer).collect();
    let pt = one_layer(&z.pretrained);
    let env = EnvConfig {
        layer_actions: false,
        ..EnvConfig::new(2, 1, vec![])
    };
    let o = brute_force_oracle(&models, &pt, &arch, &eval_sets(z), &env, &ops_default()).unwrap();
    assert_eq!(o.table.len(), 2);
    let r: Vec<f64> = models
        .iter()
        .map(|m| mean_accuracy(m, &arch, &eval_sets(z)).unwrap().0)
        .collect();
    let want = if r[1] > r[0] { 1 } else { 0 };
    assert_eq!(o.best_plan, MergePlan::uniform(1, PlanAction::Model(want)));
}

#[test]
fn oracle_enumerates_64_plans_reproducibly() {
    let z = zoo();
    let env = two_op_env(3);
    assert_eq!(plan_space_size(&env), 64);
    let a = brute_force_oracle(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        &env,
        &ops_default(),
    )
    .unwrap();
    let b = brute_force_oracle(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        &env,
        &ops_default(),
    )
    .unwrap();
    assert_eq!(a.table.len(), 64);
    assert_eq!(a.table, b.table);
    assert!(a.table.iter().all(|r| (0.0..=1.0).contains(&r.reward)));
    let best = a.table.iter().map(|r| r.reward).fold(f64::MIN, f64::max);
    let first = a.table.iter().position(|r| r.reward == best).unwrap();
    assert_eq!(a.best_plan, a.table[first].plan);
}

#[test]
fn oracle_rejects_huge_spaces() {
    let z = zoo();
    let env = EnvConfig::new(2, 11, OpId::ALL.to_vec());
    assert!(matches!(
        brute_force_oracle(
            &z.finetuned,
            &z.pretrained,
            &z.arch,
            &eval_sets(z),
            &env,
            &ops_default()
        ),
        Err(Error::SpaceTooLarge(..))
    ));
}

#[test]
fn oracle_dominates_uniform_baselines() {
    let z = zoo();
    let env = EnvConfig {
        layer_actions: false,
        ..EnvConfig::new(2, 3, OpId::ALL.to_vec())
    };
    let o = brute_force_oracle(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        &env,
        &ops_default(),
    )
    .unwrap();
    for op in ["avg", "ta", "ties", "dare"] {
        let b = run_uniform_baseline(
            &z.finetuned,
            &z.pretrained,
            &z.arch,
            &eval_sets(z),
            op,
            &ops_default(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&b));
        assert!(o.best_reward >= b, "{op}");
    }
}

#[test]
fn baseline_identities() {
    let z = zoo();
    let same = vec![z.finetuned[0].clone(), z.finetuned[0].clone()];
    let own = mean_accuracy(&z.finetuned[0], &z.arch, &eval_sets(z)).unwrap().0;
    let avg = run_uniform_baseline(
        &same,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        "avg",
        &ops_default(),
    )
    .unwrap();
    assert_eq!(avg, own);
    let cfg = MergeOpConfig {
        ta_lambda: 1.0,
        ..ops_default()
    };
    let ta = run_uniform_baseline(&same[..1], &z.pretrained, &z.arch, &eval_sets(z), "ta", &cfg).unwrap();
    assert_eq!(ta, own);
    assert!(matches!(
        run_uniform_baseline(
            &same,
            &z.pretrained,
            &z.arch,
            &eval_sets(z),
            "slerp",
            &ops_default()
        ),
        Err(Error::UnknownOperator(_))
    ));
}

#[test]
fn fine_tuned_models_specialise() {
    let z = zoo();
    for (i, m) in z.finetuned.iter().enumerate() {
        for (j, t) in z.tasks.iter().enumerate() {
            let acc = evaluate_full(m, &z.arch, &t.eval).unwrap();
            if i == j {
                assert!(acc >= 0.9, "own {acc}");
            } else {
                assert!((0.1..=0.4).contains(&acc), "cross {acc}");
            }
        }
    }
}

#[test]
fn search_never_trains() {
    let z = zoo();
    let tasks: Vec<TaskSplit> = z.tasks.clone();
    let before = gradient_calls();
    run_search(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &tasks,
        &quick(two_op_env(3), 24),
    )
    .unwrap();
    brute_force_oracle(
        &z.finetuned,
        &z.pretrained,
        &z.arch,
        &eval_sets(z),
        &two_op_env(3),
        &ops_default(),
    )
    .unwrap();
    assert_eq!(gradient_calls(), before);
}
