use std::path::{Path, PathBuf};

use rmm_core::eval_reward::{evaluate_full, mean_accuracy, RewardLog, TaskSplit};
use rmm_core::search::{
    brute_force_oracle, plan_space_size, run_search, run_uniform_baseline, time_per_episode, ORACLE_MAX_PLANS,
};
use rmm_core::task_zoo::{build_zoo, generate_task, load_dataset, save_dataset};
use rmm_core::{
    assemble, load_checkpoint, save_checkpoint, Checkpoint, Error, MergePlan, OpId, PlanAction, TaskDataset,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::Failure;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn split_paths(cfg: &RunConfig, task_id: &str) -> [PathBuf; 2] {
    let dir = data_dir(cfg);
    [
        dir.join(format!("{task_id}_train.bin")),
        dir.join(format!("{task_id}_eval.bin")),
    ]
}

/// Cached splits when present, otherwise regenerated from the specs.
fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskSplit>, Failure> {
    cfg.tasks
        .iter()
        .map(|spec| {
            let [train, eval] = split_paths(cfg, &spec.task_id);
            if train.exists() && eval.exists() {
                let dir = data_dir(cfg);
                Ok(TaskSplit {
                    train: load_dataset(&dir, &format!("{}_train", spec.task_id))?,
                    eval: load_dataset(&dir, &format!("{}_eval", spec.task_id))?,
                })
            } else {
                let (train, eval) = generate_task(spec)?;
                Ok(TaskSplit { train, eval })
            }
        })
        .collect()
}

fn load_existing(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::config(format!(
            "missing checkpoint {} (run train-tasks first)",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?)
}

fn load_sources(cfg: &RunConfig) -> Result<(Vec<Checkpoint>, Checkpoint), Failure> {
    let pt = load_existing(&cfg.pretrained_path())?;
    let models = cfg
        .model_paths()
        .iter()
        .map(|p| load_existing(p))
        .collect::<Result<Vec<_>, _>>()?;
    if pt.arch_id() != cfg.arch.arch_id() {
        return Err(Error::ArchMismatch(pt.arch_id().into(), cfg.arch.arch_id()).into());
    }
    for m in &models {
        m.check_same_arch(&pt)?;
    }
    Ok((models, pt))
}

fn task_accuracies(model: &Checkpoint, cfg: &RunConfig, tasks: &[TaskSplit]) -> Result<Value, Failure> {
    let evals: Vec<&TaskDataset> = tasks.iter().map(|t| &t.eval).collect();
    let (mean, per_task) = mean_accuracy(model, &cfg.arch, &evals)?;
    let per: Map<String, Value> = tasks
        .iter()
        .zip(per_task)
        .map(|(t, a)| (t.eval.task_id().to_string(), json!(a)))
        .collect();
    Ok(json!({ "per_task": per, "mean": mean }))
}

pub fn train_tasks(cfg: &RunConfig, force: bool) -> Result<(), Failure> {
    let mut outputs = vec![cfg.out_dir.join("pt.rmmc")];
    for t in &cfg.tasks {
        outputs.push(cfg.out_dir.join(format!("ft_{}.rmmc", t.task_id)));
        outputs.extend(split_paths(cfg, &t.task_id));
    }
    if !force && outputs.iter().all(|p| p.exists()) {
        println!(
            "checkpoints and datasets already in {}; use --force to rebuild",
            cfg.out_dir.display()
        );
        return Ok(());
    }
    let zoo = build_zoo(cfg.arch, &cfg.tasks, &cfg.pretrain, &cfg.finetune, cfg.seed)?;
    std::fs::create_dir_all(data_dir(cfg)).map_err(|e| Failure::config(e.to_string()))?;
    save_checkpoint(&zoo.pretrained, cfg.out_dir.join("pt.rmmc"))?;
    let mut rows = Map::new();
    for (task, model) in zoo.tasks.iter().zip(&zoo.finetuned) {
        let id = task.train.task_id();
        save_checkpoint(model, cfg.out_dir.join(format!("ft_{id}.rmmc")))?;
        save_dataset(&task.train, &data_dir(cfg), &format!("{id}_train"))?;
        save_dataset(&task.eval, &data_dir(cfg), &format!("{id}_eval"))?;
        let accs: Map<String, Value> = zoo
            .tasks
            .iter()
            .map(|t| {
                Ok((
                    t.eval.task_id().to_string(),
                    json!(evaluate_full(model, &zoo.arch, &t.eval)?),
                ))
            })
            .collect::<Result<_, Failure>>()?;
        println!("ft_{id}: {}", Value::Object(accs.clone()));
        rows.insert(format!("ft_{id}"), Value::Object(accs));
    }
    write_json(
        &cfg.out_dir.join("report.json"),
        &json!({ "command": "train-tasks", "config": cfg, "accuracy": rows }),
    )
}

pub fn merge(cfg: &RunConfig, method: Option<&str>, plan: Option<&Path>) -> Result<(), Failure> {
    let (plan, label) = match (method, plan) {
        (Some(m), _) => {
            let op: OpId = m.parse()?;
            (
                MergePlan::uniform(cfg.arch.n_layers(), PlanAction::Op(op)),
                json!({ "method": op }),
            )
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read plan {}: {e}", path.display())))?;
            let plan = MergePlan::from_json(&text).map_err(|e| Failure {
                code: 3,
                message: e.to_string(),
            })?;
            (plan.clone(), json!({ "plan": plan }))
        }
        (None, None) => return Err(Failure::config("merge needs --method or --plan")),
    };
    let (models, pt) = load_sources(cfg)?;
    let tasks = load_tasks(cfg)?;
    let merged = assemble(&plan, &models, &pt, &cfg.merge.op_config)?;
    save_checkpoint(&merged, cfg.out_dir.join("merged.rmmc"))?;
    let acc = task_accuracies(&merged, cfg, &tasks)?;
    println!("merged with {plan}: {acc}");
    write_json(
        &cfg.out_dir.join("report.json"),
        &json!({ "command": "merge", "config": cfg, "merge": label, "accuracy": acc }),
    )
}

fn baselines(
    cfg: &RunConfig,
    models: &[Checkpoint],
    pt: &Checkpoint,
    evals: &[&TaskDataset],
) -> Result<Map<String, Value>, Failure> {
    OpId::ALL
        .iter()
        .map(|op| {
            let r = run_uniform_baseline(models, pt, &cfg.arch, evals, op.as_str(), &cfg.merge.op_config)?;
            Ok((op.as_str().to_string(), json!(r)))
        })
        .collect()
}

pub fn search(cfg: &RunConfig) -> Result<(), Failure> {
    let (models, pt) = load_sources(cfg)?;
    let tasks = load_tasks(cfg)?;
    let evals: Vec<&TaskDataset> = tasks.iter().map(|t| &t.eval).collect();
    let scfg = cfg.search_config(models.len());
    let result = run_search(&models, &pt, &cfg.arch, &tasks, &scfg)?;

    let csv = cfg.out_dir.join("rewards.csv");
    let ids: Vec<&str> = tasks.iter().map(|t| t.eval.task_id()).collect();
    let mut log = RewardLog::create(&csv, &ids)?;
    for rec in &result.episode_log {
        log.push(rec)?;
    }
    log.flush()?;
    let merged = assemble(&result.best_plan, &models, &pt, &cfg.merge.op_config)?;
    save_checkpoint(&merged, cfg.out_dir.join("merged.rmmc"))?;

    let base = baselines(cfg, &models, &pt, &evals)?;
    let oracle = if cfg.search.oracle && plan_space_size(&scfg.env) <= u128::from(ORACLE_MAX_PLANS) {
        let o = brute_force_oracle(&models, &pt, &cfg.arch, &evals, &scfg.env, &scfg.ops)?;
        Some(o.best_reward)
    } else {
        None
    };
    let speedup = if scfg.data_fraction < 1.0 {
        let probe = time_per_episode(
            &models,
            &pt,
            &cfg.arch,
            &tasks,
            &scfg,
            1.0,
            cfg.search.speedup_probe_episodes.max(1),
        )?;
        Some(probe / result.seconds_per_episode())
    } else {
        None
    };

    println!(
        "best plan {} full reward {:.4}",
        result.best_plan, result.best_full_reward
    );
    println!(
        "wall time {:.2}s ({:.3} ms/episode)",
        result.wall_time_seconds,
        result.seconds_per_episode() * 1e3
    );
    if let Some(s) = speedup {
        println!(
            "per-episode speed-up at data fraction {} vs full data: {s:.1}x",
            scfg.data_fraction
        );
    }
    let per_task: Map<String, Value> = ids
        .iter()
        .zip(&result.best_per_task)
        .map(|(id, a)| (id.to_string(), json!(a)))
        .collect();
    write_json(
        &cfg.out_dir.join("report.json"),
        &json!({
            "command": "search",
            "config": cfg,
            "search_config": scfg,
            "best_plan": result.best_plan,
            "best_full_reward": result.best_full_reward,
            "best_per_task": per_task,
            "rescored": result.rescored,
            "baseline_rewards": base,
            "oracle_reward": oracle,
            "wall_time_seconds": result.wall_time_seconds,
            "seconds_per_episode": result.seconds_per_episode(),
            "speedup_vs_full_data": speedup,
            "episode_log_path": "rewards.csv",
        }),
    )
}

pub fn oracle(cfg: &RunConfig) -> Result<(), Failure> {
    let env = cfg.env(cfg.model_count());
    let size = plan_space_size(&env);
    if size > u128::from(ORACLE_MAX_PLANS) {
        return Err(Error::SpaceTooLarge(size, ORACLE_MAX_PLANS).into());
    }
    let (models, pt) = load_sources(cfg)?;
    let tasks = load_tasks(cfg)?;
    let evals: Vec<&TaskDataset> = tasks.iter().map(|t| &t.eval).collect();
    let o = brute_force_oracle(&models, &pt, &cfg.arch, &evals, &env, &cfg.merge.op_config)?;
    let base = baselines(cfg, &models, &pt, &evals)?;
    println!(
        "{} plans; optimum {} at {:.4}",
        o.table.len(),
        o.best_plan,
        o.best_reward
    );
    write_json(
        &cfg.out_dir.join("oracle_table.json"),
        &json!({
            "config": cfg,
            "plan_count": o.table.len(),
            "best_plan": o.best_plan,
            "best_reward": o.best_reward,
            "baseline_rewards": base,
            "table": o.table,
        }),
    )
}

pub fn eval(cfg: &RunConfig, model: Option<&Path>) -> Result<(), Failure> {
    let tasks = load_tasks(cfg)?;
    let targets: Vec<PathBuf> = match model {
        Some(p) => vec![p.to_path_buf()],
        None => std::iter::once(cfg.pretrained_path())
            .chain(cfg.model_paths())
            .collect(),
    };
    let mut rows = Map::new();
    for path in targets {
        let ckpt = load_existing(&path)?;
        let acc = task_accuracies(&ckpt, cfg, &tasks)?;
        println!("{}: {acc}", path.display());
        rows.insert(path.display().to_string(), acc);
    }
    write_json(
        &cfg.out_dir.join("report.json"),
        &json!({ "command": "eval", "config": cfg, "accuracy": rows }),
    )
}
