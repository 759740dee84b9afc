//! The search loop, uniform-operator baselines and an exhaustive oracle.

use std::collections::HashMap;
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_reward::{
    dar_update, episode_reward, mean_accuracy, DarState, EpisodeRecord, SubsetCursor, TaskDataset, TaskSplit,
};
use crate::merge_env::{assemble, EnvConfig, Episode, LayerBank, MergePlan, PlanAction, PlanStep};
use crate::merge_ops::{MergeOpConfig, OpId};
use crate::param_store::Checkpoint;
use crate::rl_agent::{Agent, PpoConfig, Trajectory};
use crate::rng;
use crate::task_zoo::ToyArch;

/// No clock on wasm32-unknown-unknown; timings read as zero there.
#[cfg(target_arch = "wasm32")]
#[derive(Clone, Copy)]
struct Instant;

#[cfg(target_arch = "wasm32")]
impl Instant {
    fn now() -> Self {
        Instant
    }

    fn elapsed(&self) -> std::time::Duration {
        std::time::Duration::ZERO
    }
}

/// Largest plan space the oracle will enumerate.
pub const ORACLE_MAX_PLANS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub ops: MergeOpConfig,
    /// Fraction of each task's reward data evaluated per episode.
    pub data_fraction: f64,
    /// DAR scaling; 0 disables smoothing.
    pub dar_lambda: f64,
    pub total_episodes: usize,
    pub seed: u64,
    /// Class-interleaved subset batches.
    #[serde(default)]
    pub stratified: bool,
    /// Distinct plans re-scored on full data at the end.
    #[serde(default = "default_rescore")]
    pub rescore_top: usize,
}

fn default_rescore() -> usize {
    5
}

impl SearchConfig {
    pub fn new(env: EnvConfig) -> Self {
        Self {
            env,
            ppo: PpoConfig::default(),
            ops: MergeOpConfig::default(),
            data_fraction: 0.1,
            dar_lambda: 0.5,
            total_episodes: 400,
            seed: 0,
            stratified: false,
            rescore_top: default_rescore(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.ops.validate()?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data_fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.dar_lambda) {
            return Err(Error::InvalidConfig(format!(
                "dar_lambda {} outside [0, 1]",
                self.dar_lambda
            )));
        }
        if self.total_episodes == 0 || self.total_episodes < self.ppo.episodes_per_batch {
            return Err(Error::InvalidConfig(format!(
                "total_episodes {} must be >= episodes_per_batch {}",
                self.total_episodes, self.ppo.episodes_per_batch
            )));
        }
        if self.rescore_top == 0 {
            return Err(Error::InvalidConfig("rescore_top must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescoredPlan {
    pub plan: MergePlan,
    pub smoothed_reward: f64,
    pub first_episode: usize,
    pub full_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_plan: MergePlan,
    /// Mean accuracy over the tasks' full held-out sets.
    pub best_full_reward: f64,
    pub best_per_task: Vec<f64>,
    pub rescored: Vec<RescoredPlan>,
    pub episode_log: Vec<EpisodeRecord>,
    /// Time spent in the episode loop (rollout, reward, updates).
    pub episode_seconds: f64,
    pub wall_time_seconds: f64,
}

impl SearchResult {
    pub fn seconds_per_episode(&self) -> f64 {
        self.episode_seconds / self.episode_log.len() as f64
    }
}

struct PlanStats {
    best_smoothed: f64,
    first_episode: usize,
}

fn check_inputs(models: &[Checkpoint], pt: &Checkpoint, tasks: &[TaskSplit], env: &EnvConfig) -> Result<()> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no source models".into()));
    }
    if tasks.is_empty() {
        return Err(Error::EmptyInput("no tasks".into()));
    }
    for m in models {
        m.check_same_arch(pt)?;
    }
    if env.n_models != models.len() || env.n_layers != pt.layer_count() {
        return Err(Error::InvalidConfig(format!(
            "env expects {} models x {} layers, got {} x {}",
            env.n_models,
            env.n_layers,
            models.len(),
            pt.layer_count()
        )));
    }
    Ok(())
}

/// Runs the agent for `total_episodes` episodes and returns the best plan,
/// re-scored on each task's held-out data.
pub fn run_search(
    models: &[Checkpoint],
    pt: &Checkpoint,
    arch: &ToyArch,
    tasks: &[TaskSplit],
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    check_inputs(models, pt, tasks, &cfg.env)?;
    let started = Instant::now();

    let bank = LayerBank::build(models, pt, &cfg.env.ops, &cfg.ops)?;
    let ppo = PpoConfig {
        seed: rng::derive_seed(cfg.seed, "agent"),
        ..cfg.ppo
    };
    let mut agent = Agent::new(cfg.env.observation_len(), cfg.env.action_count(), &ppo);
    let reward_sets: Vec<&TaskDataset> = tasks.iter().map(|t| &t.eval).collect();
    let mut cursors = reward_sets
        .iter()
        .map(|ds| {
            let seed = rng::derive_seed(cfg.seed, &format!("subset/{}", ds.task_id()));
            if cfg.stratified {
                SubsetCursor::stratified(ds, cfg.data_fraction, seed)
            } else {
                SubsetCursor::new(ds, cfg.data_fraction, seed)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dar = DarState::new(cfg.dar_lambda, cfg.total_episodes);
    let mut log = Vec::with_capacity(cfg.total_episodes);
    let mut plans: HashMap<MergePlan, PlanStats> = HashMap::new();
    let mut batch = Vec::with_capacity(ppo.episodes_per_batch);

    for episode in 0..cfg.total_episodes {
        let mut env = Episode::new(cfg.env.clone())?;
        let mut steps = Vec::new();
        while !env.is_done() {
            let state = env.state();
            let step = agent.sample(state.observation(), state.action_mask(&cfg.env))?;
            let action = cfg.env.action_at(step.action).expect("masked index in range");
            env.step(action)?;
            steps.push(step);
        }

        let model = if env.is_complete() {
            match bank.assemble(env.plan()) {
                Ok(m) => Some(m),
                Err(Error::DimensionBreak(..)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let record = match model {
            Some(m) => {
                let r = episode_reward(&m, arch, &reward_sets, &mut cursors)?;
                let (smoothed, next) = dar_update(&dar, r.raw, r.wrapped);
                dar = next;
                let stats = plans.entry(env.plan().clone()).or_insert(PlanStats {
                    best_smoothed: f64::NEG_INFINITY,
                    first_episode: episode,
                });
                stats.best_smoothed = stats.best_smoothed.max(smoothed);
                EpisodeRecord {
                    episode,
                    raw_reward: r.raw,
                    smoothed_reward: smoothed,
                    wrapped: r.wrapped,
                    per_task: r.per_task,
                }
            }
            // Incomplete or shape-broken models score 0 and leave the DAR memory alone.
            None => {
                dar.t += 1;
                EpisodeRecord {
                    episode,
                    raw_reward: 0.0,
                    smoothed_reward: 0.0,
                    wrapped: false,
                    per_task: vec![0.0; tasks.len()],
                }
            }
        };
        batch.push(Trajectory {
            steps,
            terminal_reward: record.smoothed_reward,
        });
        log.push(record);

        if batch.len() == ppo.episodes_per_batch || episode + 1 == cfg.total_episodes {
            agent.update(&batch, &ppo)?;
            batch.clear();
        }
    }
    let episode_seconds = started.elapsed().as_secs_f64();

    let mut ranked: Vec<(MergePlan, PlanStats)> = plans.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.best_smoothed
            .total_cmp(&a.1.best_smoothed)
            .then(a.1.first_episode.cmp(&b.1.first_episode))
    });
    if ranked.is_empty() {
        return Err(Error::InvalidConfig("no episode produced a valid model".into()));
    }
    let mut rescored = Vec::new();
    let mut best: Option<(usize, Vec<f64>)> = None;
    for (plan, stats) in ranked.into_iter().take(cfg.rescore_top) {
        let model = bank.assemble(&plan)?;
        let (full, per_task) = mean_accuracy(&model, arch, &reward_sets)?;
        let better = match &best {
            None => true,
            Some((i, _)) => {
                let incumbent: &RescoredPlan = &rescored[*i];
                full > incumbent.full_reward
                    || (full == incumbent.full_reward && stats.first_episode < incumbent.first_episode)
            }
        };
        if better {
            best = Some((rescored.len(), per_task));
        }
        rescored.push(RescoredPlan {
            plan,
            smoothed_reward: stats.best_smoothed,
            first_episode: stats.first_episode,
            full_reward: full,
        });
    }
    let (best_idx, best_per_task) = best.expect("at least one plan");
    Ok(SearchResult {
        best_plan: rescored[best_idx].plan.clone(),
        best_full_reward: rescored[best_idx].full_reward,
        best_per_task,
        rescored,
        episode_log: log,
        episode_seconds,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Per-episode wall time of `probe_episodes` episodes at `fraction`,
/// excluding the final re-scoring.
pub fn time_per_episode(
    models: &[Checkpoint],
    pt: &Checkpoint,
    arch: &ToyArch,
    tasks: &[TaskSplit],
    cfg: &SearchConfig,
    fraction: f64,
    probe_episodes: usize,
) -> Result<f64> {
    let probe = SearchConfig {
        data_fraction: fraction,
        total_episodes: probe_episodes,
        ppo: PpoConfig {
            episodes_per_batch: cfg.ppo.episodes_per_batch.min(probe_episodes),
            ..cfg.ppo
        },
        rescore_top: 1,
        ..cfg.clone()
    };
    Ok(run_search(models, pt, arch, tasks, &probe)?.seconds_per_episode())
}

/// Applies one operator at every layer and returns the mean full-data accuracy.
pub fn run_uniform_baseline(
    models: &[Checkpoint],
    pt: &Checkpoint,
    arch: &ToyArch,
    tasks: &[&TaskDataset],
    op_id: &str,
    ops_cfg: &MergeOpConfig,
) -> Result<f64> {
    let op: OpId = op_id.parse()?;
    let plan = MergePlan::uniform(pt.layer_count(), PlanAction::Op(op));
    let merged = assemble(&plan, models, pt, ops_cfg)?;
    Ok(mean_accuracy(&merged, arch, tasks)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub plan: MergePlan,
    pub reward: f64,
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_plan: MergePlan,
    pub best_reward: f64,
    pub table: Vec<OracleRow>,
}

/// Number of emit-only plans, `(N + M)^L`.
pub fn plan_space_size(env: &EnvConfig) -> u128 {
    (env.emit_count() as u128)
        .checked_pow(env.n_layers as u32)
        .unwrap_or(u128::MAX)
}

/// The `index`-th emit-only plan in lexicographic order, layer 1 most
/// significant; actions ordered as models then operators.
pub fn plan_at(env: &EnvConfig, mut index: u64) -> MergePlan {
    let base = env.emit_count() as u64;
    let mut digits = vec![0u64; env.n_layers];
    for d in digits.iter_mut().rev() {
        *d = index % base;
        index /= base;
    }
    MergePlan::new(
        digits
            .into_iter()
            .enumerate()
            .map(|(k, d)| PlanStep {
                layer: k + 1,
                action: if (d as usize) < env.n_models {
                    PlanAction::Model(d as usize)
                } else {
                    PlanAction::Op(env.ops[d as usize - env.n_models])
                },
            })
            .collect(),
    )
}

/// Enumerates and scores every emit-only plan on the full `tasks` data.
/// Ties go to the lexicographically lowest plan.
pub fn brute_force_oracle(
    models: &[Checkpoint],
    pt: &Checkpoint,
    arch: &ToyArch,
    tasks: &[&TaskDataset],
    env: &EnvConfig,
    ops_cfg: &MergeOpConfig,
) -> Result<OracleResult> {
    let size = plan_space_size(env);
    if size > u128::from(ORACLE_MAX_PLANS) {
        return Err(Error::SpaceTooLarge(size, ORACLE_MAX_PLANS));
    }
    env.validate()?;
    if env.n_models != models.len() || env.n_layers != pt.layer_count() {
        return Err(Error::InvalidConfig(
            "env does not match the source models".into(),
        ));
    }
    let bank = LayerBank::build(models, pt, &env.ops, ops_cfg)?;
    let table = (0..size as u64)
        .into_par_iter()
        .map(|i| {
            let plan = plan_at(env, i);
            let model = bank.assemble(&plan)?;
            let (reward, per_task) = mean_accuracy(&model, arch, tasks)?;
            Ok(OracleRow {
                plan,
                reward,
                per_task,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.reward > table[best].reward {
            best = i;
        }
    }
    Ok(OracleResult {
        best_plan: table[best].plan.clone(),
        best_reward: table[best].reward,
        table,
    })
}
