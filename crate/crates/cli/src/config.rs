use std::path::{Path, PathBuf};

use rmm_core::merge_env::EnvConfig;
use rmm_core::search::SearchConfig;
use rmm_core::task_zoo::{default_task_specs, TaskSpec, TrainHyper};
use rmm_core::{rng, MergeOpConfig, OpId, PpoConfig, ToyArch};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arch: ToyArch,
    pub tasks: Vec<TaskSpec>,
    /// JSON array of task specs; replaces `tasks` when set.
    pub task_file: Option<PathBuf>,
    pub pretrain: TrainHyper,
    pub finetune: TrainHyper,
    pub checkpoints: CheckpointPaths,
    pub merge: MergeSection,
    pub search: SearchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            arch: ToyArch::default(),
            tasks: default_task_specs(),
            task_file: None,
            pretrain: TrainHyper::pretrain_default(),
            finetune: TrainHyper::default(),
            checkpoints: CheckpointPaths::default(),
            merge: MergeSection::default(),
            search: SearchSection::default(),
        }
    }
}

/// Explicit checkpoint locations. Unset paths fall back to
/// `<out_dir>/pt.rmmc` and `<out_dir>/ft_<task>.rmmc`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub pretrained: Option<PathBuf>,
    pub models: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub ops: Vec<OpId>,
    pub op_config: MergeOpConfig,
    pub layer_actions: bool,
    pub max_steps: Option<usize>,
    pub forced_emit_layers: Option<Vec<usize>>,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self {
            ops: vec![OpId::Ta, OpId::Ties],
            op_config: MergeOpConfig::default(),
            layer_actions: false,
            max_steps: None,
            forced_emit_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub ppo: PpoConfig,
    pub data_fraction: f64,
    pub dar_lambda: f64,
    pub total_episodes: usize,
    pub stratified: bool,
    pub rescore_top: usize,
    /// Episodes of the full-data timing probe run when `data_fraction < 1`.
    pub speedup_probe_episodes: usize,
    /// Also run the exhaustive oracle when the plan space is small enough.
    pub oracle: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let base = SearchConfig::new(EnvConfig::new(2, 3, vec![]));
        Self {
            ppo: base.ppo,
            data_fraction: base.data_fraction,
            dar_lambda: base.dar_lambda,
            total_episodes: base.total_episodes,
            stratified: base.stratified,
            rescore_top: base.rescore_top,
            speedup_probe_episodes: 3,
            oracle: true,
        }
    }
}

impl RunConfig {
    /// Reads the config (or defaults), applies `--set` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| {
                    Failure::config(format!(
                        "{}: line {} column {}: {e}",
                        p.display(),
                        e.line(),
                        e.column()
                    ))
                })?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Failure::config(format!("config: {e}")))?;
        if let Some(file) = &cfg.task_file {
            let text = std::fs::read_to_string(file)
                .map_err(|e| Failure::config(format!("cannot read task file {}: {e}", file.display())))?;
            cfg.tasks = serde_json::from_str(&text).map_err(|e| {
                Failure::config(format!(
                    "{}: line {} column {}: {e}",
                    file.display(),
                    e.line(),
                    e.column()
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.arch.validate()?;
        if self.tasks.is_empty() {
            return Err(Failure::config("config lists no tasks"));
        }
        for t in &self.tasks {
            t.validate()?;
            if t.class_count != self.arch.class_count || t.input_dim() != self.arch.input_dim {
                return Err(Failure::config(format!(
                    "task {} does not fit the architecture ({} classes, {} inputs)",
                    t.task_id, self.arch.class_count, self.arch.input_dim
                )));
            }
        }
        self.merge.op_config.validate()?;
        self.search.ppo.validate()?;
        self.env(self.model_count()).validate()?;
        Ok(())
    }

    pub fn model_count(&self) -> usize {
        self.checkpoints
            .models
            .as_ref()
            .map_or(self.tasks.len(), Vec::len)
    }

    pub fn env(&self, n_models: usize) -> EnvConfig {
        let mut env = EnvConfig::new(n_models, self.arch.n_layers(), self.merge.ops.clone());
        env.layer_actions = self.merge.layer_actions;
        env.forced_emit_layers = self.merge.forced_emit_layers.clone();
        if let Some(m) = self.merge.max_steps {
            env.max_steps = m;
        }
        env
    }

    pub fn search_config(&self, n_models: usize) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            env: self.env(n_models),
            ppo: s.ppo,
            ops: self.merge.op_config,
            data_fraction: s.data_fraction,
            dar_lambda: s.dar_lambda,
            total_episodes: s.total_episodes,
            seed: rng::derive_seed(self.seed, "search"),
            stratified: s.stratified,
            rescore_top: s.rescore_top,
        }
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.checkpoints
            .pretrained
            .clone()
            .unwrap_or_else(|| self.out_dir.join("pt.rmmc"))
    }

    pub fn model_paths(&self) -> Vec<PathBuf> {
        self.checkpoints.models.clone().unwrap_or_else(|| {
            self.tasks
                .iter()
                .map(|t| self.out_dir.join(format!("ft_{}.rmmc", t.task_id)))
                .collect()
        })
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set expects key=value, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::config(format!("--set {path}: {key} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
