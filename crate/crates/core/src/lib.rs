//! Layer-wise model merging searched by a PPO agent.
//!
//! Source models fine-tuned from one pretrained checkpoint are merged layer
//! by layer: at each layer an agent either copies one model's layer, applies
//! a parameter-space merging operator, skips the layer, or steps back to
//! stack it again. Episode rewards come from evaluating the assembled model
//! on small data subsets, smoothed by a dynamic average.
//!
//! Module map:
//! - [`param_store`]: parameter containers and the RMMC checkpoint format
//! - [`merge_ops`]: weight averaging, task arithmetic, TIES, DARE
//! - [`merge_env`]: merging map, action space, transitions, assembly
//! - [`eval_reward`]: subset evaluation and reward smoothing
//! - [`rl_agent`]: PPO actor-critic
//! - [`search`]: the search loop, uniform baselines, exhaustive oracle
//! - [`task_zoo`]: synthetic tasks and toy models

pub mod error;
pub mod eval_reward;
pub mod merge_env;
pub mod merge_ops;
pub mod param_store;
pub mod rl_agent;
pub mod rng;
pub mod search;
pub mod task_zoo;

pub use error::{Error, Result};
pub use eval_reward::{dar_update, DarState, EpisodeRecord, SubsetCursor, TaskDataset, TaskSplit};
pub use merge_env::{assemble, EnvConfig, MergeAction, MergePlan, MergingMap, PlanAction, PlanStep};
pub use merge_ops::{MergeOpConfig, OpId};
pub use param_store::{load_checkpoint, save_checkpoint, task_vector, Checkpoint, ParamGroup, TaskVector};
pub use rl_agent::{Agent, PpoConfig, Trajectory};
pub use search::{brute_force_oracle, run_search, run_uniform_baseline, SearchConfig, SearchResult};
pub use task_zoo::{ToyArch, Zoo};
