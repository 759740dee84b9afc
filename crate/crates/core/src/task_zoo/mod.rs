//! Desk-scale experimental substrate: synthetic tasks, a shared pretrained
//! toy MLP and one fine-tuned copy per task.

pub mod arch;
pub mod data;
pub mod train;

pub use arch::{forward, DenseNet, ToyArch};
pub use data::{default_task_specs, generate_task, load_dataset, save_dataset, TaskSpec};
pub use train::{gradient_calls, make_pretrained, train_finetuned, TrainHyper};

use crate::error::Result;
use crate::eval_reward::TaskSplit;
use crate::param_store::Checkpoint;
use crate::rng;

/// Tasks, pretrained model and fine-tuned models, in task order.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub arch: ToyArch,
    pub tasks: Vec<TaskSplit>,
    pub pretrained: Checkpoint,
    pub finetuned: Vec<Checkpoint>,
}

/// Generates every task, pretrains on their union, then fine-tunes one
/// model per task. All seeds derive from `seed`.
pub fn build_zoo(
    arch: ToyArch,
    specs: &[TaskSpec],
    pretrain: &TrainHyper,
    finetune: &TrainHyper,
    seed: u64,
) -> Result<Zoo> {
    let tasks = specs
        .iter()
        .map(|s| generate_task(s).map(|(train, eval)| TaskSplit { train, eval }))
        .collect::<Result<Vec<_>>>()?;
    let train_sets: Vec<_> = tasks.iter().map(|t| t.train.clone()).collect();
    let pre = TrainHyper {
        seed: rng::derive_seed(seed, "pretrain"),
        ..*pretrain
    };
    let pretrained = make_pretrained(&arch, &train_sets, &pre)?;
    let finetuned = tasks
        .iter()
        .map(|t| {
            let ft = TrainHyper {
                seed: rng::derive_seed(seed, &format!("finetune/{}", t.train.task_id())),
                ..*finetune
            };
            train_finetuned(&pretrained, &t.train, &arch, &ft)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Zoo {
        arch,
        tasks,
        pretrained,
        finetuned,
    })
}

/// The default two-task zoo.
pub fn default_zoo(seed: u64) -> Result<Zoo> {
    build_zoo(
        ToyArch::default(),
        &default_task_specs(),
        &TrainHyper::pretrain_default(),
        &TrainHyper::default(),
        seed,
    )
}
