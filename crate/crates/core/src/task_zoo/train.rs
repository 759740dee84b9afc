//! Mini-batch SGD on softmax cross-entropy for the toy MLP.
//!
//! This is the only place in the crate that differentiates through a task
//! model. It builds the pretrained and fine-tuned inputs to the search; the
//! search path itself never calls into this module.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::ToyArch;
use crate::error::{Error, Result};
use crate::eval_reward::TaskDataset;
use crate::param_store::{Checkpoint, ParamGroup};
use crate::rng;

static GRADIENT_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of backward passes run by this module since process start.
pub fn gradient_calls() -> u64 {
    GRADIENT_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 3,
            lr: 0.05,
            ..Self::default()
        }
    }
}

struct Layer {
    w: Vec<f64>,
    rows: usize,
    cols: usize,
}

struct Params {
    layers: Vec<Layer>,
}

impl Params {
    fn from_checkpoint(ckpt: &Checkpoint, arch: &ToyArch) -> Result<Self> {
        if ckpt.arch_id() != arch.arch_id() {
            return Err(Error::ArchMismatch(ckpt.arch_id().into(), arch.arch_id()));
        }
        Ok(Self {
            layers: ckpt
                .groups()
                .iter()
                .map(|g| Layer {
                    w: g.values().iter().map(|&v| f64::from(v)).collect(),
                    rows: g.shape()[0],
                    cols: g.shape()[1],
                })
                .collect(),
        })
    }

    fn to_checkpoint(&self, template: &Checkpoint) -> Checkpoint {
        let groups: Vec<ParamGroup> = template
            .groups()
            .iter()
            .zip(&self.layers)
            .map(|(g, l)| g.with_values(l.w.iter().map(|&v| v as f32).collect()).unwrap())
            .collect();
        Checkpoint::new(template.arch_id(), groups).unwrap()
    }

    /// Accumulates the cross-entropy gradient of one sample into `grads`
    /// and returns its loss.
    fn backprop(&self, x: &[f32], label: usize, grads: &mut [Vec<f64>]) -> f64 {
        let last = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = vec![x.iter().map(|&v| f64::from(v)).collect()];
        for (li, l) in self.layers.iter().enumerate() {
            let a = acts.last().unwrap();
            let inp = l.cols - 1;
            let out: Vec<f64> = (0..l.rows)
                .map(|r| {
                    let row = &l.w[r * l.cols..(r + 1) * l.cols];
                    let z = row[inp] + row[..inp].iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
                    if li == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        let logits = acts.last().unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = -(exps[label] / total).ln();
        // dL/dz for the head
        let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
        delta[label] -= 1.0;
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let a = &acts[li];
            let inp = l.cols - 1;
            let g = &mut grads[li];
            for r in 0..l.rows {
                for c in 0..inp {
                    g[r * l.cols + c] += delta[r] * a[c];
                }
                g[r * l.cols + inp] += delta[r];
            }
            if li > 0 {
                delta = (0..inp)
                    .map(|c| {
                        let back: f64 = (0..l.rows).map(|r| l.w[r * l.cols + c] * delta[r]).sum();
                        back * (1.0 - a[c] * a[c])
                    })
                    .collect();
            }
        }
        loss
    }
}

fn sgd(
    start: &Checkpoint,
    arch: &ToyArch,
    data: &[&TaskDataset],
    hyper: &TrainHyper,
    purpose: &str,
) -> Result<Checkpoint> {
    let mut params = Params::from_checkpoint(start, arch)?;
    let mut index: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(t, ds)| (0..ds.len()).map(move |i| (t, i)))
        .collect();
    let mut rng = rng::seeded(hyper.seed, purpose);
    let batch = hyper.batch_size.max(1);
    for epoch in 0..hyper.epochs {
        index.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in index.chunks(batch) {
            let mut grads: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
            for &(t, i) in chunk {
                let ds = data[t];
                epoch_loss += params.backprop(ds.row(i), ds.labels()[i] as usize, &mut grads);
            }
            GRADIENT_CALLS.fetch_add(1, Ordering::SeqCst);
            let step = hyper.lr / chunk.len() as f64;
            for (l, g) in params.layers.iter_mut().zip(&grads) {
                for (w, gi) in l.w.iter_mut().zip(g) {
                    *w -= step * gi;
                }
            }
        }
        if !epoch_loss.is_finite() || params.layers.iter().any(|l| l.w.iter().any(|w| !w.is_finite())) {
            return Err(Error::DivergedTraining(epoch));
        }
    }
    Ok(params.to_checkpoint(start))
}

/// Fine-tunes `pt` on one task.
pub fn train_finetuned(
    pt: &Checkpoint,
    task: &TaskDataset,
    arch: &ToyArch,
    hyper: &TrainHyper,
) -> Result<Checkpoint> {
    sgd(pt, arch, &[task], hyper, &format!("finetune/{}", task.task_id()))
}

/// Random init followed by a short run on the union of tasks.
pub fn make_pretrained(arch: &ToyArch, tasks: &[TaskDataset], hyper: &TrainHyper) -> Result<Checkpoint> {
    arch.validate()?;
    for t in tasks {
        if t.input_dim() != arch.input_dim || t.class_count() != arch.class_count {
            return Err(Error::InvalidSpec(format!(
                "task {} does not match the architecture",
                t.task_id()
            )));
        }
    }
    let init = arch.init(rng::derive_seed(hyper.seed, "pretrain-init"));
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    sgd(&init, arch, &refs, hyper, "pretrain")
}
