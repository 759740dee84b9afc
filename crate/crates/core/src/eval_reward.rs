//! Episode rewards: top-1 accuracy on per-task data subsets, averaged over
//! tasks, then smoothed across episodes by the dynamic average reward (DAR).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param_store::Checkpoint;
use crate::rng::combine;
use crate::task_zoo::arch::{new_scratch, DenseNet, ToyArch};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    task_id: String,
    class_count: usize,
    input_dim: usize,
    inputs: Vec<f32>,
    labels: Vec<u32>,
}

impl TaskDataset {
    pub fn new(
        task_id: impl Into<String>,
        class_count: usize,
        input_dim: usize,
        inputs: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if labels.is_empty() {
            return Err(Error::InvalidSpec(format!("{task_id}: empty dataset")));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::ShapeMismatch(format!(
                "{task_id}: {} inputs for {} labels of dim {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::InvalidSpec(format!(
                "{task_id}: label {bad} >= class_count {class_count}"
            )));
        }
        Ok(Self {
            task_id,
            class_count,
            input_dim,
            inputs,
            labels,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Reward data (train split) and held-out data used for final scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: TaskDataset,
    pub eval: TaskDataset,
}

/// Top-1 accuracy of `model` on a batch. Ties go to the lowest class index.
pub fn evaluate(model: &Checkpoint, arch: &ToyArch, inputs: &[f32], labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let net = DenseNet::new(model, arch)?;
    let d = net.input_dim();
    if inputs.len() != labels.len() * d {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels of dim {d}",
            inputs.len(),
            labels.len()
        )));
    }
    let mut scratch = new_scratch();
    let mut logits = vec![0.0; net.output_dim()];
    let correct = inputs
        .chunks_exact(d)
        .zip(labels)
        .filter(|(x, &y)| net.predict(x, &mut scratch, &mut logits) == y as usize)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy on the rows of `ds` listed in `indices`.
pub fn evaluate_indices(
    model: &Checkpoint,
    arch: &ToyArch,
    ds: &TaskDataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let net = DenseNet::new(model, arch)?;
    if net.input_dim() != ds.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "model takes {} inputs, {} has {}",
            net.input_dim(),
            ds.task_id(),
            ds.input_dim()
        )));
    }
    let mut scratch = new_scratch();
    let mut logits = vec![0.0; net.output_dim()];
    let correct = indices
        .iter()
        .filter(|&&i| net.predict(ds.row(i), &mut scratch, &mut logits) == ds.labels()[i] as usize)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

pub fn evaluate_full(model: &Checkpoint, arch: &ToyArch, ds: &TaskDataset) -> Result<f64> {
    evaluate(model, arch, ds.inputs(), ds.labels())
}

/// Mean full-data accuracy over tasks, plus the per-task values.
pub fn mean_accuracy(model: &Checkpoint, arch: &ToyArch, tasks: &[&TaskDataset]) -> Result<(f64, Vec<f64>)> {
    let per_task = tasks
        .iter()
        .map(|ds| evaluate_full(model, arch, ds))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_task.iter().sum::<f64>() / per_task.len() as f64, per_task))
}

/// Cycles through a dataset in shuffled epochs, `ceil(fraction * n)` rows at a time.
#[derive(Debug, Clone)]
pub struct SubsetCursor {
    permutation: Vec<usize>,
    position: usize,
    fraction: f64,
    epoch_seed: u64,
    epoch: u64,
    base_seed: u64,
    strata: Option<Vec<Vec<usize>>>,
}

impl SubsetCursor {
    pub fn new(ds: &TaskDataset, fraction: f64, seed: u64) -> Result<Self> {
        Self::build(ds, fraction, seed, false)
    }

    /// Like [`SubsetCursor::new`] but each epoch interleaves classes, so
    /// every batch is close to class-balanced.
    pub fn stratified(ds: &TaskDataset, fraction: f64, seed: u64) -> Result<Self> {
        Self::build(ds, fraction, seed, true)
    }

    fn build(ds: &TaskDataset, fraction: f64, seed: u64, stratified: bool) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data fraction {fraction} outside (0, 1]"
            )));
        }
        let strata = stratified.then(|| {
            let mut s = vec![Vec::new(); ds.class_count()];
            for (i, &l) in ds.labels().iter().enumerate() {
                s[l as usize].push(i);
            }
            s
        });
        let mut cursor = Self {
            permutation: (0..ds.len()).collect(),
            position: 0,
            fraction,
            epoch_seed: 0,
            epoch: 0,
            base_seed: seed,
            strata,
        };
        cursor.reshuffle();
        Ok(cursor)
    }

    fn reshuffle(&mut self) {
        self.epoch_seed = combine(self.base_seed, self.epoch);
        self.epoch += 1;
        self.position = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.epoch_seed);
        match &self.strata {
            None => self.permutation.shuffle(&mut rng),
            Some(strata) => {
                let mut shuffled = strata.clone();
                for s in &mut shuffled {
                    s.shuffle(&mut rng);
                }
                self.permutation.clear();
                let longest = shuffled.iter().map(Vec::len).max().unwrap_or(0);
                for i in 0..longest {
                    self.permutation.extend(shuffled.iter().filter_map(|s| s.get(i)));
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn epoch_seed(&self) -> u64 {
        self.epoch_seed
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn batch_size(&self) -> usize {
        ((self.fraction * self.len() as f64).ceil() as usize).max(1)
    }

    /// Next batch of row indices. The batch stops at the end of the epoch;
    /// reaching it reshuffles and the returned flag is true.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let end = (self.position + self.batch_size()).min(self.len());
        let batch = self.permutation[self.position..end].to_vec();
        self.position = end;
        let wrapped = self.position == self.len();
        if wrapped {
            self.reshuffle();
        }
        (batch, wrapped)
    }

    #[cfg(test)]
    pub(crate) fn set_position(&mut self, position: usize) {
        self.position = position;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReward {
    pub raw: f64,
    pub wrapped: bool,
    pub per_task: Vec<f64>,
}

/// Mean over tasks of the accuracy on each task's next subset batch.
pub fn episode_reward(
    model: &Checkpoint,
    arch: &ToyArch,
    tasks: &[&TaskDataset],
    cursors: &mut [SubsetCursor],
) -> Result<EpisodeReward> {
    if tasks.len() != cursors.len() {
        return Err(Error::InvalidConfig(format!(
            "{} tasks but {} subset cursors",
            tasks.len(),
            cursors.len()
        )));
    }
    let mut wrapped = false;
    let mut per_task = Vec::with_capacity(tasks.len());
    for (ds, cursor) in tasks.iter().zip(cursors.iter_mut()) {
        let (batch, w) = cursor.next_batch();
        wrapped |= w;
        per_task.push(evaluate_indices(model, arch, ds, &batch)?);
    }
    Ok(EpisodeReward {
        raw: mean(&per_task),
        wrapped,
        per_task,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarState {
    pub prev_reward: Option<f64>,
    pub lambda: f64,
    /// Current episode index.
    pub t: usize,
    pub t_max: usize,
}

impl DarState {
    pub fn new(lambda: f64, t_max: usize) -> Self {
        Self {
            prev_reward: None,
            lambda,
            t: 0,
            t_max,
        }
    }

    /// Weight given to the previous reward at the current episode.
    pub fn memory_weight(&self) -> f64 {
        self.lambda * self.t as f64 / self.t_max as f64
    }
}

/// `R_t = w * R_{t-1} + (1 - w) * raw` with `w = lambda * t / t_max`, where
/// `lambda` drops to 0 for the episode in which a subset cursor wrapped.
pub fn dar_update(state: &DarState, raw_reward: f64, wrapped: bool) -> (f64, DarState) {
    debug_assert!(
        state.t < state.t_max,
        "episode {} past t_max {}",
        state.t,
        state.t_max
    );
    let smoothed = match state.prev_reward {
        Some(prev) if !wrapped => {
            let w = state.memory_weight();
            w * prev + (1.0 - w) * raw_reward
        }
        _ => raw_reward,
    };
    let next = DarState {
        prev_reward: Some(smoothed),
        t: state.t + 1,
        ..*state
    };
    (smoothed, next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub raw_reward: f64,
    pub smoothed_reward: f64,
    pub wrapped: bool,
    pub per_task: Vec<f64>,
}

/// Append-only CSV: `episode,raw_reward,smoothed_reward,wrapped,acc_<task>...`.
pub struct RewardLog {
    out: BufWriter<File>,
}

impl RewardLog {
    pub fn create(path: &Path, task_ids: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "episode,raw_reward,smoothed_reward,wrapped")?;
        for id in task_ids {
            write!(out, ",acc_{id}")?;
        }
        writeln!(out)?;
        Ok(Self { out })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn push(&mut self, rec: &EpisodeRecord) -> Result<()> {
        write!(
            self.out,
            "{},{},{},{}",
            rec.episode, rec.raw_reward, rec.smoothed_reward, rec.wrapped
        )?;
        for acc in &rec.per_task {
            write!(self.out, ",{acc}")?;
        }
        writeln!(self.out)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_store::ParamGroup;

    fn ds(n: usize) -> TaskDataset {
        TaskDataset::new(
            "t",
            2,
            1,
            (0..n).map(|i| i as f32).collect(),
            (0..n).map(|i| (i % 2) as u32).collect(),
        )
        .unwrap()
    }

    fn arch() -> ToyArch {
        ToyArch {
            input_dim: 1,
            hidden_dim: 1,
            hidden_layers: 0,
            class_count: 2,
        }
    }

    /// input: x -> tanh(x); head: logits [0, s * h]
    fn model(head_scale: f32) -> Checkpoint {
        Checkpoint::new(
            arch().arch_id(),
            vec![
                ParamGroup::new("input", vec![1, 2], vec![1.0, 0.0]).unwrap(),
                ParamGroup::new("head", vec![2, 2], vec![0.0, 0.0, head_scale, 0.0]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn constant_logits_tie_to_first_class() {
        let d = ds(10);
        let acc = evaluate(&model(0.0), &arch(), d.inputs(), d.labels()).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn perfect_predictions() {
        let inputs = vec![-1.0, 2.0, -3.0, 0.5];
        let labels = vec![0, 1, 0, 1];
        assert_eq!(evaluate(&model(1.0), &arch(), &inputs, &labels).unwrap(), 1.0);
    }

    #[test]
    fn empty_batch() {
        assert!(matches!(
            evaluate(&model(1.0), &arch(), &[], &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn cursor_cycles_without_repeats() {
        let d = ds(10);
        let mut c = SubsetCursor::new(&d, 0.3, 5).unwrap();
        assert_eq!(c.batch_size(), 3);
        let mut seen = Vec::new();
        let mut wraps = 0;
        while wraps == 0 {
            let (b, w) = c.next_batch();
            seen.extend(b);
            wraps += w as usize;
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cursor_at_last_item_takes_it_and_wraps() {
        let d = ds(10);
        let mut c = SubsetCursor::new(&d, 0.2, 1).unwrap();
        let last = *c.permutation().last().unwrap();
        let seed_before = c.epoch_seed();
        c.set_position(9);
        let (b, w) = c.next_batch();
        assert_eq!(b, vec![last]);
        assert!(w);
        assert_eq!(c.position(), 0);
        assert_ne!(c.epoch_seed(), seed_before);
    }

    #[test]
    fn full_fraction_wraps_every_draw() {
        let d = ds(7);
        let mut c = SubsetCursor::new(&d, 1.0, 0).unwrap();
        for _ in 0..3 {
            let (b, w) = c.next_batch();
            assert_eq!(b.len(), 7);
            assert!(w);
        }
    }

    #[test]
    fn stratified_batches_balance_classes() {
        let d = ds(20);
        let mut c = SubsetCursor::stratified(&d, 0.2, 3).unwrap();
        for _ in 0..5 {
            let (b, _) = c.next_batch();
            let ones = b.iter().filter(|&&i| d.labels()[i] == 1).count();
            assert_eq!(ones, 2);
        }
    }

    #[test]
    fn reward_is_task_mean() {
        let a = TaskDataset::new("a", 2, 1, vec![1.0; 5], vec![1, 1, 1, 1, 0]).unwrap();
        let b = TaskDataset::new("b", 2, 1, vec![1.0; 5], vec![1, 1, 1, 0, 0]).unwrap();
        let mut cursors = vec![
            SubsetCursor::new(&a, 1.0, 0).unwrap(),
            SubsetCursor::new(&b, 1.0, 0).unwrap(),
        ];
        let r = episode_reward(&model(1.0), &arch(), &[&a, &b], &mut cursors).unwrap();
        assert_eq!(r.per_task, vec![0.8, 0.6]);
        assert!((r.raw - 0.7).abs() < 1e-15);
        assert!(r.wrapped);
    }

    #[test]
    fn dar_cases() {
        let s = DarState::new(0.5, 100);
        assert_eq!(dar_update(&s, 0.3, false).0, 0.3);
        let s = DarState {
            prev_reward: Some(0.8),
            lambda: 0.5,
            t: 50,
            t_max: 100,
        };
        let (r, next) = dar_update(&s, 0.4, false);
        assert!((r - 0.5).abs() < 1e-12);
        assert_eq!(next.t, 51);
        assert_eq!(next.prev_reward, Some(r));
        assert_eq!(dar_update(&s, 0.4, true).0, 0.4);
    }
}
