use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_reward::TaskDataset;
use crate::rng;

/// Gaussian clusters, one per class, around fixed centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_count: usize,
    /// One center per class, each of length `input_dim`.
    pub centers: Vec<Vec<f32>>,
    pub noise_std: f32,
    pub samples_per_class: usize,
    pub split_seed: u64,
}

impl TaskSpec {
    pub fn input_dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("{}: {m}", self.task_id)));
        if self.class_count < 2 || self.centers.len() != self.class_count {
            return bad(format!(
                "{} centers for {} classes",
                self.centers.len(),
                self.class_count
            ));
        }
        let d = self.input_dim();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return bad("centers must share a non-zero dimension".into());
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite center".into());
        }
        for (i, a) in self.centers.iter().enumerate() {
            if self.centers[..i].contains(a) {
                return bad(format!("center {i} duplicates an earlier center"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        if self.samples_per_class < 5 {
            return bad("need at least 5 samples per class for the 80/20 split".into());
        }
        Ok(())
    }

    pub fn with_samples(&self, samples_per_class: usize) -> Self {
        Self {
            samples_per_class,
            ..self.clone()
        }
    }
}

/// Two four-class tasks in disjoint regions of the plane with different
/// label layouts.
pub fn default_task_specs() -> Vec<TaskSpec> {
    let square = |cx: f32, cy: f32, r: f32, order: [usize; 4]| {
        let corners = [
            [cx - r, cy - r],
            [cx + r, cy - r],
            [cx + r, cy + r],
            [cx - r, cy + r],
        ];
        order.iter().map(|&i| corners[i].to_vec()).collect::<Vec<_>>()
    };
    vec![
        TaskSpec {
            task_id: "task-a".into(),
            class_count: 4,
            centers: square(-2.0, 0.0, 0.8, [3, 0, 1, 2]),
            noise_std: 0.3,
            samples_per_class: 100,
            split_seed: 1,
        },
        TaskSpec {
            task_id: "task-b".into(),
            class_count: 4,
            centers: square(2.0, 0.0, 0.8, [0, 1, 2, 3]),
            noise_std: 0.3,
            samples_per_class: 100,
            split_seed: 2,
        },
    ]
}

/// Samples the clusters and splits each class 80/20 into (train, eval).
pub fn generate_task(spec: &TaskSpec) -> Result<(TaskDataset, TaskDataset)> {
    spec.validate()?;
    let d = spec.input_dim();
    let mut rng = rng::seeded(spec.split_seed, &format!("task-gen/{}", spec.task_id));
    let n_train = spec.samples_per_class * 4 / 5;
    let mut train = (Vec::new(), Vec::new());
    let mut eval = (Vec::new(), Vec::new());
    for (class, center) in spec.centers.iter().enumerate() {
        let mut points: Vec<Vec<f32>> = (0..spec.samples_per_class)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        c + spec.noise_std * z
                    })
                    .collect()
            })
            .collect();
        points.shuffle(&mut rng);
        for (i, p) in points.into_iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut eval };
            dst.0.extend(p);
            dst.1.push(class as u32);
        }
    }
    let make = |(inputs, labels): (Vec<f32>, Vec<u32>)| {
        TaskDataset::new(spec.task_id.clone(), spec.class_count, d, inputs, labels)
    };
    Ok((make(train)?, make(eval)?))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    task_id: String,
    class_count: usize,
    input_dim: usize,
    rows: usize,
    /// Each row is `input_dim` features followed by the label as f32.
    layout: String,
}

/// Writes `<stem>.bin` (flat little-endian f32 rows) and `<stem>.json`.
pub fn save_dataset(ds: &TaskDataset, dir: &Path, stem: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.len() * (ds.input_dim() + 1) * 4);
    for i in 0..ds.len() {
        for v in ds.row(i) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(ds.labels()[i] as f32).to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let sidecar = DatasetSidecar {
        task_id: ds.task_id().to_string(),
        class_count: ds.class_count(),
        input_dim: ds.input_dim(),
        rows: ds.len(),
        layout: "features...,label".into(),
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path, stem: &str) -> Result<TaskDataset> {
    let sidecar: DatasetSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let width = sidecar.input_dim + 1;
    if bytes.len() != sidecar.rows * width * 4 {
        return Err(Error::TruncatedFile(format!(
            "{stem}.bin holds {} bytes, sidecar declares {}",
            bytes.len(),
            sidecar.rows * width * 4
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut inputs = Vec::with_capacity(sidecar.rows * sidecar.input_dim);
    let mut labels = Vec::with_capacity(sidecar.rows);
    for row in floats.chunks_exact(width) {
        inputs.extend_from_slice(&row[..sidecar.input_dim]);
        labels.push(row[sidecar.input_dim] as u32);
    }
    TaskDataset::new(
        sidecar.task_id,
        sidecar.class_count,
        sidecar.input_dim,
        inputs,
        labels,
    )
}
