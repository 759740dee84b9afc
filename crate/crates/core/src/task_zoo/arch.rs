use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{Checkpoint, ParamGroup};
use crate::rng;

/// A tanh MLP: `input: d -> h`, `hidden_layers x (h -> h)`, `head: h -> C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyArch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub class_count: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 16,
            hidden_layers: 1,
            class_count: 4,
        }
    }
}

impl ToyArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.class_count < 2 {
            return Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// `L = hidden_layers + 2`.
    pub fn n_layers(&self) -> usize {
        self.hidden_layers + 2
    }

    pub fn arch_id(&self) -> String {
        format!(
            "toy-mlp-d{}-h{}-x{}-c{}",
            self.input_dim, self.hidden_dim, self.hidden_layers, self.class_count
        )
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        names.extend((1..=self.hidden_layers).map(|i| format!("hidden{i}")));
        names.push("head".to_string());
        names
    }

    /// `(out, in)` for every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.hidden_dim, self.input_dim)];
        dims.extend(std::iter::repeat_n(
            (self.hidden_dim, self.hidden_dim),
            self.hidden_layers,
        ));
        dims.push((self.class_count, self.hidden_dim));
        dims
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init(&self, seed: u64) -> Checkpoint {
        let mut rng = rng::seeded(seed, "toy-arch-init");
        let groups = self
            .layer_names()
            .into_iter()
            .zip(self.layer_dims())
            .map(|(name, (out, inp))| {
                let bound = 1.0 / (inp as f32).sqrt();
                let values = (0..out * (inp + 1))
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                ParamGroup::new(name, vec![out, inp + 1], values).expect("consistent shape")
            })
            .collect();
        Checkpoint::new(self.arch_id(), groups).expect("non-empty")
    }

    pub fn zeros(&self) -> Checkpoint {
        let groups = self
            .layer_names()
            .into_iter()
            .zip(self.layer_dims())
            .map(|(name, (out, inp))| {
                ParamGroup::new(name, vec![out, inp + 1], vec![0.0; out * (inp + 1)]).unwrap()
            })
            .collect();
        Checkpoint::new(self.arch_id(), groups).unwrap()
    }
}

/// A validated view of a checkpoint as a chain of dense tanh layers.
/// Works for assembled models with any number of interior layers.
pub struct DenseNet<'a> {
    layers: Vec<(&'a [f32], usize, usize)>,
}

impl<'a> DenseNet<'a> {
    pub fn new(model: &'a Checkpoint, arch: &ToyArch) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.layer_count());
        let mut width = arch.input_dim;
        for g in model.groups() {
            let &[out, cols] = g.shape() else {
                return Err(Error::ShapeMismatch(format!(
                    "{} is not a dense layer: shape {:?}",
                    g.name(),
                    g.shape()
                )));
            };
            if cols != width + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "{} expects {} inputs, previous width is {width}",
                    g.name(),
                    cols - 1
                )));
            }
            layers.push((g.values(), out, cols - 1));
            width = out;
        }
        if width != arch.class_count {
            return Err(Error::ShapeMismatch(format!(
                "model emits {width} logits, arch has {} classes",
                arch.class_count
            )));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].2
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().1
    }

    /// Writes logits for one input row into `out` (length = output_dim).
    pub fn logits_into(&self, x: &[f32], scratch: &mut [Vec<f32>; 2], out: &mut [f32]) {
        let [a, b] = scratch;
        a.clear();
        a.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (li, &(w, rows, inp)) in self.layers.iter().enumerate() {
            b.clear();
            let cols = inp + 1;
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = row[inp];
                for (wi, xi) in row[..inp].iter().zip(a.iter()) {
                    acc += wi * xi;
                }
                b.push(if li == last { acc } else { acc.tanh() });
            }
            std::mem::swap(a, b);
        }
        out.copy_from_slice(a);
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &[f32], scratch: &mut [Vec<f32>; 2], logits: &mut [f32]) -> usize {
        self.logits_into(x, scratch, logits);
        argmax(logits)
    }
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn new_scratch() -> [Vec<f32>; 2] {
    [Vec::new(), Vec::new()]
}

/// Logits for a row-major batch of inputs (`n * input_dim` floats).
pub fn forward(model: &Checkpoint, arch: &ToyArch, inputs: &[f32]) -> Result<Vec<f32>> {
    let net = DenseNet::new(model, arch)?;
    let d = net.input_dim();
    if !inputs.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch(format!(
            "{} input floats is not a multiple of input_dim {d}",
            inputs.len()
        )));
    }
    let c = net.output_dim();
    let mut out = vec![0.0; inputs.len() / d * c];
    let mut scratch = new_scratch();
    for (x, o) in inputs.chunks_exact(d).zip(out.chunks_exact_mut(c)) {
        net.logits_into(x, &mut scratch, o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_shapes() {
        let arch = ToyArch::default();
        let m = arch.init(1);
        assert_eq!(m.layer_count(), arch.n_layers());
        assert_eq!(m.groups()[0].shape(), &[16, 3]);
        assert_eq!(m.groups()[1].shape(), &[16, 17]);
        assert_eq!(m.groups()[2].shape(), &[4, 17]);
        assert_eq!(arch.init(1), m);
        assert_ne!(arch.init(2), m);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let arch = ToyArch::default();
        let logits = forward(&arch.zeros(), &arch, &[0.3, -4.0, 1.0, 2.0]).unwrap();
        assert_eq!(logits, vec![0.0; 8]);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let arch = ToyArch::default();
        let wide = ToyArch { input_dim: 3, ..arch };
        let m = wide.init(0);
        assert!(matches!(
            forward(&m, &arch, &[0.0, 0.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
