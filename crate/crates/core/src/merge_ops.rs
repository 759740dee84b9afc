//! Per-layer merging operators: weight averaging, task arithmetic, TIES and DARE.
//!
//! Every operator takes the pretrained layer and the aligned fine-tuned
//! layers and returns a new group shaped like its inputs. Arithmetic runs in
//! f64 and is rounded to f32 once at the end, so identity cases such as
//! `pt + 1.0 * (ft - pt)` reproduce `ft` bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::ParamGroup;
use crate::rng::{combine, hash_str, keyed_unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OpId {
    Avg,
    Ta,
    Ties,
    Dare,
}

impl OpId {
    pub const ALL: [OpId; 4] = [OpId::Avg, OpId::Ta, OpId::Ties, OpId::Dare];

    pub fn as_str(self) -> &'static str {
        match self {
            OpId::Avg => "avg",
            OpId::Ta => "ta",
            OpId::Ties => "ties",
            OpId::Dare => "dare",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpId::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }
}

impl TryFrom<String> for OpId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OpId> for String {
    fn from(op: OpId) -> String {
        op.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeOpConfig {
    /// Scaling applied to the combined task vector by TA, TIES and DARE.
    pub ta_lambda: f64,
    pub ties_keep_fraction: f64,
    pub dare_drop_prob: f64,
    pub dare_seed: u64,
}

impl Default for MergeOpConfig {
    fn default() -> Self {
        Self {
            ta_lambda: 0.5,
            ties_keep_fraction: 0.2,
            dare_drop_prob: 0.9,
            dare_seed: 0,
        }
    }
}

impl MergeOpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ta_lambda.is_finite() && self.ta_lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ta_lambda {} must be >= 0",
                self.ta_lambda
            )));
        }
        if !(self.ties_keep_fraction > 0.0 && self.ties_keep_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ties_keep_fraction {} outside (0, 1]",
                self.ties_keep_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dare_drop_prob) {
            return Err(Error::InvalidDropProb(self.dare_drop_prob));
        }
        Ok(())
    }
}

fn check_shapes(reference: &ParamGroup, layers: &[ParamGroup]) -> Result<()> {
    layers.iter().try_for_each(|l| reference.check_same_shape(l))
}

fn task_vectors(pt_layer: &ParamGroup, ft_layers: &[ParamGroup]) -> Vec<Vec<f64>> {
    ft_layers
        .iter()
        .map(|ft| {
            ft.values()
                .iter()
                .zip(pt_layer.values())
                .map(|(&f, &p)| f64::from(f) - f64::from(p))
                .collect()
        })
        .collect()
}

/// `pt + lambda * merged`, rounded to f32.
fn rebase(pt_layer: &ParamGroup, merged: &[f64], lambda: f64) -> ParamGroup {
    let values = pt_layer
        .values()
        .iter()
        .zip(merged)
        .map(|(&p, &m)| (f64::from(p) + lambda * m) as f32)
        .collect();
    pt_layer.with_values(values).expect("shape preserved")
}

fn sum_vectors(vectors: &[Vec<f64>], numel: usize) -> Vec<f64> {
    let mut sum = vec![0.0; numel];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    sum
}

pub fn weight_average(layers: &[ParamGroup]) -> Result<ParamGroup> {
    let first = layers
        .first()
        .ok_or_else(|| Error::EmptyInput("weight_average needs at least one layer".into()))?;
    check_shapes(first, layers)?;
    let k = layers.len() as f64;
    let mut sum = vec![0.0f64; first.len()];
    for l in layers {
        for (s, &x) in sum.iter_mut().zip(l.values()) {
            *s += f64::from(x);
        }
    }
    first.with_values(sum.into_iter().map(|s| (s / k) as f32).collect())
}

pub fn task_arithmetic(
    pt_layer: &ParamGroup,
    ft_layers: &[ParamGroup],
    cfg: &MergeOpConfig,
) -> Result<ParamGroup> {
    check_shapes(pt_layer, ft_layers)?;
    let merged = sum_vectors(&task_vectors(pt_layer, ft_layers), pt_layer.len());
    Ok(rebase(pt_layer, &merged, cfg.ta_lambda))
}

/// Zeroes all but the `ceil(keep * n)` largest-magnitude entries. Equal
/// magnitudes are ranked by lower index first.
pub fn trim_top_k(values: &[f64], keep_fraction: f64) -> Vec<f64> {
    let n = values.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    out
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Elects one sign per element from the summed trimmed vectors. An element
/// whose sum is exactly zero takes the layer's majority sign (the sign of
/// the sum of elected signs); if the layer itself is balanced it stays 0.
pub fn elect_signs(trimmed: &[Vec<f64>], numel: usize) -> Vec<i8> {
    let mut signs: Vec<i8> = sum_vectors(trimmed, numel).into_iter().map(sign).collect();
    let majority = sign(signs.iter().map(|&s| f64::from(s)).sum());
    for s in signs.iter_mut().filter(|s| **s == 0) {
        *s = majority;
    }
    signs
}

pub fn ties_merge(
    pt_layer: &ParamGroup,
    ft_layers: &[ParamGroup],
    cfg: &MergeOpConfig,
) -> Result<ParamGroup> {
    check_shapes(pt_layer, ft_layers)?;
    if !(cfg.ties_keep_fraction > 0.0 && cfg.ties_keep_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ties_keep_fraction {} outside (0, 1]",
            cfg.ties_keep_fraction
        )));
    }
    let numel = pt_layer.len();
    let trimmed: Vec<Vec<f64>> = task_vectors(pt_layer, ft_layers)
        .iter()
        .map(|tv| trim_top_k(tv, cfg.ties_keep_fraction))
        .collect();
    let signs = elect_signs(&trimmed, numel);
    let merged: Vec<f64> = (0..numel)
        .map(|j| {
            let (sum, count) = trimmed
                .iter()
                .map(|tv| tv[j])
                .filter(|&v| v != 0.0 && sign(v) == signs[j])
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    Ok(rebase(pt_layer, &merged, cfg.ta_lambda))
}

/// Key for the drop mask of one model's layer; element indices are the counter.
pub fn dare_key(seed: u64, model_index: usize, layer_name: &str) -> u64 {
    combine(combine(seed, model_index as u64), hash_str(layer_name))
}

pub fn dare_merge(
    pt_layer: &ParamGroup,
    ft_layers: &[ParamGroup],
    cfg: &MergeOpConfig,
) -> Result<ParamGroup> {
    check_shapes(pt_layer, ft_layers)?;
    let p = cfg.dare_drop_prob;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidDropProb(p));
    }
    let rescale = 1.0 / (1.0 - p);
    let sparsified: Vec<Vec<f64>> = task_vectors(pt_layer, ft_layers)
        .into_iter()
        .enumerate()
        .map(|(i, tv)| {
            let key = dare_key(cfg.dare_seed, i, pt_layer.name());
            tv.into_iter()
                .enumerate()
                .map(|(j, v)| {
                    if keyed_unit(key, j as u64) < p {
                        0.0
                    } else {
                        v * rescale
                    }
                })
                .collect()
        })
        .collect();
    let merged = sum_vectors(&sparsified, pt_layer.len());
    Ok(rebase(pt_layer, &merged, cfg.ta_lambda))
}

/// Dispatches one operator on one layer.
pub fn apply(
    op: OpId,
    pt_layer: &ParamGroup,
    ft_layers: &[ParamGroup],
    cfg: &MergeOpConfig,
) -> Result<ParamGroup> {
    let out = match op {
        OpId::Avg => weight_average(ft_layers)?,
        OpId::Ta => task_arithmetic(pt_layer, ft_layers, cfg)?,
        OpId::Ties => ties_merge(pt_layer, ft_layers, cfg)?,
        OpId::Dare => dare_merge(pt_layer, ft_layers, cfg)?,
    };
    pt_layer.check_same_shape(&out)?;
    Ok(out.renamed(pt_layer.name()))
}
