//! The merging environment: merging-map state, action space, transitions and
//! assembly of a merged checkpoint from the emitted layers.
//!
//! Layers are 1-based (`cursor` runs over `1..=L`, `L + 1` means past the
//! last layer). Model indices inside [`MergeAction`] are 0-based; the
//! external plan format writes them 1-based as `"model:1"`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge_ops::{self, MergeOpConfig, OpId};
use crate::param_store::{Checkpoint, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeAction {
    /// Copy layer `k` of source model `i` (0-based).
    Model(usize),
    /// Apply the `j`-th configured operator (0-based) to layer `k`.
    Merge(usize),
    Skip,
    Back,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_models: usize,
    pub n_layers: usize,
    /// The merging operators, in action order.
    pub ops: Vec<OpId>,
    pub max_steps: usize,
    /// 1-based layers where skipping is masked. `None` means `{1, L}`.
    #[serde(default)]
    pub forced_emit_layers: Option<Vec<usize>>,
    /// When false, Skip and Back are always masked.
    #[serde(default = "default_true")]
    pub layer_actions: bool,
}

fn default_true() -> bool {
    true
}

impl EnvConfig {
    pub fn new(n_models: usize, n_layers: usize, ops: Vec<OpId>) -> Self {
        Self {
            n_models,
            n_layers,
            ops,
            max_steps: 2 * n_layers,
            forced_emit_layers: None,
            layer_actions: true,
        }
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Rows of the merging map: `N + M`.
    pub fn emit_count(&self) -> usize {
        self.n_models + self.ops.len()
    }

    /// `N + M + 2`.
    pub fn action_count(&self) -> usize {
        self.emit_count() + 2
    }

    pub fn observation_len(&self) -> usize {
        (self.emit_count() + 1) * self.n_layers
    }

    pub fn forced_layers(&self) -> Vec<usize> {
        match &self.forced_emit_layers {
            Some(v) => v.clone(),
            None => {
                let mut v = vec![1, self.n_layers];
                v.dedup();
                v
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::InvalidConfig("n_models must be >= 1".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.max_steps < self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "max_steps {} < n_layers {}: no complete model is reachable",
                self.max_steps, self.n_layers
            )));
        }
        let unique: HashSet<_> = self.ops.iter().collect();
        if unique.len() != self.ops.len() {
            return Err(Error::InvalidConfig("duplicate merging operator".into()));
        }
        if let Some(bad) = self
            .forced_layers()
            .into_iter()
            .find(|&k| k == 0 || k > self.n_layers)
        {
            return Err(Error::InvalidConfig(format!(
                "forced emit layer {bad} out of range"
            )));
        }
        Ok(())
    }

    pub fn action_index(&self, action: MergeAction) -> usize {
        let e = self.emit_count();
        match action {
            MergeAction::Model(i) => i,
            MergeAction::Merge(j) => self.n_models + j,
            MergeAction::Skip => e,
            MergeAction::Back => e + 1,
        }
    }

    pub fn action_at(&self, index: usize) -> Option<MergeAction> {
        let n = self.n_models;
        let e = self.emit_count();
        match index {
            i if i < n => Some(MergeAction::Model(i)),
            i if i < e => Some(MergeAction::Merge(i - n)),
            i if i == e => Some(MergeAction::Skip),
            i if i == e + 1 => Some(MergeAction::Back),
            _ => None,
        }
    }

    fn check_action(&self, action: MergeAction) -> Result<()> {
        match action {
            MergeAction::Model(i) if i >= self.n_models => Err(Error::IllegalAction(format!(
                "model index {i} >= {}",
                self.n_models
            ))),
            MergeAction::Merge(j) if j >= self.n_ops() => Err(Error::IllegalAction(format!(
                "operator index {j} >= {}",
                self.n_ops()
            ))),
            _ => Ok(()),
        }
    }

    /// Resolves an emitting action to its plan form.
    pub fn plan_action(&self, action: MergeAction) -> Option<PlanAction> {
        match action {
            MergeAction::Model(i) => Some(PlanAction::Model(i)),
            MergeAction::Merge(j) => Some(PlanAction::Op(self.ops[j])),
            MergeAction::Skip | MergeAction::Back => None,
        }
    }
}

/// The merging map: per-(action, layer) emission counts plus the cursor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergingMap {
    rows: usize,
    layers: usize,
    counts: Vec<u32>,
    cursor: usize,
    step: usize,
}

impl MergingMap {
    pub fn reset(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rows: cfg.emit_count(),
            layers: cfg.n_layers,
            counts: vec![0; cfg.emit_count() * cfg.n_layers],
            cursor: 1,
            step: 0,
        })
    }

    /// Count for map row `row` (0-based) at layer `layer` (1-based).
    pub fn count(&self, row: usize, layer: usize) -> u32 {
        self.counts[row * self.layers + layer - 1]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.layers)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self, cfg: &EnvConfig) -> bool {
        self.cursor > self.layers || self.step >= cfg.max_steps
    }

    /// True when the cursor passed the last layer.
    pub fn is_complete(&self) -> bool {
        self.cursor > self.layers
    }

    /// Legal-action mask indexed by action index.
    pub fn action_mask(&self, cfg: &EnvConfig) -> Vec<bool> {
        let mut mask = vec![true; cfg.action_count()];
        let skip = cfg.action_index(MergeAction::Skip);
        let back = cfg.action_index(MergeAction::Back);
        if !cfg.layer_actions {
            mask[skip] = false;
            mask[back] = false;
            return mask;
        }
        let remaining_layers = self.layers + 1 - self.cursor;
        let budget = cfg.max_steps - self.step;
        if self.cursor == 1 {
            mask[back] = false;
        }
        if cfg.forced_layers().contains(&self.cursor) {
            mask[skip] = false;
        }
        if budget <= remaining_layers {
            mask[skip] = false;
            mask[back] = false;
        }
        // Back costs one step and adds one layer to revisit.
        if budget < remaining_layers + 2 {
            mask[back] = false;
        }
        mask
    }

    pub fn legal_actions(&self, cfg: &EnvConfig) -> Vec<MergeAction> {
        self.action_mask(cfg)
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .filter_map(|(i, _)| cfg.action_at(i))
            .collect()
    }

    pub fn step(&self, action: MergeAction, cfg: &EnvConfig) -> Result<Transition> {
        cfg.check_action(action)?;
        if self.is_done(cfg) {
            return Err(Error::IllegalAction("episode already terminated".into()));
        }
        if !self.action_mask(cfg)[cfg.action_index(action)] {
            return Err(Error::IllegalAction(format!(
                "{action:?} masked at layer {}",
                self.cursor
            )));
        }
        let mut next = self.clone();
        next.step += 1;
        let emitted = match action {
            MergeAction::Skip => {
                next.cursor += 1;
                None
            }
            MergeAction::Back => {
                next.cursor -= 1;
                None
            }
            emit => {
                let row = cfg.action_index(emit);
                next.counts[row * self.layers + self.cursor - 1] += 1;
                let step = PlanStep {
                    layer: self.cursor,
                    action: cfg.plan_action(emit).expect("emitting action"),
                };
                next.cursor += 1;
                Some(step)
            }
        };
        let done = next.is_done(cfg);
        Ok(Transition {
            state: next,
            emitted,
            done,
        })
    }

    /// Row-major counts followed by a one-hot cursor; length `(N + M + 1) * L`.
    pub fn observation(&self) -> Vec<f64> {
        let mut obs: Vec<f64> = self.counts.iter().map(|&c| f64::from(c)).collect();
        let mut onehot = vec![0.0; self.layers];
        if self.cursor <= self.layers {
            onehot[self.cursor - 1] = 1.0;
        }
        obs.extend(onehot);
        obs
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: MergingMap,
    pub emitted: Option<PlanStep>,
    pub done: bool,
}

/// State plus the plan emitted so far.
#[derive(Debug, Clone)]
pub struct Episode {
    cfg: EnvConfig,
    state: MergingMap,
    plan: MergePlan,
    actions: Vec<MergeAction>,
}

impl Episode {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let state = MergingMap::reset(&cfg)?;
        Ok(Self {
            cfg,
            state,
            plan: MergePlan::default(),
            actions: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &MergingMap {
        &self.state
    }

    pub fn plan(&self) -> &MergePlan {
        &self.plan
    }

    pub fn actions(&self) -> &[MergeAction] {
        &self.actions
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done(&self.cfg)
    }

    pub fn is_complete(&self) -> bool {
        self.state.is_complete()
    }

    pub fn step(&mut self, action: MergeAction) -> Result<bool> {
        let t = self.state.step(action, &self.cfg)?;
        self.state = t.state;
        if let Some(s) = t.emitted {
            self.plan.steps.push(s);
        }
        self.actions.push(action);
        Ok(t.done)
    }

    /// Replays `actions` from a fresh reset.
    pub fn replay(cfg: EnvConfig, actions: &[MergeAction]) -> Result<Self> {
        let mut ep = Self::new(cfg)?;
        for &a in actions {
            ep.step(a)?;
        }
        Ok(ep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanAction {
    /// 0-based source model index.
    Model(usize),
    Op(OpId),
}

impl fmt::Display for PlanAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanAction::Model(i) => write!(f, "model:{}", i + 1),
            PlanAction::Op(op) => f.write_str(op.as_str()),
        }
    }
}

impl FromStr for PlanAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(idx) = s.strip_prefix("model:") {
            let i: usize = idx
                .parse()
                .map_err(|_| Error::IllegalAction(format!("bad model index in {s:?}")))?;
            if i == 0 {
                return Err(Error::IllegalAction("model indices start at 1".into()));
            }
            return Ok(PlanAction::Model(i - 1));
        }
        Ok(PlanAction::Op(s.parse()?))
    }
}

impl Serialize for PlanAction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlanAction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStep {
    /// 1-based layer index.
    pub layer: usize,
    pub action: PlanAction,
}

/// Ordered emitted layers; serializes as a JSON list of `{layer, action}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergePlan {
    pub steps: Vec<PlanStep>,
}

impl MergePlan {
    pub fn new(steps: Vec<PlanStep>) -> Self {
        Self { steps }
    }

    /// The same action at layers `1..=n_layers`.
    pub fn uniform(n_layers: usize, action: PlanAction) -> Self {
        Self::new((1..=n_layers).map(|layer| PlanStep { layer, action }).collect())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("merge plan: {e}")))
    }
}

impl fmt::Display for MergePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| format!("{}:{}", s.layer, s.action))
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Checks that consecutive dense groups (`[out, in + 1]`) chain.
pub fn check_chain(groups: &[ParamGroup]) -> Result<()> {
    for (i, pair) in groups.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.shape().len() == 2 && b.shape().len() == 2 && b.shape()[1] != a.shape()[0] + 1 {
            return Err(Error::DimensionBreak(
                i + 1,
                i + 2,
                format!(
                    "{} outputs {} features, {} expects {}",
                    a.name(),
                    a.shape()[0],
                    b.name(),
                    b.shape()[1] - 1
                ),
            ));
        }
    }
    Ok(())
}

/// Arch id for an assembled model: the source id when the plan emits layers
/// `1..=L` exactly once in order, otherwise the source id tagged with the
/// emitted layer sequence.
pub fn assembled_arch_id(source: &str, plan: &MergePlan, n_layers: usize) -> String {
    let straight = plan.len() == n_layers && plan.steps.iter().enumerate().all(|(i, s)| s.layer == i + 1);
    if straight {
        source.to_string()
    } else {
        let seq: Vec<String> = plan.steps.iter().map(|s| s.layer.to_string()).collect();
        format!("{source}@{}", seq.join("."))
    }
}

/// Names emitted groups after their source layer, suffixing repeats.
pub(crate) fn unique_names(groups: Vec<ParamGroup>) -> Vec<ParamGroup> {
    let mut seen: std::collections::HashMap<String, usize> = Default::default();
    groups
        .into_iter()
        .map(|g| {
            let n = seen.entry(g.name().to_string()).or_insert(0);
            *n += 1;
            if *n == 1 {
                g
            } else {
                let name = format!("{}#{}", g.name(), n);
                g.renamed(name)
            }
        })
        .collect()
}

fn check_sources(models: &[Checkpoint], pt: &Checkpoint) -> Result<()> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no source models".into()));
    }
    for m in models {
        m.check_same_arch(pt)?;
        if m.layer_count() != pt.layer_count() {
            return Err(Error::ShapeMismatch("source models differ in layer count".into()));
        }
    }
    Ok(())
}

fn emit_layer(
    action: PlanAction,
    layer: usize,
    models: &[Checkpoint],
    pt: &Checkpoint,
    ops_cfg: &MergeOpConfig,
) -> Result<ParamGroup> {
    let k = layer - 1;
    match action {
        PlanAction::Model(i) => models
            .get(i)
            .map(|m| m.groups()[k].clone())
            .ok_or_else(|| Error::IllegalAction(format!("model:{} of {}", i + 1, models.len()))),
        PlanAction::Op(op) => {
            let layers: Vec<ParamGroup> = models.iter().map(|m| m.groups()[k].clone()).collect();
            merge_ops::apply(op, &pt.groups()[k], &layers, ops_cfg)
        }
    }
}

/// Builds the merged checkpoint: each plan step contributes one group, in order.
pub fn assemble(
    plan: &MergePlan,
    models: &[Checkpoint],
    pt: &Checkpoint,
    ops_cfg: &MergeOpConfig,
) -> Result<Checkpoint> {
    if plan.is_empty() {
        return Err(Error::EmptyPlan);
    }
    check_sources(models, pt)?;
    let n_layers = pt.layer_count();
    let groups = plan
        .steps
        .iter()
        .map(|s| {
            if s.layer == 0 || s.layer > n_layers {
                return Err(Error::IllegalAction(format!(
                    "layer {} out of 1..={n_layers}",
                    s.layer
                )));
            }
            emit_layer(s.action, s.layer, models, pt, ops_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    check_chain(&groups)?;
    Checkpoint::new(
        assembled_arch_id(pt.arch_id(), plan, n_layers),
        unique_names(groups),
    )
}

/// Every candidate layer precomputed, so assembling a plan is a lookup.
/// Produces exactly what [`assemble`] produces.
#[derive(Debug, Clone)]
pub struct LayerBank {
    arch_id: String,
    n_models: usize,
    ops: Vec<OpId>,
    // [layer][action row]
    layers: Vec<Vec<ParamGroup>>,
}

impl LayerBank {
    pub fn build(
        models: &[Checkpoint],
        pt: &Checkpoint,
        ops: &[OpId],
        ops_cfg: &MergeOpConfig,
    ) -> Result<Self> {
        check_sources(models, pt)?;
        let n_layers = pt.layer_count();
        let layers = (1..=n_layers)
            .map(|layer| {
                let mut row = Vec::with_capacity(models.len() + ops.len());
                for i in 0..models.len() {
                    row.push(emit_layer(PlanAction::Model(i), layer, models, pt, ops_cfg)?);
                }
                for &op in ops {
                    row.push(emit_layer(PlanAction::Op(op), layer, models, pt, ops_cfg)?);
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch_id: pt.arch_id().to_string(),
            n_models: models.len(),
            ops: ops.to_vec(),
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn row(&self, action: PlanAction) -> Result<usize> {
        match action {
            PlanAction::Model(i) if i < self.n_models => Ok(i),
            PlanAction::Op(op) => self
                .ops
                .iter()
                .position(|&o| o == op)
                .map(|j| self.n_models + j)
                .ok_or_else(|| Error::IllegalAction(format!("operator {op} not in the bank"))),
            other => Err(Error::IllegalAction(format!("{other} not in the bank"))),
        }
    }

    pub fn assemble(&self, plan: &MergePlan) -> Result<Checkpoint> {
        if plan.is_empty() {
            return Err(Error::EmptyPlan);
        }
        let groups = plan
            .steps
            .iter()
            .map(|s| {
                if s.layer == 0 || s.layer > self.n_layers() {
                    return Err(Error::IllegalAction(format!("layer {} out of range", s.layer)));
                }
                Ok(self.layers[s.layer - 1][self.row(s.action)?].clone())
            })
            .collect::<Result<Vec<_>>>()?;
        check_chain(&groups)?;
        Checkpoint::new(
            assembled_arch_id(&self.arch_id, plan, self.n_layers()),
            unique_names(groups),
        )
    }
}
