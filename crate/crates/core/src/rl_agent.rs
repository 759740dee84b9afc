//! Actor-critic merging agent trained with the PPO clipped surrogate.
//!
//! Both networks are one-hidden-layer tanh MLPs in f64 with hand-written
//! backprop. The actor's logits are masked to the legal actions before the
//! softmax. Rewards are episodic and undiscounted: every step of an episode
//! sees the terminal reward, and the advantage is that reward minus the
//! critic's value recorded at collection time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{Checkpoint, ParamGroup};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub episodes_per_batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub entropy_coef: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            epochs_per_batch: 4,
            episodes_per_batch: 8,
            lr_actor: 3e-3,
            lr_critic: 1e-2,
            entropy_coef: 0.01,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip_eps", self.clip_eps),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!("{name} = {v} must be positive")));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(Error::InvalidConfig("entropy_coef must be >= 0".into()));
        }
        if self.epochs_per_batch == 0 || self.episodes_per_batch == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "epochs_per_batch, episodes_per_batch and hidden_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `in -> tanh(hidden) -> out`. Weight matrices are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, output layer scaled by `out_scale`,
    /// zero biases.
    pub fn random(in_dim: usize, hidden: usize, out_dim: usize, out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(in_dim, hidden, out_dim);
        let b1 = 1.0 / (in_dim as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        let b2 = out_scale / (hidden as f64).sqrt();
        m.w2.iter_mut().for_each(|w| *w = rng.random_range(-b2..b2));
        m
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut rest = flat;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
    }

    fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// Returns `(hidden activations, outputs)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
                (self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let out = (0..self.out_dim)
            .map(|k| {
                let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
                self.b2[k] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (h, out)
    }

    /// Adds the parameter gradient for output gradient `d_out` at input `x`.
    fn accumulate(&self, x: &[f64], h: &[f64], d_out: &[f64], grads: &mut Mlp) {
        let mut d_h = vec![0.0; self.hidden];
        for (k, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[k] += g;
            let row = k * self.hidden;
            for j in 0..self.hidden {
                grads.w2[row + j] += g * h[j];
                d_h[j] += g * self.w2[row + j];
            }
        }
        for j in 0..self.hidden {
            let dz = d_h[j] * (1.0 - h[j] * h[j]);
            grads.b1[j] += dz;
            let row = j * self.in_dim;
            for (i, &xi) in x.iter().enumerate() {
                grads.w1[row + i] += dz * xi;
            }
        }
    }

    fn zeros_like(&self) -> Mlp {
        Mlp::zeros(self.in_dim, self.hidden, self.out_dim)
    }

    fn sgd_step(&mut self, grads: &Mlp, lr: f64) {
        for (p, g) in [
            (&mut self.w1, &grads.w1),
            (&mut self.b1, &grads.b1),
            (&mut self.w2, &grads.w2),
            (&mut self.b2, &grads.b2),
        ] {
            for (w, gi) in p.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    fn to_groups(&self, prefix: &str) -> Vec<ParamGroup> {
        let dense = |w: &[f64], b: &[f64], rows: usize, cols: usize| {
            let mut values = Vec::with_capacity(rows * (cols + 1));
            for r in 0..rows {
                values.extend(w[r * cols..(r + 1) * cols].iter().map(|&v| v as f32));
                values.push(b[r] as f32);
            }
            values
        };
        vec![
            ParamGroup::new(
                format!("{prefix}.l1"),
                vec![self.hidden, self.in_dim + 1],
                dense(&self.w1, &self.b1, self.hidden, self.in_dim),
            )
            .unwrap(),
            ParamGroup::new(
                format!("{prefix}.l2"),
                vec![self.out_dim, self.hidden + 1],
                dense(&self.w2, &self.b2, self.out_dim, self.hidden),
            )
            .unwrap(),
        ]
    }

    fn from_groups(l1: &ParamGroup, l2: &ParamGroup) -> Result<Self> {
        let (&[hidden, c1], &[out_dim, c2]) = (l1.shape(), l2.shape()) else {
            return Err(Error::ShapeMismatch("agent layers must be 2-D".into()));
        };
        if c2 != hidden + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} does not follow {}",
                l2.name(),
                l1.name()
            )));
        }
        let in_dim = c1 - 1;
        let mut m = Mlp::zeros(in_dim, hidden, out_dim);
        let split = |values: &[f32], rows: usize, cols: usize, w: &mut Vec<f64>, b: &mut Vec<f64>| {
            for r in 0..rows {
                let row = &values[r * (cols + 1)..(r + 1) * (cols + 1)];
                w[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .zip(&row[..cols])
                    .for_each(|(d, &s)| *d = f64::from(s));
                b[r] = f64::from(row[cols]);
            }
        };
        split(l1.values(), hidden, in_dim, &mut m.w1, &mut m.b1);
        split(l2.values(), out_dim, hidden, &mut m.w2, &mut m.b2);
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet(pub Mlp);

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet(pub Mlp);

impl ValueNet {
    pub fn value(&self, obs: &[f64]) -> f64 {
        self.0.forward(obs).1[0]
    }
}

/// Softmax restricted to `mask`; masked entries get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    if logits.iter().zip(mask).any(|(z, &m)| m && !z.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

impl PolicyNet {
    pub fn probs(&self, obs: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        masked_softmax(&self.0.forward(obs).1, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
}

/// Samples from the masked policy, or takes its argmax (lowest index on
/// ties) when `greedy`.
pub fn act(
    policy: &PolicyNet,
    obs: &[f64],
    mask: &[bool],
    rng: &mut impl Rng,
    greedy: bool,
) -> Result<ActOutput> {
    if obs.len() != policy.0.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "observation length {} != policy input {}",
            obs.len(),
            policy.0.in_dim
        )));
    }
    let probs = policy.probs(obs, mask)?;
    let action = if greedy {
        let mut best = None::<usize>;
        for (i, &p) in probs.iter().enumerate() {
            if mask[i] && best.is_none_or(|b| p > probs[b]) {
                best = Some(i);
            }
        }
        best.expect("at least one legal action")
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &p) in probs.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            acc += p;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        pick.expect("at least one legal action")
    };
    Ok(ActOutput {
        action,
        log_prob: probs[action].ln(),
        probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajStep {
    pub obs: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub terminal_reward: f64,
}

/// `A_t = R - V(s_t)` with the behavior values, for every step.
pub fn advantage(traj: &Trajectory) -> Vec<f64> {
    traj.steps
        .iter()
        .map(|s| traj.terminal_reward - s.value)
        .collect()
}

pub fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(clip(ratio, eps) * adv)
}

/// Negated clipped surrogate summed over every step of the batch, minus the
/// entropy bonus, with its gradient in the policy's parameters.
pub fn ppo_loss(policy: &PolicyNet, batch: &[Trajectory], cfg: &PpoConfig) -> Result<(f64, Mlp)> {
    let net = &policy.0;
    let mut grads = net.zeros_like();
    let mut loss = 0.0;
    for traj in batch {
        for (step, adv) in traj.steps.iter().zip(advantage(traj)) {
            let (h, logits) = net.forward(&step.obs);
            let p = masked_softmax(&logits, &step.mask)?;
            let ratio = (p[step.action].ln() - step.log_prob).exp();
            let unclipped = ratio * adv;
            let clipped = clip(ratio, cfg.clip_eps) * adv;
            let entropy: f64 = -p
                .iter()
                .filter(|&&pi| pi > 0.0)
                .map(|&pi| pi * pi.ln())
                .sum::<f64>();
            loss -= unclipped.min(clipped) + cfg.entropy_coef * entropy;

            let mut d_logits = vec![0.0; p.len()];
            if unclipped <= clipped {
                // d ratio / d z_k = ratio * (1[k = a] - p_k)
                for (k, &pk) in p.iter().enumerate() {
                    let onehot = if k == step.action { 1.0 } else { 0.0 };
                    d_logits[k] -= adv * ratio * (onehot - pk);
                }
            }
            if cfg.entropy_coef > 0.0 {
                for (k, &pk) in p.iter().enumerate() {
                    if pk > 0.0 {
                        d_logits[k] += cfg.entropy_coef * pk * (pk.ln() + entropy);
                    }
                }
            }
            net.accumulate(&step.obs, &h, &d_logits, &mut grads);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grads))
}

/// Mean squared error between `V(s_t)` and the terminal reward.
pub fn critic_loss(value: &ValueNet, batch: &[Trajectory]) -> Result<(f64, Mlp)> {
    let net = &value.0;
    let mut grads = net.zeros_like();
    let n: usize = batch.iter().map(|t| t.steps.len()).sum();
    if n == 0 {
        return Err(Error::EmptyInput("critic batch has no steps".into()));
    }
    let mut loss = 0.0;
    for traj in batch {
        for step in &traj.steps {
            let (h, out) = net.forward(&step.obs);
            let err = out[0] - traj.terminal_reward;
            loss += err * err / n as f64;
            net.accumulate(&step.obs, &h, &[2.0 * err / n as f64], &mut grads);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: PolicyNet,
    pub value: ValueNet,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(obs_dim: usize, action_count: usize, cfg: &PpoConfig) -> Self {
        let mut init = rng::seeded(cfg.seed, "agent-init");
        let policy = PolicyNet(Mlp::random(
            obs_dim,
            cfg.hidden_dim,
            action_count,
            0.01,
            &mut init,
        ));
        let value = ValueNet(Mlp::random(obs_dim, cfg.hidden_dim, 1, 1.0, &mut init));
        Self {
            policy,
            value,
            rng: rng::seeded(cfg.seed, "agent-act"),
        }
    }

    /// Samples an action and records the step's behavior statistics.
    pub fn sample(&mut self, obs: Vec<f64>, mask: Vec<bool>) -> Result<TrajStep> {
        let out = act(&self.policy, &obs, &mask, &mut self.rng, false)?;
        let value = self.value.value(&obs);
        Ok(TrajStep {
            obs,
            action: out.action,
            log_prob: out.log_prob,
            value,
            mask,
        })
    }

    pub fn greedy(&mut self, obs: &[f64], mask: &[bool]) -> Result<usize> {
        Ok(act(&self.policy, obs, mask, &mut self.rng, true)?.action)
    }

    /// `epochs_per_batch` full-batch gradient steps on actor and critic.
    pub fn update(&mut self, batch: &[Trajectory], cfg: &PpoConfig) -> Result<UpdateStats> {
        if batch.is_empty() || batch.iter().all(|t| t.steps.is_empty()) {
            return Err(Error::EmptyInput("PPO update needs at least one step".into()));
        }
        let mut stats = UpdateStats::default();
        for _ in 0..cfg.epochs_per_batch {
            let (pl, pg) = ppo_loss(&self.policy, batch, cfg)?;
            self.policy.0.sgd_step(&pg, cfg.lr_actor);
            let (cl, cg) = critic_loss(&self.value, batch)?;
            self.value.0.sgd_step(&cg, cfg.lr_critic);
            stats.policy_losses.push(pl);
            stats.critic_losses.push(cl);
        }
        if !(self.policy.0.is_finite() && self.value.0.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        Ok(stats)
    }

    /// Policy and value parameters as an RMMC checkpoint (rounded to f32).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut groups = self.policy.0.to_groups("policy");
        groups.extend(self.value.0.to_groups("value"));
        Checkpoint::new("rmm-agent", groups).expect("four named groups")
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, seed: u64) -> Result<Self> {
        let get = |name: &str| {
            ckpt.group(name)
                .ok_or_else(|| Error::Manifest(format!("agent checkpoint lacks {name}")))
        };
        Ok(Self {
            policy: PolicyNet(Mlp::from_groups(get("policy.l1")?, get("policy.l2")?)?),
            value: ValueNet(Mlp::from_groups(get("value.l1")?, get("value.l2")?)?),
            rng: ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, "agent-act")),
        })
    }
}
