#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmm_core::merge_env::{Episode, LayerBank, MergeAction};
use rmm_core::rl_agent::{critic_loss, ppo_loss, Mlp, PolicyNet, TrajStep, ValueNet};
use rmm_core::{Agent, Checkpoint, EnvConfig, MergeOpConfig, OpId, ParamGroup, PpoConfig, Trajectory};

/// Per-element TIES written from scratch: rank by counting, vote, disjoint mean.
pub fn ties_reference(pt: &[f32], fts: &[Vec<f32>], keep: f64, lambda: f64) -> Vec<f32> {
    let n = pt.len();
    let k = (keep * n as f64).ceil() as usize;
    let tvs: Vec<Vec<f64>> = fts
        .iter()
        .map(|ft| {
            ft.iter()
                .zip(pt)
                .map(|(&f, &p)| f64::from(f) - f64::from(p))
                .collect()
        })
        .collect();
    let kept: Vec<Vec<f64>> = tvs
        .iter()
        .map(|tv| {
            (0..n)
                .map(|j| {
                    let rank = (0..n)
                        .filter(|&i| tv[i].abs() > tv[j].abs() || (tv[i].abs() == tv[j].abs() && i < j))
                        .count();
                    if rank < k {
                        tv[j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let sgn = |x: f64| (x > 0.0) as i32 - (x < 0.0) as i32;
    let mut votes: Vec<i32> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for tv in &kept {
                s += tv[j];
            }
            sgn(s)
        })
        .collect();
    let layer = votes.iter().sum::<i32>().signum();
    for v in votes.iter_mut() {
        if *v == 0 {
            *v = layer;
        }
    }
    (0..n)
        .map(|j| {
            let agree: Vec<f64> = kept
                .iter()
                .map(|tv| tv[j])
                .filter(|&x| x != 0.0 && sgn(x) == votes[j])
                .collect();
            let mut s = 0.0;
            for x in &agree {
                s += x;
            }
            let m = if agree.is_empty() {
                0.0
            } else {
                s / agree.len() as f64
            };
            (f64::from(pt[j]) + lambda * m) as f32
        })
        .collect()
}

pub fn group(values: Vec<f32>) -> ParamGroup {
    ParamGroup::new("layer", vec![values.len()], values).unwrap()
}

/// A random legal action sequence run to termination.
pub fn random_episode(cfg: &EnvConfig, rng: &mut impl Rng) -> Episode {
    let mut ep = Episode::new(cfg.clone()).unwrap();
    while !ep.is_done() {
        let legal = ep.state().legal_actions(cfg);
        let a = legal[rng.random_range(0..legal.len())];
        ep.step(a).unwrap();
    }
    ep
}

pub fn emits(a: MergeAction) -> bool {
    matches!(a, MergeAction::Model(_) | MergeAction::Merge(_))
}

/// Three layers that chain 2 -> 3 -> 3 -> 2, so stacking the middle layer works.
pub fn chain_models(n: usize, seed: u64) -> (Vec<Checkpoint>, Checkpoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| {
        let dims = [(3, 3), (3, 4), (2, 4)];
        let groups = dims
            .iter()
            .enumerate()
            .map(|(i, &(o, c))| {
                let v = (0..o * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                ParamGroup::new(format!("l{i}"), vec![o, c], v).unwrap()
            })
            .collect();
        Checkpoint::new("chain", groups).unwrap()
    };
    let pt = make(&mut rng);
    let models = (0..n).map(|_| make(&mut rng)).collect();
    (models, pt)
}

/// Replays one random episode twice and checks everything matches bitwise.
pub fn replay_matches(cfg: &EnvConfig, bank: &LayerBank, rng: &mut impl Rng) -> Result<(), String> {
    let ep = random_episode(cfg, rng);
    let a = Episode::replay(cfg.clone(), ep.actions()).map_err(|e| e.to_string())?;
    let b = Episode::replay(cfg.clone(), ep.actions()).map_err(|e| e.to_string())?;
    if a.state() != ep.state() || b.state() != ep.state() || a.plan() != ep.plan() || b.plan() != ep.plan() {
        return Err(format!("replay diverged for {:?}", ep.actions()));
    }
    let emitted = ep.actions().iter().filter(|&&x| emits(x)).count() as u64;
    if ep.state().total_count() != emitted {
        return Err(format!(
            "counts {} != emissions {emitted}",
            ep.state().total_count()
        ));
    }
    if ep.is_complete() {
        let (ma, mb) = (bank.assemble(a.plan()), bank.assemble(b.plan()));
        match (ma, mb) {
            (Ok(x), Ok(y)) if x.encode() == y.encode() => {}
            (Err(_), Err(_)) => {}
            _ => return Err("assembly differs between replays".into()),
        }
    }
    Ok(())
}

/// Steps a fresh episode and checks counts change iff the action emits.
pub fn counts_change_iff_emit(cfg: &EnvConfig, rng: &mut impl Rng) -> Result<(), String> {
    let mut ep = Episode::new(cfg.clone()).unwrap();
    while !ep.is_done() {
        let before = ep.state().counts().to_vec();
        let legal = ep.state().legal_actions(cfg);
        let a = legal[rng.random_range(0..legal.len())];
        ep.step(a).unwrap();
        let changed = ep.state().counts() != before.as_slice();
        if changed != emits(a) {
            return Err(format!("{a:?}: counts changed = {changed}"));
        }
    }
    Ok(())
}

/// A random one-trajectory batch for the gradient check.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    n_actions: usize,
    policy: &PolicyNet,
) -> Vec<Trajectory> {
    let steps = (0..3)
        .map(|_| {
            let obs: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut mask: Vec<bool> = (0..n_actions).map(|_| rng.random_bool(0.7)).collect();
            mask[rng.random_range(0..n_actions)] = true;
            let legal: Vec<usize> = (0..n_actions).filter(|&k| mask[k]).collect();
            let action = legal[rng.random_range(0..legal.len())];
            let p = policy.probs(&obs, &mask).unwrap()[action];
            // Behavior log-prob near the current one keeps most ratios inside the clip range.
            let log_prob = p.ln() + rng.random_range(-0.3..0.3);
            TrajStep {
                obs,
                action,
                log_prob,
                value: rng.random_range(-0.5..0.5),
                mask,
            }
        })
        .collect();
    vec![Trajectory {
        steps,
        terminal_reward: rng.random_range(0.0..1.0),
    }]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Whether any step's ratio sits within `margin` of a clip edge in the
/// interval swept by the finite difference.
fn near_kink(policy: &PolicyNet, batch: &[Trajectory], eps: f64) -> bool {
    batch.iter().flat_map(|t| &t.steps).any(|s| {
        let p = policy.probs(&s.obs, &s.mask).unwrap()[s.action];
        let r = (p.ln() - s.log_prob).exp();
        ((r - (1.0 - eps)).abs() < 1e-3) || ((r - (1.0 + eps)).abs() < 1e-3)
    })
}

/// Largest relative error between analytic and central-difference gradients
/// for the actor and critic losses of one random network, or `None` when a
/// ratio sits on a clip kink.
pub fn gradient_check(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_dim = rng.random_range(2..5);
    let hidden = rng.random_range(3..7);
    let n_actions = rng.random_range(2..5);
    let cfg = PpoConfig {
        entropy_coef: 0.05,
        ..PpoConfig::default()
    };
    let policy = PolicyNet(Mlp::random(in_dim, hidden, n_actions, 1.0, &mut rng));
    let value = ValueNet(Mlp::random(in_dim, hidden, 1, 1.0, &mut rng));
    let batch = random_batch(&mut rng, in_dim, n_actions, &policy);
    if near_kink(&policy, &batch, cfg.clip_eps) {
        return None;
    }
    let h = 1e-4;
    let mut worst: f64 = 0.0;

    let (_, grad) = ppo_loss(&policy, &batch, &cfg).unwrap();
    let flat = policy.0.flat();
    for (i, g) in grad.flat().into_iter().enumerate() {
        let mut plus = policy.clone();
        let mut minus = policy.clone();
        let mut v = flat.clone();
        v[i] += h;
        plus.0.set_flat(&v);
        v[i] -= 2.0 * h;
        minus.0.set_flat(&v);
        let fd = (ppo_loss(&plus, &batch, &cfg).unwrap().0 - ppo_loss(&minus, &batch, &cfg).unwrap().0)
            / (2.0 * h);
        if g.abs() > 1e-7 || fd.abs() > 1e-7 {
            worst = worst.max(rel_err(g, fd));
        }
    }

    let (_, grad) = critic_loss(&value, &batch).unwrap();
    let flat = value.0.flat();
    for (i, g) in grad.flat().into_iter().enumerate() {
        let mut plus = value.clone();
        let mut minus = value.clone();
        let mut v = flat.clone();
        v[i] += h;
        plus.0.set_flat(&v);
        v[i] -= 2.0 * h;
        minus.0.set_flat(&v);
        let fd = (critic_loss(&plus, &batch).unwrap().0 - critic_loss(&minus, &batch).unwrap().0) / (2.0 * h);
        if g.abs() > 1e-7 || fd.abs() > 1e-7 {
            worst = worst.max(rel_err(g, fd));
        }
    }
    Some(worst)
}

/// Two-armed bandit: pays 1 for `best`, 0 otherwise. Returns the number of
/// updates until the greedy arm's probability exceeds 0.95, if within `max_updates`.
pub fn bandit_updates(seed: u64, max_updates: usize) -> Option<usize> {
    let cfg = PpoConfig {
        seed,
        ..PpoConfig::default()
    };
    let best = (seed % 2) as usize;
    let mut agent = Agent::new(1, 2, &cfg);
    let obs = vec![1.0];
    let mask = vec![true, true];
    for update in 1..=max_updates {
        let batch: Vec<Trajectory> = (0..cfg.episodes_per_batch)
            .map(|_| {
                let step = agent.sample(obs.clone(), mask.clone()).unwrap();
                let reward = if step.action == best { 1.0 } else { 0.0 };
                Trajectory {
                    steps: vec![step],
                    terminal_reward: reward,
                }
            })
            .collect();
        agent.update(&batch, &cfg).unwrap();
        if agent.policy.probs(&obs, &mask).unwrap()[best] > 0.95 {
            return Some(update);
        }
    }
    None
}

pub fn two_op_env(layers: usize) -> EnvConfig {
    EnvConfig {
        layer_actions: false,
        ..EnvConfig::new(2, layers, vec![OpId::Ta, OpId::Ties])
    }
}

pub fn ops_default() -> MergeOpConfig {
    MergeOpConfig::default()
}
