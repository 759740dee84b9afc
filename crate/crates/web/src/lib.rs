//! Browser demo: oracle heatmap, a search run's reward curve, and reward
//! smoothing on a noisy sequence. Every export takes plain numbers and
//! returns a JSON string.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmm_core::search::{brute_force_oracle, run_search, run_uniform_baseline, SearchConfig};
use rmm_core::task_zoo::{default_zoo, Zoo};
use rmm_core::{dar_update, DarState, EnvConfig, MergeOpConfig, OpId, TaskDataset};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

thread_local! {
    static ZOO: RefCell<Option<(u64, Zoo)>> = const { RefCell::new(None) };
}

fn with_zoo<T>(seed: u64, f: impl FnOnce(&Zoo) -> T) -> Result<T, String> {
    ZOO.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().is_none_or(|(s, _)| *s != seed) {
            *slot = Some((seed, default_zoo(seed).map_err(|e| e.to_string())?));
        }
        Ok(f(&slot.as_ref().expect("just built").1))
    })
}

fn env(all_ops: bool) -> EnvConfig {
    let ops = if all_ops {
        OpId::ALL.to_vec()
    } else {
        vec![OpId::Ta, OpId::Ties]
    };
    EnvConfig {
        layer_actions: false,
        ..EnvConfig::new(2, 3, ops)
    }
}

fn evals(z: &Zoo) -> Vec<&TaskDataset> {
    z.tasks.iter().map(|t| &t.eval).collect()
}

/// Every plan of the default zoo with its mean accuracy, plus the uniform baselines.
pub fn oracle_table(seed: u64, all_ops: bool) -> Result<Value, String> {
    with_zoo(seed, |z| {
        let env = env(all_ops);
        let ops = MergeOpConfig::default();
        let o = brute_force_oracle(&z.finetuned, &z.pretrained, &z.arch, &evals(z), &env, &ops)
            .map_err(|e| e.to_string())?;
        let baselines: serde_json::Map<String, Value> = OpId::ALL
            .iter()
            .map(|op| {
                let r =
                    run_uniform_baseline(&z.finetuned, &z.pretrained, &z.arch, &evals(z), op.as_str(), &ops)
                        .map_err(|e| e.to_string())?;
                Ok((op.as_str().to_string(), json!(r)))
            })
            .collect::<Result<_, String>>()?;
        let labels: Vec<String> = (0..env.emit_count())
            .map(|i| match i {
                i if i < env.n_models => format!("model:{}", i + 1),
                i => env.ops[i - env.n_models].as_str().to_string(),
            })
            .collect();
        Ok(json!({
            "labels": labels,
            "layers": env.n_layers,
            "rewards": o.table.iter().map(|r| r.reward).collect::<Vec<_>>(),
            "plans": o.table.iter().map(|r| r.plan.to_string()).collect::<Vec<_>>(),
            "best_plan": o.best_plan.to_string(),
            "best_reward": o.best_reward,
            "baselines": baselines,
        }))
    })?
}

/// One search run: per-episode raw and smoothed rewards and the final plan.
pub fn search_curve(
    seed: u64,
    data_fraction: f64,
    dar_lambda: f64,
    episodes: usize,
) -> Result<Value, String> {
    with_zoo(seed, |z| {
        let cfg = SearchConfig {
            seed,
            data_fraction,
            dar_lambda,
            total_episodes: episodes,
            ..SearchConfig::new(env(false))
        };
        let r =
            run_search(&z.finetuned, &z.pretrained, &z.arch, &z.tasks, &cfg).map_err(|e| e.to_string())?;
        Ok(json!({
            "raw": r.episode_log.iter().map(|e| e.raw_reward).collect::<Vec<_>>(),
            "smoothed": r.episode_log.iter().map(|e| e.smoothed_reward).collect::<Vec<_>>(),
            "wrapped": r.episode_log.iter().map(|e| e.wrapped).collect::<Vec<_>>(),
            "best_plan": r.best_plan.to_string(),
            "best_full_reward": r.best_full_reward,
        }))
    })?
}

/// Smooths a noisy rising reward sequence; a pass boundary every `epoch` steps.
pub fn smoothing_curve(lambda: f64, steps: usize, noise: f64, epoch: usize, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DarState::new(lambda, steps.max(1));
    let (mut raw, mut smoothed) = (Vec::new(), Vec::new());
    for t in 0..steps {
        let trend = 0.3 + 0.5 * t as f64 / steps as f64;
        let r = (trend + noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        let wrapped = epoch > 0 && (t + 1) % epoch == 0;
        let (s, next) = dar_update(&state, r, wrapped);
        state = next;
        raw.push(r);
        smoothed.push(s);
    }
    json!({ "raw": raw, "smoothed": smoothed })
}

fn to_js(v: Result<Value, String>) -> String {
    match v {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen(js_name = oracleTable)]
pub fn oracle_table_js(seed: u32, all_ops: bool) -> String {
    to_js(oracle_table(u64::from(seed), all_ops))
}

#[wasm_bindgen(js_name = searchCurve)]
pub fn search_curve_js(seed: u32, data_fraction: f64, dar_lambda: f64, episodes: u32) -> String {
    to_js(search_curve(
        u64::from(seed),
        data_fraction,
        dar_lambda,
        episodes as usize,
    ))
}

#[wasm_bindgen(js_name = smoothingCurve)]
pub fn smoothing_curve_js(lambda: f64, steps: u32, noise: f64, epoch: u32, seed: u32) -> String {
    smoothing_curve(lambda, steps as usize, noise, epoch as usize, u64::from(seed)).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_table_covers_the_space() {
        let t = oracle_table(0, false).unwrap();
        assert_eq!(t["rewards"].as_array().unwrap().len(), 64);
        assert_eq!(t["labels"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn search_curve_has_one_point_per_episode() {
        let c = search_curve(0, 0.1, 0.5, 16).unwrap();
        assert_eq!(c["raw"].as_array().unwrap().len(), 16);
        assert!(c["best_full_reward"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn bad_search_input_is_an_error_payload() {
        let s = search_curve_js(0, 0.0, 0.5, 16);
        assert!(s.contains("error"));
    }

    #[test]
    fn smoothing_without_memory_is_identity() {
        let c = smoothing_curve(0.0, 50, 0.4, 0, 1);
        assert_eq!(c["raw"], c["smoothed"]);
    }
}
