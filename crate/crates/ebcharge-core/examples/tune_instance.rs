//! Trains the two-level learner on a tabular instance and prints its exact
//! greedy-policy value against the flat optimum between training chunks.
//!
//! Usage: tune_instance [INSTANCE_PATH] [EPISODES] [CHUNK]

use std::path::Path;
use std::sync::Arc;

use ebcharge_core::agents::{Mode, PolicyBundle, Trainer};
use ebcharge_core::config::Config;
use ebcharge_core::oracle::{dp_flat_optimal, evaluate_hier_policy, load_instance, TabularInstance};
use ebcharge_core::qnet::{argmax_over, encode_state};

/// Probability-weighted exact value of the bundle's greedy policy, plus the
/// flat optimum, over the instance's start states.
fn exact_policy_value(inst: &TabularInstance, bundle: &PolicyBundle) -> (f64, f64) {
    let bounds = bundle.bounds.clone();
    let high = bundle.high.as_ref().unwrap().online.clone();
    let low = bundle.low.as_ref().unwrap().online.clone();
    let comparisons = evaluate_hier_policy(
        inst,
        |state, feasible| {
            let values = high.forward(&encode_state(state, None, &bounds));
            let slots: Vec<usize> = feasible.iter().map(|o| o.slot).collect();
            *feasible
                .iter()
                .find(|o| o.slot == argmax_over(&values, &slots))
                .unwrap()
        },
        |state, target, feasible| {
            let values = low.forward(&encode_state(state, Some(target), &bounds));
            let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
            *feasible
                .iter()
                .find(|a| a.slot == argmax_over(&values, &slots))
                .unwrap()
        },
    )
    .unwrap();
    let starts = inst.start_states();
    let mut v_policy = 0.0;
    let mut v_star = 0.0;
    for ((_, prob), cmp) in starts.iter().zip(&comparisons) {
        v_policy += prob * cmp.hier;
        v_star += prob * cmp.flat;
    }
    (v_policy, v_star)
}

fn snapshot(trainer: &Trainer, price_window: usize) -> PolicyBundle {
    PolicyBundle {
        mode: trainer.mode().as_str().to_string(),
        bounds: trainer.bounds().clone(),
        price_window,
        high: trainer.high_pair().cloned(),
        low: trainer.low_pair().cloned(),
        episodes_trained: 0,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let default_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/instances/learner.txt");
    let path = args
        .get(1)
        .map(std::path::PathBuf::from)
        .unwrap_or(default_path);
    let episodes: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let chunk: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(500);

    let inst = load_instance(&path).unwrap();
    let flat = dp_flat_optimal(&inst).unwrap();
    for (key, p) in inst.start_states() {
        println!(
            "start t={} soc={} tau={}: V* = {:.4} (p={p})",
            key.t,
            inst.soc_of(key.soc_idx),
            key.tau,
            flat.value(key).unwrap()
        );
    }

    let scenario = inst.to_scenario();
    let prices = Arc::new(inst.to_price_series());
    let mut cfg = Config::default();
    cfg.train.episodes = episodes;
    cfg.train.phase_threshold = (episodes * 3 / 10).max(1);
    cfg.train.eps_end = 0.03;
    cfg.train.eps_anneal_frac = 0.55;
    cfg.train.batch_low = 32;
    cfg.train.batch_high = 16;
    cfg.train.lr_low = 1e-3;
    cfg.train.lr_high = 1e-3;
    cfg.train.hidden = vec![32, 32];
    cfg.train.buffer_low = 20_000;
    cfg.train.buffer_high = 2_000;
    cfg.train.target_sync = 100;
    cfg.train.eval_every = episodes;
    cfg.train.eval_episodes = 1;
    cfg.train.target_penalty = 0.01;

    for seed in [1u64, 2, 3] {
        let mut trainer = Trainer::new(
            cfg.clone(),
            scenario.clone(),
            Arc::clone(&prices),
            Arc::clone(&prices),
            Mode::HddqnHer,
            seed,
        )
        .unwrap();
        print!("seed {seed}:");
        for c in 0..episodes.div_ceil(chunk) {
            for ep in c * chunk..((c + 1) * chunk).min(episodes) {
                trainer.run_episode(ep).unwrap();
            }
            let (v, v_star) = exact_policy_value(&inst, &snapshot(&trainer, inst.price_window));
            print!(" {v:.3}/{v_star:.3}");
        }
        println!();
    }
}
