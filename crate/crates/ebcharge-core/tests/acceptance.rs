//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! The desk-scale criteria (ranking, relative gaps, convergence order,
//! no-depletion) share a single training sweep of all five agent modes over
//! three seeds on the bundled scaled-down configuration.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ebcharge_core::agents::{
    evaluate, mix_seed, Mode, PolicyBundle, Trainer, TrainingLogRow,
};
use ebcharge_core::config::{Config, HazardMode};
use ebcharge_core::env::{Env, Period, Scenario};
use ebcharge_core::oracle::{
    check_equivalence, evaluate_hier_policy, load_instance, Verdict, EQUIVALENCE_TOLERANCE,
};
use ebcharge_core::prices::PriceSeries;
use ebcharge_core::qnet::{argmax_over, encode_state, QNet, TdSample};
use ebcharge_core::schedule::TravelPmf;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {criterion} ({name}): PASS — {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: flat-vs-hierarchical equivalence on the bundled instances.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_equivalence_on_bundled_instances() {
    let dir = data_dir().join("instances");
    let mut details = Vec::new();
    for name in [
        "equivalence_a.txt",
        "equivalence_b.txt",
        "equivalence_c.txt",
        "learner.txt",
    ] {
        let inst = load_instance(&dir.join(name)).unwrap();
        let started = Instant::now();
        let report = check_equivalence(&inst, None).unwrap();
        let elapsed = started.elapsed();
        assert_eq!(
            report.verdict,
            Verdict::Pass,
            "{name}: {}",
            report.detail
        );
        assert!(
            report.max_diff <= EQUIVALENCE_TOLERANCE,
            "{name}: max diff {}",
            report.max_diff
        );
        assert!(
            elapsed.as_secs() < 60,
            "{name}: took {elapsed:?}, budget is one minute"
        );
        details.push(format!("{}: {:.2e} in {elapsed:?}", inst.name, report.max_diff));
    }
    pass(1, "hierarchical-equivalence", &details.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 2: the two-level learner approaches the exact optimum on a
// tabular instance.
// ---------------------------------------------------------------------------

fn instance_train_config() -> Config {
    let mut cfg = Config::default();
    cfg.train.episodes = 2000;
    cfg.train.phase_threshold = 600;
    cfg.train.eps_start = 1.0;
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
    cfg.train.eval_every = 2000;
    cfg.train.eval_episodes = 1;
    cfg.train.target_penalty = 0.01;
    cfg
}

/// Probability-weighted exact value of the bundle's greedy policy over the
/// instance's start states, against the flat optimum.
fn exact_policy_gap(inst: &ebcharge_core::oracle::TabularInstance, bundle: &PolicyBundle) -> (f64, f64) {
    let bounds = bundle.bounds.clone();
    let high = bundle.high.as_ref().unwrap().online.clone();
    let low = bundle.low.as_ref().unwrap().online.clone();
    let comparisons = evaluate_hier_policy(
        inst,
        |state, feasible| {
            let values = high.forward(&encode_state(state, None, &bounds));
            let slots: Vec<usize> = feasible.iter().map(|o| o.slot).collect();
            let slot = argmax_over(&values, &slots);
            *feasible.iter().find(|o| o.slot == slot).unwrap()
        },
        |state, target, feasible| {
            let values = low.forward(&encode_state(state, Some(target), &bounds));
            let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
            let slot = argmax_over(&values, &slots);
            *feasible.iter().find(|a| a.slot == slot).unwrap()
        },
    )
    .unwrap();
    let starts = inst.start_states();
    assert_eq!(starts.len(), comparisons.len());
    let mut v_policy = 0.0;
    let mut v_star = 0.0;
    for ((_, prob), cmp) in starts.iter().zip(&comparisons) {
        v_policy += prob * cmp.hier;
        v_star += prob * cmp.flat;
    }
    (v_policy, v_star)
}

#[test]
fn criterion_02_learner_matches_the_oracle_on_a_tiny_instance() {
    let started = Instant::now();
    let inst = load_instance(&data_dir().join("instances/learner.txt")).unwrap();
    let scenario = inst.to_scenario();
    let prices = Arc::new(inst.to_price_series());
    let cfg = instance_train_config();
    let mut hits = 0;
    let mut details = Vec::new();
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
        trainer.run().unwrap();
        let bundle = trainer.into_bundle();
        let (v_policy, v_star) = exact_policy_gap(&inst, &bundle);
        let ok = v_policy >= v_star - 0.05 * v_star.abs();
        if ok {
            hits += 1;
        }
        details.push(format!(
            "seed {seed}: policy {v_policy:.4} vs optimum {v_star:.4}{}",
            if ok { "" } else { " (miss)" }
        ));
    }
    let elapsed = started.elapsed();
    assert!(
        hits >= 2,
        "only {hits}/3 seeds within 5% of the optimum: {details:?}"
    );
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}, budget is 10 minutes");
    pass(
        2,
        "learner-vs-oracle",
        &format!("{hits}/3 seeds within 5% in {elapsed:?}; {}", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// Desk-scale sweep shared by criteria 3, 4, 5, and 10.
// ---------------------------------------------------------------------------

struct DeskRun {
    mode: Mode,
    curve: Vec<TrainingLogRow>,
    final_mean: f64,
    terminal_eval_episodes: usize,
}

struct DeskResults {
    runs: Vec<DeskRun>,
}

impl DeskResults {
    fn median_final(&self, mode: Mode) -> f64 {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.final_mean)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    fn mean_final(&self, mode: Mode) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.final_mean)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Episodes to reach within 5% of final performance, per seed, then the
    /// median across seeds. The final level is the mean of the last three
    /// evaluation points of that seed's curve.
    fn median_episodes_to_95(&self, mode: Mode) -> f64 {
        let mut per_seed: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| {
                let n = r.curve.len();
                let last3 = &r.curve[n.saturating_sub(3)..];
                let fin: f64 =
                    last3.iter().map(|row| row.eval_mean).sum::<f64>() / last3.len() as f64;
                let threshold = fin - 0.05 * fin.abs();
                r.curve
                    .iter()
                    .find(|row| row.eval_mean >= threshold)
                    .map(|row| row.episode as f64)
                    .unwrap_or(r.curve.last().unwrap().episode as f64)
            })
            .collect();
        per_seed.sort_by(|a, b| a.partial_cmp(b).unwrap());
        per_seed[per_seed.len() / 2]
    }
}

static DESK: OnceLock<DeskResults> = OnceLock::new();

fn desk() -> &'static DeskResults {
    DESK.get_or_init(|| {
        let started = Instant::now();
        let cfg = Config::load(&data_dir().join("desk.cfg")).unwrap();
        let prices =
            PriceSeries::load(cfg.env.price_file.as_ref().unwrap(), cfg.env.dt_minutes).unwrap();
        let (train, test) = prices.split_train_test(cfg.env.train_boundary_day).unwrap();
        let (train, test) = (Arc::new(train), Arc::new(test));
        let scenario = Scenario::from_config(&cfg.env);
        let mut runs = Vec::new();
        for mode in Mode::ALL {
            for seed in [1u64, 2, 3] {
                let mut trainer = Trainer::new(
                    cfg.clone(),
                    scenario.clone(),
                    Arc::clone(&train),
                    Arc::clone(&test),
                    mode,
                    seed,
                )
                .unwrap();
                let curve = trainer.run().unwrap();
                let bundle = trainer.into_bundle();
                let summary = evaluate(
                    &bundle.view().unwrap(),
                    &scenario,
                    &test,
                    100,
                    mix_seed(seed, &[404]),
                    false,
                )
                .unwrap();
                println!(
                    "desk run {} seed {seed}: final mean {:.4} ({} terminal) in {:?}",
                    mode.as_str(),
                    summary.mean,
                    summary.terminal_episodes,
                    started.elapsed()
                );
                runs.push(DeskRun {
                    mode,
                    curve,
                    final_mean: summary.mean,
                    terminal_eval_episodes: summary.terminal_episodes,
                });
            }
        }
        assert!(
            started.elapsed().as_secs() < 7200,
            "desk sweep exceeded the two-hour budget"
        );
        DeskResults { runs }
    })
}

#[test]
fn criterion_03_desk_scale_ranking() {
    let desk = desk();
    let her = desk.median_final(Mode::HddqnHer);
    let hddqn = desk.median_final(Mode::Hddqn);
    let high = desk.median_final(Mode::DdqnHigh);
    let original = desk.median_final(Mode::DdqnOriginal);
    let low = desk.median_final(Mode::DdqnLow);
    let detail = format!(
        "medians: hddqn_her {her:.4}, hddqn {hddqn:.4}, ddqn_high {high:.4}, ddqn_original {original:.4}, ddqn_low {low:.4}"
    );
    assert!(her > high, "hddqn_her must beat ddqn_high; {detail}");
    assert!(high > original, "ddqn_high must beat ddqn_original; {detail}");
    assert!(original > low, "ddqn_original must beat ddqn_low; {detail}");
    assert!(
        her >= hddqn - 0.01 * hddqn.abs(),
        "hddqn_her must stay within 1% of hddqn; {detail}"
    );
    pass(3, "desk-scale-ranking", &detail);
}

#[test]
fn criterion_04_relative_gap_sanity() {
    let desk = desk();
    let her = desk.mean_final(Mode::HddqnHer);
    let low = desk.mean_final(Mode::DdqnLow);
    let original = desk.mean_final(Mode::DdqnOriginal);
    let gap_low = (her - low) / low.abs();
    let gap_original = (her - original) / original.abs();
    let detail = format!(
        "improvement over ddqn_low {:.1}% (need 15), over ddqn_original {:.1}% (need 5)",
        100.0 * gap_low,
        100.0 * gap_original
    );
    assert!(gap_low >= 0.15, "{detail}");
    assert!(gap_original >= 0.05, "{detail}");
    pass(4, "relative-gaps", &detail);
}

#[test]
fn criterion_05_her_converges_before_the_ablation() {
    let desk = desk();
    let her = desk.median_episodes_to_95(Mode::HddqnHer);
    let hddqn = desk.median_episodes_to_95(Mode::Hddqn);
    let detail =
        format!("median episodes to 95% of final: hddqn_her {her}, hddqn {hddqn}");
    assert!(her < hddqn, "{detail}");
    pass(5, "convergence-order", &detail);
}

#[test]
fn criterion_10_trained_policy_never_depletes() {
    let desk = desk();
    let total: usize = desk
        .runs
        .iter()
        .filter(|r| r.mode == Mode::HddqnHer)
        .map(|r| r.terminal_eval_episodes)
        .sum();
    assert_eq!(
        total, 0,
        "trained hddqn_her policies entered the terminal state {total} times over 3x100 test episodes"
    );
    pass(10, "no-depletion", "0 terminal entries over 3 seeds x 100 test episodes");
}

// ---------------------------------------------------------------------------
// Criterion 6: hindsight guarantee over 200 random episodes.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_hindsight_guarantee() {
    let mut cfg = Config::load(&data_dir().join("desk.cfg")).unwrap();
    cfg.train.episodes = 200;
    cfg.train.phase_threshold = 100;
    cfg.train.eps_start = 1.0;
    cfg.train.eps_end = 1.0; // uniformly random policy
    cfg.train.eval_every = 200;
    cfg.train.eval_episodes = 1;
    let prices =
        PriceSeries::load(cfg.env.price_file.as_ref().unwrap(), cfg.env.dt_minutes).unwrap();
    let (train, test) = prices.split_train_test(cfg.env.train_boundary_day).unwrap();
    let scenario = Scenario::from_config(&cfg.env);
    let mut trainer = Trainer::new(
        cfg,
        scenario,
        Arc::new(train),
        Arc::new(test),
        Mode::HddqnHer,
        2024,
    )
    .unwrap();
    trainer.run().unwrap();
    assert!(
        trainer.her_checks >= 200,
        "only {} charging periods audited",
        trainer.her_checks
    );
    assert_eq!(trainer.her_violations, 0);
    pass(
        6,
        "hindsight-guarantee",
        &format!(
            "{} charging periods audited, zero without a realized-goal sequence",
            trainer.her_checks
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: environment invariants over 100k random-policy steps.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_environment_invariants() {
    let started = Instant::now();
    let cfg = Config::load(&data_dir().join("desk.cfg")).unwrap();
    let prices =
        PriceSeries::load(cfg.env.price_file.as_ref().unwrap(), cfg.env.dt_minutes).unwrap();
    let scenario = Scenario::from_config(&cfg.env);
    let k = scenario.num_periods();
    let t_d = scenario.schedule.periods[0].t_d;
    let prices = Arc::new(prices);
    let mut env = Env::new(scenario.clone(), Arc::clone(&prices));
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let mut steps = 0usize;
    let mut episode = 0u64;
    while steps < 100_000 {
        env.reset(mix_seed(7, &[episode]), 72).unwrap();
        episode += 1;
        let mut trips = 0;
        let mut charging_periods = 1;
        let mut completed = false;
        let mut at_charging_start = true;
        loop {
            let st = env.state().unwrap().clone();
            // Battery bounds hold at every non-terminal state.
            assert!(st.soc >= scenario.e_min - 1e-9 && st.soc <= scenario.e_max + 1e-9);
            let out = match st.period {
                Period::Charging => {
                    if at_charging_start {
                        // A freshly started charging period prescribes a
                        // random reachable target; it must sit in the
                        // independently recomputed window.
                        let options = env.feasible_options(&st);
                        let pick = options[rng.gen_range(0..options.len())];
                        let reach = f64::from(st.steps_to_departure) * scenario.dt_hours;
                        assert!(
                            pick.target_kwh
                                >= (st.soc - reach * scenario.d_max).max(scenario.e_min) - 1e-9
                        );
                        assert!(
                            pick.target_kwh
                                <= (st.soc + reach * scenario.c_max).min(scenario.e_max) + 1e-9
                        );
                        at_charging_start = false;
                    }
                    let feasible = env.feasible_actions(&st);
                    let a = feasible[rng.gen_range(0..feasible.len())];
                    env.step(Some(a)).unwrap()
                }
                Period::Operating => env.step(None).unwrap(),
            };
            steps += 1;
            if out.boundary == ebcharge_core::env::Boundary::ChargingStarted {
                at_charging_start = true;
            }
            // Countdown bookkeeping: reset to the headway gap exactly at
            // departures, decrement otherwise.
            match out.boundary {
                ebcharge_core::env::Boundary::OperatingStarted => {
                    assert_eq!(out.state.steps_to_departure, t_d);
                    assert_eq!(out.state.period_index, st.period_index + 1);
                    trips += 1;
                }
                _ => {
                    assert_eq!(out.state.steps_to_departure, st.steps_to_departure - 1);
                    assert_eq!(out.state.period_index, st.period_index);
                    if out.boundary == ebcharge_core::env::Boundary::ChargingStarted
                        && !out.day_complete
                    {
                        charging_periods += 1;
                    }
                }
            }
            // Reward structure.
            if out.terminal {
                assert_eq!(out.reward, -scenario.terminal_penalty);
                assert!(out.state.soc < scenario.e_min);
                break;
            }
            if st.period == Period::Operating {
                assert_eq!(out.reward, 0.0);
            }
            if out.day_complete {
                completed = true;
                break;
            }
        }
        if completed {
            // Every full episode sees K operating periods (the first trip is
            // folded into the reset) and K-1 charging periods.
            assert_eq!(trips + 1, k);
            assert_eq!(charging_periods, k - 1);
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget is one minute");
    pass(
        7,
        "environment-invariants",
        &format!("{steps} random-policy steps over {episode} episodes in {elapsed:?}, zero violations"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: numerics of the value-function approximator.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_numerics_suite() {
    // Analytic vs central-difference gradients on 100 random tiny networks.
    let mut rng = ChaCha12Rng::seed_from_u64(12345);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let net = QNet::new(&[3, 4, 2], 1e-3, trial); // 26 parameters
        let target = QNet::new(&[3, 4, 2], 1e-3, trial + 5000);
        let batch: Vec<TdSample> = (0..4)
            .map(|i| TdSample {
                features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: i % 2,
                reward: rng.gen_range(-2.0..2.0),
                done: i % 3 == 0,
                next_features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                next_feasible: vec![0, 1],
            })
            .collect();
        let ys = net.td_targets(&target, &batch);
        let analytic = net.gradient_given_targets(&batch, &ys);
        let params = net.params_flat();
        let eps = 1e-6;
        for pi in 0..params.len() {
            let mut p = params.clone();
            p[pi] += eps;
            let mut plus = net.clone();
            plus.set_params_flat(&p);
            p[pi] -= 2.0 * eps;
            let mut minus = net.clone();
            minus.set_params_flat(&p);
            let numeric = (plus.loss_given_targets(&batch, &ys)
                - minus.loss_given_targets(&batch, &ys))
                / (2.0 * eps);
            let denom = numeric.abs().max(analytic[pi].abs()).max(1e-6);
            let rel = (numeric - analytic[pi]).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "net {trial} param {pi}: relative error {rel}");
        }
    }

    // Double-Q split: online argmax disagrees with the target's own argmax,
    // and the target value must be read at the online choice.
    let mut online = QNet::new(&[1, 2], 1e-3, 1);
    let mut target = QNet::new(&[1, 2], 1e-3, 2);
    online.set_params_flat(&[0.0, 0.0, 3.0, 1.0]); // prefers slot 0
    target.set_params_flat(&[0.0, 0.0, -7.0, 10.0]); // prefers slot 1
    let sample = TdSample {
        features: vec![0.0],
        action: 0,
        reward: 1.0,
        done: false,
        next_features: vec![0.0],
        next_feasible: vec![0, 1],
    };
    let ys = online.td_targets(&target, &[sample]);
    assert!((ys[0] - (1.0 - 7.0)).abs() < 1e-12, "double-Q split violated: {}", ys[0]);

    // Overfit sanity: a fixed 10-record terminal batch is driven below 1e-6.
    let mut net = QNet::new(&[4, 16, 3], 1e-2, 7);
    let frozen = net.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let batch: Vec<TdSample> = (0..10)
        .map(|i| TdSample {
            features: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: i % 3,
            reward: rng.gen_range(-1.0..1.0),
            done: true,
            next_features: vec![0.0; 4],
            next_feasible: vec![0],
        })
        .collect();
    let mut final_loss = f64::INFINITY;
    let mut steps_used = 0;
    for step in 0..10_000 {
        final_loss = net.td_update(&frozen, &batch);
        steps_used = step + 1;
        if final_loss < 1e-6 {
            break;
        }
    }
    assert!(
        final_loss < 1e-6,
        "overfit loss stuck at {final_loss} after {steps_used} steps"
    );
    pass(
        8,
        "numerics",
        &format!(
            "worst gradient error {worst:.2e}; double-Q split held; overfit loss {final_loss:.2e} after {steps_used} steps"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: hazard correctness for the uniform {3,4,5} travel law.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_hazard_correctness() {
    let pmf = TravelPmf::uniform(3, 5);
    let exact: Vec<f64> = (3..=5).map(|e| pmf.hazard(e, HazardMode::Exact)).collect();
    let product: Vec<f64> = (3..=5)
        .map(|e| pmf.hazard(e, HazardMode::ProductForm))
        .collect();
    for (got, want) in exact.iter().zip([1.0 / 3.0, 0.5, 1.0]) {
        assert!((got - want).abs() < 1e-12, "exact hazard {got} vs {want}");
    }
    for (got, want) in product.iter().zip([1.0 / 3.0, 0.5, 0.75]) {
        assert!((got - want).abs() < 1e-12, "product-form hazard {got} vs {want}");
    }
    for e in 0..3 {
        assert_eq!(pmf.hazard(e, HazardMode::Exact), 0.0);
    }

    // Period lengths sampled through the per-step exact hazard reproduce the
    // law within 3-sigma binomial bounds over 100k draws.
    let mut rng = ChaCha12Rng::seed_from_u64(31337);
    let n = 100_000;
    let mut counts = [0usize; 8];
    for _ in 0..n {
        let mut e = 1;
        loop {
            if rng.gen::<f64>() < pmf.hazard(e, HazardMode::Exact) {
                break;
            }
            e += 1;
            assert!(e < 8, "hazard chain ran past the support");
        }
        counts[e as usize] += 1;
    }
    assert_eq!(counts[1] + counts[2] + counts[6] + counts[7], 0);
    let mut details = Vec::new();
    for x in [3usize, 4, 5] {
        let p = 1.0 / 3.0;
        let freq = counts[x] as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * sigma,
            "length {x}: frequency {freq:.5} outside 3 sigma of {p:.5}"
        );
        details.push(format!("P({x})={freq:.4}"));
    }
    pass(
        9,
        "hazard-correctness",
        &format!(
            "sequences matched to 1e-12; empirical law over {n} draws: {}",
            details.join(" ")
        ),
    );
}
