//! Training loops: the two-level learner, its ablation, and the three
//! flat/partial baselines, all sharing the double-Q update machinery.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::env::{Boundary, Env, EnvState, OptionLevel, Period, Scenario};
use crate::error::{Error, Result};
use crate::prices::PriceSeries;
use crate::qnet::{encode_state, FeatureBounds, QNet, TdSample};
use crate::replay::{HerStager, HighTransition, LowTransition, ReplayBuffer, GOAL_EPS};

use super::eval::{evaluate, PolicyView};
use super::{
    counterfactual_high_reward, epsilon_greedy, low_interior_reward, mix_seed, pi_q,
    range_anxiety_penalty, target_miss_penalty, Mode, PeriodRecord,
};

/// Online network plus its periodically synced target copy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetPair {
    pub online: QNet,
    pub target: QNet,
    updates: u64,
}

impl NetPair {
    pub fn new(sizes: &[usize], learning_rate: f64, seed: u64) -> NetPair {
        let online = QNet::new(sizes, learning_rate, seed);
        let mut target = online.clone();
        target.sync_from(&online);
        NetPair {
            online,
            target,
            updates: 0,
        }
    }

    /// One gradient step; hard-copies the target every `sync_every` updates.
    pub fn update(&mut self, batch: &[TdSample], sync_every: usize) -> f64 {
        let loss = self.online.td_update(&self.target, batch);
        self.updates += 1;
        if sync_every > 0 && self.updates % sync_every as u64 == 0 {
            self.target.sync_from(&self.online);
        }
        loss
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

/// Trained parameters plus everything needed to run the policy greedily.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub mode: String,
    pub bounds: FeatureBounds,
    pub price_window: usize,
    pub high: Option<NetPair>,
    pub low: Option<NetPair>,
    pub episodes_trained: usize,
}

impl PolicyBundle {
    pub fn mode(&self) -> Result<Mode> {
        self.mode.parse()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Contract(format!("checkpoint serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint, verifying parameter-array shapes and, when
    /// expected layer sizes are supplied, the architecture itself.
    pub fn load(
        path: &std::path::Path,
        expected_high: Option<&[usize]>,
        expected_low: Option<&[usize]>,
    ) -> Result<PolicyBundle> {
        let text = std::fs::read_to_string(path)?;
        let bundle: PolicyBundle = serde_json::from_str(&text)
            .map_err(|e| Error::Contract(format!("malformed checkpoint: {e}")))?;
        bundle.mode()?;
        if let Some(pair) = &bundle.high {
            pair.online.validate_shapes(expected_high)?;
            pair.target.validate_shapes(expected_high)?;
        }
        if let Some(pair) = &bundle.low {
            pair.online.validate_shapes(expected_low)?;
            pair.target.validate_shapes(expected_low)?;
        }
        Ok(bundle)
    }

    pub fn view(&self) -> Result<PolicyView<'_>> {
        Ok(PolicyView {
            mode: self.mode()?,
            high: self.high.as_ref().map(|p| &p.online),
            low: self.low.as_ref().map(|p| &p.online),
            bounds: &self.bounds,
        })
    }
}

/// One line of the training curve, written at the evaluation cadence.
#[derive(Debug, Clone)]
pub struct TrainingLogRow {
    pub episode: usize,
    pub phase: u8,
    pub eps_low: f64,
    pub eps_high: f64,
    pub low_loss: f64,
    pub high_loss: f64,
    pub eval_mean: f64,
    pub eval_stderr: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "episode,phase,eps_low,eps_high,low_loss,high_loss,eval_mean,eval_stderr";

impl TrainingLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            self.phase,
            self.eps_low,
            self.eps_high,
            self.low_loss,
            self.high_loss,
            self.eval_mean,
            self.eval_stderr
        )
    }
}

pub struct TrainOutput {
    pub rows: Vec<TrainingLogRow>,
    pub bundle: PolicyBundle,
}

#[derive(Debug, Clone, Copy)]
struct Flags {
    her: bool,
    counterfactual: bool,
    relabel: bool,
    restrict_options: bool,
    delete_on_terminal: bool,
}

impl Flags {
    fn for_mode(mode: Mode) -> Flags {
        match mode {
            Mode::HddqnHer => Flags {
                her: true,
                counterfactual: true,
                relabel: true,
                restrict_options: true,
                delete_on_terminal: true,
            },
            // The ablation keeps the two-level structure but drops every
            // non-stationarity and sample-efficiency measure.
            Mode::Hddqn => Flags {
                her: false,
                counterfactual: false,
                relabel: false,
                restrict_options: false,
                delete_on_terminal: false,
            },
            Mode::DdqnHigh => Flags {
                her: false,
                counterfactual: false,
                relabel: false,
                restrict_options: true,
                delete_on_terminal: false,
            },
            Mode::DdqnOriginal | Mode::DdqnLow => Flags {
                her: false,
                counterfactual: false,
                relabel: false,
                restrict_options: false,
                delete_on_terminal: false,
            },
        }
    }
}

/// Global price-series step of a day's first departure for this scenario.
pub fn day_base_step(prices: &PriceSeries, scenario: &Scenario, day: usize) -> Result<usize> {
    use chrono::Timelike;
    let origin_min = prices.origin.hour() * 60 + prices.origin.minute();
    let start = scenario.schedule.start_clock_min;
    if start < origin_min {
        return Err(Error::Config(format!(
            "first departure {start} min precedes the price-series day origin {origin_min} min"
        )));
    }
    let delta_min = start - origin_min;
    if delta_min % scenario.schedule.dt_minutes != 0 {
        return Err(Error::Config(
            "first departure is not aligned to the step length".into(),
        ));
    }
    Ok(day * prices.steps_per_day() + (delta_min / scenario.schedule.dt_minutes) as usize)
}

/// Day indices whose price coverage can host a full episode.
pub fn eligible_days(prices: &PriceSeries, scenario: &Scenario) -> Result<Vec<usize>> {
    let horizon = scenario.schedule.horizon() as usize;
    let mut days = Vec::new();
    for day in 0..prices.num_days().max(1) {
        let base = day_base_step(prices, scenario, day)?;
        if base + horizon <= prices.len_steps() {
            days.push(day);
        }
    }
    if days.is_empty() {
        return Err(Error::Ingestion(
            "price series cannot host a single full episode".into(),
        ));
    }
    Ok(days)
}

/// Scaling bounds covering both price spans.
pub fn bounds_for(
    scenario: &Scenario,
    train: &PriceSeries,
    test: &PriceSeries,
    range: crate::config::FeatureRange,
) -> FeatureBounds {
    let (lo_a, hi_a) = train.min_max();
    let (lo_b, hi_b) = test.min_max();
    FeatureBounds::from_scenario(scenario, lo_a.min(lo_b), hi_a.max(hi_b), range)
}

/// State of one in-flight charging-operating cycle.
struct Cycle {
    start_state: EnvState,
    option: OptionLevel,
    /// Battery level at the charging period's end, once known.
    achieved: Option<f64>,
    reward_sum: f64,
    charging_reward: f64,
    record: PeriodRecord,
    instance_id: u64,
}

/// Drives one agent's full training run over its environment.
pub struct Trainer {
    cfg: Config,
    mode: Mode,
    flags: Flags,
    env: Env,
    test_prices: Arc<PriceSeries>,
    train_days: Vec<usize>,
    bounds: FeatureBounds,
    low: Option<NetPair>,
    high: Option<NetPair>,
    low_batch: usize,
    buf_low: ReplayBuffer<LowTransition>,
    buf_high: ReplayBuffer<HighTransition>,
    stager: HerStager,
    rng_day: ChaCha12Rng,
    rng_low: ChaCha12Rng,
    rng_high: ChaCha12Rng,
    seed: u64,
    next_instance_id: u64,
    episodes_done: usize,
    low_loss_sum: f64,
    low_loss_n: usize,
    high_loss_sum: f64,
    high_loss_n: usize,
    /// Audit counters kept for the verification suites.
    pub counterfactual_replays: usize,
    pub behavioral_high_rewards: usize,
    pub cycles_closed: usize,
    pub terminal_episodes: usize,
    pub her_checks: usize,
    pub her_violations: usize,
    pub option_prescriptions: usize,
    pub infeasible_prescriptions: usize,
    pub deleted_transitions: usize,
}

impl Trainer {
    pub fn new(
        cfg: Config,
        scenario: Scenario,
        train_prices: Arc<PriceSeries>,
        test_prices: Arc<PriceSeries>,
        mode: Mode,
        seed: u64,
    ) -> Result<Trainer> {
        cfg.env.validate()?;
        cfg.train.validate()?;
        let train_days = eligible_days(&train_prices, &scenario)?;
        eligible_days(&test_prices, &scenario)?;
        let bounds = bounds_for(&scenario, &train_prices, &test_prices, cfg.train.feature_range);
        let w_p = scenario.price_window;
        let n_actions = scenario.actions.n_slots();
        let n_options = scenario.options.n_slots();

        let high = mode.has_high_net().then(|| {
            let mut sizes = vec![bounds.feature_len(w_p, false)];
            sizes.extend(&cfg.train.hidden);
            sizes.push(n_options);
            NetPair::new(&sizes, cfg.train.lr_high, mix_seed(seed, &[10]))
        });
        let low = mode.has_low_net().then(|| {
            let (hidden, lr, with_option) = match mode {
                Mode::DdqnLow => (&cfg.train.hidden_ddqn_low, cfg.train.lr_ddqn_low, true),
                Mode::DdqnOriginal => (&cfg.train.hidden, cfg.train.lr_flat, false),
                _ => (&cfg.train.hidden, cfg.train.lr_low, true),
            };
            let mut sizes = vec![bounds.feature_len(w_p, with_option)];
            sizes.extend(hidden);
            sizes.push(n_actions);
            NetPair::new(&sizes, lr, mix_seed(seed, &[11]))
        });
        let low_batch = match mode {
            Mode::DdqnOriginal => cfg.train.batch_high,
            _ => cfg.train.batch_low,
        };

        Ok(Trainer {
            flags: Flags::for_mode(mode),
            env: Env::new(scenario, train_prices),
            test_prices,
            train_days,
            bounds,
            low,
            high,
            low_batch,
            buf_low: ReplayBuffer::new(cfg.train.buffer_low, mix_seed(seed, &[5])),
            buf_high: ReplayBuffer::new(cfg.train.buffer_high, mix_seed(seed, &[6])),
            stager: HerStager::new(),
            rng_day: ChaCha12Rng::seed_from_u64(mix_seed(seed, &[2])),
            rng_low: ChaCha12Rng::seed_from_u64(mix_seed(seed, &[3])),
            rng_high: ChaCha12Rng::seed_from_u64(mix_seed(seed, &[4])),
            seed,
            next_instance_id: 0,
            episodes_done: 0,
            low_loss_sum: 0.0,
            low_loss_n: 0,
            high_loss_sum: 0.0,
            high_loss_n: 0,
            counterfactual_replays: 0,
            behavioral_high_rewards: 0,
            cycles_closed: 0,
            terminal_episodes: 0,
            her_checks: 0,
            her_violations: 0,
            option_prescriptions: 0,
            infeasible_prescriptions: 0,
            deleted_transitions: 0,
            cfg,
            mode,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bounds(&self) -> &FeatureBounds {
        &self.bounds
    }

    pub fn low_buffer(&self) -> &ReplayBuffer<LowTransition> {
        &self.buf_low
    }

    pub fn high_buffer(&self) -> &ReplayBuffer<HighTransition> {
        &self.buf_high
    }

    pub fn high_pair(&self) -> Option<&NetPair> {
        self.high.as_ref()
    }

    pub fn low_pair(&self) -> Option<&NetPair> {
        self.low.as_ref()
    }

    fn view(&self) -> PolicyView<'_> {
        PolicyView {
            mode: self.mode,
            high: self.high.as_ref().map(|p| &p.online),
            low: self.low.as_ref().map(|p| &p.online),
            bounds: &self.bounds,
        }
    }

    pub fn into_bundle(self) -> PolicyBundle {
        PolicyBundle {
            mode: self.mode.as_str().to_string(),
            bounds: self.bounds,
            price_window: self.env.scenario().price_window,
            high: self.high,
            low: self.low,
            episodes_trained: self.episodes_done,
        }
    }

    /// Runs the configured number of episodes, evaluating greedily on the
    /// test span at the configured cadence.
    pub fn run(&mut self) -> Result<Vec<TrainingLogRow>> {
        let episodes = self.cfg.train.episodes;
        let mut rows = Vec::new();
        for ep in 0..episodes {
            self.run_episode(ep)?;
            self.episodes_done = ep + 1;
            if (ep + 1) % self.cfg.train.eval_every == 0 || ep + 1 == episodes {
                let summary = evaluate(
                    &self.view(),
                    self.env.scenario(),
                    &self.test_prices,
                    self.cfg.train.eval_episodes,
                    mix_seed(self.seed, &[9, (ep + 1) as u64]),
                    false,
                )?;
                let eps = self.cfg.train.epsilon_at(ep);
                rows.push(TrainingLogRow {
                    episode: ep + 1,
                    phase: if ep < self.cfg.train.phase_threshold { 1 } else { 2 },
                    eps_low: eps,
                    eps_high: eps,
                    low_loss: self.drain_loss(false),
                    high_loss: self.drain_loss(true),
                    eval_mean: summary.mean,
                    eval_stderr: summary.stderr,
                });
            }
        }
        Ok(rows)
    }

    fn drain_loss(&mut self, high: bool) -> f64 {
        let (sum, n) = if high {
            let v = (self.high_loss_sum, self.high_loss_n);
            self.high_loss_sum = 0.0;
            self.high_loss_n = 0;
            v
        } else {
            let v = (self.low_loss_sum, self.low_loss_n);
            self.low_loss_sum = 0.0;
            self.low_loss_n = 0;
            v
        };
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Runs one training episode (exposed for the verification suites).
    pub fn run_episode(&mut self, ep: usize) -> Result<()> {
        let day = self.train_days[self.rng_day.gen_range(0..self.train_days.len())];
        let base = day_base_step(self.env.prices(), self.env.scenario(), day)?;
        self.env.reset(mix_seed(self.seed, &[1, ep as u64]), base)?;
        match self.mode {
            Mode::HddqnHer | Mode::Hddqn | Mode::DdqnHigh => self.hier_episode(ep),
            Mode::DdqnOriginal => self.flat_episode(ep),
            Mode::DdqnLow => self.fixed_target_episode(ep),
        }
    }

    fn option_levels(&self, state: &EnvState) -> Vec<OptionLevel> {
        if self.flags.restrict_options {
            self.env.feasible_options(state)
        } else {
            self.env.scenario().options.all()
        }
    }

    fn begin_cycle(&mut self, state: &EnvState, epsilon: f64) -> Cycle {
        debug_assert_eq!(state.period, Period::Charging);
        let levels = self.option_levels(state);
        let slots: Vec<usize> = levels.iter().map(|o| o.slot).collect();
        let values = self
            .high
            .as_ref()
            .expect("hierarchical modes carry a high net")
            .online
            .forward(&encode_state(state, None, &self.bounds));
        let slot = epsilon_greedy(&values, &slots, epsilon, &mut self.rng_high);
        let option = *levels.iter().find(|o| o.slot == slot).unwrap();
        self.option_prescriptions += 1;
        if self.flags.restrict_options {
            let feasible = self.env.feasible_options(state);
            if !feasible.iter().any(|o| o.slot == option.slot) {
                self.infeasible_prescriptions += 1;
            }
        }
        if self.flags.her {
            self.stager.begin();
        }
        self.next_instance_id += 1;
        Cycle {
            start_state: state.clone(),
            option,
            achieved: None,
            reward_sum: 0.0,
            charging_reward: 0.0,
            record: PeriodRecord {
                start_soc: state.soc,
                prices: Vec::new(),
            },
            instance_id: self.next_instance_id,
        }
    }

    fn hier_episode(&mut self, ep: usize) -> Result<()> {
        let epsilon = self.cfg.train.epsilon_at(ep);
        let low_learned = self.mode != Mode::DdqnHigh;
        let state = self.env.state().unwrap().clone();
        let mut cycle = self.begin_cycle(&state, epsilon);
        loop {
            let st = self.env.state().unwrap().clone();
            let out = if st.period == Period::Charging {
                let feasible = self.env.feasible_actions(&st);
                let action = if low_learned {
                    let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
                    let features = encode_state(&st, Some(cycle.option.target_kwh), &self.bounds);
                    let values = self.low.as_ref().unwrap().online.forward(&features);
                    let slot = epsilon_greedy(&values, &slots, epsilon, &mut self.rng_low);
                    *feasible.iter().find(|a| a.slot == slot).unwrap()
                } else {
                    pi_q(
                        st.soc,
                        cycle.option.target_kwh,
                        &feasible,
                        self.env.scenario().dt_hours,
                    )
                };
                cycle.record.prices.push(self.env.price_at(st.step_index));
                let out = self.env.step(Some(action))?;
                let interior = out.reward;
                debug_assert!(
                    (interior
                        - low_interior_reward(
                            out.power_kw,
                            self.env.scenario().dt_hours,
                            *st.price_window.last().unwrap()
                        ))
                    .abs()
                        < 1e-9
                );
                let boundary = out.boundary == Boundary::OperatingStarted || out.day_complete;
                if boundary {
                    cycle.achieved = Some(out.state.soc);
                }
                if low_learned {
                    let penalty = if boundary {
                        target_miss_penalty(
                            cycle.option.target_kwh,
                            out.state.soc,
                            self.cfg.train.target_penalty,
                        )
                    } else {
                        0.0
                    };
                    let next_feasible = if boundary {
                        Vec::new()
                    } else {
                        self.env
                            .feasible_actions(&out.state)
                            .iter()
                            .map(|a| a.slot)
                            .collect()
                    };
                    let original = LowTransition {
                        state: st.clone(),
                        option_kwh: cycle.option.target_kwh,
                        action_slot: action.slot,
                        reward: interior + penalty,
                        target_penalty: penalty,
                        next_state: out.state.clone(),
                        done: boundary,
                        next_feasible: next_feasible.clone(),
                        episode_id: ep as u64,
                        option_instance_id: cycle.instance_id,
                        hindsight: false,
                    };
                    if self.flags.her {
                        let mut copy = original.clone();
                        copy.reward = interior;
                        copy.target_penalty = 0.0;
                        self.buf_low.push(original);
                        self.stager.stage(copy);
                        if boundary {
                            let achieved = out.state.soc;
                            let staged = self.stager.staged_len();
                            self.stager.finalize(
                                achieved,
                                cycle.option.target_kwh,
                                &mut self.buf_low,
                            )?;
                            self.audit_her(ep as u64, cycle.instance_id, achieved, staged);
                        }
                    } else {
                        self.buf_low.push(original);
                    }
                }
                out
            } else {
                self.env.step(None)?
            };

            if low_learned {
                self.update_low()?;
            }
            cycle.reward_sum += out.reward;
            if st.period == Period::Charging {
                cycle.charging_reward += out.reward;
            }

            let smdp_close =
                out.terminal || out.boundary == Boundary::ChargingStarted || out.day_complete;
            if smdp_close {
                let achieved = cycle.achieved.unwrap_or(out.state.soc);
                let (stored_kwh, stored_slot) = if self.flags.relabel {
                    (achieved, self.env.scenario().options.nearest(achieved).slot)
                } else {
                    (cycle.option.target_kwh, cycle.option.slot)
                };
                let operating_reward = cycle.reward_sum - cycle.charging_reward;
                let reward = if self.flags.counterfactual && ep < self.cfg.train.phase_threshold {
                    self.counterfactual_replays += 1;
                    let sc = self.env.scenario();
                    counterfactual_high_reward(
                        &cycle.record,
                        stored_kwh,
                        &sc.actions,
                        sc.e_min,
                        sc.e_max,
                        sc.dt_hours,
                        operating_reward,
                    )
                } else {
                    self.behavioral_high_rewards += 1;
                    cycle.reward_sum
                };
                let done = out.terminal || out.day_complete;
                let next_feasible = if done {
                    Vec::new()
                } else {
                    self.option_levels(&out.state).iter().map(|o| o.slot).collect()
                };
                self.buf_high.push(HighTransition {
                    start_state: cycle.start_state.clone(),
                    option_kwh: stored_kwh,
                    option_slot: stored_slot,
                    reward,
                    next_state: out.state.clone(),
                    done,
                    next_feasible,
                });
                self.cycles_closed += 1;
                self.update_high()?;
                if out.terminal {
                    self.terminal_episodes += 1;
                    if self.flags.delete_on_terminal {
                        self.deleted_transitions +=
                            self.buf_low.delete_option_instance(ep as u64, cycle.instance_id);
                    }
                    if self.flags.her {
                        self.stager.cancel();
                    }
                    break;
                }
                if out.day_complete {
                    break;
                }
                cycle = self.begin_cycle(&out.state, epsilon);
            }
        }
        Ok(())
    }

    /// Checks that the just-closed charging period left at least one full
    /// sequence in the buffer whose goal equals the achieved level with no
    /// boundary miss penalty. Only the most recent records can belong to the
    /// instance, so the scan is bounded.
    fn audit_her(&mut self, episode: u64, instance: u64, achieved: f64, expected_len: usize) {
        self.her_checks += 1;
        let matching = self
            .buf_low
            .iter()
            .rev()
            .take(4 * expected_len + 8)
            .filter(|r| {
                r.episode_id == episode
                    && r.option_instance_id == instance
                    && (r.option_kwh - achieved).abs() < GOAL_EPS
                    && r.target_penalty.abs() == 0.0
            })
            .count();
        if matching < expected_len {
            self.her_violations += 1;
        }
    }

    fn flat_episode(&mut self, ep: usize) -> Result<()> {
        let epsilon = self.cfg.train.epsilon_at(ep);
        struct OpenDecision {
            state: EnvState,
            slot: usize,
            accumulated: f64,
        }
        let mut open: Option<OpenDecision> = None;
        loop {
            let st = self.env.state().unwrap().clone();
            let out = if st.period == Period::Charging {
                if let Some(o) = open.take() {
                    let next_feasible =
                        self.env.feasible_actions(&st).iter().map(|a| a.slot).collect();
                    self.buf_low.push(LowTransition {
                        state: o.state,
                        option_kwh: f64::NAN,
                        action_slot: o.slot,
                        reward: o.accumulated,
                        target_penalty: 0.0,
                        next_state: st.clone(),
                        done: false,
                        next_feasible,
                        episode_id: ep as u64,
                        option_instance_id: 0,
                        hindsight: false,
                    });
                }
                let feasible = self.env.feasible_actions(&st);
                let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
                let values = self
                    .low
                    .as_ref()
                    .unwrap()
                    .online
                    .forward(&encode_state(&st, None, &self.bounds));
                let slot = epsilon_greedy(&values, &slots, epsilon, &mut self.rng_low);
                let action = *feasible.iter().find(|a| a.slot == slot).unwrap();
                let out = self.env.step(Some(action))?;
                open = Some(OpenDecision {
                    state: st,
                    slot,
                    accumulated: out.reward,
                });
                out
            } else {
                let out = self.env.step(None)?;
                if let Some(o) = open.as_mut() {
                    o.accumulated += out.reward;
                }
                out
            };
            self.update_low()?;
            if out.terminal || out.day_complete {
                if out.terminal {
                    self.terminal_episodes += 1;
                }
                if let Some(o) = open.take() {
                    self.buf_low.push(LowTransition {
                        state: o.state,
                        option_kwh: f64::NAN,
                        action_slot: o.slot,
                        reward: o.accumulated,
                        target_penalty: 0.0,
                        next_state: out.state.clone(),
                        done: true,
                        next_feasible: Vec::new(),
                        episode_id: ep as u64,
                        option_instance_id: 0,
                        hindsight: false,
                    });
                }
                break;
            }
        }
        Ok(())
    }

    fn fixed_target_episode(&mut self, ep: usize) -> Result<()> {
        let epsilon = self.cfg.train.epsilon_at(ep);
        let e_max = self.env.scenario().e_max;
        let mut instance = 0u64;
        loop {
            let st = self.env.state().unwrap().clone();
            let out = if st.period == Period::Charging {
                let feasible = self.env.feasible_actions(&st);
                let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
                let values = self
                    .low
                    .as_ref()
                    .unwrap()
                    .online
                    .forward(&encode_state(&st, Some(e_max), &self.bounds));
                let slot = epsilon_greedy(&values, &slots, epsilon, &mut self.rng_low);
                let action = *feasible.iter().find(|a| a.slot == slot).unwrap();
                let out = self.env.step(Some(action))?;
                let boundary = out.boundary == Boundary::OperatingStarted || out.day_complete;
                let penalty = if boundary {
                    range_anxiety_penalty(e_max, out.state.soc, self.cfg.train.range_anxiety)
                } else {
                    0.0
                };
                let next_feasible = if boundary {
                    Vec::new()
                } else {
                    self.env.feasible_actions(&out.state).iter().map(|a| a.slot).collect()
                };
                self.buf_low.push(LowTransition {
                    state: st.clone(),
                    option_kwh: e_max,
                    action_slot: action.slot,
                    reward: out.reward + penalty,
                    target_penalty: penalty,
                    next_state: out.state.clone(),
                    done: boundary,
                    next_feasible,
                    episode_id: ep as u64,
                    option_instance_id: instance,
                    hindsight: false,
                });
                if boundary {
                    instance += 1;
                }
                out
            } else {
                self.env.step(None)?
            };
            self.update_low()?;
            if out.terminal || out.day_complete {
                if out.terminal {
                    self.terminal_episodes += 1;
                }
                break;
            }
        }
        Ok(())
    }

    fn update_low(&mut self) -> Result<()> {
        let with_option = self.mode != Mode::DdqnOriginal;
        let Some(samples) = sample_low(&mut self.buf_low, self.low_batch, with_option, &self.bounds)
        else {
            return Ok(());
        };
        let pair = self.low.as_mut().expect("low updates need a low net");
        let loss = pair.update(&samples, self.cfg.train.target_sync);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite low-level loss after {} updates",
                pair.updates()
            )));
        }
        self.low_loss_sum += loss;
        self.low_loss_n += 1;
        Ok(())
    }

    fn update_high(&mut self) -> Result<()> {
        let Some(pair) = self.high.as_mut() else {
            return Ok(());
        };
        let Some(records) = self.buf_high.sample(self.cfg.train.batch_high) else {
            return Ok(());
        };
        let samples: Vec<TdSample> = records
            .into_iter()
            .map(|r| TdSample {
                features: encode_state(&r.start_state, None, &self.bounds),
                action: r.option_slot,
                reward: r.reward,
                done: r.done,
                next_features: encode_state(&r.next_state, None, &self.bounds),
                next_feasible: r.next_feasible.clone(),
            })
            .collect();
        let loss = pair.update(&samples, self.cfg.train.target_sync);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite high-level loss after {} updates",
                pair.updates()
            )));
        }
        self.high_loss_sum += loss;
        self.high_loss_n += 1;
        Ok(())
    }
}

fn sample_low(
    buf: &mut ReplayBuffer<LowTransition>,
    batch: usize,
    with_option: bool,
    bounds: &FeatureBounds,
) -> Option<Vec<TdSample>> {
    let records = buf.sample(batch)?;
    Some(
        records
            .into_iter()
            .map(|r| {
                let option = with_option.then_some(r.option_kwh);
                TdSample {
                    features: encode_state(&r.state, option, bounds),
                    action: r.action_slot,
                    reward: r.reward,
                    done: r.done,
                    next_features: encode_state(&r.next_state, option, bounds),
                    next_feasible: r.next_feasible.clone(),
                }
            })
            .collect(),
    )
}
