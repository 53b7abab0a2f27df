//! Step-by-step simulation of one bus's service day.
//!
//! Time is discrete. The bus alternates charging periods at the terminal
//! station (where the agent sets charging power, including discharging back
//! to the grid) with operating periods on its route (where the environment
//! draws the traction discharge). A countdown `steps_to_departure` enforces
//! the timetable: it resets to the headway gap at each departure and the bus
//! must leave when it hits zero. Operating periods end stochastically through
//! a per-step arrival hazard derived from the travel-time distribution.
//!
//! Rewards are negated costs: each charging step costs `power * dt * price`,
//! operating steps are free, and draining the battery below its minimum ends
//! the episode with a one-time penalty.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::{in_windows, EnvConfig, HazardMode};
use crate::error::{Error, Result};
use crate::prices::PriceSeries;
use crate::schedule::{DischargeProfile, Schedule};

const EPS: f64 = 1e-9;

/// Which kind of period the bus is in. Charging maps to flag value 1,
/// operating to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Period {
    Operating,
    Charging,
}

impl Period {
    pub fn flag(self) -> u8 {
        match self {
            Period::Operating => 0,
            Period::Charging => 1,
        }
    }
}

/// Full observable state at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Battery level in kWh.
    pub soc: f64,
    pub period: Period,
    /// Remaining steps until the next scheduled departure.
    pub steps_to_departure: u32,
    /// The last `w_p + 1` prices, oldest first; the newest entry is the
    /// price at `step_index`.
    pub price_window: Vec<f64>,
    /// Index of the current operating/charging period pair.
    pub period_index: u32,
    /// Steps since this bus-day's first departure.
    pub step_index: u32,
}

impl EnvState {
    /// Current price, the newest window entry.
    pub fn price(&self) -> f64 {
        *self.price_window.last().expect("window is never empty")
    }
}

/// What happened at a period boundary during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Within,
    /// The bus arrived at the terminal station.
    ChargingStarted,
    /// The bus departed on its route.
    OperatingStarted,
}

/// Result of one simulation step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// Battery fell below its minimum; the episode is over and the reward is
    /// the one-time terminal penalty.
    pub terminal: bool,
    pub boundary: Boundary,
    /// The final operating period ended (or the horizon was reached); the
    /// episode is complete.
    pub day_complete: bool,
    /// Realized power this step: the chosen charging action, or the sampled
    /// operating discharge.
    pub power_kw: f64,
}

/// One selectable charging-power level. `slot` indexes the Q-network output;
/// clip slots carry state-dependent power equal to the battery-capacity
/// window edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionLevel {
    pub slot: usize,
    pub power_kw: f64,
}

/// Discretized charging-power grid. Optionally the capacity-window edges are
/// exposed as two extra "clip" slots whenever they cut off grid levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionGrid {
    levels: Vec<f64>,
    clip_endpoints: bool,
}

impl ActionGrid {
    /// Evenly spaced levels over `[-d_max, c_max]` with 0 kW in the middle.
    pub fn symmetric(d_max: f64, c_max: f64, n_levels: usize) -> ActionGrid {
        assert!(n_levels >= 3 && n_levels % 2 == 1, "need an odd level count");
        let half = (n_levels - 1) / 2;
        let mut levels = Vec::with_capacity(n_levels);
        for i in 0..half {
            levels.push(-d_max * (half - i) as f64 / half as f64);
        }
        levels.push(0.0);
        for i in 1..=half {
            levels.push(c_max * i as f64 / half as f64);
        }
        ActionGrid {
            levels,
            clip_endpoints: false,
        }
    }

    pub fn from_levels(mut levels: Vec<f64>) -> ActionGrid {
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            levels.iter().any(|&l| l.abs() < EPS),
            "action grid must contain 0 kW"
        );
        ActionGrid {
            levels,
            clip_endpoints: false,
        }
    }

    pub fn with_clip_endpoints(mut self, clip: bool) -> ActionGrid {
        self.clip_endpoints = clip;
        self
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of Q-network output slots: the grid levels plus two clip slots
    /// when enabled.
    pub fn n_slots(&self) -> usize {
        self.levels.len() + if self.clip_endpoints { 2 } else { 0 }
    }

    pub fn clip_lo_slot(&self) -> Option<usize> {
        self.clip_endpoints.then_some(self.levels.len())
    }

    pub fn clip_hi_slot(&self) -> Option<usize> {
        self.clip_endpoints.then_some(self.levels.len() + 1)
    }

    /// Power levels usable at battery level `soc`: grid levels inside the
    /// capacity window `[(e_min - soc)/dt, (e_max - soc)/dt]`, plus the
    /// window edges as clip levels when they exclude grid levels. 0 kW is
    /// always present for a non-terminal state.
    pub fn feasible(&self, soc: f64, e_min: f64, e_max: f64, dt_hours: f64) -> Vec<ActionLevel> {
        let lo_cap = (e_min - soc) / dt_hours;
        let hi_cap = (e_max - soc) / dt_hours;
        let mut out = Vec::with_capacity(self.levels.len());
        let mut cut_lo = false;
        let mut cut_hi = false;
        for (slot, &level) in self.levels.iter().enumerate() {
            if level < lo_cap - EPS {
                cut_lo = true;
            } else if level > hi_cap + EPS {
                cut_hi = true;
            } else {
                out.push(ActionLevel {
                    slot,
                    power_kw: level,
                });
            }
        }
        if self.clip_endpoints {
            let grid_lo = self.levels[0];
            let grid_hi = *self.levels.last().unwrap();
            if cut_lo {
                let p = lo_cap.max(grid_lo);
                if out.iter().all(|a| (a.power_kw - p).abs() > EPS) {
                    out.push(ActionLevel {
                        slot: self.clip_lo_slot().unwrap(),
                        power_kw: p,
                    });
                }
            }
            if cut_hi {
                let p = hi_cap.min(grid_hi);
                if out.iter().all(|a| (a.power_kw - p).abs() > EPS) {
                    out.push(ActionLevel {
                        slot: self.clip_hi_slot().unwrap(),
                        power_kw: p,
                    });
                }
            }
        }
        out.sort_by(|a, b| a.power_kw.partial_cmp(&b.power_kw).unwrap());
        out
    }
}

/// One selectable charging target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionLevel {
    pub slot: usize,
    pub target_kwh: f64,
}

/// Discretized charging-target grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptionGrid {
    targets: Vec<f64>,
}

impl OptionGrid {
    /// Multiples of `step_kwh` covering `[e_min, e_max]`.
    pub fn stepped(e_min: f64, e_max: f64, step_kwh: f64) -> OptionGrid {
        assert!(step_kwh > 0.0);
        let mut targets = Vec::new();
        let mut v = e_min;
        while v <= e_max + EPS {
            targets.push(v.min(e_max));
            v += step_kwh;
        }
        OptionGrid { targets }
    }

    pub fn from_targets(mut targets: Vec<f64>) -> OptionGrid {
        targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        targets.dedup_by(|a, b| (*a - *b).abs() < EPS);
        assert!(!targets.is_empty());
        OptionGrid { targets }
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn n_slots(&self) -> usize {
        self.targets.len()
    }

    pub fn all(&self) -> Vec<OptionLevel> {
        self.targets
            .iter()
            .enumerate()
            .map(|(slot, &t)| OptionLevel {
                slot,
                target_kwh: t,
            })
            .collect()
    }

    pub fn nearest(&self, kwh: f64) -> OptionLevel {
        let (slot, &target) = self
            .targets
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 - kwh).abs();
                let db = (b.1 - kwh).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        OptionLevel {
            slot,
            target_kwh: target,
        }
    }

    /// Targets reachable from `soc` within `tau` steps of full-power charging
    /// or discharging, intersected with the battery bounds. Falls back to the
    /// grid point nearest the current level, so the set is never empty.
    pub fn feasible(
        &self,
        soc: f64,
        tau: u32,
        d_max: f64,
        c_max: f64,
        dt_hours: f64,
        e_min: f64,
        e_max: f64,
    ) -> Vec<OptionLevel> {
        let reach = f64::from(tau) * dt_hours;
        let lo = (soc - reach * d_max).max(e_min);
        let hi = (soc + reach * c_max).min(e_max);
        let out: Vec<OptionLevel> = self
            .targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= lo - EPS && t <= hi + EPS)
            .map(|(slot, &t)| OptionLevel {
                slot,
                target_kwh: t,
            })
            .collect();
        if out.is_empty() {
            vec![self.nearest(soc)]
        } else {
            out
        }
    }
}

/// Everything that defines the dynamics of one bus-day, independent of which
/// prices it replays.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dt_hours: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub c_max: f64,
    pub d_max: f64,
    pub terminal_penalty: f64,
    /// Battery levels the day may start from; sampled uniformly at reset.
    pub start_socs: Vec<f64>,
    /// Number of past prices in the observation window.
    pub price_window: usize,
    pub actions: ActionGrid,
    pub options: OptionGrid,
    pub schedule: Schedule,
    pub hazard_mode: HazardMode,
    pub discharge: DischargeProfile,
    pub rush_windows: Vec<(u32, u32)>,
    pub rush_discharge_multiplier: f64,
}

impl Scenario {
    pub fn from_config(cfg: &EnvConfig) -> Scenario {
        Scenario {
            dt_hours: cfg.dt_hours(),
            e_min: cfg.e_min_kwh,
            e_max: cfg.e_max_kwh,
            c_max: cfg.c_max_kw,
            d_max: cfg.d_max_kw,
            terminal_penalty: cfg.terminal_penalty,
            start_socs: vec![cfg.initial_soc_kwh],
            price_window: cfg.price_window,
            actions: ActionGrid::symmetric(cfg.d_max_kw, cfg.c_max_kw, cfg.action_levels)
                .with_clip_endpoints(cfg.clip_endpoints),
            options: OptionGrid::stepped(cfg.e_min_kwh, cfg.e_max_kwh, cfg.option_step_kwh),
            schedule: Schedule::from_config(cfg),
            hazard_mode: cfg.hazard_mode,
            discharge: DischargeProfile::TruncNormal {
                mean_kw: -cfg.effective_discharge_mean_kw(),
                std_kw: cfg.discharge_std_kw,
            },
            rush_windows: cfg.rush_windows.clone(),
            rush_discharge_multiplier: cfg.rush_discharge_multiplier,
        }
    }

    pub fn num_periods(&self) -> usize {
        self.schedule.num_periods()
    }
}

/// Battery update over one step: energy changes by power times duration.
pub fn apply_battery_dynamics(soc_kwh: f64, power_kw: f64, dt_hours: f64) -> f64 {
    soc_kwh + power_kw * dt_hours
}

/// Departure-countdown update. At a departure (charging to operating) the
/// countdown resets to the gap until the following departure; otherwise it
/// decrements. A decrement below zero means the bus missed its departure,
/// which the period machinery must make impossible.
pub fn advance_tau(tau: u32, from: Period, to: Period, next_t_d: u32) -> Result<u32> {
    if from == Period::Charging && to == Period::Operating {
        return Ok(next_t_d);
    }
    tau.checked_sub(1).ok_or_else(|| {
        Error::Fault("departure countdown went negative: departure missed".into())
    })
}

/// The simulator. Owns its RNG; identical seed, scenario, and price data
/// yield bit-identical trajectories.
pub struct Env {
    scenario: Scenario,
    prices: Arc<PriceSeries>,
    price_base: usize,
    rng: ChaCha12Rng,
    state: Option<EnvState>,
    finished: bool,
}

impl Env {
    pub fn new(scenario: Scenario, prices: Arc<PriceSeries>) -> Env {
        Env {
            scenario,
            prices,
            price_base: 0,
            rng: ChaCha12Rng::seed_from_u64(0),
            state: None,
            finished: true,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn prices(&self) -> &PriceSeries {
        &self.prices
    }

    /// Price at an episode step index.
    pub fn price_at(&self, step_index: u32) -> f64 {
        self.prices.price(self.price_base + step_index as usize)
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.finished
    }

    /// Starts a new episode. `price_base` is the global price-series step of
    /// this bus-day's first departure. The returned state is the bus's first
    /// arrival at the terminal station: the first trip of the day is folded
    /// into the reset.
    pub fn reset(&mut self, seed: u64, price_base: usize) -> Result<EnvState> {
        let sched = &self.scenario.schedule;
        let needed = price_base + sched.horizon() as usize;
        if needed > self.prices.len_steps() {
            return Err(Error::Ingestion(format!(
                "price series too short: episode needs {needed} steps, have {}",
                self.prices.len_steps()
            )));
        }
        self.rng = ChaCha12Rng::seed_from_u64(seed);
        self.price_base = price_base;
        let first_trip = sched.periods[0].travel.sample(&mut self.rng);
        let start_soc = if self.scenario.start_socs.len() == 1 {
            self.scenario.start_socs[0]
        } else {
            let i = self.rng.gen_range(0..self.scenario.start_socs.len());
            self.scenario.start_socs[i]
        };
        let t_d0 = sched.periods[0].t_d;
        debug_assert!(first_trip >= 1 && first_trip <= t_d0);
        let state = EnvState {
            soc: start_soc,
            period: Period::Charging,
            steps_to_departure: t_d0 - first_trip,
            price_window: self
                .prices
                .window(price_base + first_trip as usize, self.scenario.price_window)?,
            period_index: 0,
            step_index: first_trip,
        };
        self.state = Some(state.clone());
        self.finished = false;
        Ok(state)
    }

    /// Charging-power levels usable in `state`.
    pub fn feasible_actions(&self, state: &EnvState) -> Vec<ActionLevel> {
        debug_assert_eq!(state.period, Period::Charging);
        self.scenario.actions.feasible(
            state.soc,
            self.scenario.e_min,
            self.scenario.e_max,
            self.scenario.dt_hours,
        )
    }

    /// Charging targets reachable from `state` before the next departure.
    pub fn feasible_options(&self, state: &EnvState) -> Vec<OptionLevel> {
        debug_assert_eq!(state.period, Period::Charging);
        self.scenario.options.feasible(
            state.soc,
            state.steps_to_departure,
            self.scenario.d_max,
            self.scenario.c_max,
            self.scenario.dt_hours,
            self.scenario.e_min,
            self.scenario.e_max,
        )
    }

    /// Probability that the current period ends at this state: 1 exactly at
    /// the zero-countdown charging step, and the travel-time hazard at
    /// elapsed `t_d - tau` steps while operating.
    pub fn termination_prob(&self, state: &EnvState, mode: HazardMode) -> f64 {
        match state.period {
            Period::Charging => {
                if state.steps_to_departure == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Period::Operating => {
                let period = &self.scenario.schedule.periods[state.period_index as usize];
                debug_assert!(state.steps_to_departure <= period.t_d);
                let elapsed = period.t_d - state.steps_to_departure;
                period.travel.hazard(elapsed, mode)
            }
        }
    }

    /// Advances one step. An action is required exactly when charging and
    /// must come from [`Env::feasible_actions`].
    pub fn step(&mut self, action: Option<ActionLevel>) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let st = self.state.clone().expect("reset before step");
        let sc = &self.scenario;
        let price = self.price_at(st.step_index);

        let power_kw = match st.period {
            Period::Charging => {
                let a = action.ok_or_else(|| {
                    Error::Contract("charging step requires an action".into())
                })?;
                let feas = self.feasible_actions(&st);
                let ok = feas
                    .iter()
                    .any(|f| f.slot == a.slot && (f.power_kw - a.power_kw).abs() < 1e-6);
                if !ok {
                    return Err(Error::Contract(format!(
                        "infeasible action: slot {} power {} kW at soc {}",
                        a.slot, a.power_kw, st.soc
                    )));
                }
                a.power_kw
            }
            Period::Operating => {
                if action.is_some() {
                    return Err(Error::Contract(
                        "operating steps take no action; power is environment-sampled".into(),
                    ));
                }
                let clock = sc.schedule.clock_of_step(st.step_index);
                let scale = if in_windows(&sc.rush_windows, clock) {
                    sc.rush_discharge_multiplier
                } else {
                    1.0
                };
                sc.discharge
                    .sample(&mut self.rng, st.step_index, scale, sc.d_max)
            }
        };

        let next_soc = apply_battery_dynamics(st.soc, power_kw, sc.dt_hours);
        let terminal = next_soc < sc.e_min - 1e-12;

        // Period machinery. While operating, the arrival hazard is evaluated
        // on the decremented countdown so a trip of `e` steps occupies
        // exactly `e` operating steps and the first charging step sits at
        // countdown `t_d - e`.
        let (next_period, next_tau, next_k, boundary) = match st.period {
            Period::Charging => {
                if st.steps_to_departure == 0 {
                    let nk = st.period_index + 1;
                    let t_d = sc.schedule.periods[nk as usize].t_d;
                    let tau = advance_tau(st.steps_to_departure, Period::Charging, Period::Operating, t_d)?;
                    (Period::Operating, tau, nk, Boundary::OperatingStarted)
                } else {
                    let tau =
                        advance_tau(st.steps_to_departure, Period::Charging, Period::Charging, 0)?;
                    (Period::Charging, tau, st.period_index, Boundary::Within)
                }
            }
            Period::Operating => {
                let tau =
                    advance_tau(st.steps_to_departure, Period::Operating, Period::Operating, 0)?;
                let period = &sc.schedule.periods[st.period_index as usize];
                let elapsed = period.t_d - tau;
                let hazard = period.travel.hazard(elapsed, sc.hazard_mode);
                if self.rng.gen::<f64>() < hazard {
                    (Period::Charging, tau, st.period_index, Boundary::ChargingStarted)
                } else {
                    (Period::Operating, tau, st.period_index, Boundary::Within)
                }
            }
        };

        let next_step = st.step_index + 1;
        let last_period = st.period_index as usize == sc.num_periods() - 1;
        let day_complete = (boundary == Boundary::ChargingStarted && last_period)
            || next_step >= sc.schedule.horizon();

        let next_state = EnvState {
            soc: next_soc,
            period: next_period,
            steps_to_departure: next_tau,
            price_window: self
                .prices
                .window(self.price_base + next_step as usize, sc.price_window)?,
            period_index: next_k,
            step_index: next_step,
        };

        let reward = if terminal {
            -sc.terminal_penalty
        } else {
            match st.period {
                Period::Charging => -power_kw * sc.dt_hours * price,
                Period::Operating => 0.0,
            }
        };

        self.finished = terminal || day_complete;
        self.state = Some(next_state.clone());
        Ok(StepOutcome {
            state: next_state,
            reward,
            terminal,
            boundary,
            day_complete,
            power_kw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{PeriodSpec, TravelPmf};

    fn test_scenario() -> Scenario {
        let periods = (0..3)
            .map(|_| PeriodSpec {
                t_d: 9,
                travel: TravelPmf::uniform(3, 5),
            })
            .collect();
        Scenario {
            dt_hours: 1.0 / 6.0,
            e_min: 0.0,
            e_max: 240.0,
            c_max: 120.0,
            d_max: 120.0,
            terminal_penalty: 50.0,
            start_socs: vec![240.0],
            price_window: 4,
            actions: ActionGrid::symmetric(120.0, 120.0, 5).with_clip_endpoints(true),
            options: OptionGrid::stepped(0.0, 240.0, 20.0),
            schedule: Schedule {
                periods,
                dt_minutes: 10,
                start_clock_min: 390,
            },
            hazard_mode: HazardMode::Exact,
            discharge: DischargeProfile::Fixed(-30.0),
            rush_windows: vec![],
            rush_discharge_multiplier: 1.0,
        }
    }

    fn flat_prices(n: usize, p: f64) -> Arc<PriceSeries> {
        Arc::new(PriceSeries::from_steps(vec![p; n], 6))
    }

    fn state(soc: f64, period: Period, tau: u32, k: u32) -> EnvState {
        EnvState {
            soc,
            period,
            steps_to_departure: tau,
            price_window: vec![0.02; 5],
            period_index: k,
            step_index: 4,
        }
    }

    #[test]
    fn countdown_decrements_and_resets() {
        assert_eq!(advance_tau(5, Period::Charging, Period::Charging, 0).unwrap(), 4);
        assert_eq!(advance_tau(0, Period::Charging, Period::Operating, 9).unwrap(), 9);
        assert_eq!(advance_tau(3, Period::Operating, Period::Operating, 0).unwrap(), 2);
        assert!(advance_tau(0, Period::Operating, Period::Operating, 0).is_err());
    }

    #[test]
    fn battery_dynamics_arithmetic() {
        assert!((apply_battery_dynamics(100.0, 120.0, 1.0 / 6.0) - 120.0).abs() < 1e-12);
        assert!((apply_battery_dynamics(100.0, -120.0, 1.0 / 6.0) - 80.0).abs() < 1e-12);
        assert_eq!(apply_battery_dynamics(87.3, 0.0, 0.4), 87.3);
    }

    #[test]
    fn charging_termination_is_countdown_driven() {
        let env = Env::new(test_scenario(), flat_prices(64, 0.02));
        for tau in 0..=9u32 {
            let p = env.termination_prob(&state(100.0, Period::Charging, tau, 0), HazardMode::Exact);
            assert_eq!(p, if tau == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn operating_termination_follows_the_hazard() {
        let env = Env::new(test_scenario(), flat_prices(64, 0.02));
        // Elapsed = t_d - tau = 4 under the uniform {3,4,5} law.
        let p = env.termination_prob(&state(100.0, Period::Operating, 5, 0), HazardMode::Exact);
        assert!((p - 0.5).abs() < 1e-12);
        let p = env.termination_prob(&state(100.0, Period::Operating, 4, 0), HazardMode::ProductForm);
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn feasible_actions_clip_near_the_capacity_edge() {
        let grid = ActionGrid::symmetric(120.0, 120.0, 5).with_clip_endpoints(true);
        let feas = grid.feasible(235.0, 0.0, 240.0, 1.0 / 6.0);
        let powers: Vec<f64> = feas.iter().map(|a| a.power_kw).collect();
        assert_eq!(powers, vec![-120.0, -60.0, 0.0, 30.0]);
        assert_eq!(feas[3].slot, grid.clip_hi_slot().unwrap());

        // Without clipping the edge level disappears.
        let plain = ActionGrid::symmetric(120.0, 120.0, 5);
        let powers: Vec<f64> = plain
            .feasible(235.0, 0.0, 240.0, 1.0 / 6.0)
            .iter()
            .map(|a| a.power_kw)
            .collect();
        assert_eq!(powers, vec![-120.0, -60.0, 0.0]);
    }

    #[test]
    fn feasible_actions_interior_and_floor() {
        let grid = ActionGrid::from_levels(vec![-120.0, 0.0, 120.0]).with_clip_endpoints(false);
        let powers: Vec<f64> = grid
            .feasible(120.0, 0.0, 240.0, 1.0 / 6.0)
            .iter()
            .map(|a| a.power_kw)
            .collect();
        assert_eq!(powers, vec![-120.0, 0.0, 120.0]);
        let powers: Vec<f64> = grid
            .feasible(0.0, 0.0, 240.0, 1.0 / 6.0)
            .iter()
            .map(|a| a.power_kw)
            .collect();
        assert_eq!(powers, vec![0.0, 120.0]);
    }

    #[test]
    fn feasible_options_window() {
        let grid = OptionGrid::stepped(0.0, 240.0, 20.0);
        let got: Vec<f64> = grid
            .feasible(100.0, 3, 120.0, 120.0, 1.0 / 6.0, 0.0, 240.0)
            .iter()
            .map(|o| o.target_kwh)
            .collect();
        assert_eq!(got, vec![40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0]);

        // Degenerate zero-time window collapses to the current level.
        let got: Vec<f64> = grid
            .feasible(0.0, 0, 120.0, 120.0, 1.0 / 6.0, 0.0, 240.0)
            .iter()
            .map(|o| o.target_kwh)
            .collect();
        assert_eq!(got, vec![0.0]);

        // A wide window covers the whole grid.
        let got = grid.feasible(200.0, 12, 120.0, 120.0, 1.0 / 6.0, 0.0, 240.0);
        assert_eq!(got.len(), grid.n_slots());
    }

    #[test]
    fn reset_starts_charging_with_configured_soc_and_window() {
        let mut env = Env::new(test_scenario(), flat_prices(64, 0.02));
        let s = env.reset(7, 0).unwrap();
        assert_eq!(s.period, Period::Charging);
        assert_eq!(s.period_index, 0);
        assert_eq!(s.soc, 240.0);
        assert_eq!(s.price_window.len(), 5);
        // First charging step sits at countdown t_d - trip length.
        assert_eq!(s.steps_to_departure, 9 - s.step_index);
        assert!((3..=5).contains(&s.step_index));
    }

    #[test]
    fn reset_countdown_arithmetic_with_point_trip() {
        let mut sc = test_scenario();
        for p in &mut sc.schedule.periods {
            p.travel = TravelPmf::point(4);
        }
        let mut env = Env::new(sc, flat_prices(64, 0.02));
        let s = env.reset(1, 0).unwrap();
        assert_eq!(s.steps_to_departure, 5);
        assert_eq!(s.step_index, 4);
    }

    #[test]
    fn charging_step_reward_is_negated_cost() {
        let mut sc = test_scenario();
        for p in &mut sc.schedule.periods {
            p.travel = TravelPmf::point(4);
        }
        sc.start_socs = vec![100.0];
        let mut env = Env::new(sc, flat_prices(64, 0.03921));
        env.reset(1, 0).unwrap();
        let a = ActionLevel {
            slot: 4,
            power_kw: 120.0,
        };
        let out = env.step(Some(a)).unwrap();
        assert!((out.reward - (-0.7842)).abs() < 1e-12);
        assert!((out.state.soc - 120.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_action_is_rejected() {
        let mut env = Env::new(test_scenario(), flat_prices(64, 0.02));
        env.reset(1, 0).unwrap();
        // Fully charged: +120 kW would overflow the battery.
        let err = env
            .step(Some(ActionLevel {
                slot: 4,
                power_kw: 120.0,
            }))
            .unwrap_err();
        assert!(err.to_string().contains("infeasible"));
    }

    #[test]
    fn operating_steps_reward_zero_and_terminal_pays_penalty() {
        let mut sc = test_scenario();
        sc.discharge = DischargeProfile::Fixed(-120.0);
        sc.start_socs = vec![30.0];
        for p in &mut sc.schedule.periods {
            p.travel = TravelPmf::point(5);
        }
        let mut env = Env::new(sc, flat_prices(64, 0.02));
        env.reset(3, 0).unwrap();
        // Hold at 0 kW through the charging period (countdown 4..0 = 5 steps).
        let mut out = None;
        for _ in 0..5 {
            let zero = env
                .feasible_actions(env.state().unwrap())
                .into_iter()
                .find(|a| a.power_kw == 0.0)
                .unwrap();
            out = Some(env.step(Some(zero)).unwrap());
            assert_eq!(out.as_ref().unwrap().reward, 0.0);
        }
        assert_eq!(out.unwrap().boundary, Boundary::OperatingStarted);
        // 30 kWh at -120 kW and 10-minute steps: -20 kWh per step, so the
        // second operating step crosses the floor.
        let out = env.step(None).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminal);
        let out = env.step(None).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, -50.0);
        assert!(out.state.soc < 0.0);
        assert!(env.is_done());
        assert!(env.step(None).is_err());
    }

    #[test]
    fn point_mass_discharge_profile_is_respected() {
        let mut sc = test_scenario();
        sc.discharge = DischargeProfile::Fixed(-30.0);
        for p in &mut sc.schedule.periods {
            p.travel = TravelPmf::point(4);
        }
        let mut env = Env::new(sc, flat_prices(64, 0.02));
        env.reset(5, 0).unwrap();
        // Ride out charging, then check the first operating draw.
        while env.state().unwrap().period == Period::Charging {
            let zero = env
                .feasible_actions(env.state().unwrap())
                .into_iter()
                .find(|a| a.power_kw == 0.0)
                .unwrap();
            env.step(Some(zero)).unwrap();
        }
        let out = env.step(None).unwrap();
        assert_eq!(out.power_kw, -30.0);
    }

    #[test]
    fn full_episode_counts_periods_and_honors_the_timetable() {
        let mut sc = test_scenario();
        sc.discharge = DischargeProfile::Fixed(-30.0);
        let k = sc.num_periods();
        let t_d = 9u32;
        let mut env = Env::new(sc, flat_prices(80, 0.02));
        env.reset(11, 0).unwrap();
        let mut charging_periods = 1; // reset lands in charging period 0
        let mut departure_steps = Vec::new();
        let mut trip_steps = 0u32;
        loop {
            let st = env.state().unwrap().clone();
            let out = match st.period {
                Period::Charging => {
                    let zero = env
                        .feasible_actions(&st)
                        .into_iter()
                        .find(|a| a.power_kw == 0.0)
                        .unwrap();
                    env.step(Some(zero)).unwrap()
                }
                Period::Operating => env.step(None).unwrap(),
            };
            assert!(!out.terminal, "holding at 0 kW with light discharge survives");
            match out.boundary {
                Boundary::OperatingStarted => {
                    departure_steps.push(out.state.step_index);
                    trip_steps = 0;
                }
                Boundary::ChargingStarted => {
                    // The realized trip length plus the countdown at arrival
                    // recovers the inter-departure gap: T^o + T^c = T^d.
                    assert_eq!(trip_steps + out.state.steps_to_departure, t_d);
                    if !out.day_complete {
                        charging_periods += 1;
                    }
                }
                Boundary::Within => {}
            }
            if out.state.period == Period::Operating {
                trip_steps += 1;
            }
            if out.day_complete {
                break;
            }
        }
        // K operating periods: the pre-reset first trip plus one per departure.
        assert_eq!(departure_steps.len() + 1, k);
        assert_eq!(charging_periods, k - 1);
        // Departures are exactly one countdown cycle apart.
        assert_eq!(departure_steps[0], t_d + 1);
        for pair in departure_steps.windows(2) {
            assert_eq!(pair[1] - pair[0], t_d + 1);
        }
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut env = Env::new(test_scenario(), flat_prices(80, 0.02));
            env.reset(42, 0).unwrap();
            let mut log = Vec::new();
            loop {
                let st = env.state().unwrap().clone();
                let out = match st.period {
                    Period::Charging => {
                        let feas = env.feasible_actions(&st);
                        env.step(Some(feas[feas.len() - 1])).unwrap()
                    }
                    Period::Operating => env.step(None).unwrap(),
                };
                log.push((out.state.soc, out.power_kw, out.reward, out.state.step_index));
                if out.terminal || out.day_complete {
                    break;
                }
            }
            log
        };
        assert_eq!(run(), run());
    }
}
