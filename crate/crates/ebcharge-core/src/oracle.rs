//! Exact finite-horizon dynamic programming on miniature instances.
//!
//! Instances are small enough to enumerate: a coarse battery grid closed
//! under the action and discharge energy steps, fixed per-step prices, and
//! finite-support period lengths. Two independent solvers run on the same
//! dynamics: backward induction on the per-step problem (the flat optimum)
//! and a two-level decomposition that optimizes an intra-period policy per
//! charging target and then chooses targets (the hierarchical optimum). On
//! admissible instances the two must agree at every start state, which is
//! the property the equivalence check verifies. The same instances also run
//! as live environments so learners can be measured against the exact
//! optimum.

use std::collections::HashMap;

use crate::config::HazardMode;
use crate::env::{ActionGrid, ActionLevel, EnvState, OptionGrid, OptionLevel, Period, Scenario};
use crate::error::{Error, Result};
use crate::prices::PriceSeries;
use crate::schedule::{DischargeProfile, PeriodSpec, Schedule, TravelPmf};

const GRID_EPS: f64 = 1e-9;

/// A fully enumerable miniature of the charging problem.
#[derive(Debug, Clone)]
pub struct TabularInstance {
    pub name: String,
    pub dt_hours: f64,
    pub dt_minutes: u32,
    pub e_min: f64,
    pub e_max: f64,
    pub terminal_penalty: f64,
    /// Coefficient of the squared target-miss penalty in the low level.
    pub target_penalty: f64,
    pub soc_step: f64,
    pub actions: ActionGrid,
    pub options: OptionGrid,
    pub schedule: Schedule,
    pub hazard_mode: HazardMode,
    pub discharge: DischargeProfile,
    pub prices: Vec<f64>,
    /// Battery levels possible at the first arrival.
    pub start_socs: Vec<f64>,
    pub price_window: usize,
}

/// Discrete state identifier: step, battery grid index, period kind,
/// departure countdown, period index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateKey {
    pub t: u16,
    pub soc_idx: u16,
    pub charging: bool,
    pub tau: u16,
    pub k: u16,
}

impl TabularInstance {
    pub fn horizon(&self) -> u32 {
        self.schedule.horizon()
    }

    pub fn num_periods(&self) -> usize {
        self.schedule.num_periods()
    }

    pub fn soc_levels(&self) -> usize {
        ((self.e_max - self.e_min) / self.soc_step).round() as usize + 1
    }

    pub fn soc_of(&self, idx: u16) -> f64 {
        self.e_min + f64::from(idx) * self.soc_step
    }

    pub fn soc_index(&self, soc: f64) -> Result<u16> {
        let raw = (soc - self.e_min) / self.soc_step;
        let idx = raw.round();
        if (raw - idx).abs() > 1e-6 || idx < 0.0 || idx as usize >= self.soc_levels() {
            return Err(Error::Contract(format!(
                "battery level {soc} kWh is not on the {} kWh grid",
                self.soc_step
            )));
        }
        Ok(idx as u16)
    }

    /// Validates that the dynamics stay on the battery grid and the price
    /// path covers the horizon.
    pub fn validate(&self) -> Result<()> {
        if self.soc_levels() > 64 {
            return Err(Error::Config(
                "instance battery grid too fine for exhaustive enumeration".into(),
            ));
        }
        let check_step = |power: f64, what: &str| -> Result<()> {
            let delta = power * self.dt_hours / self.soc_step;
            if (delta - delta.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "{what} {power} kW moves {} kWh per step, off the {} kWh grid",
                    power * self.dt_hours,
                    self.soc_step
                )));
            }
            Ok(())
        };
        for &a in self.actions.levels() {
            check_step(a, "action level")?;
        }
        for t in 0..self.horizon() {
            match self.discharge.enumerate(t) {
                Some(outcomes) => {
                    for (p, _) in outcomes {
                        check_step(p, "discharge outcome")?;
                    }
                }
                None => {
                    return Err(Error::Config(
                        "instance discharge profile must have finite support".into(),
                    ))
                }
            }
        }
        for &s in &self.start_socs {
            self.soc_index(s)?;
        }
        if (self.prices.len() as u32) < self.horizon() {
            return Err(Error::Config(format!(
                "instance prices cover {} steps, horizon needs {}",
                self.prices.len(),
                self.horizon()
            )));
        }
        for (k, p) in self.schedule.periods.iter().enumerate() {
            if p.travel.max_support() >= p.t_d {
                return Err(Error::Config(format!(
                    "period {k}: travel-time support must stay below the departure gap"
                )));
            }
            if p.travel.prob(0) > 0.0 {
                return Err(Error::Config(format!("period {k}: zero-length trips")));
            }
        }
        Ok(())
    }

    /// States at the bus's first arrival, with their probabilities.
    pub fn start_states(&self) -> Vec<(StateKey, f64)> {
        let t_d = self.schedule.periods[0].t_d;
        let soc_p = 1.0 / self.start_socs.len() as f64;
        let mut out = Vec::new();
        for (trip, trip_p) in self.schedule.periods[0].travel.support() {
            for &soc in &self.start_socs {
                let key = StateKey {
                    t: trip as u16,
                    soc_idx: self.soc_index(soc).expect("validated start levels"),
                    charging: true,
                    tau: (t_d - trip) as u16,
                    k: 0,
                };
                out.push((key, trip_p * soc_p));
            }
        }
        out
    }

    /// Reconstructs the full observable state for a key (price window
    /// included), so learned policies can be queried on tabular states.
    pub fn state_of(&self, key: StateKey) -> EnvState {
        let t = key.t as usize;
        let mut window = Vec::with_capacity(self.price_window + 1);
        for i in 0..=self.price_window {
            let back = self.price_window - i;
            window.push(self.prices[t.saturating_sub(back)]);
        }
        EnvState {
            soc: self.soc_of(key.soc_idx),
            period: if key.charging {
                Period::Charging
            } else {
                Period::Operating
            },
            steps_to_departure: u32::from(key.tau),
            price_window: window,
            period_index: u32::from(key.k),
            step_index: u32::from(key.t),
        }
    }

    /// Live-environment view of the instance.
    pub fn to_scenario(&self) -> Scenario {
        Scenario {
            dt_hours: self.dt_hours,
            e_min: self.e_min,
            e_max: self.e_max,
            c_max: self.actions.levels().iter().cloned().fold(0.0, f64::max),
            d_max: -self.actions.levels().iter().cloned().fold(0.0, f64::min),
            terminal_penalty: self.terminal_penalty,
            start_socs: self.start_socs.clone(),
            price_window: self.price_window,
            actions: self.actions.clone(),
            options: self.options.clone(),
            schedule: self.schedule.clone(),
            hazard_mode: self.hazard_mode,
            discharge: self.discharge.clone(),
            rush_windows: Vec::new(),
            rush_discharge_multiplier: 1.0,
        }
    }

    pub fn to_price_series(&self) -> PriceSeries {
        PriceSeries::from_steps(self.prices.clone(), (60 / self.dt_minutes) as usize)
    }

    fn feasible_actions(&self, soc: f64) -> Vec<ActionLevel> {
        self.actions.feasible(soc, self.e_min, self.e_max, self.dt_hours)
    }

    fn price(&self, t: u16) -> f64 {
        self.prices[t as usize]
    }
}

/// Flat optimum: per-step backward induction over the full state space.
pub struct FlatSolution {
    values: HashMap<StateKey, f64>,
    policy: HashMap<StateKey, usize>,
    q_values: HashMap<StateKey, Vec<(usize, f64)>>,
}

impl FlatSolution {
    pub fn value(&self, key: StateKey) -> Option<f64> {
        self.values.get(&key).copied()
    }

    pub fn action(&self, key: StateKey) -> Option<usize> {
        self.policy.get(&key).copied()
    }

    pub fn q_values(&self, key: StateKey) -> Option<&[(usize, f64)]> {
        self.q_values.get(&key).map(|v| v.as_slice())
    }

    pub fn charging_states(&self) -> impl Iterator<Item = StateKey> + '_ {
        self.q_values.keys().copied()
    }
}

struct FlatDp<'a> {
    inst: &'a TabularInstance,
    values: HashMap<StateKey, f64>,
    policy: HashMap<StateKey, usize>,
    q_values: HashMap<StateKey, Vec<(usize, f64)>>,
}

impl<'a> FlatDp<'a> {
    fn value(&mut self, key: StateKey) -> f64 {
        if let Some(&v) = self.values.get(&key) {
            return v;
        }
        let v = if key.charging {
            self.charging_value(key)
        } else {
            self.operating_value(key)
        };
        self.values.insert(key, v);
        v
    }

    fn charging_value(&mut self, key: StateKey) -> f64 {
        let inst = self.inst;
        let soc = inst.soc_of(key.soc_idx);
        let mut qs = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut best_slot = 0;
        for a in inst.feasible_actions(soc) {
            let reward = -a.power_kw * inst.dt_hours * inst.price(key.t);
            let next_soc = soc + a.power_kw * inst.dt_hours;
            let next_idx = inst.soc_index(next_soc).expect("grid closure validated");
            let next = if key.tau == 0 {
                // Departure for the next operating period.
                let nk = key.k + 1;
                debug_assert!((nk as usize) < inst.num_periods());
                StateKey {
                    t: key.t + 1,
                    soc_idx: next_idx,
                    charging: false,
                    tau: inst.schedule.periods[nk as usize].t_d as u16,
                    k: nk,
                }
            } else {
                StateKey {
                    t: key.t + 1,
                    soc_idx: next_idx,
                    charging: true,
                    tau: key.tau - 1,
                    k: key.k,
                }
            };
            let q = reward + self.value(next);
            if q > best {
                best = q;
                best_slot = a.slot;
            }
            qs.push((a.slot, q));
        }
        self.policy.insert(key, best_slot);
        self.q_values.insert(key, qs);
        best
    }

    fn operating_value(&mut self, key: StateKey) -> f64 {
        let inst = self.inst;
        let soc = inst.soc_of(key.soc_idx);
        let period = &inst.schedule.periods[key.k as usize];
        let last_period = key.k as usize == inst.num_periods() - 1;
        let outcomes = inst
            .discharge
            .enumerate(u32::from(key.t))
            .expect("finite discharge support validated");
        let mut value = 0.0;
        for (power, prob) in outcomes {
            let next_soc = soc + power * inst.dt_hours;
            if next_soc < inst.e_min - 1e-12 {
                value += prob * (-inst.terminal_penalty);
                continue;
            }
            let next_idx = inst.soc_index(next_soc).expect("grid closure validated");
            let tau = key.tau - 1;
            let elapsed = period.t_d - u32::from(tau);
            let hazard = period.travel.hazard(elapsed, inst.hazard_mode);
            let mut v = 0.0;
            if hazard > 0.0 {
                let arrival = if last_period {
                    0.0
                } else {
                    self.value(StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: true,
                        tau,
                        k: key.k,
                    })
                };
                v += hazard * arrival;
            }
            if hazard < 1.0 {
                v += (1.0 - hazard)
                    * self.value(StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: false,
                        tau,
                        k: key.k,
                    });
            }
            value += prob * v;
        }
        value
    }
}

/// Backward induction on the per-step problem from every start state.
pub fn dp_flat_optimal(inst: &TabularInstance) -> Result<FlatSolution> {
    inst.validate()?;
    let mut dp = FlatDp {
        inst,
        values: HashMap::new(),
        policy: HashMap::new(),
        q_values: HashMap::new(),
    };
    for (key, _) in inst.start_states() {
        dp.value(key);
    }
    Ok(FlatSolution {
        values: dp.values,
        policy: dp.policy,
        q_values: dp.q_values,
    })
}

/// Hierarchical optimum: an optimal intra-period policy per charging target,
/// composed through target choices at charging-period starts.
pub struct HierSolution {
    high_values: HashMap<StateKey, f64>,
    option_policy: HashMap<StateKey, usize>,
    /// Expected in-transition reward per (charging start, target slot).
    option_rewards: HashMap<(StateKey, usize), f64>,
    /// Battery level the optimal intra-period policy reaches per target.
    end_soc: HashMap<(StateKey, usize), f64>,
    /// Optimal intra-period values keyed by (step, soc index, countdown,
    /// target slot).
    low_values: HashMap<(u16, u16, u16, usize), f64>,
}

impl HierSolution {
    pub fn value(&self, key: StateKey) -> Option<f64> {
        self.high_values.get(&key).copied()
    }

    pub fn option(&self, key: StateKey) -> Option<usize> {
        self.option_policy.get(&key).copied()
    }

    pub fn option_reward(&self, key: StateKey, slot: usize) -> Option<f64> {
        self.option_rewards.get(&(key, slot)).copied()
    }

    pub fn end_soc(&self, key: StateKey, slot: usize) -> Option<f64> {
        self.end_soc.get(&(key, slot)).copied()
    }

    pub fn low_value(&self, t: u16, soc_idx: u16, tau: u16, slot: usize) -> Option<f64> {
        self.low_values.get(&(t, soc_idx, tau, slot)).copied()
    }

    pub fn charging_starts(&self) -> impl Iterator<Item = StateKey> + '_ {
        self.high_values.keys().copied()
    }
}

struct HierDp<'a> {
    inst: &'a TabularInstance,
    kappa: f64,
    high: HashMap<StateKey, f64>,
    option_policy: HashMap<StateKey, usize>,
    option_rewards: HashMap<(StateKey, usize), f64>,
    end_soc: HashMap<(StateKey, usize), f64>,
    /// value and chosen action slot of the intra-period problem
    low: HashMap<(u16, u16, u16, usize), (f64, usize)>,
    /// (reward within transition, bootstrap value) of operating stretches
    op_tail: HashMap<StateKey, (f64, f64)>,
}

impl<'a> HierDp<'a> {
    /// Optimal intra-period value: interior charging rewards plus the
    /// squared-miss penalty at the period's end.
    fn low_value(&mut self, t: u16, soc_idx: u16, tau: u16, option: OptionLevel) -> (f64, usize) {
        if let Some(&v) = self.low.get(&(t, soc_idx, tau, option.slot)) {
            return v;
        }
        let inst = self.inst;
        let soc = inst.soc_of(soc_idx);
        let mut best = f64::NEG_INFINITY;
        let mut best_slot = 0;
        for a in inst.feasible_actions(soc) {
            let reward = -a.power_kw * inst.dt_hours * inst.price(t);
            let next_soc = soc + a.power_kw * inst.dt_hours;
            let q = if tau == 0 {
                let miss = option.target_kwh - next_soc;
                reward - self.kappa * miss * miss
            } else {
                let next_idx = inst.soc_index(next_soc).expect("grid closure validated");
                reward + self.low_value(t + 1, next_idx, tau - 1, option).0
            };
            if q > best {
                best = q;
                best_slot = a.slot;
            }
        }
        self.low.insert((t, soc_idx, tau, option.slot), (best, best_slot));
        (best, best_slot)
    }

    /// Replays the optimal intra-period policy deterministically, returning
    /// its plain charging reward (no penalty) and the end-of-period level.
    fn replay_low(&mut self, key: StateKey, option: OptionLevel) -> (f64, f64) {
        let inst = self.inst;
        let mut t = key.t;
        let mut soc_idx = key.soc_idx;
        let mut reward = 0.0;
        let mut tau = key.tau;
        loop {
            let slot = self.low_value(t, soc_idx, tau, option).1;
            let soc = inst.soc_of(soc_idx);
            let action = inst
                .feasible_actions(soc)
                .into_iter()
                .find(|a| a.slot == slot)
                .expect("intra-period policy picks feasible actions");
            reward += -action.power_kw * inst.dt_hours * inst.price(t);
            let next_soc = soc + action.power_kw * inst.dt_hours;
            if tau == 0 {
                return (reward, next_soc);
            }
            soc_idx = inst.soc_index(next_soc).expect("grid closure validated");
            t += 1;
            tau -= 1;
        }
    }

    /// Expected (in-transition reward, bootstrap into the next charging
    /// start) of an operating stretch.
    fn operating_tail(&mut self, key: StateKey) -> (f64, f64) {
        if let Some(&v) = self.op_tail.get(&key) {
            return v;
        }
        let inst = self.inst;
        let soc = inst.soc_of(key.soc_idx);
        let period = &inst.schedule.periods[key.k as usize];
        let last_period = key.k as usize == inst.num_periods() - 1;
        let outcomes = inst
            .discharge
            .enumerate(u32::from(key.t))
            .expect("finite discharge support validated");
        let mut r_part = 0.0;
        let mut v_part = 0.0;
        for (power, prob) in outcomes {
            let next_soc = soc + power * inst.dt_hours;
            if next_soc < inst.e_min - 1e-12 {
                r_part += prob * (-inst.terminal_penalty);
                continue;
            }
            let next_idx = inst.soc_index(next_soc).expect("grid closure validated");
            let tau = key.tau - 1;
            let elapsed = period.t_d - u32::from(tau);
            let hazard = period.travel.hazard(elapsed, inst.hazard_mode);
            if hazard > 0.0 && !last_period {
                let next_start = StateKey {
                    t: key.t + 1,
                    soc_idx: next_idx,
                    charging: true,
                    tau,
                    k: key.k,
                };
                v_part += prob * hazard * self.high_value(next_start);
            }
            if hazard < 1.0 {
                let (r, v) = self.operating_tail(StateKey {
                    t: key.t + 1,
                    soc_idx: next_idx,
                    charging: false,
                    tau,
                    k: key.k,
                });
                r_part += prob * (1.0 - hazard) * r;
                v_part += prob * (1.0 - hazard) * v;
            }
        }
        self.op_tail.insert(key, (r_part, v_part));
        (r_part, v_part)
    }

    fn high_value(&mut self, key: StateKey) -> f64 {
        if let Some(&v) = self.high.get(&key) {
            return v;
        }
        debug_assert!(key.charging);
        let inst = self.inst;
        let mut best = f64::NEG_INFINITY;
        let mut best_slot = 0;
        for option in inst.options.all() {
            let (charging_reward, end_soc) = self.replay_low(key, option);
            // Departure state after the zero-countdown step.
            let nk = key.k + 1;
            debug_assert!((nk as usize) < inst.num_periods());
            let dep = StateKey {
                t: key.t + key.tau + 1,
                soc_idx: inst.soc_index(end_soc).expect("grid closure validated"),
                charging: false,
                tau: inst.schedule.periods[nk as usize].t_d as u16,
                k: nk,
            };
            let (op_reward, bootstrap) = self.operating_tail(dep);
            let in_transition = charging_reward + op_reward;
            self.option_rewards.insert((key, option.slot), in_transition);
            self.end_soc.insert((key, option.slot), end_soc);
            let q = in_transition + bootstrap;
            if q > best {
                best = q;
                best_slot = option.slot;
            }
        }
        self.high.insert(key, best);
        self.option_policy.insert(key, best_slot);
        best
    }
}

/// Solves the two-level decomposition exactly. `kappa` overrides the
/// instance's miss-penalty coefficient (the equivalence check passes a
/// dominating value).
pub fn dp_hier_optimal(inst: &TabularInstance, kappa: Option<f64>) -> Result<HierSolution> {
    inst.validate()?;
    let mut dp = HierDp {
        inst,
        kappa: kappa.unwrap_or(inst.target_penalty),
        high: HashMap::new(),
        option_policy: HashMap::new(),
        option_rewards: HashMap::new(),
        end_soc: HashMap::new(),
        low: HashMap::new(),
        op_tail: HashMap::new(),
    };
    for (key, _) in inst.start_states() {
        dp.high_value(key);
    }
    Ok(HierSolution {
        high_values: dp.high,
        option_policy: dp.option_policy,
        option_rewards: dp.option_rewards,
        end_soc: dp.end_soc,
        low_values: dp.low.into_iter().map(|(k, v)| (k, v.0)).collect(),
    })
}

/// All states reachable under any policy, plus every battery level seen at a
/// departure (the end-of-period levels the option grid must cover).
pub fn reachable_end_levels(inst: &TabularInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<StateKey> = inst.start_states().iter().map(|(k, _)| *k).collect();
    let mut ends = std::collections::HashSet::new();
    while let Some(key) = stack.pop() {
        if !seen.insert(key) {
            continue;
        }
        let soc = inst.soc_of(key.soc_idx);
        if key.charging {
            for a in inst.feasible_actions(soc) {
                let next_soc = soc + a.power_kw * inst.dt_hours;
                let next_idx = inst.soc_index(next_soc)?;
                if key.tau == 0 {
                    let nk = key.k + 1;
                    if (nk as usize) < inst.num_periods() {
                        ends.insert(next_idx);
                        stack.push(StateKey {
                            t: key.t + 1,
                            soc_idx: next_idx,
                            charging: false,
                            tau: inst.schedule.periods[nk as usize].t_d as u16,
                            k: nk,
                        });
                    }
                } else {
                    stack.push(StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: true,
                        tau: key.tau - 1,
                        k: key.k,
                    });
                }
            }
        } else {
            let period = &inst.schedule.periods[key.k as usize];
            let last_period = key.k as usize == inst.num_periods() - 1;
            for (power, _) in inst.discharge.enumerate(u32::from(key.t)).unwrap() {
                let next_soc = soc + power * inst.dt_hours;
                if next_soc < inst.e_min - 1e-12 {
                    continue;
                }
                let next_idx = inst.soc_index(next_soc)?;
                let tau = key.tau - 1;
                let elapsed = period.t_d - u32::from(tau);
                let hazard = period.travel.hazard(elapsed, inst.hazard_mode);
                if hazard > 0.0 && !last_period {
                    stack.push(StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: true,
                        tau,
                        k: key.k,
                    });
                }
                if hazard < 1.0 {
                    stack.push(StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: false,
                        tau,
                        k: key.k,
                    });
                }
            }
        }
    }
    Ok(ends.into_iter().map(|i| inst.soc_of(i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The option grid cannot represent every flat-reachable end-of-period
    /// level, so the comparison's precondition is unmet.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct StartComparison {
    pub key: StateKey,
    pub soc: f64,
    pub flat: f64,
    pub hier: f64,
    pub diff: f64,
}

/// Outcome of the flat-vs-hierarchical equivalence check.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub instance: String,
    pub per_start: Vec<StartComparison>,
    pub max_diff: f64,
    pub verdict: Verdict,
    pub detail: String,
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

/// Runs both solvers and compares their values at every start state. The
/// miss-penalty coefficient is raised to a level where realizing the target
/// dominates any attainable cost difference, unless a value is supplied.
pub fn check_equivalence(
    inst: &TabularInstance,
    kappa: Option<f64>,
) -> Result<EquivalenceReport> {
    inst.validate()?;
    let ends = reachable_end_levels(inst)?;
    let mut missing: Vec<f64> = ends
        .iter()
        .copied()
        .filter(|&e| {
            !inst
                .options
                .targets()
                .iter()
                .any(|&t| (t - e).abs() < GRID_EPS)
        })
        .collect();
    missing.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if !missing.is_empty() {
        return Ok(EquivalenceReport {
            instance: inst.name.clone(),
            per_start: Vec::new(),
            max_diff: f64::NAN,
            verdict: Verdict::Inconclusive,
            detail: format!(
                "option grid cannot represent reachable end-of-period levels {missing:?}"
            ),
        });
    }
    let kappa = kappa.unwrap_or_else(|| dominating_kappa(inst));
    let flat = dp_flat_optimal(inst)?;
    let hier = dp_hier_optimal(inst, Some(kappa))?;
    let mut per_start = Vec::new();
    let mut max_diff: f64 = 0.0;
    for (key, _) in inst.start_states() {
        let f = flat.value(key).expect("flat solves every start");
        let h = hier.value(key).expect("hier solves every start");
        let diff = (f - h).abs();
        max_diff = max_diff.max(diff);
        per_start.push(StartComparison {
            key,
            soc: inst.soc_of(key.soc_idx),
            flat: f,
            hier: h,
            diff,
        });
    }
    let verdict = if max_diff <= EQUIVALENCE_TOLERANCE {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let detail = match verdict {
        Verdict::Pass => format!("max |flat - hier| = {max_diff:.3e}"),
        _ => {
            let worst = per_start
                .iter()
                .max_by(|a, b| a.diff.partial_cmp(&b.diff).unwrap())
                .unwrap();
            format!(
                "max |flat - hier| = {max_diff:.3e} at t={} soc={} tau={} k={}",
                worst.key.t, worst.soc, worst.key.tau, worst.key.k
            )
        }
    };
    Ok(EquivalenceReport {
        instance: inst.name.clone(),
        per_start,
        max_diff,
        verdict,
        detail,
    })
}

/// Miss-penalty coefficient large enough that a one-grid-step miss outweighs
/// any cost advantage attainable within an episode.
pub fn dominating_kappa(inst: &TabularInstance) -> f64 {
    let max_price = inst.prices.iter().cloned().fold(0.0, f64::max);
    let max_power = inst
        .actions
        .levels()
        .iter()
        .map(|a| a.abs())
        .fold(0.0, f64::max);
    let max_step_cost = max_power * inst.dt_hours * max_price;
    1000.0 * (max_step_cost * inst.horizon() as f64 + inst.terminal_penalty)
        / (inst.soc_step * inst.soc_step)
}

/// Exact value of an arbitrary deterministic hierarchical policy, evaluated
/// at every start state. `prescribe` picks a target from the reachable set
/// at each charging-period start; `act` picks a feasible action each
/// charging step given the active target.
pub fn evaluate_hier_policy<P, A>(
    inst: &TabularInstance,
    mut prescribe: P,
    mut act: A,
) -> Result<Vec<StartComparison>>
where
    P: FnMut(&EnvState, &[OptionLevel]) -> OptionLevel,
    A: FnMut(&EnvState, f64, &[ActionLevel]) -> ActionLevel,
{
    inst.validate()?;
    let flat = dp_flat_optimal(inst)?;
    let mut memo: HashMap<StateKey, f64> = HashMap::new();
    let mut out = Vec::new();
    for (key, _) in inst.start_states() {
        let v = policy_charging_value(inst, key, &mut prescribe, &mut act, &mut memo)?;
        out.push(StartComparison {
            key,
            soc: inst.soc_of(key.soc_idx),
            flat: flat.value(key).unwrap(),
            hier: v,
            diff: (flat.value(key).unwrap() - v).abs(),
        });
    }
    Ok(out)
}

fn policy_charging_value<P, A>(
    inst: &TabularInstance,
    key: StateKey,
    prescribe: &mut P,
    act: &mut A,
    memo: &mut HashMap<StateKey, f64>,
) -> Result<f64>
where
    P: FnMut(&EnvState, &[OptionLevel]) -> OptionLevel,
    A: FnMut(&EnvState, f64, &[ActionLevel]) -> ActionLevel,
{
    if let Some(&v) = memo.get(&key) {
        return Ok(v);
    }
    let state = inst.state_of(key);
    let feasible_options = inst.options.feasible(
        state.soc,
        state.steps_to_departure,
        -inst.actions.levels().iter().cloned().fold(0.0, f64::min),
        inst.actions.levels().iter().cloned().fold(0.0, f64::max),
        inst.dt_hours,
        inst.e_min,
        inst.e_max,
    );
    let option = prescribe(&state, &feasible_options);
    // Deterministic charging stretch under the policy.
    let mut t = key.t;
    let mut soc = inst.soc_of(key.soc_idx);
    let mut tau = key.tau;
    let mut reward = 0.0;
    loop {
        let cur = inst.state_of(StateKey {
            t,
            soc_idx: inst.soc_index(soc)?,
            charging: true,
            tau,
            k: key.k,
        });
        let feasible = inst.feasible_actions(soc);
        let action = act(&cur, option.target_kwh, &feasible);
        if !feasible
            .iter()
            .any(|a| a.slot == action.slot && (a.power_kw - action.power_kw).abs() < 1e-9)
        {
            return Err(Error::Contract(
                "policy picked an action outside the feasible set".into(),
            ));
        }
        reward += -action.power_kw * inst.dt_hours * inst.price(t);
        soc += action.power_kw * inst.dt_hours;
        if tau == 0 {
            break;
        }
        t += 1;
        tau -= 1;
    }
    let nk = key.k + 1;
    let dep = StateKey {
        t: t + 1,
        soc_idx: inst.soc_index(soc)?,
        charging: false,
        tau: inst.schedule.periods[nk as usize].t_d as u16,
        k: nk,
    };
    let v = reward + policy_operating_value(inst, dep, prescribe, act, memo)?;
    memo.insert(key, v);
    Ok(v)
}

fn policy_operating_value<P, A>(
    inst: &TabularInstance,
    key: StateKey,
    prescribe: &mut P,
    act: &mut A,
    memo: &mut HashMap<StateKey, f64>,
) -> Result<f64>
where
    P: FnMut(&EnvState, &[OptionLevel]) -> OptionLevel,
    A: FnMut(&EnvState, f64, &[ActionLevel]) -> ActionLevel,
{
    let soc = inst.soc_of(key.soc_idx);
    let period = &inst.schedule.periods[key.k as usize];
    let last_period = key.k as usize == inst.num_periods() - 1;
    let outcomes = inst.discharge.enumerate(u32::from(key.t)).unwrap();
    let mut value = 0.0;
    for (power, prob) in outcomes {
        let next_soc = soc + power * inst.dt_hours;
        if next_soc < inst.e_min - 1e-12 {
            value += prob * (-inst.terminal_penalty);
            continue;
        }
        let next_idx = inst.soc_index(next_soc)?;
        let tau = key.tau - 1;
        let elapsed = period.t_d - u32::from(tau);
        let hazard = period.travel.hazard(elapsed, inst.hazard_mode);
        let mut v = 0.0;
        if hazard > 0.0 && !last_period {
            v += hazard
                * policy_charging_value(
                    inst,
                    StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: true,
                        tau,
                        k: key.k,
                    },
                    prescribe,
                    act,
                    memo,
                )?;
        }
        if hazard < 1.0 {
            v += (1.0 - hazard)
                * policy_operating_value(
                    inst,
                    StateKey {
                        t: key.t + 1,
                        soc_idx: next_idx,
                        charging: false,
                        tau,
                        k: key.k,
                    },
                    prescribe,
                    act,
                    memo,
                )?;
        }
        value += prob * v;
    }
    Ok(value)
}

/// Parses an instance description file: `key = value` lines, `#` comments.
pub fn parse_instance(text: &str) -> Result<TabularInstance> {
    let mut pairs: HashMap<String, String> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Ingestion(format!("instance line {}: expected `key = value`", lineno + 1))
        })?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        pairs
            .get(k)
            .ok_or_else(|| Error::Ingestion(format!("instance missing key `{k}`")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Ingestion(format!("instance key `{k}` is not a number")))
    };
    let parse_u = |k: &str| -> Result<u32> {
        get(k)?
            .parse()
            .map_err(|_| Error::Ingestion(format!("instance key `{k}` is not an integer")))
    };
    let parse_list = |k: &str| -> Result<Vec<f64>> {
        get(k)?
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Ingestion(format!("instance key `{k}`: bad number `{p}`")))
            })
            .collect()
    };

    let dt_minutes = parse_u("dt_minutes")?;
    let num_periods = parse_u("periods")? as usize;
    let t_d = parse_u("t_d")?;
    let mut periods = Vec::with_capacity(num_periods);
    for k in 0..num_periods {
        let spec = get(&format!("travel_{k}"))?;
        let pairs: Result<Vec<(u32, f64)>> = spec
            .split(',')
            .map(|p| {
                let (steps, w) = p.trim().split_once(':').ok_or_else(|| {
                    Error::Ingestion(format!("travel_{k}: expected steps:weight, got `{p}`"))
                })?;
                Ok((
                    steps.trim().parse().map_err(|_| {
                        Error::Ingestion(format!("travel_{k}: bad step count `{steps}`"))
                    })?,
                    w.trim().parse().map_err(|_| {
                        Error::Ingestion(format!("travel_{k}: bad weight `{w}`"))
                    })?,
                ))
            })
            .collect();
        periods.push(PeriodSpec {
            t_d,
            travel: TravelPmf::from_weights(&pairs?)?,
        });
    }
    let discharge_spec = get("discharge")?;
    let discharge = parse_discharge(discharge_spec)?;
    let e_min = parse_f("e_min_kwh")?;
    let e_max = parse_f("e_max_kwh")?;
    let options = if pairs.contains_key("option_targets_kwh") {
        OptionGrid::from_targets(parse_list("option_targets_kwh")?)
    } else {
        OptionGrid::stepped(e_min, e_max, parse_f("option_step_kwh")?)
    };
    let inst = TabularInstance {
        name: pairs
            .get("name")
            .cloned()
            .unwrap_or_else(|| "unnamed".to_string()),
        dt_hours: f64::from(dt_minutes) / 60.0,
        dt_minutes,
        e_min,
        e_max,
        terminal_penalty: parse_f("c_end")?,
        target_penalty: parse_f("kappa")?,
        soc_step: parse_f("soc_step_kwh")?,
        actions: ActionGrid::from_levels(parse_list("action_levels_kw")?),
        options,
        schedule: Schedule {
            periods,
            dt_minutes,
            start_clock_min: 0,
        },
        hazard_mode: HazardMode::Exact,
        discharge,
        prices: parse_list("prices")?,
        start_socs: parse_list("start_socs_kwh")?,
        price_window: parse_u("w_p")? as usize,
    };
    inst.validate()?;
    Ok(inst)
}

fn parse_discharge(spec: &str) -> Result<DischargeProfile> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| Error::Ingestion(format!("discharge: expected kind:args, got `{spec}`")))?;
    match kind.trim() {
        "fixed" => Ok(DischargeProfile::Fixed(rest.trim().parse().map_err(
            |_| Error::Ingestion(format!("discharge: bad power `{rest}`")),
        )?)),
        "choice" => {
            let outcomes: Result<Vec<(f64, f64)>> = rest
                .split(',')
                .map(|p| {
                    let mut it = p.trim().splitn(2, ':');
                    let power: f64 = it
                        .next()
                        .unwrap()
                        .trim()
                        .parse()
                        .map_err(|_| Error::Ingestion(format!("discharge: bad power in `{p}`")))?;
                    let weight: f64 = it
                        .next()
                        .ok_or_else(|| {
                            Error::Ingestion(format!("discharge: missing weight in `{p}`"))
                        })?
                        .trim()
                        .parse()
                        .map_err(|_| Error::Ingestion(format!("discharge: bad weight in `{p}`")))?;
                    Ok((power, weight))
                })
                .collect();
            Ok(DischargeProfile::Choice(outcomes?))
        }
        "path" => {
            let path: Result<Vec<f64>> = rest
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Ingestion(format!("discharge: bad power `{p}`")))
                })
                .collect();
            Ok(DischargeProfile::PerStep(path?))
        }
        other => Err(Error::Ingestion(format!(
            "discharge kind `{other}` is not fixed, choice, or path"
        ))),
    }
}

pub fn load_instance(path: &std::path::Path) -> Result<TabularInstance> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    parse_instance(&text)
}

/// Report file: one line per start state plus the verdict.
pub fn report_lines(report: &EquivalenceReport) -> String {
    let mut out = String::from("t,soc,tau,k,flat_value,hier_value,abs_diff\n");
    for c in &report.per_start {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.key.t, c.soc, c.key.tau, c.key.k, c.flat, c.hier, c.diff
        ));
    }
    let verdict = match report.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Inconclusive => "INCONCLUSIVE",
    };
    out.push_str(&format!("# verdict: {verdict} ({})\n", report.detail));
    out
}
