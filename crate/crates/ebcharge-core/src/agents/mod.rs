//! Policies, reward construction, and training loops.

mod eval;
mod trainer;

pub use eval::{evaluate, EvalSummary, PolicyView};
pub use trainer::{
    bounds_for, day_base_step, eligible_days, NetPair, PolicyBundle, TrainOutput, Trainer,
    TrainingLogRow, TRAIN_LOG_HEADER,
};

use rand::Rng;

use crate::env::{ActionGrid, ActionLevel};
use crate::error::{Error, Result};
use crate::qnet::argmax_over;

/// Agent variants. The names double as the CLI `--mode` vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Two-level learner with hindsight relabeling, counterfactual phase-1
    /// high rewards, option-space restriction, and terminal deletion.
    HddqnHer,
    /// Two-level learner with all of those measures disabled.
    Hddqn,
    /// One flat network on the per-step problem.
    DdqnOriginal,
    /// Low-level network only, always targeting a full battery with a
    /// range-anxiety boundary penalty.
    DdqnLow,
    /// High-level network only; charging periods are executed by the fixed
    /// max-power policy.
    DdqnHigh,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::HddqnHer,
        Mode::Hddqn,
        Mode::DdqnOriginal,
        Mode::DdqnLow,
        Mode::DdqnHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::HddqnHer => "hddqn_her",
            Mode::Hddqn => "hddqn",
            Mode::DdqnOriginal => "ddqn_original",
            Mode::DdqnLow => "ddqn_low",
            Mode::DdqnHigh => "ddqn_high",
        }
    }

    pub fn has_high_net(self) -> bool {
        matches!(self, Mode::HddqnHer | Mode::Hddqn | Mode::DdqnHigh)
    }

    pub fn has_low_net(self) -> bool {
        matches!(self, Mode::HddqnHer | Mode::Hddqn | Mode::DdqnLow | Mode::DdqnOriginal)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "hddqn_her" => Ok(Mode::HddqnHer),
            "hddqn" => Ok(Mode::Hddqn),
            "ddqn_original" => Ok(Mode::DdqnOriginal),
            "ddqn_low" => Ok(Mode::DdqnLow),
            "ddqn_high" => Ok(Mode::DdqnHigh),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`; expected one of hddqn_her, hddqn, ddqn_original, ddqn_low, ddqn_high"
            ))),
        }
    }
}

/// With probability `epsilon` a uniform feasible slot, otherwise the
/// highest-valued feasible slot (lowest slot on ties).
pub fn epsilon_greedy(
    values: &[f64],
    feasible: &[usize],
    epsilon: f64,
    rng: &mut impl Rng,
) -> usize {
    assert!(!feasible.is_empty(), "feasible set must be non-empty");
    if rng.gen::<f64>() < epsilon {
        feasible[rng.gen_range(0..feasible.len())]
    } else {
        argmax_over(values, feasible)
    }
}

/// Negated cost of one charging step.
pub fn low_interior_reward(power_kw: f64, dt_hours: f64, price: f64) -> f64 {
    -power_kw * dt_hours * price
}

/// Negated squared miss of the charging target at the period's end.
pub fn target_miss_penalty(target_kwh: f64, achieved_kwh: f64, coeff: f64) -> f64 {
    let miss = target_kwh - achieved_kwh;
    -coeff * miss * miss
}

/// Negated squared shortfall from a full battery at the period's end.
pub fn range_anxiety_penalty(e_max: f64, achieved_kwh: f64, coeff: f64) -> f64 {
    let gap = e_max - achieved_kwh;
    -coeff * gap * gap
}

/// Running sum of environment rewards over one high-level transition.
pub fn accumulate_high_reward(running: f64, step_reward: f64) -> f64 {
    running + step_reward
}

/// The fixed charging policy: drive the battery toward the target at full
/// tilt. Among the feasible levels it picks the one landing closest to the
/// target (ties to the smallest magnitude), so it holds at 0 kW once within
/// half an energy step and never overshoots by more than one step's
/// resolution.
pub fn pi_q(soc: f64, target_kwh: f64, feasible: &[ActionLevel], dt_hours: f64) -> ActionLevel {
    assert!(!feasible.is_empty());
    *feasible
        .iter()
        .min_by(|a, b| {
            let da = (soc + a.power_kw * dt_hours - target_kwh).abs();
            let db = (soc + b.power_kw * dt_hours - target_kwh).abs();
            da.partial_cmp(&db)
                .unwrap()
                .then(a.power_kw.abs().partial_cmp(&b.power_kw.abs()).unwrap())
        })
        .expect("non-empty feasible set")
}

/// What one charging period looked like, for offline replay.
#[derive(Debug, Clone, Default)]
pub struct PeriodRecord {
    pub start_soc: f64,
    /// Price at each charging step, in order.
    pub prices: Vec<f64>,
}

/// Cumulative reward of replaying the recorded charging period under the
/// fixed max-power policy toward `target_kwh` (the negated charging cost).
pub fn replay_fixed_policy_reward(
    record: &PeriodRecord,
    target_kwh: f64,
    actions: &ActionGrid,
    e_min: f64,
    e_max: f64,
    dt_hours: f64,
) -> f64 {
    let mut soc = record.start_soc;
    let mut reward = 0.0;
    for &price in &record.prices {
        let feasible = actions.feasible(soc, e_min, e_max, dt_hours);
        let a = pi_q(soc, target_kwh, &feasible, dt_hours);
        reward += low_interior_reward(a.power_kw, dt_hours, price);
        soc += a.power_kw * dt_hours;
    }
    reward
}

/// High-level reward for the first training phase: the charging cost the
/// fixed policy would have paid for the same period, plus the cycle's actual
/// operating outcome (zero, or the terminal penalty).
pub fn counterfactual_high_reward(
    record: &PeriodRecord,
    target_kwh: f64,
    actions: &ActionGrid,
    e_min: f64,
    e_max: f64,
    dt_hours: f64,
    operating_reward: f64,
) -> f64 {
    replay_fixed_policy_reward(record, target_kwh, actions, e_min, e_max, dt_hours)
        + operating_reward
}

/// Splitmix-style seed derivation so every random stream of a run descends
/// deterministically from the master seed.
pub fn mix_seed(master: u64, parts: &[u64]) -> u64 {
    let mut x = master;
    for &p in parts.iter().chain(std::iter::once(&0xA076_1D64_78BD_642Fu64)) {
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
