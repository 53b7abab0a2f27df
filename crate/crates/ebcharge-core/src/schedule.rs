//! Bus timetable, travel-time distributions, and operating discharge models.

use rand::Rng;

use crate::config::{in_windows, EnvConfig, HazardMode};
use crate::error::{Error, Result};

/// Discrete distribution of an operating period's length in time steps.
///
/// `mass[x]` is the probability that the trip takes exactly `x` steps;
/// `mass[0]` is always zero (a trip takes at least one step).
#[derive(Debug, Clone, PartialEq)]
pub struct TravelPmf {
    mass: Vec<f64>,
}

impl TravelPmf {
    /// Discretizes a normal distribution of trip minutes into step
    /// probabilities by rounding to the nearest step, truncated to
    /// `{1, ..., t_d - 1}` and renormalized.
    pub fn discretize_normal(mean_min: f64, std_min: f64, dt_minutes: u32, t_d: u32) -> TravelPmf {
        let dt = f64::from(dt_minutes);
        let mu = mean_min / dt;
        let sigma = (std_min / dt).max(1e-9);
        let hi = t_d.saturating_sub(1).max(1);
        let mut mass = vec![0.0; hi as usize + 1];
        for (x, m) in mass.iter_mut().enumerate().skip(1) {
            let a = (x as f64 - 0.5 - mu) / sigma;
            let b = (x as f64 + 0.5 - mu) / sigma;
            *m = normal_cdf(b) - normal_cdf(a);
        }
        let total: f64 = mass.iter().sum();
        if total <= 1e-12 {
            // Degenerate spread: collapse onto the nearest in-range step.
            let x = (mu.round() as i64).clamp(1, i64::from(hi)) as usize;
            mass.iter_mut().for_each(|m| *m = 0.0);
            mass[x] = 1.0;
        } else {
            mass.iter_mut().for_each(|m| *m /= total);
        }
        TravelPmf { mass }
    }

    /// Uniform over `{lo, ..., hi}` steps.
    pub fn uniform(lo: u32, hi: u32) -> TravelPmf {
        assert!(lo >= 1 && hi >= lo);
        let mut mass = vec![0.0; hi as usize + 1];
        let p = 1.0 / f64::from(hi - lo + 1);
        for x in lo..=hi {
            mass[x as usize] = p;
        }
        TravelPmf { mass }
    }

    /// All probability on a single length.
    pub fn point(x: u32) -> TravelPmf {
        assert!(x >= 1);
        let mut mass = vec![0.0; x as usize + 1];
        mass[x as usize] = 1.0;
        TravelPmf { mass }
    }

    /// Explicit `(steps, weight)` pairs, normalized.
    pub fn from_weights(pairs: &[(u32, f64)]) -> Result<TravelPmf> {
        let hi = pairs.iter().map(|p| p.0).max().unwrap_or(0);
        if hi == 0 {
            return Err(Error::Config("travel distribution needs support >= 1".into()));
        }
        let mut mass = vec![0.0; hi as usize + 1];
        for &(x, w) in pairs {
            if x == 0 || w < 0.0 {
                return Err(Error::Config(
                    "travel weights must be positive at steps >= 1".into(),
                ));
            }
            mass[x as usize] += w;
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("travel weights sum to zero".into()));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(TravelPmf { mass })
    }

    pub fn prob(&self, steps: u32) -> f64 {
        self.mass.get(steps as usize).copied().unwrap_or(0.0)
    }

    /// Largest length with nonzero probability.
    pub fn max_support(&self) -> u32 {
        self.mass
            .iter()
            .rposition(|&m| m > 0.0)
            .unwrap_or(0) as u32
    }

    /// Probability that the trip lasts at least `steps` steps.
    pub fn survival(&self, steps: u32) -> f64 {
        self.mass.iter().skip(steps as usize).sum()
    }

    /// Support as `(steps, probability)` pairs, for exact enumeration.
    pub fn support(&self) -> Vec<(u32, f64)> {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(x, &m)| (x as u32, m))
            .collect()
    }

    /// Conditional probability that the trip ends after exactly `elapsed`
    /// steps, given it has not ended earlier. When the support is exhausted
    /// the arrival is forced.
    pub fn hazard(&self, elapsed: u32, mode: HazardMode) -> f64 {
        let num = self.prob(elapsed);
        if self.survival(elapsed) <= 1e-15 {
            log::warn!("travel-time support exhausted at elapsed {elapsed}; forcing arrival");
            return 1.0;
        }
        let denom = match mode {
            HazardMode::Exact => self.survival(elapsed),
            HazardMode::ProductForm => {
                (0..elapsed).map(|x| 1.0 - self.prob(x)).product::<f64>()
            }
        };
        if denom <= 1e-15 {
            log::warn!("hazard denominator vanished at elapsed {elapsed}; forcing arrival");
            return 1.0;
        }
        (num / denom).clamp(0.0, 1.0)
    }

    /// Direct draw of a trip length from the distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (x, &m) in self.mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return x as u32;
            }
        }
        self.max_support()
    }
}

/// One operating period: the step gap to the next scheduled departure and the
/// distribution of this period's trip length.
#[derive(Debug, Clone)]
pub struct PeriodSpec {
    pub t_d: u32,
    pub travel: TravelPmf,
}

/// Full-day timetable for one bus.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub periods: Vec<PeriodSpec>,
    pub dt_minutes: u32,
    /// Clock minutes since midnight of this bus's first departure (offset
    /// already applied).
    pub start_clock_min: u32,
}

impl Schedule {
    pub fn from_config(cfg: &EnvConfig) -> Schedule {
        let t_d = cfg.headway_minutes / cfg.dt_minutes;
        let start_clock = cfg.first_departure_min + cfg.bus_offset_minutes;
        let k = cfg.num_operating_periods as usize;
        let mut periods = Vec::with_capacity(k);
        let mut dep_step = 0u32;
        for _ in 0..k {
            let dep_clock = start_clock + dep_step * cfg.dt_minutes;
            let mean = if in_windows(&cfg.rush_windows, dep_clock) {
                cfg.travel_mean_rush_min
            } else {
                cfg.travel_mean_offpeak_min
            };
            periods.push(PeriodSpec {
                t_d,
                travel: TravelPmf::discretize_normal(mean, cfg.travel_std_min, cfg.dt_minutes, t_d),
            });
            // Consecutive departures are t_d + 1 steps apart: the countdown
            // spans t_d + 1 values including the zero step at the charger.
            dep_step += t_d + 1;
        }
        Schedule {
            periods,
            dt_minutes: cfg.dt_minutes,
            start_clock_min: start_clock,
        }
    }

    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    /// Step index (counted from the first departure) at which the bus departs
    /// for operating period `k`.
    pub fn departure_step(&self, k: usize) -> u32 {
        self.periods[..k].iter().map(|p| p.t_d + 1).sum()
    }

    /// Clock minutes since midnight of a step index.
    pub fn clock_of_step(&self, step: u32) -> u32 {
        self.start_clock_min + step * self.dt_minutes
    }

    /// Upper bound on episode length in steps: through the latest possible
    /// arrival of the final operating period.
    pub fn horizon(&self) -> u32 {
        let last = self.num_periods() - 1;
        self.departure_step(last) + self.periods[last].t_d + 1
    }
}

/// Per-step power drawn while the bus is on its route (negative kW).
#[derive(Debug, Clone)]
pub enum DischargeProfile {
    /// Normal draw truncated to `[-d_max, 0]`; `mean_kw` is negative.
    TruncNormal { mean_kw: f64, std_kw: f64 },
    /// The same power at every step.
    Fixed(f64),
    /// A fixed path indexed by episode step.
    PerStep(Vec<f64>),
    /// Finite set of `(power, probability)` outcomes.
    Choice(Vec<(f64, f64)>),
}

impl DischargeProfile {
    /// Draws the operating power for episode step `t`. `mean_scale` inflates
    /// the mean draw (rush-hour multiplier); the draw is clamped to
    /// `[-d_max, 0]` but never floored at the battery limit, so the battery
    /// may cross its minimum and terminate the episode.
    pub fn sample(&self, rng: &mut impl Rng, t: u32, mean_scale: f64, d_max: f64) -> f64 {
        let power = match self {
            DischargeProfile::TruncNormal { mean_kw, std_kw } => {
                let mean = mean_kw * mean_scale;
                let mut draw = mean;
                for _ in 0..1000 {
                    draw = mean + std_kw * standard_normal(rng);
                    if (-d_max..=0.0).contains(&draw) {
                        return draw;
                    }
                }
                draw
            }
            DischargeProfile::Fixed(p) => *p,
            DischargeProfile::PerStep(path) => {
                let idx = (t as usize).min(path.len().saturating_sub(1));
                path[idx]
            }
            DischargeProfile::Choice(outcomes) => {
                let total: f64 = outcomes.iter().map(|o| o.1).sum();
                let u: f64 = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = outcomes.last().map(|o| o.0).unwrap_or(0.0);
                for &(p, w) in outcomes {
                    acc += w;
                    if u < acc {
                        chosen = p;
                        break;
                    }
                }
                chosen
            }
        };
        power.clamp(-d_max, 0.0)
    }

    /// Exact outcome enumeration for step `t`, when the profile is finite.
    pub fn enumerate(&self, t: u32) -> Option<Vec<(f64, f64)>> {
        match self {
            DischargeProfile::TruncNormal { .. } => None,
            DischargeProfile::Fixed(p) => Some(vec![(*p, 1.0)]),
            DischargeProfile::PerStep(path) => {
                let idx = (t as usize).min(path.len().saturating_sub(1));
                Some(vec![(path[idx], 1.0)])
            }
            DischargeProfile::Choice(outcomes) => {
                let total: f64 = outcomes.iter().map(|o| o.1).sum();
                Some(outcomes.iter().map(|&(p, w)| (p, w / total)).collect())
            }
        }
    }
}

/// Standard normal draw via Box-Muller.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard normal CDF via an erf polynomial approximation (absolute error
/// below 1.5e-7, ample for building step probability masses).
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t
            + 0.254_829_592)
            * t
            * (-x * x).exp();
    sign * y
}
