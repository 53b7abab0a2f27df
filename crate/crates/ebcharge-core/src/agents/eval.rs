//! Greedy policy evaluation on a held-out price span.

use std::sync::Arc;

use crate::env::{Boundary, Env, OptionLevel, Period, Scenario};
use crate::error::{Error, Result};
use crate::prices::PriceSeries;
use crate::qnet::{argmax_over, encode_state, FeatureBounds, QNet};
use crate::trace::TraceRow;

use super::trainer::{day_base_step, eligible_days};
use super::{mix_seed, pi_q, Mode};

/// Borrowed view of a trained policy, enough to act greedily.
pub struct PolicyView<'a> {
    pub mode: Mode,
    pub high: Option<&'a QNet>,
    pub low: Option<&'a QNet>,
    pub bounds: &'a FeatureBounds,
}

/// Aggregate evaluation results. The per-episode return is the plain sum of
/// step rewards over the episode.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub mean: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
    pub terminal_episodes: usize,
    pub traces: Option<Vec<Vec<TraceRow>>>,
}

/// Runs `n_episodes` greedy episodes over the span's eligible days, cycling
/// through them deterministically.
pub fn evaluate(
    view: &PolicyView,
    scenario: &Scenario,
    prices: &Arc<PriceSeries>,
    n_episodes: usize,
    seed: u64,
    collect_traces: bool,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let days = eligible_days(prices, scenario)?;
    let mut env = Env::new(scenario.clone(), Arc::clone(prices));
    let mut returns = Vec::with_capacity(n_episodes);
    let mut terminal_episodes = 0;
    let mut traces = collect_traces.then(Vec::new);
    for i in 0..n_episodes {
        let day = days[i % days.len()];
        let base = day_base_step(prices, scenario, day)?;
        env.reset(mix_seed(seed, &[7, i as u64]), base)?;
        let (ret, terminal, rows) = greedy_episode(view, &mut env, collect_traces)?;
        returns.push(ret);
        if terminal {
            terminal_episodes += 1;
        }
        if let Some(ts) = traces.as_mut() {
            ts.push(rows);
        }
    }
    let mean = returns.iter().sum::<f64>() / n_episodes as f64;
    let stderr = if n_episodes > 1 {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (n_episodes - 1) as f64;
        (var / n_episodes as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalSummary {
        mean,
        stderr,
        returns,
        terminal_episodes,
        traces,
    })
}

/// Greedy target prescription at a charging-period start. Hierarchical
/// learners restrict the choice to the reachable target window exactly as in
/// training; the ablation ranges over the whole grid.
fn prescribe(view: &PolicyView, env: &Env, state: &crate::env::EnvState) -> Option<OptionLevel> {
    match view.mode {
        Mode::HddqnHer | Mode::DdqnHigh | Mode::Hddqn => {
            let levels = if view.mode == Mode::Hddqn {
                env.scenario().options.all()
            } else {
                env.feasible_options(state)
            };
            let slots: Vec<usize> = levels.iter().map(|o| o.slot).collect();
            let values = view
                .high
                .expect("hierarchical policy without a high net")
                .forward(&encode_state(state, None, view.bounds));
            let slot = argmax_over(&values, &slots);
            Some(*levels.iter().find(|o| o.slot == slot).unwrap())
        }
        Mode::DdqnLow => Some(OptionLevel {
            slot: 0,
            target_kwh: env.scenario().e_max,
        }),
        Mode::DdqnOriginal => None,
    }
}

fn greedy_episode(
    view: &PolicyView,
    env: &mut Env,
    collect_trace: bool,
) -> Result<(f64, bool, Vec<TraceRow>)> {
    let mut ret = 0.0;
    let mut rows = Vec::new();
    let mut option = prescribe(view, env, env.state().unwrap());
    loop {
        let st = env.state().unwrap().clone();
        let out = match st.period {
            Period::Charging => {
                let feasible = env.feasible_actions(&st);
                let action = match view.mode {
                    Mode::DdqnHigh => pi_q(
                        st.soc,
                        option.expect("active target").target_kwh,
                        &feasible,
                        env.scenario().dt_hours,
                    ),
                    Mode::DdqnOriginal => {
                        let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
                        let values = view
                            .low
                            .expect("flat policy without a net")
                            .forward(&encode_state(&st, None, view.bounds));
                        *feasible
                            .iter()
                            .find(|a| a.slot == argmax_over(&values, &slots))
                            .unwrap()
                    }
                    _ => {
                        let slots: Vec<usize> = feasible.iter().map(|a| a.slot).collect();
                        let values = view.low.expect("low-level policy without a net").forward(
                            &encode_state(
                                &st,
                                Some(option.expect("active target").target_kwh),
                                view.bounds,
                            ),
                        );
                        *feasible
                            .iter()
                            .find(|a| a.slot == argmax_over(&values, &slots))
                            .unwrap()
                    }
                };
                env.step(Some(action))?
            }
            Period::Operating => env.step(None)?,
        };
        ret += out.reward;
        if collect_trace {
            rows.push(TraceRow {
                t: st.step_index,
                clock_min: env.scenario().schedule.clock_of_step(st.step_index),
                flag: st.period.flag(),
                k: st.period_index,
                tau: st.steps_to_departure,
                soc: st.soc,
                price: st.price(),
                power_kw: out.power_kw,
                reward: out.reward,
                option_kwh: option.map(|o| o.target_kwh),
            });
        }
        if out.terminal {
            return Ok((ret, true, rows));
        }
        if out.day_complete {
            return Ok((ret, false, rows));
        }
        if out.boundary == Boundary::ChargingStarted {
            option = prescribe(view, env, &out.state);
        }
    }
}
