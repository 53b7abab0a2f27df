//! Experience stores for the two learners.
//!
//! The low-level buffer holds per-step charging transitions tagged with
//! their active charging target; the high-level buffer holds one record per
//! charging-operating cycle. Hindsight copies of a charging period's
//! transitions are staged as the period unfolds and committed at its end
//! with the goal slot rewritten to the battery level actually reached, so
//! the buffer always contains at least one sequence whose goal was realized.

use std::collections::VecDeque;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::env::EnvState;
use crate::error::{Error, Result};

/// Tolerance for "the charging target was realized", in kWh.
pub const GOAL_EPS: f64 = 1e-9;

/// One low-level step: a charging action taken under an active target.
#[derive(Debug, Clone)]
pub struct LowTransition {
    pub state: EnvState,
    /// Goal slot: the prescribed target, or the achieved level in hindsight
    /// copies. NaN for the flat baseline, which learns without targets.
    pub option_kwh: f64,
    pub action_slot: usize,
    /// Training reward: the step's interior cost, plus the boundary miss
    /// penalty on the period's final step.
    pub reward: f64,
    /// The boundary penalty component of `reward` (zero on interior steps
    /// and on hindsight boundary steps, whose substituted goal is realized).
    pub target_penalty: f64,
    pub next_state: EnvState,
    /// Set when the next state leaves the charging period (or the episode
    /// ended); such records carry no bootstrap term.
    pub done: bool,
    /// Feasible action slots of the next state; empty when done.
    pub next_feasible: Vec<usize>,
    pub episode_id: u64,
    /// Groups every record of one charging period (one option execution).
    pub option_instance_id: u64,
    pub hindsight: bool,
}

/// One high-level record spanning a whole charging-operating cycle.
#[derive(Debug, Clone)]
pub struct HighTransition {
    pub start_state: EnvState,
    /// Stored target level. Under relabeling this is the battery level
    /// actually reached at the charging period's end, never the prescribed
    /// target.
    pub option_kwh: f64,
    /// Output slot trained by the TD update (nearest grid slot when the
    /// relabeled level is off-grid).
    pub option_slot: usize,
    pub reward: f64,
    pub next_state: EnvState,
    pub done: bool,
    /// Feasible option slots at the next charging start; empty when done.
    pub next_feasible: Vec<usize>,
}

/// Bounded FIFO store with seeded uniform sampling.
#[derive(Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    records: VecDeque<T>,
    rng: ChaCha12Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> ReplayBuffer<T> {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, evicting the oldest once full.
    pub fn push(&mut self, record: T) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    /// Uniform minibatch without replacement, or `None` while the buffer is
    /// still warming up.
    pub fn sample(&mut self, batch_size: usize) -> Option<Vec<&T>> {
        if self.records.len() < batch_size {
            return None;
        }
        let idx = rand::seq::index::sample(&mut self.rng, self.records.len(), batch_size);
        Some(idx.iter().map(|i| &self.records[i]).collect())
    }

    pub fn iter(&self) -> std::collections::vec_deque::Iter<'_, T> {
        self.records.iter()
    }
}

pub const LOW_DUMP_HEADER: &str = "t,soc,tau,k,option,action_slot,reward,target_penalty,next_soc,done,episode,instance,hindsight";
pub const HIGH_DUMP_HEADER: &str = "t,soc,tau,k,option,option_slot,reward,next_t,next_soc,done";

impl ReplayBuffer<LowTransition> {
    /// Removes every record (original and hindsight) of one option
    /// execution. Called when the bus runs out of battery under that option,
    /// so transitions chasing an unsurvivable target stop polluting the
    /// buffer. Returns the number removed.
    pub fn delete_option_instance(&mut self, episode_id: u64, option_instance_id: u64) -> usize {
        let before = self.records.len();
        self.records
            .retain(|r| !(r.episode_id == episode_id && r.option_instance_id == option_instance_id));
        before - self.records.len()
    }

    /// Debugging dump, one record per line under [`LOW_DUMP_HEADER`].
    pub fn dump_csv(&self) -> String {
        let mut out = String::from(LOW_DUMP_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.state.step_index,
                r.state.soc,
                r.state.steps_to_departure,
                r.state.period_index,
                r.option_kwh,
                r.action_slot,
                r.reward,
                r.target_penalty,
                r.next_state.soc,
                r.done,
                r.episode_id,
                r.option_instance_id,
                r.hindsight,
            ));
        }
        out
    }
}

impl ReplayBuffer<HighTransition> {
    /// Debugging dump, one record per line under [`HIGH_DUMP_HEADER`].
    pub fn dump_csv(&self) -> String {
        let mut out = String::from(HIGH_DUMP_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.start_state.step_index,
                r.start_state.soc,
                r.start_state.steps_to_departure,
                r.start_state.period_index,
                r.option_kwh,
                r.option_slot,
                r.reward,
                r.next_state.step_index,
                r.next_state.soc,
                r.done,
            ));
        }
        out
    }
}

/// Per-period staging area for hindsight copies.
///
/// Every charging step stages one copy with its goal left open; at the
/// period's end the copies either commit with the achieved level filled in
/// (when the prescribed target was missed) or are dropped (when it was
/// realized, in which case the originals already carry a realized goal).
#[derive(Debug, Default)]
pub struct HerStager {
    staged: Vec<LowTransition>,
    active: bool,
}

impl HerStager {
    pub fn new() -> HerStager {
        HerStager::default()
    }

    /// Starts staging for a new charging period.
    pub fn begin(&mut self) {
        self.staged.clear();
        self.active = true;
    }

    /// Drops any staged records without committing them.
    pub fn cancel(&mut self) {
        self.staged.clear();
        self.active = false;
    }

    pub fn staged_len(&self) -> usize {
        self.staged.len()
    }

    /// Stages one copy. `record.reward` must be the interior reward only;
    /// the boundary step's miss penalty is zero by construction once the
    /// goal is substituted.
    pub fn stage(&mut self, record: LowTransition) {
        debug_assert!(self.active, "stage called outside a charging period");
        self.staged.push(record);
    }

    /// Commits the staged copies with the achieved goal, unless the
    /// prescribed target was realized.
    pub fn finalize(
        &mut self,
        achieved_kwh: f64,
        prescribed_kwh: f64,
        buffer: &mut ReplayBuffer<LowTransition>,
    ) -> Result<usize> {
        if !self.active {
            return Err(Error::Contract(
                "hindsight finalize without a staged charging period".into(),
            ));
        }
        self.active = false;
        if (achieved_kwh - prescribed_kwh).abs() < GOAL_EPS {
            self.staged.clear();
            return Ok(0);
        }
        let n = self.staged.len();
        for mut record in self.staged.drain(..) {
            record.option_kwh = achieved_kwh;
            record.hindsight = true;
            record.target_penalty = 0.0;
            buffer.push(record);
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Period;

    fn state(step: u32) -> EnvState {
        EnvState {
            soc: 100.0,
            period: Period::Charging,
            steps_to_departure: 3,
            price_window: vec![0.02; 5],
            period_index: 0,
            step_index: step,
        }
    }

    fn low(step: u32, episode: u64, instance: u64, reward: f64, done: bool) -> LowTransition {
        LowTransition {
            state: state(step),
            option_kwh: 200.0,
            action_slot: 2,
            reward,
            target_penalty: 0.0,
            next_state: state(step + 1),
            done,
            next_feasible: if done { vec![] } else { vec![0, 1, 2] },
            episode_id: episode,
            option_instance_id: instance,
            hindsight: false,
        }
    }

    #[test]
    fn push_and_fifo_eviction() {
        let mut buf = ReplayBuffer::new(2, 0);
        buf.push(low(0, 1, 1, -0.1, false));
        assert_eq!(buf.len(), 1);
        buf.push(low(1, 1, 1, -0.2, false));
        buf.push(low(2, 1, 1, -0.3, false));
        assert_eq!(buf.len(), 2);
        let steps: Vec<u32> = buf.iter().map(|r| r.state.step_index).collect();
        assert_eq!(steps, vec![1, 2]);
    }

    #[test]
    fn sampling_is_uniform_without_replacement_and_seeded() {
        let mut a = ReplayBuffer::new(128, 9);
        let mut b = ReplayBuffer::new(128, 9);
        for i in 0..64 {
            a.push(low(i, 1, 1, 0.0, false));
            b.push(low(i, 1, 1, 0.0, false));
        }
        // Batch equal to the buffer size covers every record exactly once.
        let mut steps: Vec<u32> = a.sample(64).unwrap().iter().map(|r| r.state.step_index).collect();
        steps.sort_unstable();
        assert_eq!(steps, (0..64).collect::<Vec<_>>());
        // Warm-up guard.
        assert!(a.sample(65).is_none());
        // Same seed, same draws.
        let sa: Vec<u32> = a.sample(8).unwrap().iter().map(|r| r.state.step_index).collect();
        b.sample(64).unwrap();
        let sb: Vec<u32> = b.sample(8).unwrap().iter().map(|r| r.state.step_index).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn hindsight_commit_relabels_and_zeroes_the_boundary_penalty() {
        let mut buf = ReplayBuffer::new(100, 0);
        let mut stager = HerStager::new();
        stager.begin();
        // Three charging steps toward a prescribed 200 kWh; the period ends
        // at 180 kWh.
        for i in 0..3 {
            let mut r = low(i, 7, 42, -0.1, i == 2);
            r.reward = -0.1; // interior only in staged copies
            stager.stage(r);
        }
        let n = stager.finalize(180.0, 200.0, &mut buf).unwrap();
        assert_eq!(n, 3);
        assert_eq!(buf.len(), 3);
        for r in buf.iter() {
            assert!(r.hindsight);
            assert_eq!(r.option_kwh, 180.0);
            assert_eq!(r.target_penalty, 0.0);
        }
        let last = buf.iter().last().unwrap();
        assert!(last.done);
        assert_eq!(last.reward, -0.1);
    }

    #[test]
    fn realized_target_discards_the_staged_copies() {
        let mut buf = ReplayBuffer::new(100, 0);
        let mut stager = HerStager::new();
        stager.begin();
        stager.stage(low(0, 7, 42, -0.1, true));
        let n = stager.finalize(200.0, 200.0, &mut buf).unwrap();
        assert_eq!(n, 0);
        assert!(buf.is_empty());
        assert_eq!(stager.staged_len(), 0);
    }

    #[test]
    fn finalize_without_staging_is_a_contract_violation() {
        let mut buf = ReplayBuffer::new(100, 0);
        let mut stager = HerStager::new();
        assert!(stager.finalize(180.0, 200.0, &mut buf).is_err());
        stager.begin();
        stager.finalize(180.0, 200.0, &mut buf).unwrap();
        // A second finalize without a new begin is rejected too.
        assert!(stager.finalize(180.0, 200.0, &mut buf).is_err());
    }

    #[test]
    fn deletion_is_scoped_complete_and_idempotent() {
        let mut buf = ReplayBuffer::new(100, 0);
        for i in 0..4 {
            buf.push(low(i, 7, 42, -0.1, false));
        }
        // Hindsight copies of the same instance and an unrelated instance.
        let mut h = low(9, 7, 42, -0.1, false);
        h.hindsight = true;
        buf.push(h);
        buf.push(low(20, 7, 43, -0.1, false));
        buf.push(low(21, 8, 42, -0.1, false));

        assert_eq!(buf.delete_option_instance(7, 42), 5);
        assert_eq!(buf.len(), 2);
        assert!(buf
            .iter()
            .all(|r| !(r.episode_id == 7 && r.option_instance_id == 42)));
        assert_eq!(buf.delete_option_instance(7, 42), 0);
    }

    #[test]
    fn dumps_carry_one_line_per_record() {
        let mut buf = ReplayBuffer::new(10, 0);
        buf.push(low(0, 1, 1, -0.1, false));
        buf.push(low(1, 1, 1, -0.2, true));
        let dump = buf.dump_csv();
        assert_eq!(dump.lines().count(), 3);
        assert!(dump.starts_with(LOW_DUMP_HEADER));
        assert!(dump.contains("-0.2"));

        let mut hbuf: ReplayBuffer<HighTransition> = ReplayBuffer::new(10, 0);
        hbuf.push(HighTransition {
            start_state: state(0),
            option_kwh: 180.0,
            option_slot: 9,
            reward: -1.5,
            next_state: state(12),
            done: true,
            next_feasible: vec![],
        });
        let dump = hbuf.dump_csv();
        assert_eq!(dump.lines().count(), 2);
        assert!(dump.starts_with(HIGH_DUMP_HEADER));
        assert!(dump.contains("180"));
    }

    #[test]
    fn staging_dropped_when_period_dies_uncommitted() {
        // Simulates a terminal entry before the boundary: the trainer
        // cancels instead of finalizing.
        let mut stager = HerStager::new();
        stager.begin();
        stager.stage(low(0, 1, 1, -0.1, false));
        stager.cancel();
        assert_eq!(stager.staged_len(), 0);
        let mut buf = ReplayBuffer::new(10, 0);
        assert!(stager.finalize(1.0, 2.0, &mut buf).is_err());
    }
}
