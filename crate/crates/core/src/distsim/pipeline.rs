use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Default backward cost relative to forward.
pub const BACKWARD_FACTOR: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

/// One micro-batch occupying one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PipelineEvent {
    pub stage: usize,
    pub micro_batch: usize,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

/// A fill-drain schedule and its utilization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelinePlan {
    pub stages: usize,
    pub micro_batches: usize,
    pub forward_cost: f64,
    pub backward_cost: f64,
    pub events: Vec<PipelineEvent>,
    pub makespan: f64,
    /// Sum of event durations over all stages.
    pub busy: f64,
    /// `busy / (stages × makespan)`.
    pub utilization: f64,
}

/// GPipe schedule: every micro-batch flows forward through the stages,
/// then backward passes run in reverse micro-batch order from the last
/// stage down. Each event starts as soon as its stage is free and its
/// input is ready.
pub fn pipeline_schedule(stages: usize, micro_batches: usize, forward: f64, backward: f64) -> Result<PipelinePlan> {
    if stages == 0 || micro_batches == 0 {
        return Err(Error::InvalidArgument("stages and micro-batches must be at least 1".into()));
    }
    if !(forward > 0.0 && backward > 0.0 && forward.is_finite() && backward.is_finite()) {
        return Err(Error::InvalidArgument("stage costs must be positive".into()));
    }
    let (n, m) = (stages, micro_batches);
    let mut free = vec![0.0f64; n];
    let mut fwd_end = vec![vec![0.0f64; m]; n];
    let mut events = Vec::with_capacity(2 * n * m);
    for j in 0..m {
        for i in 0..n {
            let ready = if i == 0 { 0.0 } else { fwd_end[i - 1][j] };
            let start = ready.max(free[i]);
            let end = start + forward;
            fwd_end[i][j] = end;
            free[i] = end;
            events.push(PipelineEvent {
                stage: i,
                micro_batch: j,
                phase: Phase::Forward,
                start,
                end,
            });
        }
    }
    let mut bwd_end = vec![vec![0.0f64; m]; n];
    for j in (0..m).rev() {
        for i in (0..n).rev() {
            let ready = if i == n - 1 { fwd_end[i][j] } else { bwd_end[i + 1][j] };
            let start = ready.max(free[i]);
            let end = start + backward;
            bwd_end[i][j] = end;
            free[i] = end;
            events.push(PipelineEvent {
                stage: i,
                micro_batch: j,
                phase: Phase::Backward,
                start,
                end,
            });
        }
    }
    let makespan = free.iter().cloned().fold(0.0, f64::max);
    let busy: f64 = events.iter().map(|e| e.end - e.start).sum();
    Ok(PipelinePlan {
        stages,
        micro_batches,
        forward_cost: forward,
        backward_cost: backward,
        events,
        makespan,
        busy,
        utilization: busy / (stages as f64 * makespan),
    })
}

const MICRO_LABELS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl PipelinePlan {
    /// Text chart with one row per stage. Forward cells show the
    /// micro-batch as a lowercase letter, backward cells in uppercase,
    /// idle time as `.`; one column per `min(f, b)` of time.
    pub fn gantt(&self) -> String {
        let unit = self.forward_cost.min(self.backward_cost);
        let cols = (self.makespan / unit).round() as usize;
        let mut grid = vec![vec![b'.'; cols]; self.stages];
        for e in &self.events {
            let label = MICRO_LABELS[e.micro_batch % MICRO_LABELS.len()];
            let c = match e.phase {
                Phase::Forward => label,
                Phase::Backward => label.to_ascii_uppercase(),
            };
            let (a, b) = ((e.start / unit).round() as usize, (e.end / unit).round() as usize);
            for cell in &mut grid[e.stage][a..b.min(cols)] {
                *cell = c;
            }
        }
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let _ = writeln!(out, "stage {i:>2} |{}|", String::from_utf8_lossy(row));
        }
        let _ = writeln!(
            out,
            "makespan {} busy {} utilization {:.6}",
            self.makespan, self.busy, self.utilization
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_micro_batch_uses_one_stage_at_a_time() {
        let p = pipeline_schedule(4, 1, 1.0, 2.0).unwrap();
        assert_eq!(p.utilization, 0.25);
        assert_eq!(p.makespan, 12.0);
    }

    #[test]
    fn eight_micro_batches_on_four_stages() {
        let p = pipeline_schedule(4, 8, 1.0, BACKWARD_FACTOR).unwrap();
        assert_eq!(p.utilization, 8.0 / 11.0);
    }

    #[test]
    fn one_stage_is_always_busy() {
        for m in 1..10 {
            assert_eq!(pipeline_schedule(1, m, 0.5, 1.5).unwrap().utilization, 1.0);
        }
    }

    #[test]
    fn gantt_rows() {
        let p = pipeline_schedule(3, 2, 1.0, 2.0).unwrap();
        let g = p.gantt();
        assert_eq!(g.lines().count(), 4);
        assert!(g.starts_with("stage  0 |ab"));
    }

    #[test]
    fn bad_inputs() {
        assert!(pipeline_schedule(0, 1, 1.0, 2.0).is_err());
        assert!(pipeline_schedule(1, 1, 0.0, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_valid(n in 1usize..=16, m in 1usize..=64, f in 0.1f64..4.0, b in 0.1f64..8.0) {
            let p = pipeline_schedule(n, m, f, b).unwrap();
            // Stage exclusivity.
            for s in 0..n {
                let mut ev: Vec<_> = p.events.iter().filter(|e| e.stage == s).collect();
                ev.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
                for w in ev.windows(2) {
                    prop_assert!(w[0].end <= w[1].start);
                }
            }
            // Dependencies.
            let find = |s: usize, j: usize, ph: Phase| p.events.iter().find(|e| e.stage == s && e.micro_batch == j && e.phase == ph).unwrap();
            for j in 0..m {
                for s in 1..n {
                    prop_assert!(find(s, j, Phase::Forward).start >= find(s - 1, j, Phase::Forward).end);
                    prop_assert!(find(s - 1, j, Phase::Backward).start >= find(s, j, Phase::Backward).end);
                }
                prop_assert!(find(n - 1, j, Phase::Backward).start >= find(n - 1, j, Phase::Forward).end);
            }
        }

        #[test]
        fn utilization_grows_with_micro_batches(n in 2usize..=8, m in 1usize..=32) {
            let a = pipeline_schedule(n, m, 1.0, 2.0).unwrap().utilization;
            let b = pipeline_schedule(n, m + 1, 1.0, 2.0).unwrap().utilization;
            prop_assert!(b > a);
            prop_assert!(b < 1.0);
        }
    }
}
