//! Session schedule constructors and the slot-based occupancy timeline they share.

mod dstack;
mod dynamic;
mod ideal;
mod spatial;
mod temporal;

pub use dstack::{dstack_schedule, start_late, DstackOptions, DstackOutcome, PlacementStep};
pub use dynamic::{closed_loop, dynamic_fill, ClosedLoop, FillCandidate, Scoreboard, DEFAULT_SCOREBOARD_WINDOW};
pub use ideal::{
    convnet_kernels, ideal_compare, ideal_schedule, CompareRow, IdealInstance, IdealResult, Kernel, KernelTrace,
    Workload, IDEAL_GUARD,
};
pub use spatial::{static_spatial, wmax_min};
pub use temporal::{temporal_schedule, temporal_slices};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::profiles::ModelConfig;

pub const DEFAULT_SLOT_US: u32 = 100;

const EPS: f64 = 1e-9;

/// Number of whole slots covering `ms`. Values within 1e-6 slot of an
/// integer are treated as that integer.
pub fn ms_to_slots(ms: f64, slot_us: u32) -> usize {
    let x = ms * 1000.0 / slot_us as f64;
    (x - 1e-6).ceil().max(0.0) as usize
}

pub fn slots_to_ms(slots: usize, slot_us: u32) -> f64 {
    slots as f64 * slot_us as f64 / 1000.0
}

/// Aggregate GPU% per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    slot_us: u32,
    occ: Vec<f64>,
}

impl Timeline {
    pub fn new(slots: usize, slot_us: u32) -> Self {
        Self {
            slot_us,
            occ: vec![0.0; slots],
        }
    }

    pub fn from_slots(occ: Vec<f64>, slot_us: u32) -> Self {
        Self { slot_us, occ }
    }

    pub fn slot_us(&self) -> u32 {
        self.slot_us
    }

    pub fn len(&self) -> usize {
        self.occ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occ.is_empty()
    }

    pub fn slots(&self) -> &[f64] {
        &self.occ
    }

    pub fn at(&self, slot: usize) -> f64 {
        self.occ.get(slot).copied().unwrap_or(0.0)
    }

    pub fn residual(&self, slot: usize) -> f64 {
        100.0 - self.at(slot)
    }

    /// True when `[start, start+len)` lies inside the timeline and every slot
    /// stays at or below 100% after adding `pct`.
    pub fn fits(&self, start: usize, len: usize, pct: f64) -> bool {
        start + len <= self.occ.len() && self.occ[start..start + len].iter().all(|&o| o + pct <= 100.0 + EPS)
    }

    pub fn add(&mut self, start: usize, len: usize, pct: f64) {
        let end = (start + len).min(self.occ.len());
        for o in &mut self.occ[start.min(end)..end] {
            *o += pct;
        }
    }

    pub fn remove(&mut self, start: usize, len: usize, pct: f64) {
        let end = (start + len).min(self.occ.len());
        for o in &mut self.occ[start.min(end)..end] {
            *o -= pct;
            if o.abs() < EPS {
                *o = 0.0;
            }
        }
    }

    /// Slots from `start` (up to `limit`) during which `pct` still fits.
    pub fn free_run(&self, start: usize, pct: f64, limit: usize) -> usize {
        let end = limit.min(self.occ.len());
        if start >= end {
            return 0;
        }
        self.occ[start..end]
            .iter()
            .take_while(|&&o| o + pct <= 100.0 + EPS)
            .count()
    }

    pub fn max(&self) -> f64 {
        self.occ.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.occ.is_empty() {
            0.0
        } else {
            self.occ.iter().sum::<f64>() / self.occ.len() as f64
        }
    }

    /// Appends `other` after the last slot.
    pub fn extend(&mut self, other: &Timeline) {
        self.occ.extend_from_slice(&other.occ);
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["slot_ms", "gpu_pct"])?;
        for (i, o) in self.occ.iter().enumerate() {
            w.write_record([slots_to_ms(i, self.slot_us).to_string(), o.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Placed when the session was built.
    Planned,
    /// Added opportunistically into residual capacity.
    Fill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledRun {
    pub model: String,
    pub start_slot: usize,
    pub slots: usize,
    pub gpu_pct: f64,
    pub batch: u32,
    pub kind: RunKind,
    /// SLO window this run serves, for planned runs.
    pub window: Option<usize>,
}

impl ScheduledRun {
    pub fn end_slot(&self) -> usize {
        self.start_slot + self.slots
    }

    pub fn start_ms(&self, slot_us: u32) -> f64 {
        slots_to_ms(self.start_slot, slot_us)
    }

    pub fn duration_ms(&self, slot_us: u32) -> f64 {
        slots_to_ms(self.slots, slot_us)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub session_len_ms: f64,
    pub runs: Vec<ScheduledRun>,
    pub timeline: Timeline,
}

impl SessionSchedule {
    pub fn empty(session_len_ms: f64, slot_us: u32) -> Self {
        Self {
            session_len_ms,
            runs: Vec::new(),
            timeline: Timeline::new(ms_to_slots(session_len_ms, slot_us), slot_us),
        }
    }

    pub fn slot_us(&self) -> u32 {
        self.timeline.slot_us
    }

    pub fn session_slots(&self) -> usize {
        self.timeline.len()
    }

    pub fn push(&mut self, run: ScheduledRun) {
        self.timeline.add(run.start_slot, run.slots, run.gpu_pct);
        self.runs.push(run);
    }

    /// Time-average of occupancy over the session.
    pub fn utilization(&self) -> f64 {
        self.timeline.mean()
    }

    pub fn runs_of<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a ScheduledRun> + 'a {
        self.runs.iter().filter(move |r| r.model == model)
    }

    /// Models whose SLO windows lack a run ending inside them, as `(model, window)`.
    pub fn window_misses(&self, models: &[ModelConfig]) -> Vec<(String, usize)> {
        let slot_us = self.slot_us();
        let mut out = Vec::new();
        for m in models {
            let reps = (self.session_len_ms / m.slo_ms + 1e-9).floor() as usize;
            for j in 0..reps {
                let ws = ms_to_slots(j as f64 * m.slo_ms, slot_us);
                let we = ms_to_slots((j + 1) as f64 * m.slo_ms, slot_us);
                let hit = self.runs_of(&m.name).any(|r| r.start_slot >= ws && r.end_slot() <= we);
                if !hit {
                    out.push((m.name.clone(), j));
                }
            }
        }
        out
    }

    /// Pairs of runs of the same model that overlap in time.
    pub fn self_overlaps(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, a) in self.runs.iter().enumerate() {
            for (j, b) in self.runs.iter().enumerate().skip(i + 1) {
                if a.model == b.model && a.start_slot < b.end_slot() && b.start_slot < a.end_slot() {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn write_runs_csv<W: Write>(&self, sink: W) -> Result<()> {
        let slot_us = self.slot_us();
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["model", "start_ms", "duration_ms", "gpu_pct", "batch"])?;
        let mut runs: Vec<&ScheduledRun> = self.runs.iter().collect();
        runs.sort_by(|a, b| a.start_slot.cmp(&b.start_slot).then(a.model.cmp(&b.model)));
        for r in runs {
            w.write_record([
                r.model.clone(),
                r.start_ms(slot_us).to_string(),
                r.duration_ms(slot_us).to_string(),
                r.gpu_pct.to_string(),
                r.batch.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Session length: the largest SLO.
pub fn session_len(models: &[ModelConfig]) -> f64 {
    models.iter().map(|m| m.slo_ms).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_conversion() {
        assert_eq!(ms_to_slots(8.0, 100), 80);
        assert_eq!(ms_to_slots(10.3, 100), 103);
        assert_eq!(ms_to_slots(14.6, 100), 146);
        assert_eq!(ms_to_slots(0.05, 100), 1);
        assert_eq!(slots_to_ms(550, 100), 55.0);
    }

    #[test]
    fn utilization_examples() {
        let s = SessionSchedule::empty(100.0, 100);
        assert_eq!(s.utilization(), 0.0);
        let mut s = SessionSchedule::empty(100.0, 100);
        s.push(ScheduledRun {
            model: "m".into(),
            start_slot: 0,
            slots: 500,
            gpu_pct: 50.0,
            batch: 1,
            kind: RunKind::Planned,
            window: Some(0),
        });
        assert!((s.utilization() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn timeline_fit_and_free_run() {
        let mut t = Timeline::new(10, 100);
        t.add(3, 4, 70.0);
        assert!(t.fits(0, 3, 100.0));
        assert!(!t.fits(0, 4, 31.0));
        assert!(t.fits(0, 10, 30.0));
        assert!(!t.fits(8, 3, 10.0));
        assert_eq!(t.free_run(0, 40.0, 10), 3);
        assert_eq!(t.free_run(7, 40.0, 9), 2);
        t.remove(3, 4, 70.0);
        assert_eq!(t.max(), 0.0);
    }
}
