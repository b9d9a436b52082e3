use crate::profiles::ModelConfig;

use super::{ms_to_slots, RunKind, ScheduledRun, SessionSchedule};

/// Slice boundaries `[start, end)` in slots, proportional to each model's SLO
/// and packed back-to-back in input order.
pub fn temporal_slices(models: &[ModelConfig], session_slots: usize) -> Vec<(usize, usize)> {
    let total: f64 = models.iter().map(|m| m.slo_ms).sum();
    let mut cum = 0.0;
    let mut start = 0;
    models
        .iter()
        .map(|m| {
            cum += m.slo_ms;
            let end = ((session_slots as f64 * cum / total).round() as usize).min(session_slots);
            let s = (start, end);
            start = end;
            s
        })
        .collect()
}

/// Each model gets the whole GPU for its slice and repeats runs of `L_i`
/// while they fit. Occupancy counts the model's knee%.
pub fn temporal_schedule(models: &[ModelConfig], session_len_ms: f64, slot_us: u32) -> SessionSchedule {
    let mut sched = SessionSchedule::empty(session_len_ms, slot_us);
    if models.is_empty() {
        return sched;
    }
    let slices = temporal_slices(models, sched.session_slots());
    for (m, (start, end)) in models.iter().zip(slices) {
        let len = ms_to_slots(m.runtime_ms, slot_us).max(1);
        let mut t = start;
        while t + len <= end {
            sched.push(ScheduledRun {
                model: m.name.clone(),
                start_slot: t,
                slots: len,
                gpu_pct: m.knee_pct,
                batch: m.batch,
                kind: RunKind::Planned,
                window: None,
            });
            t += len;
        }
    }
    sched
}
