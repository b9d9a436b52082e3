use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::profiles::{ModelConfig, ModelProfile, GRID_BATCHES};

use super::{ms_to_slots, slots_to_ms, RunKind, ScheduledRun, SessionSchedule, Timeline};

pub const DEFAULT_SCOREBOARD_WINDOW: usize = 10;

/// Per-model run counts over the last `window` sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    window: usize,
    sessions: VecDeque<BTreeMap<String, u64>>,
}

impl Default for Scoreboard {
    fn default() -> Self {
        Self::new(DEFAULT_SCOREBOARD_WINDOW)
    }
}

impl Scoreboard {
    pub fn new(window: usize) -> Self {
        let mut sessions = VecDeque::with_capacity(window.max(1));
        sessions.push_back(BTreeMap::new());
        Self {
            window: window.max(1),
            sessions,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn sessions_held(&self) -> usize {
        self.sessions.len()
    }

    pub fn record(&mut self, model: &str) {
        let cur = self.sessions.back_mut().expect("at least one session");
        *cur.entry(model.to_string()).or_default() += 1;
    }

    /// Opens a new session, dropping the oldest once the window is full.
    pub fn advance_session(&mut self) {
        self.sessions.push_back(BTreeMap::new());
        while self.sessions.len() > self.window {
            self.sessions.pop_front();
        }
    }

    pub fn count(&self, model: &str) -> u64 {
        self.sessions.iter().filter_map(|s| s.get(model)).sum()
    }
}

/// A model that may receive an opportunistic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillCandidate {
    pub name: String,
    pub knee_pct: f64,
    /// `(batch, latency_ms at knee%)`, ascending in batch.
    pub options: Vec<(u32, f64)>,
    /// Slot where the model's next planned run starts; a fill must end by then.
    pub next_planned: Option<usize>,
}

impl FillCandidate {
    /// Single option at the configured batch and runtime.
    pub fn from_config(m: &ModelConfig) -> Self {
        Self {
            name: m.name.clone(),
            knee_pct: m.knee_pct,
            options: vec![(m.batch, m.runtime_ms)],
            next_planned: None,
        }
    }

    /// Grid batches up to `cap`, plus `cap` itself, with latency read at the knee.
    pub fn from_profile(m: &ModelConfig, profile: &ModelProfile, cap: u32) -> Result<Self> {
        let cap = cap.min(profile.max_batch());
        let mut batches: Vec<u32> = GRID_BATCHES.iter().copied().filter(|&b| b <= cap).collect();
        if cap >= 1 && !batches.contains(&cap) {
            batches.push(cap);
        }
        let options = batches
            .into_iter()
            .map(|b| Ok((b, profile.latency(m.knee_pct, b)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: m.name.clone(),
            knee_pct: m.knee_pct,
            options,
            next_planned: None,
        })
    }
}

/// Opportunistic runs starting at `now`.
///
/// Ready models are tried in ascending scoreboard count (ties by name). A
/// model whose knee fits the residual at `now` gets the longest slice over
/// which it keeps fitting (bounded by its next planned run and `horizon`) and
/// the largest batch whose latency fits that slice. New runs are added to
/// `timeline` before the next model is tried.
pub fn dynamic_fill(
    timeline: &mut Timeline,
    scoreboard: &Scoreboard,
    ready: &[FillCandidate],
    now: usize,
    horizon: usize,
) -> Vec<ScheduledRun> {
    let slot_us = timeline.slot_us();
    let mut order: Vec<&FillCandidate> = ready.iter().collect();
    order.sort_by(|a, b| {
        scoreboard
            .count(&a.name)
            .cmp(&scoreboard.count(&b.name))
            .then(a.name.cmp(&b.name))
    });
    let mut out = Vec::new();
    for c in order {
        if timeline.at(now) + c.knee_pct > 100.0 + 1e-9 {
            continue;
        }
        let longest = c
            .options
            .iter()
            .map(|&(_, l)| ms_to_slots(l, slot_us).max(1))
            .max()
            .unwrap_or(0);
        let limit = c.next_planned.unwrap_or(horizon).min(horizon).min(now + longest);
        let slice = timeline.free_run(now, c.knee_pct, limit);
        let pick = c
            .options
            .iter()
            .rev()
            .map(|&(b, l)| (b, ms_to_slots(l, slot_us).max(1)))
            .find(|&(_, len)| len <= slice);
        if let Some((batch, len)) = pick {
            timeline.add(now, len, c.knee_pct);
            out.push(ScheduledRun {
                model: c.name.clone(),
                start_slot: now,
                slots: len,
                gpu_pct: c.knee_pct,
                batch,
                kind: RunKind::Fill,
                window: None,
            });
        }
    }
    out
}

/// Result of repeating a session plan with every model always ready.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoop {
    pub timeline: Timeline,
    pub runs: Vec<ScheduledRun>,
    pub sessions: usize,
}

impl ClosedLoop {
    pub fn utilization(&self) -> f64 {
        self.timeline.mean()
    }

    /// Inferences per second over the whole horizon.
    pub fn throughput(&self) -> f64 {
        let secs = slots_to_ms(self.timeline.len(), self.timeline.slot_us()) / 1000.0;
        if secs == 0.0 {
            return 0.0;
        }
        self.runs.iter().map(|r| r.batch as f64).sum::<f64>() / secs
    }

    pub fn run_counts(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for r in &self.runs {
            *m.entry(r.model.clone()).or_default() += 1;
        }
        m
    }
}

/// Repeats `plan` for `sessions` sessions and fills residual capacity at
/// every session start and run completion, all models always ready.
pub fn closed_loop(plan: &SessionSchedule, candidates: &[FillCandidate], sessions: usize, window: usize) -> ClosedLoop {
    let s_len = plan.session_slots();
    let horizon = s_len * sessions;
    let mut timeline = Timeline::new(0, plan.slot_us());
    let mut runs = Vec::new();
    for k in 0..sessions {
        timeline.extend(&plan.timeline);
        for r in &plan.runs {
            let mut r = r.clone();
            r.start_slot += k * s_len;
            runs.push(r);
        }
    }
    // planned starts per model, ascending
    let mut planned: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in &runs {
        planned.entry(r.model.as_str()).or_default().push(r.start_slot);
    }
    for v in planned.values_mut() {
        v.sort_unstable();
    }
    let planned: BTreeMap<String, Vec<usize>> = planned.into_iter().map(|(k, v)| (k.to_string(), v)).collect();

    let mut events: BTreeSet<usize> = runs.iter().map(|r| r.end_slot()).collect();
    for k in 0..sessions {
        events.insert(k * s_len);
    }
    let mut board = Scoreboard::new(window);
    let mut session = 0;
    let mut recorded_planned = 0;
    // busy-until per model from both planned and fill runs
    let mut fill_busy: BTreeMap<String, usize> = BTreeMap::new();
    while let Some(now) = events.pop_first() {
        if now >= horizon {
            break;
        }
        while now >= (session + 1) * s_len {
            session += 1;
            board.advance_session();
        }
        if now == session * s_len && recorded_planned <= session {
            for r in &plan.runs {
                board.record(&r.model);
            }
            recorded_planned = session + 1;
        }
        let ready: Vec<FillCandidate> = candidates
            .iter()
            .filter(|c| {
                let planned_busy = runs
                    .iter()
                    .any(|r| r.model == c.name && r.start_slot <= now && now < r.end_slot());
                let filling = fill_busy.get(&c.name).is_some_and(|&e| now < e);
                !planned_busy && !filling
            })
            .map(|c| {
                let next = planned.get(&c.name).and_then(|v| v.iter().copied().find(|&s| s >= now));
                FillCandidate {
                    next_planned: next,
                    ..c.clone()
                }
            })
            .collect();
        for r in dynamic_fill(&mut timeline, &board, &ready, now, horizon) {
            board.record(&r.model);
            events.insert(r.end_slot());
            fill_busy.insert(r.model.clone(), r.end_slot());
            runs.push(r);
        }
    }
    runs.sort_by(|a, b| a.start_slot.cmp(&b.start_slot).then(a.model.cmp(&b.model)));
    ClosedLoop {
        timeline,
        runs,
        sessions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::catalog_lookup;
    use crate::schedulers::{dstack_schedule, DstackOptions};

    fn cand(name: &str, knee: f64, options: Vec<(u32, f64)>) -> FillCandidate {
        FillCandidate {
            name: name.into(),
            knee_pct: knee,
            options,
            next_planned: None,
        }
    }

    #[test]
    fn scoreboard_window() {
        let mut s = Scoreboard::new(3);
        s.record("a");
        s.advance_session();
        s.record("a");
        s.record("b");
        s.advance_session();
        s.advance_session();
        assert_eq!(s.sessions_held(), 3);
        assert_eq!(s.count("a"), 1);
        assert_eq!(s.count("b"), 1);
        s.advance_session();
        assert_eq!(s.count("a"), 0);
        assert_eq!(s.count("zzz"), 0);
    }

    #[test]
    fn picks_largest_fitting_batch() {
        let mut tl = Timeline::new(1000, 100);
        tl.add(0, 120, 70.0);
        tl.add(120, 880, 100.0);
        let c = cand("m", 25.0, vec![(4, 6.0), (8, 10.0), (10, 12.5), (16, 20.0)]);
        let runs = dynamic_fill(&mut tl, &Scoreboard::default(), &[c], 0, 1000);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].batch, 8);
        assert_eq!(runs[0].slots, 100);
        assert!((tl.at(0) - 95.0).abs() < 1e-9);
    }

    #[test]
    fn no_fit_is_noop() {
        let mut tl = Timeline::new(100, 100);
        tl.add(0, 100, 90.0);
        let c = vec![cand("a", 20.0, vec![(1, 1.0)]), cand("b", 30.0, vec![(1, 1.0)])];
        assert!(dynamic_fill(&mut tl, &Scoreboard::default(), &c, 0, 100).is_empty());
    }

    #[test]
    fn fewest_runs_first() {
        let mut board = Scoreboard::default();
        for _ in 0..3 {
            board.record("a");
        }
        board.record("b");
        let mut tl = Timeline::new(100, 100);
        // only one of the two fits
        tl.add(0, 100, 40.0);
        let c = vec![cand("a", 50.0, vec![(1, 5.0)]), cand("b", 50.0, vec![(1, 5.0)])];
        let runs = dynamic_fill(&mut tl, &board, &c, 0, 100);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].model, "b");
    }

    #[test]
    fn respects_next_planned() {
        let mut tl = Timeline::new(100, 100);
        let mut c = cand("a", 50.0, vec![(1, 2.0), (2, 4.0)]);
        c.next_planned = Some(30);
        let runs = dynamic_fill(&mut tl, &Scoreboard::default(), &[c], 0, 100);
        assert_eq!((runs[0].batch, runs[0].slots), (1, 20));
    }

    #[test]
    fn closed_loop_keeps_invariants() {
        let models: Vec<ModelConfig> = ["Alexnet", "ResNet-50", "VGG-19"]
            .iter()
            .map(|n| catalog_lookup(n).unwrap())
            .collect();
        let plan = dstack_schedule(&models, &DstackOptions::default()).unwrap().schedule;
        let cands: Vec<FillCandidate> = models.iter().map(FillCandidate::from_config).collect();
        let cl = closed_loop(&plan, &cands, 4, DEFAULT_SCOREBOARD_WINDOW);
        assert!(cl.timeline.max() <= 100.0 + 1e-9);
        assert!(cl.utilization() >= plan.utilization());
        for (i, a) in cl.runs.iter().enumerate() {
            for b in &cl.runs[i + 1..] {
                assert!(a.model != b.model || a.end_slot() <= b.start_slot || b.end_slot() <= a.start_slot);
            }
        }
    }

    #[test]
    fn scoreboard_fairness() {
        // identical models, always ready, 25 sessions
        let models: Vec<ModelConfig> = (0..3)
            .map(|i| ModelConfig::new(&format!("m{i}"), 40.0, 20.0, 1, 5.0))
            .collect();
        let plan = dstack_schedule(&models, &DstackOptions::default()).unwrap().schedule;
        let cands: Vec<FillCandidate> = models.iter().map(FillCandidate::from_config).collect();
        let cl = closed_loop(&plan, &cands, 25, DEFAULT_SCOREBOARD_WINDOW);
        let counts: Vec<u64> = cl.run_counts().values().copied().collect();
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        // one windowful: the most runs any model can make in W sessions
        let per_session = (20.0f64 / 5.0).ceil() as u64;
        assert!(spread <= per_session * DEFAULT_SCOREBOARD_WINDOW as u64, "{counts:?}");
    }
}
