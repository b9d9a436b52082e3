use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{ModelConfig, ProfileSet};

use super::{ms_to_slots, session_len, RunKind, ScheduledRun, SessionSchedule, Timeline, DEFAULT_SLOT_US};

#[derive(Debug, Clone, Copy)]
pub struct DstackOptions<'a> {
    pub slot_us: u32,
    /// Profiles used to re-derive latency when retrying below the knee.
    pub profiles: Option<&'a ProfileSet>,
    pub reduced_retry: bool,
}

impl Default for DstackOptions<'_> {
    fn default() -> Self {
        Self {
            slot_us: DEFAULT_SLOT_US,
            profiles: None,
            reduced_retry: true,
        }
    }
}

/// One step of the EDF pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementStep {
    pub model: String,
    pub window: usize,
    pub deadline_slot: usize,
    /// Smallest deadline among runs not yet handled at this step, this one included.
    pub min_pending_deadline: usize,
    pub start_slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstackOutcome {
    pub schedule: SessionSchedule,
    pub trace: Vec<PlacementStep>,
    /// Windows left without a run, as `(model, window)`.
    pub unplaced: Vec<(String, usize)>,
    /// Runs placed below the knee, as `(model, window, gpu_pct)`.
    pub reduced: Vec<(String, usize, f64)>,
    /// True when the EDF pass alone placed every run.
    pub edf_only: bool,
}

impl DstackOutcome {
    pub fn is_oversubscribed(&self) -> bool {
        !self.unplaced.is_empty()
    }

    pub fn into_result(self) -> Result<SessionSchedule> {
        if self.is_oversubscribed() {
            let list: Vec<String> = self.unplaced.iter().map(|(m, w)| format!("{m}[{w}]")).collect();
            Err(Error::Oversubscribed(format!("no placement for {}", list.join(", "))))
        } else {
            Ok(self.schedule)
        }
    }
}

/// Latest start in `[window_start, window_end - len]` where `pct` fits, scanning backwards.
pub fn start_late(timeline: &Timeline, pct: f64, len: usize, window_start: usize, window_end: usize) -> Option<usize> {
    let window_end = window_end.min(timeline.len());
    if len == 0 || window_start + len > window_end {
        return None;
    }
    (window_start..=window_end - len)
        .rev()
        .find(|&s| timeline.fits(s, len, pct))
}

fn start_early(timeline: &Timeline, pct: f64, len: usize, window_start: usize, window_end: usize) -> Option<usize> {
    let window_end = window_end.min(timeline.len());
    if len == 0 || window_start + len > window_end {
        return None;
    }
    (window_start..=window_end - len).find(|&s| timeline.fits(s, len, pct))
}

struct Task {
    model: usize,
    window: usize,
    ws: usize,
    we: usize,
    len: usize,
    pct: f64,
    start: Option<usize>,
}

/// Shares of the knee tried, in order, when per-run retries still leave runs unplaced.
const GLOBAL_SCALES: [f64; 5] = [0.9, 0.8, 0.7, 0.6, 0.5];

/// EDF placement, then Start-Late on alternate repeats model by model, then
/// an optional retry below the knee. If runs remain unplaced and profiles are
/// available, every model is scaled below its knee by a common factor until
/// the session fits. Admission rejects `L_i > SLO_i`.
pub fn dstack_schedule(models: &[ModelConfig], opts: &DstackOptions) -> Result<DstackOutcome> {
    if models.is_empty() {
        return Err(Error::EmptyInput("models"));
    }
    for m in models {
        m.validate()?;
    }
    let out = place(models, opts);
    let profiles = match opts.profiles {
        Some(p) if out.is_oversubscribed() && opts.reduced_retry => p,
        _ => return Ok(out),
    };
    for f in GLOBAL_SCALES {
        let scaled: Vec<ModelConfig> = models.iter().map(|m| scale_model(m, profiles, f)).collect();
        let mut attempt = place(&scaled, opts);
        if attempt.is_oversubscribed() {
            continue;
        }
        attempt.reduced = attempt
            .schedule
            .runs
            .iter()
            .filter_map(|r| {
                let knee = models.iter().find(|m| m.name == r.model)?.knee_pct;
                (r.gpu_pct < knee - 1e-9).then(|| (r.model.clone(), r.window.unwrap_or(0), r.gpu_pct))
            })
            .collect();
        return Ok(attempt);
    }
    Ok(out)
}

/// `m` at `f` of its knee on the 10% grid, with latency from its profile.
/// Models without a profile, or too slow at the reduced share, stay at the knee.
fn scale_model(m: &ModelConfig, profiles: &ProfileSet, f: f64) -> ModelConfig {
    let Some(profile) = profiles.get(&m.name) else {
        return m.clone();
    };
    let pct = ((m.knee_pct * f / 10.0).round() * 10.0).max(10.0);
    let batch = m.batch.min(profile.max_batch());
    match profile.latency(pct, batch) {
        Ok(l) if l <= m.slo_ms => ModelConfig {
            knee_pct: pct,
            runtime_ms: l,
            ..m.clone()
        },
        _ => m.clone(),
    }
}

fn place(models: &[ModelConfig], opts: &DstackOptions) -> DstackOutcome {
    let slot_us = opts.slot_us;
    let session_ms = session_len(models);
    let mut tl = Timeline::new(ms_to_slots(session_ms, slot_us), slot_us);
    let n_slots = tl.len();

    let mut tasks = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let reps = (session_ms / m.slo_ms + 1e-9).floor() as usize;
        let len = ms_to_slots(m.runtime_ms, slot_us).max(1);
        for j in 0..reps {
            tasks.push(Task {
                model: mi,
                window: j,
                ws: ms_to_slots(j as f64 * m.slo_ms, slot_us),
                we: ms_to_slots((j + 1) as f64 * m.slo_ms, slot_us).min(n_slots),
                len,
                pct: m.knee_pct,
                start: None,
            });
        }
    }

    let edf_key = |t: &Task| (t.we, t.len, models[t.model].name.clone(), t.window);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| edf_key(&tasks[i]));

    let mut trace = Vec::with_capacity(order.len());
    for (step, &i) in order.iter().enumerate() {
        let min_pending = order[step..].iter().map(|&k| tasks[k].we).min().unwrap_or(0);
        let t = &mut tasks[i];
        t.start = start_early(&tl, t.pct, t.len, t.ws, t.we);
        if let Some(s) = t.start {
            tl.add(s, t.len, t.pct);
        }
        trace.push(PlacementStep {
            model: models[t.model].name.clone(),
            window: t.window,
            deadline_slot: t.we,
            min_pending_deadline: min_pending,
            start_slot: t.start,
        });
    }

    let pending = |tasks: &[Task]| tasks.iter().any(|t| t.start.is_none());
    let edf_only = !pending(&tasks);

    if !edf_only {
        let mut model_order: Vec<usize> = (0..models.len()).collect();
        model_order.sort_by(|&a, &b| {
            let (ma, mb) = (&models[a], &models[b]);
            ma.slo_ms
                .total_cmp(&mb.slo_ms)
                .then(ma.runtime_ms.total_cmp(&mb.runtime_ms))
                .then(ma.name.cmp(&mb.name))
        });
        for &mi in &model_order {
            // Push odd repeats late; even ones keep their EDF slot.
            for t in &mut tasks {
                if t.model != mi || t.window % 2 == 0 {
                    continue;
                }
                let Some(old) = t.start else { continue };
                tl.remove(old, t.len, t.pct);
                let new = start_late(&tl, t.pct, t.len, t.ws, t.we).unwrap_or(old);
                tl.add(new, t.len, t.pct);
                t.start = Some(new);
            }
            retry_pending(&mut tasks, &order, &mut tl);
            if !pending(&tasks) {
                break;
            }
        }
    }

    let mut reduced = Vec::new();
    if pending(&tasks) && opts.reduced_retry {
        if let Some(profiles) = opts.profiles {
            for &i in &order {
                if tasks[i].start.is_some() {
                    continue;
                }
                let m = &models[tasks[i].model];
                let Some(profile) = profiles.get(&m.name) else { continue };
                let batch = m.batch.min(profile.max_batch());
                let mut pct = m.knee_pct - 10.0;
                while pct >= 10.0 - 1e-9 {
                    let Ok(l) = profile.latency(pct, batch) else { break };
                    let len = ms_to_slots(l, slot_us).max(1);
                    let t = &tasks[i];
                    if let Some(s) = start_late(&tl, pct, len, t.ws, t.we) {
                        tl.add(s, len, pct);
                        let t = &mut tasks[i];
                        t.start = Some(s);
                        t.len = len;
                        t.pct = pct;
                        reduced.push((m.name.clone(), t.window, pct));
                        break;
                    }
                    pct -= 10.0;
                }
            }
        }
    }

    let mut schedule = SessionSchedule {
        session_len_ms: session_ms,
        runs: Vec::with_capacity(tasks.len()),
        timeline: tl,
    };
    let mut unplaced = Vec::new();
    for &i in &order {
        let t = &tasks[i];
        let m = &models[t.model];
        match t.start {
            Some(s) => schedule.runs.push(ScheduledRun {
                model: m.name.clone(),
                start_slot: s,
                slots: t.len,
                gpu_pct: t.pct,
                batch: m.batch,
                kind: RunKind::Planned,
                window: Some(t.window),
            }),
            None => unplaced.push((m.name.clone(), t.window)),
        }
    }
    schedule
        .runs
        .sort_by(|a, b| a.start_slot.cmp(&b.start_slot).then(a.model.cmp(&b.model)));
    DstackOutcome {
        schedule,
        trace,
        unplaced,
        reduced,
        edf_only,
    }
}

fn retry_pending(tasks: &mut [Task], order: &[usize], tl: &mut Timeline) {
    for &i in order {
        let t = &tasks[i];
        if t.start.is_some() {
            continue;
        }
        if let Some(s) = start_late(tl, t.pct, t.len, t.ws, t.we) {
            tl.add(s, t.len, t.pct);
            tasks[i].start = Some(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::catalog_lookup;
    use proptest::prelude::*;

    fn named(names: &[&str]) -> Vec<ModelConfig> {
        names.iter().map(|n| catalog_lookup(n).unwrap()).collect()
    }

    fn span(s: &SessionSchedule, model: &str) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = s
            .runs_of(model)
            .map(|r| (r.start_ms(100), r.start_ms(100) + r.duration_ms(100)))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    #[test]
    fn trio_worked_example() {
        let out = dstack_schedule(&named(&["Alexnet", "ResNet-50", "VGG-19"]), &DstackOptions::default()).unwrap();
        assert!(!out.is_oversubscribed());
        assert!(!out.edf_only);
        let s = &out.schedule;
        assert_eq!(
            span(s, "Alexnet"),
            vec![(0.0, 8.0), (42.0, 50.0), (50.0, 58.0), (92.0, 100.0)]
        );
        assert_eq!(span(s, "ResNet-50"), vec![(0.0, 28.0), (72.0, 100.0)]);
        assert_eq!(span(s, "VGG-19"), vec![(37.0, 92.0)]);
        assert!((s.utilization() - 59.5).abs() < 1e-9);
        assert!(s.timeline.max() <= 100.0 + 1e-9);
    }

    #[test]
    fn single_model() {
        let m = vec![ModelConfig::new("x", 40.0, 30.0, 4, 12.0)];
        let out = dstack_schedule(&m, &DstackOptions::default()).unwrap();
        assert!(out.edf_only);
        assert_eq!(out.schedule.runs.len(), 1);
        assert!(out.schedule.runs[0].end_slot() <= 300);
    }

    #[test]
    fn admission_rejects_slow_model() {
        let m = vec![ModelConfig::new("slow", 40.0, 30.0, 4, 31.0)];
        assert!(matches!(
            dstack_schedule(&m, &DstackOptions::default()),
            Err(Error::Admission { .. })
        ));
    }

    #[test]
    fn start_late_examples() {
        let tl = Timeline::new(1000, 100);
        assert_eq!(start_late(&tl, 50.0, 550, 0, 1000), Some(450));
        let mut full = Timeline::new(1000, 100);
        full.add(0, 1000, 100.0);
        assert_eq!(start_late(&full, 10.0, 10, 0, 1000), None);
        let mut sixty = Timeline::new(1000, 100);
        sixty.add(0, 1000, 60.0);
        assert_eq!(start_late(&sixty, 40.0, 550, 0, 1000), Some(450));
    }

    #[test]
    fn oversubscribed_is_a_value() {
        let m = vec![
            ModelConfig::new("a", 60.0, 10.0, 1, 9.0),
            ModelConfig::new("b", 60.0, 10.0, 1, 9.0),
        ];
        let out = dstack_schedule(&m, &DstackOptions::default()).unwrap();
        assert!(out.is_oversubscribed());
        assert!(matches!(out.into_result(), Err(Error::Oversubscribed(_))));
    }

    /// Seven-model mix at the batch each model fills within its SLO.
    fn seven(profiles: &ProfileSet) -> Vec<ModelConfig> {
        [
            ("Alexnet", 11),
            ("Mobilenet", 11),
            ("ResNet-18", 11),
            ("ResNet-50", 11),
            ("Inception", 11),
            ("ResNeXt-50", 8),
            ("VGG-19", 8),
        ]
        .iter()
        .map(|&(n, b)| {
            let m = catalog_lookup(n).unwrap();
            let l = profiles.get(n).unwrap().latency(m.knee_pct, b).unwrap();
            ModelConfig {
                batch: b,
                runtime_ms: l,
                ..m
            }
        })
        .collect()
    }

    #[test]
    fn global_scale_places_seven_models() {
        let profiles = crate::profiles::catalog_profiles();
        let models = seven(&profiles);
        let plain = dstack_schedule(&models, &DstackOptions::default()).unwrap();
        assert!(plain.is_oversubscribed());
        let opts = DstackOptions {
            profiles: Some(&profiles),
            ..Default::default()
        };
        let out = dstack_schedule(&models, &opts).unwrap();
        assert!(!out.is_oversubscribed(), "{:?}", out.unplaced);
        assert!(!out.reduced.is_empty());
        let s = &out.schedule;
        assert!(s.timeline.max() <= 100.0 + 1e-9);
        assert!(s.window_misses(&models).is_empty());
        for r in &s.runs {
            let m = models.iter().find(|m| m.name == r.model).unwrap();
            assert!(r.gpu_pct <= m.knee_pct);
            assert!(r.duration_ms(100) <= m.slo_ms);
        }
    }

    #[test]
    fn global_scale_off_without_retry() {
        let profiles = crate::profiles::catalog_profiles();
        let models = seven(&profiles);
        let opts = DstackOptions {
            profiles: Some(&profiles),
            reduced_retry: false,
            ..Default::default()
        };
        assert!(dstack_schedule(&models, &opts).unwrap().is_oversubscribed());
    }

    fn instance() -> impl Strategy<Value = Vec<ModelConfig>> {
        proptest::collection::vec((1u32..=9, 0usize..4, 1u32..=100), 2..=6).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (knee, slo_i, frac))| {
                    let slo = [10.0, 20.0, 25.0, 50.0][slo_i];
                    let l = (slo * frac as f64 / 100.0 * 10.0).round().max(1.0) / 10.0;
                    ModelConfig::new(&format!("m{i}"), knee as f64 * 10.0, slo, 1, l)
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn occupancy_and_windows(models in instance()) {
            let out = dstack_schedule(&models, &DstackOptions::default()).unwrap();
            let s = &out.schedule;
            prop_assert!(s.timeline.max() <= 100.0 + 1e-6);
            prop_assert!(s.self_overlaps().is_empty());
            let misses = s.window_misses(&models);
            if !out.is_oversubscribed() {
                prop_assert!(misses.is_empty(), "{:?}", misses);
            } else {
                prop_assert_eq!(misses.len(), out.unplaced.len());
            }
            for step in &out.trace {
                prop_assert_eq!(step.deadline_slot, step.min_pending_deadline);
            }
        }

        #[test]
        fn start_late_is_maximal(occ in proptest::collection::vec(0u32..=10, 1..200), pct in 1u32..=10, len in 1usize..40, a in 0usize..200, b in 0usize..200) {
            let mut tl = Timeline::new(occ.len(), 100);
            for (i, &o) in occ.iter().enumerate() {
                tl.add(i, 1, o as f64 * 10.0);
            }
            let (ws, we) = (a.min(b).min(occ.len()), a.max(b).min(occ.len()));
            let pct = pct as f64 * 10.0;
            let brute = (ws..we).filter(|&s| s + len <= we && (s..s + len).all(|k| occ[k] as f64 * 10.0 + pct <= 100.0)).max();
            prop_assert_eq!(start_late(&tl, pct, len, ws, we), brute);
        }
    }
}
