//! Kernel-granularity oracle with preemption at slot boundaries, and a
//! kernel-level replay used to compare it with model-level schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{knee_shape, ModelConfig};

use super::{
    closed_loop, dstack_schedule, ms_to_slots, slots_to_ms, static_spatial, temporal_schedule, DstackOptions,
    FillCandidate, Timeline, DEFAULT_SCOREBOARD_WINDOW,
};

/// Largest number of candidate subsets examined in one slot.
pub const IDEAL_GUARD: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub gpu_pct: f64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTrace {
    pub model: String,
    pub kernels: Vec<Kernel>,
    #[serde(default = "one")]
    pub batch: u32,
    /// Deadline relative to the start of each inference; used to break ties.
    #[serde(default)]
    pub slo_ms: Option<f64>,
}

fn one() -> u32 {
    1
}

impl KernelTrace {
    pub fn runtime_ms(&self) -> f64 {
        self.kernels.iter().map(|k| k.duration_ms).sum()
    }

    pub fn knee_pct(&self) -> f64 {
        self.kernels.iter().map(|k| k.gpu_pct).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Workload {
    /// Every model restarts as soon as it finishes, until the horizon.
    Closed { horizon_ms: f64 },
    /// Every model runs its trace once.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealResult {
    pub timeline: Timeline,
    /// Finished inferences per model.
    pub completions: BTreeMap<String, u64>,
    /// Slots over which utilization and throughput are measured.
    pub span_slots: usize,
}

impl IdealResult {
    pub fn utilization(&self) -> f64 {
        if self.span_slots == 0 {
            return 0.0;
        }
        self.timeline.slots()[..self.span_slots].iter().sum::<f64>() / self.span_slots as f64
    }

    pub fn throughput(&self, batches: &BTreeMap<String, u32>) -> f64 {
        let secs = slots_to_ms(self.span_slots, self.timeline.slot_us()) / 1000.0;
        if secs == 0.0 {
            return 0.0;
        }
        self.completions
            .iter()
            .map(|(m, &c)| c as f64 * batches.get(m).copied().unwrap_or(1) as f64)
            .sum::<f64>()
            / secs
    }
}

/// Three convolutions, two pooling and two linear kernels. Convolutions run
/// at the model knee, pooling at 10%, linear layers at half the knee
/// (rounded to 10%). Pooling and linear kernels each take 4% of the runtime.
pub fn convnet_kernels(knee_pct: f64, runtime_ms: f64, slot_us: u32) -> Vec<Kernel> {
    let total = ms_to_slots(runtime_ms, slot_us).max(7);
    let small = ((total as f64 * 0.04).round() as usize).max(1);
    let conv_total = total - 4 * small;
    let conv = [
        conv_total / 3 + usize::from(!conv_total.is_multiple_of(3)),
        conv_total / 3 + usize::from(conv_total % 3 > 1),
        conv_total / 3,
    ];
    let fc_pct = ((knee_pct / 2.0 / 10.0).round() * 10.0).max(10.0);
    let k = |pct: f64, slots: usize| Kernel {
        gpu_pct: pct,
        duration_ms: slots_to_ms(slots, slot_us),
    };
    vec![
        k(knee_pct, conv[0]),
        k(10.0, small),
        k(knee_pct, conv[1]),
        k(10.0, small),
        k(knee_pct, conv[2]),
        k(fc_pct, small),
        k(fc_pct, small),
    ]
}

struct Cursor {
    kernel: usize,
    remaining: usize,
    started: usize,
    done: bool,
}

/// Per slot, runs the subset of eligible kernels (each model's next kernel)
/// with the largest GPU% sum not above 100. Ties prefer models whose current
/// inference has the earliest deadline, then name order.
pub fn ideal_schedule(traces: &[KernelTrace], slot_us: u32, workload: Workload) -> Result<IdealResult> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("kernel traces"));
    }
    for t in traces {
        if t.kernels.is_empty() {
            return Err(Error::InvalidParameter(format!("model {} has no kernels", t.model)));
        }
        if t.kernels
            .iter()
            .any(|k| !(k.gpu_pct > 0.0 && k.gpu_pct <= 100.0) || !(k.duration_ms > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "model {}: kernel GPU% must be in (0, 100] and durations positive",
                t.model
            )));
        }
    }
    let n = traces.len();
    let candidates: u128 = 1u128.checked_shl(n as u32).unwrap_or(u128::MAX);
    if candidates > IDEAL_GUARD {
        return Err(Error::GuardExceeded {
            candidates,
            limit: IDEAL_GUARD,
        });
    }
    let durations: Vec<Vec<usize>> = traces
        .iter()
        .map(|t| {
            t.kernels
                .iter()
                .map(|k| ms_to_slots(k.duration_ms, slot_us).max(1))
                .collect()
        })
        .collect();
    let slo_slots: Vec<usize> = traces
        .iter()
        .zip(&durations)
        .map(|(t, d)| match t.slo_ms {
            Some(s) => ms_to_slots(s, slot_us),
            None => d.iter().sum(),
        })
        .collect();
    let (limit, closed) = match workload {
        Workload::Closed { horizon_ms } => (ms_to_slots(horizon_ms, slot_us), true),
        Workload::Once => (durations.iter().map(|d| d.iter().sum::<usize>()).sum(), false),
    };
    let mut cur: Vec<Cursor> = durations
        .iter()
        .map(|d| Cursor {
            kernel: 0,
            remaining: d[0],
            started: 0,
            done: false,
        })
        .collect();
    let mut completions: BTreeMap<String, u64> = traces.iter().map(|t| (t.model.clone(), 0)).collect();
    let mut occ = Vec::with_capacity(limit);
    let mut span = 0;

    for slot in 0..limit {
        let active: Vec<usize> = (0..n).filter(|&i| !cur[i].done).collect();
        if active.is_empty() {
            break;
        }
        // priority order: earliest deadline first, then name
        let mut prio = active.clone();
        prio.sort_by(|&a, &b| {
            (cur[a].started + slo_slots[a])
                .cmp(&(cur[b].started + slo_slots[b]))
                .then(traces[a].model.cmp(&traces[b].model))
        });
        let pcts: Vec<f64> = prio.iter().map(|&i| traces[i].kernels[cur[i].kernel].gpu_pct).collect();
        let m = prio.len();
        let mut best_mask = 0usize;
        let mut best_sum = 0.0;
        let mut best_key = 0usize;
        for mask in 1usize..(1 << m) {
            let mut sum = 0.0;
            let mut key = 0usize;
            for (bit, p) in pcts.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    sum += p;
                    key |= 1 << (m - 1 - bit);
                }
            }
            if sum > 100.0 + 1e-9 {
                continue;
            }
            if sum > best_sum + 1e-9 || ((sum - best_sum).abs() <= 1e-9 && key > best_key) {
                best_mask = mask;
                best_sum = sum;
                best_key = key;
            }
        }
        occ.push(best_sum);
        if best_sum > 0.0 {
            span = slot + 1;
        }
        for (bit, &i) in prio.iter().enumerate() {
            if best_mask >> bit & 1 == 0 {
                continue;
            }
            let c = &mut cur[i];
            c.remaining -= 1;
            if c.remaining == 0 {
                c.kernel += 1;
                if c.kernel == durations[i].len() {
                    *completions.get_mut(&traces[i].model).expect("known model") += 1;
                    if closed {
                        c.kernel = 0;
                        c.started = slot + 1;
                    } else {
                        c.done = true;
                        continue;
                    }
                }
                c.remaining = durations[i][c.kernel];
            }
        }
    }
    let span_slots = if closed { limit } else { span };
    occ.resize(occ.len().max(span_slots), 0.0);
    let mut timeline = Timeline::new(0, slot_us);
    timeline.extend(&Timeline { slot_us, occ });
    Ok(IdealResult {
        timeline,
        completions,
        span_slots,
    })
}

/// Duration of one kernel when its model holds `alloc` GPU%.
fn kernel_slots(k: &Kernel, alloc: f64, slot_us: u32) -> usize {
    let base = k.duration_ms;
    let ms = if alloc + 1e-9 >= k.gpu_pct {
        base
    } else {
        knee_shape(base / 2.0, k.gpu_pct, alloc)
    };
    ms_to_slots(ms, slot_us).max(1)
}

/// Adds the kernel-level occupancy of one model run at `alloc` GPU% starting
/// at `start`. Each kernel uses `min(alloc, kernel GPU%)`. Returns the end slot.
fn replay_run(tl: &mut Timeline, trace: &KernelTrace, alloc: f64, start: usize) -> usize {
    let mut t = start;
    for k in &trace.kernels {
        let len = kernel_slots(k, alloc, tl.slot_us());
        tl.add(t, len, k.gpu_pct.min(alloc));
        t += len;
    }
    t
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scheduler: String,
    /// Kernel-level GPU utilization, percent.
    pub utilization: f64,
    /// Inferences per second.
    pub throughput: f64,
}

/// A small instance for the ideal comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealInstance {
    pub models: Vec<ModelConfig>,
    /// Explicit kernel lists; models without one get [`convnet_kernels`].
    #[serde(default)]
    pub kernels: BTreeMap<String, Vec<Kernel>>,
    pub horizon_ms: f64,
    #[serde(default = "default_slot")]
    pub slot_us: u32,
}

fn default_slot() -> u32 {
    super::DEFAULT_SLOT_US
}

impl IdealInstance {
    pub fn traces(&self) -> Vec<KernelTrace> {
        self.models
            .iter()
            .map(|m| KernelTrace {
                model: m.name.clone(),
                kernels: self
                    .kernels
                    .get(&m.name)
                    .cloned()
                    .unwrap_or_else(|| convnet_kernels(m.knee_pct, m.runtime_ms, self.slot_us)),
                batch: m.batch,
                slo_ms: Some(m.slo_ms),
            })
            .collect()
    }
}

/// Temporal, static spatial, D-STACK and the ideal oracle on one instance,
/// all measured at kernel level over the same horizon.
pub fn ideal_compare(inst: &IdealInstance) -> Result<Vec<CompareRow>> {
    if inst.models.is_empty() {
        return Err(Error::EmptyInput("models"));
    }
    let slot_us = inst.slot_us;
    let horizon = ms_to_slots(inst.horizon_ms, slot_us);
    let traces = inst.traces();
    let batches: BTreeMap<String, u32> = inst.models.iter().map(|m| (m.name.clone(), m.batch)).collect();
    let secs = slots_to_ms(horizon, slot_us) / 1000.0;
    let row = |name: &str, tl: &Timeline, done: f64| CompareRow {
        scheduler: name.to_string(),
        utilization: tl.slots()[..horizon].iter().sum::<f64>() / horizon.max(1) as f64,
        throughput: if secs > 0.0 { done / secs } else { 0.0 },
    };
    let mut rows = Vec::new();

    // temporal: sessions repeated back to back, each run holds the whole GPU
    let session = super::session_len(&inst.models);
    let temporal = temporal_schedule(&inst.models, session, slot_us);
    let s_len = temporal.session_slots().max(1);
    let mut tl = Timeline::new(horizon + s_len * 2, slot_us);
    let mut done = 0.0;
    let mut k = 0;
    while k * s_len < horizon {
        for r in &temporal.runs {
            let tr = &traces[inst.models.iter().position(|m| m.name == r.model).expect("model")];
            let end = replay_run(&mut tl, tr, 100.0, r.start_slot + k * s_len);
            if end <= horizon {
                done += r.batch as f64;
            }
        }
        k += 1;
    }
    rows.push(row("temporal", &tl, done));

    // static spatial: each model loops on its own partition
    let alloc = static_spatial(&inst.models.iter().map(|m| m.knee_pct).collect::<Vec<_>>());
    let mut tl = Timeline::new(horizon * 2 + 1, slot_us);
    let mut done = 0.0;
    for ((m, tr), a) in inst.models.iter().zip(&traces).zip(alloc) {
        let mut t = 0;
        while t < horizon {
            let end = replay_run(&mut tl, tr, a, t);
            if end <= horizon {
                done += m.batch as f64;
            }
            t = end;
        }
    }
    rows.push(row("static_spatial", &tl, done));

    // D-STACK: session plan plus fill, always ready, runs at knee
    let plan = dstack_schedule(
        &inst.models,
        &DstackOptions {
            slot_us,
            ..DstackOptions::default()
        },
    )?
    .into_result()?;
    let cands: Vec<FillCandidate> = inst.models.iter().map(FillCandidate::from_config).collect();
    let sessions = horizon.div_ceil(plan.session_slots().max(1));
    let cl = closed_loop(&plan, &cands, sessions, DEFAULT_SCOREBOARD_WINDOW);
    let mut tl = Timeline::new(horizon + s_len * 2, slot_us);
    let mut done = 0.0;
    for r in &cl.runs {
        let tr = &traces[inst.models.iter().position(|m| m.name == r.model).expect("model")];
        let end = replay_run(&mut tl, tr, r.gpu_pct, r.start_slot);
        if end <= horizon {
            done += r.batch as f64;
        }
    }
    rows.push(row("dstack", &tl, done));

    let ideal = ideal_schedule(
        &traces,
        slot_us,
        Workload::Closed {
            horizon_ms: inst.horizon_ms,
        },
    )?;
    rows.push(CompareRow {
        scheduler: "ideal".into(),
        utilization: ideal.utilization(),
        throughput: ideal.throughput(&batches),
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, pct: f64, ms: f64) -> KernelTrace {
        KernelTrace {
            model: name.into(),
            kernels: vec![Kernel {
                gpu_pct: pct,
                duration_ms: ms,
            }],
            batch: 1,
            slo_ms: None,
        }
    }

    #[test]
    fn single_kernel_once() {
        let r = ideal_schedule(&[single("a", 50.0, 1.0)], 100, Workload::Once).unwrap();
        assert_eq!(r.span_slots, 10);
        assert!((r.utilization() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn two_halves_co_scheduled() {
        let r = ideal_schedule(&[single("a", 50.0, 1.0), single("b", 50.0, 1.0)], 100, Workload::Once).unwrap();
        assert_eq!(r.span_slots, 10);
        assert!(r.timeline.slots()[..10].iter().all(|&o| (o - 100.0).abs() < 1e-9));
    }

    #[test]
    fn preempts_for_better_packing() {
        // 70 + 30 beats 70 + 20 when both 30 and 20 are eligible
        let r = ideal_schedule(
            &[single("a", 70.0, 1.0), single("b", 30.0, 1.0), single("c", 20.0, 1.0)],
            100,
            Workload::Once,
        )
        .unwrap();
        assert!((r.timeline.at(0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let traces: Vec<KernelTrace> = (0..21).map(|i| single(&format!("m{i}"), 5.0, 1.0)).collect();
        assert!(matches!(
            ideal_schedule(&traces, 100, Workload::Once),
            Err(Error::GuardExceeded { .. })
        ));
    }

    #[test]
    fn convnet_trace_shape() {
        let k = convnet_kernels(30.0, 10.3, 100);
        assert_eq!(k.len(), 7);
        let total: f64 = k.iter().map(|k| k.duration_ms).sum();
        assert!((total - 10.3).abs() < 1e-9);
        assert_eq!(k.iter().filter(|k| k.gpu_pct == 30.0).count(), 3);
    }

    #[test]
    fn single_model_instance_all_equal() {
        let inst = IdealInstance {
            models: vec![ModelConfig::new("only", 40.0, 20.0, 1, 10.0)],
            kernels: BTreeMap::from([(
                "only".to_string(),
                vec![Kernel {
                    gpu_pct: 40.0,
                    duration_ms: 10.0,
                }],
            )]),
            horizon_ms: 200.0,
            slot_us: 100,
        };
        let rows = ideal_compare(&inst).unwrap();
        for r in &rows {
            assert!((r.utilization - 40.0).abs() < 1e-6, "{r:?}");
            assert!((r.throughput - 100.0).abs() < 1e-6, "{r:?}");
        }
    }
}
