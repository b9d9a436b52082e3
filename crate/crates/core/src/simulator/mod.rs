//! Discrete-event simulation of request streams on one or more GPUs.

mod arrivals;
mod engine;
mod gpu;
mod metrics;
mod placement;
mod probe;
mod scenario;

pub use arrivals::{arrival_times, stream_seed};
pub use gpu::{apply_reconfiguration, complete_reconfiguration, GpuState, Instance, PendingReconfig};
pub use metrics::{GpuMetrics, ModelMetrics, PhaseMetrics, ReconfigRecord, RunRecord, SimMetrics};
pub use placement::{demand, place_multi_gpu};
pub use probe::{online_knee_probe, ProbeResult, PROBE_TOLERANCE};
pub use scenario::{
    ArrivalProcess, ModelSpec, Phase, Placement, ReconfigEvent, ReconfigMode, ResolvedModel, Scenario, SchedulerKind,
    DEFAULT_LOAD_TIME_MS, DEFAULT_SWITCHOVER_MS, NOMINAL_START_PCT,
};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;
use crate::schedulers::Timeline;

use engine::{Engine, GpuInput};

/// Runs one scenario to completion.
pub fn run(scenario: &Scenario) -> Result<SimMetrics> {
    scenario.validate()?;
    let placement = if scenario.scheduler == SchedulerKind::Exclusive {
        Placement::Exclusive
    } else {
        scenario.placement
    };
    // replicas split each stream evenly
    let resolved = if placement == Placement::Replicate && scenario.gpu_count > 1 {
        let mut s = scenario.clone();
        for m in &mut s.models {
            m.rate /= scenario.gpu_count as f64;
        }
        s.resolve()?
    } else {
        scenario.resolve()?
    };
    let configs: Vec<_> = resolved.iter().map(|r| r.config.clone()).collect();
    let assign = place_multi_gpu(&configs, scenario.gpu_count, placement)?;

    let slot_us = scenario.slot_us;
    let dur_slots = scenario.duration_us().div_ceil(slot_us as u64) as usize;
    let bounds = scenario.phase_bounds();
    let n_phases = bounds.len() - 1;

    let mut models: Vec<ModelMetrics> = resolved
        .iter()
        .map(|r| ModelMetrics {
            name: r.config.name.clone(),
            gpu_pct: r.config.knee_pct,
            batch: r.config.batch,
            runtime_ms: r.config.runtime_ms,
            slo_ms: r.config.slo_ms,
            probes: r.probes.clone(),
            ..Default::default()
        })
        .collect();
    let mut lat_sum = vec![0u128; resolved.len()];
    let mut phase_done = vec![vec![0u64; n_phases]; resolved.len()];
    let mut gpus = Vec::with_capacity(assign.len());
    let mut runs = Vec::new();
    let mut reconfigurations = Vec::new();

    for (g, local) in assign.iter().enumerate() {
        if local.is_empty() {
            gpus.push(GpuMetrics {
                models: Vec::new(),
                utilization: 0.0,
                timeline: Timeline::new(dur_slots, slot_us),
            });
            continue;
        }
        let input = GpuInput {
            gpu: g,
            models: local.iter().map(|&i| &resolved[i]).collect(),
            arrivals: local
                .iter()
                .map(|&i| {
                    let r = &resolved[i];
                    arrival_times(
                        scenario,
                        &scenario.models[i].name,
                        r.rate,
                        stream_seed(scenario.seed, i, g),
                    )
                })
                .collect(),
            reconfigurations: scenario
                .reconfigurations
                .iter()
                .filter_map(|e| {
                    local
                        .iter()
                        .find(|&&i| resolved[i].config.name.eq_ignore_ascii_case(&e.model))
                        .map(|&i| ReconfigEvent {
                            model: resolved[i].config.name.clone(),
                            ..e.clone()
                        })
                })
                .collect(),
        };
        let out = Engine::new(scenario, input, scenario.scheduler)?.run()?;
        for (&i, c) in local.iter().zip(&out.counters) {
            let m = &mut models[i];
            m.arrived += c.arrived;
            m.in_slo += c.in_slo;
            m.late += c.late;
            m.dropped += c.dropped;
            m.residual += c.residual;
            m.max_latency_ms = m.max_latency_ms.max(c.lat_max_us as f64 / 1000.0);
            for (&k, &v) in &c.hist {
                *m.latency_histogram.entry(k).or_default() += v;
            }
            lat_sum[i] += c.lat_sum_us;
            for (p, &d) in c.phase_done.iter().enumerate() {
                phase_done[i][p] += d;
            }
        }
        let mut occ = out.actual.slots().to_vec();
        occ.resize(dur_slots, 0.0);
        let timeline = Timeline::from_slots(occ, slot_us);
        gpus.push(GpuMetrics {
            models: local.iter().map(|&i| resolved[i].config.name.clone()).collect(),
            utilization: timeline.mean(),
            timeline,
        });
        runs.extend(out.runs);
        reconfigurations.extend(out.reconfigurations);
    }

    let secs = scenario.duration_s;
    for (i, m) in models.iter_mut().enumerate() {
        let done = m.completed();
        m.throughput = done as f64 / secs;
        m.goodput = m.in_slo as f64 / secs;
        m.violations_per_s = m.violations() as f64 / secs;
        m.mean_latency_ms = if done == 0 {
            0.0
        } else {
            lat_sum[i] as f64 / done as f64 / 1000.0
        };
    }
    let phases = bounds
        .windows(2)
        .enumerate()
        .map(|(p, w)| {
            let len = w[1] - w[0];
            let a = (w[0] * 1e6 / slot_us as f64).round() as usize;
            let b = ((w[1] * 1e6 / slot_us as f64).round() as usize).min(dur_slots);
            let util = if gpus.is_empty() || b <= a {
                0.0
            } else {
                gpus.iter()
                    .map(|g| g.timeline.slots()[a..b].iter().sum::<f64>() / (b - a) as f64)
                    .sum::<f64>()
                    / gpus.len() as f64
            };
            PhaseMetrics {
                start_s: w[0],
                end_s: w[1],
                throughput: models
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (m.name.clone(), phase_done[i][p] as f64 / len))
                    .collect(),
                utilization: util,
            }
        })
        .collect();
    runs.sort_by(|a: &RunRecord, b: &RunRecord| (a.start_us, a.gpu, &a.model).cmp(&(b.start_us, b.gpu, &b.model)));
    reconfigurations.sort_by(|a: &ReconfigRecord, b: &ReconfigRecord| {
        (a.requested_us, a.gpu, &a.model).cmp(&(b.requested_us, b.gpu, &b.model))
    });
    Ok(SimMetrics {
        scenario: scenario.name.clone(),
        duration_s: secs,
        models,
        gpus,
        phases,
        runs,
        reconfigurations,
    })
}

/// Per-phase metrics for a scenario whose rates change between phases.
pub fn variable_rate_session(scenario: &Scenario) -> Result<Vec<PhaseMetrics>> {
    Ok(run(scenario)?.phases)
}

/// Runs independent scenarios on up to `jobs` worker threads. Results keep input order.
pub fn run_many(scenarios: &[Scenario], jobs: usize) -> Vec<Result<SimMetrics>> {
    let jobs = jobs.clamp(1, scenarios.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<SimMetrics>>>> = scenarios.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let r = run(&scenarios[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every scenario ran"))
        .collect()
}
