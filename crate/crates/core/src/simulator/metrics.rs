use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::schedulers::{slots_to_ms, RunKind, Timeline};

use super::scenario::ReconfigMode;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub gpu_pct: f64,
    pub batch: u32,
    pub runtime_ms: f64,
    pub slo_ms: f64,
    pub arrived: u64,
    /// Finished within the SLO.
    pub in_slo: u64,
    /// Finished after the deadline.
    pub late: u64,
    /// Discarded after the deadline passed while queued.
    pub dropped: u64,
    /// Still queued when the run ended.
    pub residual: u64,
    /// Completions per second, late ones included.
    pub throughput: f64,
    /// In-SLO completions per second.
    pub goodput: f64,
    pub violations_per_s: f64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    /// Completions per whole-millisecond latency bucket.
    pub latency_histogram: BTreeMap<u64, u64>,
    /// Knee probes `(gpu_pct, latency_ms)` when the knee was found online.
    pub probes: Vec<(u32, f64)>,
}

impl ModelMetrics {
    pub fn completed(&self) -> u64 {
        self.in_slo + self.late
    }

    /// Late, dropped and still-queued requests.
    pub fn violations(&self) -> u64 {
        self.late + self.dropped + self.residual
    }

    pub fn unserved(&self) -> u64 {
        self.dropped + self.residual
    }

    pub fn miss_fraction(&self) -> f64 {
        if self.arrived == 0 {
            0.0
        } else {
            self.violations() as f64 / self.arrived as f64
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.arrived == self.in_slo + self.late + self.dropped + self.residual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuMetrics {
    pub models: Vec<String>,
    /// Mean GPU% in use over the scenario duration.
    pub utilization: f64,
    pub timeline: Timeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub start_s: f64,
    pub end_s: f64,
    /// Completions per second by completion time.
    pub throughput: BTreeMap<String, f64>,
    /// Mean over GPUs.
    pub utilization: f64,
}

impl PhaseMetrics {
    pub fn total_throughput(&self) -> f64 {
        self.throughput.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub gpu: usize,
    pub model: String,
    pub start_us: u64,
    pub end_us: u64,
    pub gpu_pct: f64,
    pub batch: u32,
    pub kind: RunKind,
    /// Arrival of the first request in the batch.
    pub oldest_arrival_us: u64,
    /// Arrival of the last request in the batch.
    pub newest_arrival_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconfigRecord {
    pub gpu: usize,
    pub model: String,
    pub requested_us: u64,
    /// First instant the new GPU% can serve.
    pub effective_us: u64,
    pub from_pct: f64,
    pub to_pct: f64,
    pub mode: ReconfigMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub scenario: String,
    pub duration_s: f64,
    pub models: Vec<ModelMetrics>,
    pub gpus: Vec<GpuMetrics>,
    pub phases: Vec<PhaseMetrics>,
    pub runs: Vec<RunRecord>,
    pub reconfigurations: Vec<ReconfigRecord>,
}

impl SimMetrics {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn total_throughput(&self) -> f64 {
        self.models.iter().map(|m| m.throughput).sum()
    }

    pub fn total_goodput(&self) -> f64 {
        self.models.iter().map(|m| m.goodput).sum()
    }

    pub fn arrived(&self) -> u64 {
        self.models.iter().map(|m| m.arrived).sum()
    }

    pub fn violations(&self) -> u64 {
        self.models.iter().map(ModelMetrics::violations).sum()
    }

    pub fn violations_per_s(&self) -> f64 {
        self.violations() as f64 / self.duration_s
    }

    /// Share of arrived requests that missed the SLO or went unserved.
    pub fn miss_fraction(&self) -> f64 {
        let a = self.arrived();
        if a == 0 {
            0.0
        } else {
            self.violations() as f64 / a as f64
        }
    }

    pub fn mean_utilization(&self) -> f64 {
        if self.gpus.is_empty() {
            0.0
        } else {
            self.gpus.iter().map(|g| g.utilization).sum::<f64>() / self.gpus.len() as f64
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.models.iter().all(ModelMetrics::is_conserved)
    }

    /// Long-format `metric,model,value` rows.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["metric", "model", "value"])?;
        let mut row = |metric: &str, model: &str, v: String| w.write_record([metric, model, &v]);
        for m in &self.models {
            let n = m.name.as_str();
            row("gpu_pct", n, m.gpu_pct.to_string())?;
            row("batch", n, m.batch.to_string())?;
            row("arrived", n, m.arrived.to_string())?;
            row("completed", n, m.completed().to_string())?;
            row("in_slo", n, m.in_slo.to_string())?;
            row("late", n, m.late.to_string())?;
            row("dropped", n, m.dropped.to_string())?;
            row("residual", n, m.residual.to_string())?;
            row("violations", n, m.violations().to_string())?;
            row("throughput", n, m.throughput.to_string())?;
            row("goodput", n, m.goodput.to_string())?;
            row("violations_per_s", n, m.violations_per_s.to_string())?;
            row("mean_latency_ms", n, m.mean_latency_ms.to_string())?;
            row("max_latency_ms", n, m.max_latency_ms.to_string())?;
            row("knee_probes", n, m.probes.len().to_string())?;
        }
        row("throughput", "all", self.total_throughput().to_string())?;
        row("goodput", "all", self.total_goodput().to_string())?;
        row("violations_per_s", "all", self.violations_per_s().to_string())?;
        row("miss_fraction", "all", self.miss_fraction().to_string())?;
        row("utilization", "all", self.mean_utilization().to_string())?;
        for (i, g) in self.gpus.iter().enumerate() {
            row("utilization", &format!("gpu{i}"), g.utilization.to_string())?;
        }
        for (i, p) in self.phases.iter().enumerate() {
            for (m, t) in &p.throughput {
                row(&format!("phase{i}_throughput"), m, t.to_string())?;
            }
            row(&format!("phase{i}_utilization"), "all", p.utilization.to_string())?;
        }
        row("reconfigurations", "all", self.reconfigurations.len().to_string())?;
        w.flush()?;
        Ok(())
    }

    /// `slot_ms,gpu,gpu_pct` for every GPU.
    pub fn write_utilization_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["slot_ms", "gpu", "gpu_pct"])?;
        for (i, g) in self.gpus.iter().enumerate() {
            let slot_us = g.timeline.slot_us();
            for (s, v) in g.timeline.slots().iter().enumerate() {
                w.write_record([slots_to_ms(s, slot_us).to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounting_helpers() {
        let m = ModelMetrics {
            arrived: 10,
            in_slo: 5,
            late: 2,
            dropped: 1,
            residual: 2,
            ..Default::default()
        };
        assert!(m.is_conserved());
        assert_eq!(m.violations(), 5);
        assert_eq!(m.unserved(), 3);
        assert_eq!(m.completed(), 7);
        assert!((m.miss_fraction() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_shape() {
        let s = SimMetrics {
            scenario: "t".into(),
            duration_s: 1.0,
            models: vec![ModelMetrics {
                name: "a".into(),
                ..Default::default()
            }],
            gpus: vec![GpuMetrics {
                models: vec!["a".into()],
                utilization: 0.0,
                timeline: Timeline::new(3, 100),
            }],
            phases: vec![],
            runs: vec![],
            reconfigurations: vec![],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,model,value\n"));
        assert!(text.contains("arrived,a,0\n"));
        let mut buf = Vec::new();
        s.write_utilization_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
