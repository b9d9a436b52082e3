use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedulers::Timeline;

use super::scenario::ReconfigMode;

/// A standby instance being loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingReconfig {
    pub new_gpu_pct: f64,
    pub mode: ReconfigMode,
    pub requested_us: u64,
    /// When the standby finishes loading.
    pub ready_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub model: String,
    pub gpu_pct: f64,
    /// No batch may start before this instant.
    pub unavailable_until: u64,
    pub pending: Option<PendingReconfig>,
}

impl Instance {
    pub fn available_at(&self, t_us: u64) -> bool {
        t_us >= self.unavailable_until
    }
}

/// One simulated GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuState {
    /// Reserved or running GPU% per slot.
    pub committed: Timeline,
    /// GPU% actually used per slot, fractional at run edges.
    pub actual: Timeline,
    pub instances: Vec<Instance>,
}

impl GpuState {
    pub fn new(models: &[(String, f64)], slots: usize, slot_us: u32) -> Self {
        Self {
            committed: Timeline::new(slots, slot_us),
            actual: Timeline::new(slots, slot_us),
            instances: models
                .iter()
                .map(|(m, p)| Instance {
                    model: m.clone(),
                    gpu_pct: *p,
                    unavailable_until: 0,
                    pending: None,
                })
                .collect(),
        }
    }

    pub fn index_of(&self, model: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.model == model)
    }

    /// Records `pct` as used over `[start_us, end_us)`, splitting edge slots.
    pub fn add_usage(&mut self, start_us: u64, end_us: u64, pct: f64) {
        let slot = self.actual.slot_us() as u64;
        let mut t = start_us;
        while t < end_us {
            let s = t / slot;
            let edge = ((s + 1) * slot).min(end_us);
            if s as usize >= self.actual.len() {
                break;
            }
            let frac = (edge - t) as f64 / slot as f64;
            self.actual.add(s as usize, 1, pct * frac);
            t = edge;
        }
    }
}

/// Starts loading a standby instance for `model` at `now_us`.
///
/// Downtime makes the instance unavailable at once. Requests for the GPU%
/// it already has are no-ops and return `false`.
pub fn apply_reconfiguration(
    gpu: &mut GpuState,
    model: &str,
    new_gpu_pct: f64,
    mode: ReconfigMode,
    now_us: u64,
    load_us: u64,
) -> Result<bool> {
    let idx = gpu
        .index_of(model)
        .ok_or_else(|| Error::Reconfiguration(format!("model {model} is not resident")))?;
    let inst = &mut gpu.instances[idx];
    if inst.pending.is_some() {
        return Err(Error::Reconfiguration(format!(
            "model {model} already has a reconfiguration in progress"
        )));
    }
    if (inst.gpu_pct - new_gpu_pct).abs() < 1e-9 {
        return Ok(false);
    }
    inst.pending = Some(PendingReconfig {
        new_gpu_pct,
        mode,
        requested_us: now_us,
        ready_us: now_us + load_us,
    });
    if mode == ReconfigMode::Downtime {
        inst.unavailable_until = inst.unavailable_until.max(now_us + load_us);
    }
    Ok(true)
}

/// Swaps in the loaded standby. In overlap mode the switch waits for the
/// running batch (ending at `busy_until`) and then costs `switch_us`.
/// Returns the instant from which the new GPU% serves.
pub fn complete_reconfiguration(
    gpu: &mut GpuState,
    idx: usize,
    now_us: u64,
    busy_until: u64,
    switch_us: u64,
) -> Option<(f64, u64)> {
    let inst = &mut gpu.instances[idx];
    let p = inst.pending.take()?;
    let ready = match p.mode {
        ReconfigMode::Downtime => now_us.max(inst.unavailable_until),
        ReconfigMode::Overlap => now_us.max(busy_until) + switch_us,
    };
    inst.unavailable_until = inst.unavailable_until.max(ready);
    inst.gpu_pct = p.new_gpu_pct;
    Some((p.new_gpu_pct, ready))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpu() -> GpuState {
        GpuState::new(&[("a".into(), 30.0), ("b".into(), 40.0)], 100, 100)
    }

    #[test]
    fn downtime_blocks_until_loaded() {
        let mut g = gpu();
        assert!(apply_reconfiguration(&mut g, "a", 50.0, ReconfigMode::Downtime, 1000, 4000).unwrap());
        assert!(!g.instances[0].available_at(4999));
        let (pct, at) = complete_reconfiguration(&mut g, 0, 5000, 0, 100).unwrap();
        assert_eq!((pct, at), (50.0, 5000));
        assert!(g.instances[0].available_at(5000));
    }

    #[test]
    fn overlap_keeps_serving_then_switches() {
        let mut g = gpu();
        apply_reconfiguration(&mut g, "a", 50.0, ReconfigMode::Overlap, 1000, 4000).unwrap();
        assert!(g.instances[0].available_at(1000));
        assert_eq!(g.instances[0].gpu_pct, 30.0);
        // a batch running until 5300 delays the switch
        let (_, at) = complete_reconfiguration(&mut g, 0, 5000, 5300, 100).unwrap();
        assert_eq!(at, 5400);
    }

    #[test]
    fn concurrent_and_foreign_rejected() {
        let mut g = gpu();
        apply_reconfiguration(&mut g, "a", 50.0, ReconfigMode::Overlap, 0, 10).unwrap();
        assert!(apply_reconfiguration(&mut g, "a", 60.0, ReconfigMode::Overlap, 5, 10).is_err());
        assert!(apply_reconfiguration(&mut g, "zzz", 60.0, ReconfigMode::Overlap, 5, 10).is_err());
    }

    #[test]
    fn identical_pct_is_noop() {
        let mut g = gpu();
        assert!(!apply_reconfiguration(&mut g, "b", 40.0, ReconfigMode::Downtime, 0, 10).unwrap());
        assert!(g.instances[1].pending.is_none());
        assert!(g.instances[1].available_at(0));
    }

    #[test]
    fn fractional_usage() {
        let mut g = gpu();
        g.add_usage(50, 250, 40.0);
        assert_eq!(g.actual.at(0), 20.0);
        assert_eq!(g.actual.at(1), 40.0);
        assert_eq!(g.actual.at(2), 20.0);
    }
}
