use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::profiles::ModelProfile;

use super::scenario::NOMINAL_START_PCT;

/// A step is "flat" when latency is within this fraction of the 100% latency.
pub const PROBE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub knee_pct: u32,
    /// `(gpu_pct, latency_ms)` in probe order. Each one is a reconfiguration.
    pub probes: Vec<(u32, f64)>,
}

/// Binary search over the profile's GPU% grid for the smallest allocation
/// whose latency is within 5% of the full-GPU latency.
///
/// The model starts at the nominal 30% (measured for free), probes 100%, then
/// bisects the bracket that 30% leaves open.
pub fn online_knee_probe(profile: &ModelProfile, batch: u32) -> Result<ProbeResult> {
    let grid = profile.gpu_pcts();
    let at = |g: u32| profile.latency(g as f64, batch);
    let mut probes = Vec::new();
    let top = *grid.last().expect("profiles have a grid");
    let start = NOMINAL_START_PCT.round() as u32;
    let start_lat = at(start)?;
    let full = at(top)?;
    probes.push((top, full));
    let flat = |l: f64| l <= full * (1.0 + PROBE_TOLERANCE);

    // lo: largest index known steep (or -1); hi: smallest index known flat
    let si = grid.iter().position(|&g| g >= start).unwrap_or(grid.len() - 1);
    let (mut lo, mut hi) = if flat(start_lat) {
        (-1i64, si as i64)
    } else {
        (si as i64, grid.len() as i64 - 1)
    };
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let g = grid[mid as usize];
        let l = at(g)?;
        probes.push((g, l));
        if flat(l) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ProbeResult {
        knee_pct: grid[hi as usize],
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{knee_shape, GRID_GPU_PCTS};

    fn profile(f: impl Fn(u32) -> f64) -> ModelProfile {
        ModelProfile::from_cells("p", GRID_GPU_PCTS.iter().map(|&g| (g, 1, f(g)))).unwrap()
    }

    fn bound() -> usize {
        (GRID_GPU_PCTS.len() as f64).log2().ceil() as usize + 1
    }

    #[test]
    fn flat_above_twenty() {
        let r = online_knee_probe(&profile(|g| knee_shape(1.0, 20.0, g as f64)), 1).unwrap();
        assert!((10..=30).contains(&r.knee_pct), "{r:?}");
        assert_eq!(r.knee_pct, 20);
        assert!(r.probes.len() <= bound());
    }

    #[test]
    fn strictly_improving_returns_full() {
        let r = online_knee_probe(&profile(|g| 1000.0 / g as f64), 1).unwrap();
        assert_eq!(r.knee_pct, 100);
        assert!(r.probes.len() <= bound());
    }

    #[test]
    fn probe_count_bounded_for_every_knee() {
        for &k in &GRID_GPU_PCTS {
            let r = online_knee_probe(&profile(|g| knee_shape(3.0, k as f64, g as f64)), 1).unwrap();
            assert_eq!(r.knee_pct, k);
            assert!(r.probes.len() <= bound(), "knee {k}: {} probes", r.probes.len());
        }
    }
}
