//! Efficacy maximisation over a profile grid under batch and SLO constraints.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::ModelProfile;

pub const DEFAULT_MARGIN_PCT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constraint {
    /// `1 <= b <= max_batch`
    BatchLimit,
    /// `f_L + C <= SLO`
    Slo,
    /// `f_L <= SLO / 2`
    HalfSlo,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::BatchLimit => "batch_limit",
            Constraint::Slo => "slo",
            Constraint::HalfSlo => "half_slo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationProblem {
    pub profile: ModelProfile,
    pub slo_ms: f64,
    /// Requests per second.
    pub request_rate: f64,
    pub max_batch: u32,
    /// Constraints left out of the feasibility test.
    pub relaxed: Vec<Constraint>,
}

impl OptimizationProblem {
    pub fn new(profile: ModelProfile, slo_ms: f64, request_rate: f64) -> Result<Self> {
        let max_batch = profile.max_batch();
        let p = Self {
            profile,
            slo_ms,
            request_rate,
            max_batch,
            relaxed: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.request_rate > 0.0) {
            return Err(Error::InvalidParameter("request_rate must be positive".into()));
        }
        if !(self.slo_ms > 0.0) {
            return Err(Error::InvalidParameter("slo_ms must be positive".into()));
        }
        Ok(())
    }

    /// Time to assemble one request, in ms.
    pub fn assembly_time_per_request(&self) -> f64 {
        1000.0 / self.request_rate
    }

    /// Batch assembly time `C = b / rate`, in ms.
    pub fn assembly_time(&self, batch: u32) -> f64 {
        batch as f64 * self.assembly_time_per_request()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub gpu_pct: u32,
    pub batch: u32,
    pub latency_ms: f64,
    pub throughput: f64,
    pub efficacy: f64,
}

/// `T = b / f_L`, in requests per second.
pub fn throughput(profile: &ModelProfile, gpu_pct: f64, batch: u32) -> Result<f64> {
    let l = profile.latency(gpu_pct, batch)?;
    Ok(batch as f64 * 1000.0 / l)
}

/// `b / (f_L^2 * p)` with `f_L` in seconds and `p` as a fraction.
pub fn efficacy_from(latency_ms: f64, gpu_pct: f64, batch: u32) -> f64 {
    let l = latency_ms / 1000.0;
    batch as f64 / (l * l * (gpu_pct / 100.0))
}

pub fn efficacy(profile: &ModelProfile, gpu_pct: f64, batch: u32) -> Result<f64> {
    Ok(efficacy_from(profile.latency(gpu_pct, batch)?, gpu_pct, batch))
}

/// Violated constraints for a given latency; empty means feasible.
pub fn violations_for(problem: &OptimizationProblem, latency_ms: f64, batch: u32) -> Vec<Constraint> {
    let mut v = Vec::new();
    let on = |c: Constraint| !problem.relaxed.contains(&c);
    if on(Constraint::BatchLimit) && (batch == 0 || batch > problem.max_batch) {
        v.push(Constraint::BatchLimit);
    }
    if on(Constraint::Slo) && latency_ms + problem.assembly_time(batch) > problem.slo_ms {
        v.push(Constraint::Slo);
    }
    if on(Constraint::HalfSlo) && latency_ms > problem.slo_ms / 2.0 {
        v.push(Constraint::HalfSlo);
    }
    v
}

/// Feasibility of `(p, b)` with the list of violated constraints.
///
/// Batches outside the profile cannot be evaluated for latency; they report
/// the batch limit only.
pub fn feasible(problem: &OptimizationProblem, gpu_pct: f64, batch: u32) -> (bool, Vec<Constraint>) {
    match problem.profile.latency(gpu_pct, batch) {
        Ok(l) if batch >= 1 => {
            let v = violations_for(problem, l, batch);
            (v.is_empty(), v)
        }
        _ => (false, vec![Constraint::BatchLimit]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub gpu_pct: u32,
    pub batch: u32,
    pub latency_ms: f64,
    pub throughput: f64,
    pub efficacy: f64,
    pub violations: Vec<Constraint>,
}

impl RegionCell {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every grid cell annotated with efficacy and violations.
pub fn feasibility_region(problem: &OptimizationProblem) -> Vec<RegionCell> {
    problem
        .profile
        .cells()
        .map(|(g, b, l)| RegionCell {
            gpu_pct: g,
            batch: b,
            latency_ms: l,
            throughput: b as f64 * 1000.0 / l,
            efficacy: efficacy_from(l, g as f64, b),
            violations: violations_for(problem, l, b),
        })
        .collect()
}

pub fn write_region<W: Write>(sink: W, region: &[RegionCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "gpu_pct",
        "batch",
        "latency_ms",
        "throughput",
        "efficacy",
        "feasible",
        "violations",
    ])?;
    for c in region {
        let viol: Vec<String> = c.violations.iter().map(|v| v.to_string()).collect();
        w.write_record([
            c.gpu_pct.to_string(),
            c.batch.to_string(),
            c.latency_ms.to_string(),
            c.throughput.to_string(),
            c.efficacy.to_string(),
            c.feasible().to_string(),
            viol.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimum {
    Found {
        /// Best grid cell.
        point: OperatingPoint,
        /// GPU% after adding the over-provisioning margin, capped at 100.
        provisioned_pct: u32,
    },
    Infeasible {
        violations: Vec<((u32, u32), Vec<Constraint>)>,
    },
}

impl Optimum {
    pub fn point(&self) -> Option<&OperatingPoint> {
        match self {
            Optimum::Found { point, .. } => Some(point),
            Optimum::Infeasible { .. } => None,
        }
    }
}

/// Exhaustive grid scan for the feasible cell with maximum efficacy.
/// Ties go to smaller GPU%, then smaller batch.
pub fn optimize(problem: &OptimizationProblem, margin_pct: u32) -> Optimum {
    let region = feasibility_region(problem);
    let mut best: Option<&RegionCell> = None;
    // cells() iterates GPU% major and batch minor, both ascending, so a
    // strict comparison keeps the first of any tie.
    for c in region.iter().filter(|c| c.feasible()) {
        if best.is_none_or(|b| c.efficacy > b.efficacy) {
            best = Some(c);
        }
    }
    match best {
        Some(c) => Optimum::Found {
            point: OperatingPoint {
                gpu_pct: c.gpu_pct,
                batch: c.batch,
                latency_ms: c.latency_ms,
                throughput: c.throughput,
                efficacy: c.efficacy,
            },
            provisioned_pct: (c.gpu_pct + margin_pct).min(100),
        },
        None => Optimum::Infeasible {
            violations: region
                .into_iter()
                .map(|c| ((c.gpu_pct, c.batch), c.violations))
                .collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{catalog_profile, GRID_BATCHES, GRID_GPU_PCTS};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn const_profile(l: f64) -> ModelProfile {
        ModelProfile::from_cells(
            "c",
            GRID_GPU_PCTS
                .iter()
                .flat_map(|&g| GRID_BATCHES.iter().map(move |&b| (g, b, l))),
        )
        .unwrap()
    }

    #[test]
    fn throughput_examples() {
        let p = const_profile(28.0);
        assert_relative_eq!(throughput(&p, 40.0, 16).unwrap(), 571.428, epsilon = 1e-3);
        assert_relative_eq!(throughput(&p, 40.0, 1).unwrap(), 1000.0 / 28.0);
        assert_relative_eq!(throughput(&p, 40.0, 8).unwrap(), 2.0 * throughput(&p, 40.0, 4).unwrap());
    }

    #[test]
    fn efficacy_examples() {
        assert_relative_eq!(efficacy_from(28.0, 40.0, 16), 16.0 / (0.028f64.powi(2) * 0.4));
        assert!((efficacy_from(28.0, 40.0, 16) - 51_020.0).abs() < 1.0);
        assert_relative_eq!(efficacy_from(28.0, 40.0, 16), efficacy_from(56.0, 40.0, 64));
        assert_relative_eq!(efficacy_from(10.0, 100.0, 4) * 2.0, efficacy_from(10.0, 50.0, 4));
    }

    #[test]
    fn feasibility_examples() {
        let p = OptimizationProblem::new(const_profile(28.0), 50.0, 1000.0).unwrap();
        let (ok, v) = feasible(&p, 40.0, 16);
        assert!(!ok);
        assert!(v.contains(&Constraint::HalfSlo));

        let p = OptimizationProblem::new(const_profile(20.0), 50.0, 2079.0).unwrap();
        assert_relative_eq!(p.assembly_time(16), 16.0 * 1000.0 / 2079.0);
        assert!((p.assembly_time(16) - 7.7).abs() < 0.05);
        assert_eq!(feasible(&p, 40.0, 16), (true, vec![]));
        assert_eq!(feasible(&p, 40.0, 0), (false, vec![Constraint::BatchLimit]));
        assert!(OptimizationProblem::new(const_profile(1.0), 10.0, 0.0).is_err());
    }

    #[test]
    fn optimize_examples() {
        let mob = catalog_profile("Mobilenet").unwrap();
        let p = OptimizationProblem::new(mob, 50.0, 1000.0 / 0.481).unwrap();
        let opt = optimize(&p, DEFAULT_MARGIN_PCT);
        let pt = opt.point().unwrap();
        assert!((20..=40).contains(&pt.gpu_pct), "{pt:?}");

        let p = OptimizationProblem::new(const_profile(30.0), 20.0, 100.0).unwrap();
        match optimize(&p, 5) {
            Optimum::Infeasible { violations } => assert_eq!(violations.len(), 70),
            o => panic!("{o:?}"),
        }

        let single = ModelProfile::from_cells("s", [(60, 1, 4.0)]).unwrap();
        let p = OptimizationProblem::new(single, 20.0, 100.0).unwrap();
        match optimize(&p, 5) {
            Optimum::Found { point, provisioned_pct } => {
                assert_eq!((point.gpu_pct, point.batch, provisioned_pct), (60, 1, 65));
            }
            o => panic!("{o:?}"),
        }
        let single = ModelProfile::from_cells("s", [(98, 1, 4.0)]).unwrap();
        let p = OptimizationProblem::new(single, 20.0, 100.0).unwrap();
        assert!(matches!(
            optimize(&p, 5),
            Optimum::Found {
                provisioned_pct: 100,
                ..
            }
        ));
    }

    #[test]
    fn region_shape_and_csv() {
        let p = OptimizationProblem::new(const_profile(30.0), 20.0, 100.0).unwrap();
        let region = feasibility_region(&p);
        assert_eq!(region.len(), 70);
        assert!(region.iter().all(|c| !c.feasible()));
        let mut buf = Vec::new();
        write_region(&mut buf, &region).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 71);
        assert!(text.lines().nth(1).unwrap().ends_with("false,slo;half_slo"));
    }

    fn random_profile() -> impl Strategy<Value = ModelProfile> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..8.0, 10), 7).prop_map(|incs| {
            let mut cells = Vec::new();
            for (bi, &b) in GRID_BATCHES.iter().enumerate() {
                let mut l = 0.5 + b as f64 * 0.7;
                for (gi, &g) in GRID_GPU_PCTS.iter().enumerate().rev() {
                    l += incs[bi][gi];
                    cells.push((g, b, l));
                }
            }
            ModelProfile::from_cells("r", cells).unwrap()
        })
    }

    proptest! {
        #[test]
        fn region_upward_closed(prof in random_profile(), slo in 5.0f64..120.0, rate in 50.0f64..3000.0) {
            let p = OptimizationProblem::new(prof, slo, rate).unwrap();
            for b in GRID_BATCHES {
                let mut seen = false;
                for g in GRID_GPU_PCTS {
                    let ok = feasible(&p, g as f64, b).0;
                    prop_assert!(!seen || ok);
                    seen |= ok;
                }
            }
        }

        #[test]
        fn relaxation_never_hurts(prof in random_profile(), slo in 5.0f64..120.0, rate in 50.0f64..3000.0, which in 0usize..3) {
            let p = OptimizationProblem::new(prof, slo, rate).unwrap();
            let mut relaxed = p.clone();
            relaxed.relaxed.push([Constraint::BatchLimit, Constraint::Slo, Constraint::HalfSlo][which]);
            let base = optimize(&p, 0).point().map(|x| x.efficacy).unwrap_or(f64::NEG_INFINITY);
            let rel = optimize(&relaxed, 0).point().map(|x| x.efficacy).unwrap_or(f64::NEG_INFINITY);
            prop_assert!(rel >= base);
        }
    }
}
