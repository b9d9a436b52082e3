use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{catalog_lookup, catalog_profile, synthetic_profile, ModelConfig, ModelProfile, ProfileSet};

use super::probe::online_knee_probe;

pub const DEFAULT_LOAD_TIME_MS: f64 = 4000.0;
pub const DEFAULT_SWITCHOVER_MS: f64 = 0.1;
pub const NOMINAL_START_PCT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Gaps drawn uniformly from `[0.5, 1.5]` times the mean gap.
    UniformJittered,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Temporal,
    StaticSpatial,
    WmaxMin,
    Dstack,
    /// One model per GPU at 100%.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// First-fit-decreasing by knee% into GPUs of 100% capacity.
    Pack,
    /// Every model on every GPU; requests spread round-robin.
    Replicate,
    /// One model per GPU.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconfigMode {
    /// The active instance serves while the standby loads.
    Overlap,
    /// The model is unavailable while the new instance loads.
    Downtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconfigEvent {
    pub time_ms: f64,
    pub model: String,
    pub new_gpu_pct: f64,
    pub mode: ReconfigMode,
}

/// Rate multipliers applying from `start_s` until the next phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start_s: f64,
    #[serde(default)]
    pub multipliers: BTreeMap<String, f64>,
}

/// A model entry. Missing fields come from the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Requests per second.
    #[serde(default)]
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knee_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
    /// Find the knee online, starting from a nominal 30%.
    #[serde(default)]
    pub probe_knee: bool,
}

impl ModelSpec {
    pub fn catalog(name: &str, rate: f64) -> Self {
        Self {
            name: name.to_string(),
            rate,
            knee_pct: None,
            slo_ms: None,
            batch: None,
            runtime_ms: None,
            probe_knee: false,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_gpus() -> usize {
    1
}
fn default_slot() -> u32 {
    crate::schedulers::DEFAULT_SLOT_US
}
fn default_load() -> f64 {
    DEFAULT_LOAD_TIME_MS
}
fn default_switch() -> f64 {
    DEFAULT_SWITCHOVER_MS
}
fn default_arrival() -> ArrivalProcess {
    ArrivalProcess::UniformJittered
}
fn default_placement() -> Placement {
    Placement::Pack
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub models: Vec<ModelSpec>,
    pub duration_s: f64,
    #[serde(default = "default_arrival")]
    pub arrival: ArrivalProcess,
    pub scheduler: SchedulerKind,
    #[serde(default = "default_gpus")]
    pub gpu_count: usize,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default)]
    pub reconfigurations: Vec<ReconfigEvent>,
    pub seed: u64,
    #[serde(default = "default_slot")]
    pub slot_us: u32,
    #[serde(default = "default_load")]
    pub load_time_ms: f64,
    #[serde(default = "default_switch")]
    pub switchover_ms: f64,
    /// Operating batch `min(B, ceil(rate * SLO))` instead of the configured `B`.
    #[serde(default = "default_true")]
    pub batch_from_rate: bool,
    /// Drop queued requests whose deadline has passed instead of serving them late.
    #[serde(default)]
    pub drop_expired: bool,
    #[serde(default)]
    pub phases: Vec<Phase>,
    /// Time after `duration_s` during which queued work may still finish.
    /// Defaults to twice the largest SLO.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drain_ms: Option<f64>,
    /// Profile CSV, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(skip)]
    pub profiles: Option<ProfileSet>,
}

/// A model ready for simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModel {
    pub config: ModelConfig,
    pub rate: f64,
    pub profile: ModelProfile,
    /// `(pct, latency_ms)` probes when the knee was found online.
    pub probes: Vec<(u32, f64)>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        Ok(s)
    }

    /// Reads a scenario file and any profile CSV it names.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut s = Self::from_json(&text)?;
        if let Some(p) = &s.profile {
            let base = path.parent().unwrap_or(Path::new("."));
            let file = fs::File::open(base.join(p))?;
            s.profiles = Some(ProfileSet::load(file)?);
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn duration_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }

    pub fn max_slo_ms(&self, models: &[ResolvedModel]) -> f64 {
        models.iter().map(|m| m.config.slo_ms).fold(0.0, f64::max)
    }

    fn profile_for(&self, name: &str, cfg: &ModelConfig) -> Result<ModelProfile> {
        if let Some(p) = self.profiles.as_ref().and_then(|s| s.get(name)) {
            return Ok(p.clone());
        }
        if let Some(p) = catalog_profile(name) {
            return Ok(p);
        }
        synthetic_profile(cfg)
    }

    /// Fills model fields from the catalog and profiles, probes knees and
    /// derives operating batches.
    pub fn resolve(&self) -> Result<Vec<ResolvedModel>> {
        let mut out = Vec::with_capacity(self.models.len());
        for spec in &self.models {
            let base = catalog_lookup(&spec.name);
            let pick = |v: Option<f64>, f: fn(&ModelConfig) -> f64, what: &str| -> Result<f64> {
                v.or_else(|| base.as_ref().map(f))
                    .ok_or_else(|| Error::Scenario(format!("model {}: {what} missing and not in catalog", spec.name)))
            };
            let slo = pick(spec.slo_ms, |m| m.slo_ms, "slo_ms")?;
            let runtime = pick(spec.runtime_ms, |m| m.runtime_ms, "runtime_ms")?;
            let batch = spec
                .batch
                .or(base.as_ref().map(|m| m.batch))
                .ok_or_else(|| Error::Scenario(format!("model {}: batch missing", spec.name)))?;
            let knee = match (spec.knee_pct, spec.probe_knee) {
                (Some(k), _) => k,
                (None, true) => NOMINAL_START_PCT,
                (None, false) => pick(None, |m| m.knee_pct, "knee_pct")?,
            };
            let name = base
                .as_ref()
                .filter(|_| spec.name.eq_ignore_ascii_case(&base.as_ref().unwrap().name))
                .map(|m| m.name.clone())
                .unwrap_or_else(|| spec.name.clone());
            let mut cfg = ModelConfig {
                share_weight: base.as_ref().map_or(1.0, |m| m.share_weight),
                ..ModelConfig::new(&name, knee, slo, batch, runtime)
            };
            cfg.validate()?;
            let profile = self.profile_for(&name, &cfg)?;
            let mut probes = Vec::new();
            if spec.probe_knee && spec.knee_pct.is_none() {
                let probe_batch = cfg.batch.min(profile.max_batch());
                let r = online_knee_probe(&profile, probe_batch)?;
                cfg.knee_pct = r.knee_pct as f64;
                cfg.runtime_ms = profile.latency(cfg.knee_pct, probe_batch)?;
                probes = r.probes;
            }
            if self.batch_from_rate && spec.rate > 0.0 {
                let want = (spec.rate * cfg.slo_ms / 1000.0 - 1e-9).ceil().max(1.0) as u32;
                let b = want.min(cfg.batch).min(profile.max_batch());
                if b != cfg.batch {
                    cfg.batch = b;
                    cfg.runtime_ms = profile.latency(cfg.knee_pct, b)?;
                }
            }
            cfg.validate()?;
            out.push(ResolvedModel {
                config: cfg,
                rate: spec.rate,
                profile,
                probes,
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.models.is_empty() {
            return bad("no models".into());
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive".into());
        }
        if self.gpu_count == 0 {
            return bad("gpu_count must be at least 1".into());
        }
        if self.slot_us == 0 {
            return bad("slot_us must be positive".into());
        }
        if !(self.load_time_ms >= 0.0) || !(self.switchover_ms >= 0.0) {
            return bad("load_time_ms and switchover_ms must be non-negative".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !(m.rate >= 0.0) || !m.rate.is_finite() {
                return bad(format!("model {}: rate must be non-negative", m.name));
            }
            if !names.insert(m.name.to_ascii_lowercase()) {
                return bad(format!("model {} listed twice", m.name));
            }
        }
        for p in &self.phases {
            if !(p.start_s >= 0.0) || p.multipliers.values().any(|&x| !(x >= 0.0)) {
                return bad("phase start and multipliers must be non-negative".into());
            }
        }
        if !self.reconfigurations.is_empty()
            && matches!(self.scheduler, SchedulerKind::Temporal | SchedulerKind::Exclusive)
        {
            return Err(Error::Reconfiguration(
                "GPU% reconfiguration needs a spatial scheduler".into(),
            ));
        }
        let mut by_model: BTreeMap<String, Vec<&ReconfigEvent>> = BTreeMap::new();
        for e in &self.reconfigurations {
            if !names.contains(&e.model.to_ascii_lowercase()) {
                return Err(Error::Reconfiguration(format!("model {} is not resident", e.model)));
            }
            if !(e.new_gpu_pct > 0.0 && e.new_gpu_pct <= 100.0) {
                return Err(Error::Reconfiguration(format!(
                    "model {}: GPU% {} outside (0, 100]",
                    e.model, e.new_gpu_pct
                )));
            }
            if !(e.time_ms >= 0.0) {
                return Err(Error::Reconfiguration("event time must be non-negative".into()));
            }
            by_model.entry(e.model.to_ascii_lowercase()).or_default().push(e);
        }
        let busy = self.load_time_ms + self.switchover_ms;
        for (m, mut evs) in by_model {
            evs.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms));
            for w in evs.windows(2) {
                if w[1].time_ms < w[0].time_ms + busy {
                    return Err(Error::Reconfiguration(format!(
                        "model {m}: reconfiguration at {} ms overlaps the one at {} ms",
                        w[1].time_ms, w[0].time_ms
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rate multiplier for `model` at time `t_s`.
    pub fn multiplier(&self, model: &str, t_s: f64) -> f64 {
        self.phases
            .iter()
            .filter(|p| p.start_s <= t_s)
            .max_by(|a, b| a.start_s.total_cmp(&b.start_s))
            .and_then(|p| p.multipliers.get(model).copied())
            .unwrap_or(1.0)
    }

    /// Phase boundaries in seconds, including 0 and the duration.
    pub fn phase_bounds(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .phases
            .iter()
            .map(|p| p.start_s)
            .filter(|&s| s > 0.0 && s < self.duration_s)
            .collect();
        b.push(0.0);
        b.push(self.duration_s);
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Scenario {
        Scenario::from_json(
            r#"{"models":[{"name":"Alexnet","rate":700},{"name":"VGG-19","rate":160}],
                "duration_s":1,"scheduler":"dstack","seed":1}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_and_resolution() {
        let s = base();
        assert_eq!(s.gpu_count, 1);
        assert_eq!(s.arrival, ArrivalProcess::UniformJittered);
        assert!(s.batch_from_rate);
        s.validate().unwrap();
        let r = s.resolve().unwrap();
        assert_eq!(r[0].config.batch, 16);
        assert_eq!(r[0].config.knee_pct, 30.0);
        assert_eq!(r[1].config.batch, 16);
    }

    #[test]
    fn batch_follows_rate() {
        let mut s = base();
        s.models[0].rate = 200.0;
        let r = s.resolve().unwrap();
        // 200/s over a 25 ms SLO
        assert_eq!(r[0].config.batch, 5);
        assert!(r[0].config.runtime_ms < 8.0);
    }

    #[test]
    fn custom_model_needs_fields() {
        let mut s = base();
        s.models.push(ModelSpec::catalog("Mystery", 10.0));
        assert!(matches!(s.resolve(), Err(Error::Scenario(_))));
        let m = s.models.last_mut().unwrap();
        m.knee_pct = Some(20.0);
        m.slo_ms = Some(40.0);
        m.batch = Some(4);
        m.runtime_ms = Some(6.0);
        assert!(s.resolve().is_ok());
    }

    #[test]
    fn overlapping_reconfigurations_rejected() {
        let mut s = base();
        s.load_time_ms = 100.0;
        for t in [10.0, 50.0] {
            s.reconfigurations.push(ReconfigEvent {
                time_ms: t,
                model: "Alexnet".into(),
                new_gpu_pct: 40.0,
                mode: ReconfigMode::Overlap,
            });
        }
        assert!(matches!(s.validate(), Err(Error::Reconfiguration(_))));
        s.reconfigurations[1].time_ms = 200.0;
        s.validate().unwrap();
    }

    #[test]
    fn phase_lookup() {
        let mut s = base();
        s.phases = vec![Phase {
            start_s: 0.5,
            multipliers: BTreeMap::from([("Alexnet".to_string(), 0.0)]),
        }];
        assert_eq!(s.multiplier("Alexnet", 0.2), 1.0);
        assert_eq!(s.multiplier("Alexnet", 0.7), 0.0);
        assert_eq!(s.multiplier("VGG-19", 0.7), 1.0);
        assert_eq!(s.phase_bounds(), vec![0.0, 0.5, 1.0]);
    }
}
