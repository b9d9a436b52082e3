//! Latency grids `f_L(gpu%, batch)` and the built-in model catalog.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// GPU% values of the standard measurement grid.
pub const GRID_GPU_PCTS: [u32; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
/// Batch sizes of the standard measurement grid.
pub const GRID_BATCHES: [u32; 7] = [1, 2, 4, 8, 10, 12, 16];

/// Measured latency grid for one model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    name: String,
    gpu_pcts: Vec<u32>,
    batches: Vec<u32>,
    /// Row-major: `latencies[g * batches.len() + b]`.
    latencies: Vec<f64>,
}

impl ModelProfile {
    /// Builds a profile from `(gpu_pct, batch, latency_ms)` cells.
    ///
    /// The cells must form a full rectangle over their GPU% and batch values,
    /// include batch 1, and be non-increasing in GPU% for every batch.
    pub fn from_cells<I>(name: &str, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32, f64)>,
    {
        let mut map: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for (g, b, l) in cells {
            if g == 0 || g > 100 {
                return Err(Error::InvalidParameter(format!(
                    "model {name}: gpu_pct {g} outside 1..=100"
                )));
            }
            if b == 0 {
                return Err(Error::InvalidParameter(format!(
                    "model {name}: batch must be at least 1"
                )));
            }
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::NonPositiveLatency {
                    model: name.to_string(),
                    gpu_pct: g,
                    batch: b,
                });
            }
            if map.insert((g, b), l).is_some() {
                return Err(Error::DuplicateCell {
                    model: name.to_string(),
                    gpu_pct: g,
                    batch: b,
                });
            }
        }
        if map.is_empty() {
            return Err(Error::EmptyInput("profile cells"));
        }
        let mut gpu_pcts: Vec<u32> = map.keys().map(|k| k.0).collect();
        gpu_pcts.dedup();
        let mut batches: Vec<u32> = map.keys().map(|k| k.1).collect();
        batches.sort_unstable();
        batches.dedup();
        if batches[0] != 1 {
            return Err(Error::MissingCell {
                model: name.to_string(),
                gpu_pct: gpu_pcts[0],
                batch: 1,
            });
        }
        let mut latencies = Vec::with_capacity(gpu_pcts.len() * batches.len());
        for &g in &gpu_pcts {
            for &b in &batches {
                match map.get(&(g, b)) {
                    Some(&l) => latencies.push(l),
                    None => {
                        return Err(Error::MissingCell {
                            model: name.to_string(),
                            gpu_pct: g,
                            batch: b,
                        })
                    }
                }
            }
        }
        let profile = Self {
            name: name.to_string(),
            gpu_pcts,
            batches,
            latencies,
        };
        profile.check_monotone()?;
        Ok(profile)
    }

    fn check_monotone(&self) -> Result<()> {
        let mut cells = Vec::new();
        for (bi, &b) in self.batches.iter().enumerate() {
            for gi in 1..self.gpu_pcts.len() {
                let lo = self.at(gi - 1, bi);
                let hi = self.at(gi, bi);
                if hi > lo {
                    cells.push(format!(
                        "({}%,{b})={lo} < ({}%,{b})={hi}",
                        self.gpu_pcts[gi - 1],
                        self.gpu_pcts[gi]
                    ));
                }
            }
        }
        if cells.is_empty() {
            Ok(())
        } else {
            Err(Error::NonMonotone {
                model: self.name.clone(),
                cells,
            })
        }
    }

    fn at(&self, gi: usize, bi: usize) -> f64 {
        self.latencies[gi * self.batches.len() + bi]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn gpu_pcts(&self) -> &[u32] {
        &self.gpu_pcts
    }

    pub fn batches(&self) -> &[u32] {
        &self.batches
    }

    pub fn max_batch(&self) -> u32 {
        *self.batches.last().expect("profile has at least one batch")
    }

    /// Stored value at an exact grid cell.
    pub fn cell(&self, gpu_pct: u32, batch: u32) -> Option<f64> {
        let gi = self.gpu_pcts.binary_search(&gpu_pct).ok()?;
        let bi = self.batches.binary_search(&batch).ok()?;
        Some(self.at(gi, bi))
    }

    /// All cells in `(gpu_pct, batch, latency)` order, GPU% major.
    pub fn cells(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.gpu_pcts.iter().enumerate().flat_map(move |(gi, &g)| {
            self.batches
                .iter()
                .enumerate()
                .map(move |(bi, &b)| (g, b, self.at(gi, bi)))
        })
    }

    /// Bilinear interpolation of latency. GPU% is clamped to `[10, 100]` and
    /// then to the grid's own range.
    pub fn latency(&self, gpu_pct: f64, batch: u32) -> Result<f64> {
        if batch == 0 {
            return Err(Error::InvalidParameter("batch must be at least 1".into()));
        }
        if batch > self.max_batch() {
            return Err(Error::BatchTooLarge {
                model: self.name.clone(),
                batch,
                max_batch: self.max_batch(),
            });
        }
        if gpu_pct.is_nan() {
            return Err(Error::InvalidParameter("gpu_pct is NaN".into()));
        }
        let g = gpu_pct.clamp(10.0, 100.0);
        let (g0, g1, wg) = bracket(&self.gpu_pcts, g);
        let (b0, b1, wb) = bracket(&self.batches, batch as f64);
        let lo = lerp(self.at(g0, b0), self.at(g0, b1), wb);
        let hi = lerp(self.at(g1, b0), self.at(g1, b1), wb);
        Ok(lerp(lo, hi, wg))
    }

    /// A copy with every latency multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::InvalidParameter("scale factor must be positive".into()));
        }
        let mut p = self.clone();
        for l in &mut p.latencies {
            *l *= factor;
        }
        Ok(p)
    }

    /// A copy under a different model name.
    pub fn renamed(&self, name: &str) -> Self {
        let mut p = self.clone();
        p.name = name.to_string();
        p
    }
}

/// Index pair around `x` and the weight of the upper one. Clamps outside the range.
fn bracket(xs: &[u32], x: f64) -> (usize, usize, f64) {
    let last = xs.len() - 1;
    if x <= xs[0] as f64 {
        return (0, 0, 0.0);
    }
    if x >= xs[last] as f64 {
        return (last, last, 0.0);
    }
    let hi = xs.partition_point(|&v| (v as f64) < x);
    if xs[hi] as f64 == x {
        return (hi, hi, 0.0);
    }
    let lo = hi - 1;
    let w = (x - xs[lo] as f64) / (xs[hi] - xs[lo]) as f64;
    (lo, hi, w)
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + (b - a) * w
    }
}

/// Grid GPU% maximising `1 / (f_L^2 * gpu_pct)` at `batch`; ties go to the smaller GPU%.
pub fn knee_from_profile(profile: &ModelProfile, batch: u32) -> Result<u32> {
    Ok(knee_curve(profile, batch)?
        .into_iter()
        .fold(None, |best: Option<(u32, f64)>, (g, m)| match best {
            Some((_, bm)) if m <= bm => best,
            _ => Some((g, m)),
        })
        .map(|(g, _)| g)
        .expect("profile has at least one GPU%"))
}

/// `(gpu_pct, 1 / (f_L^2 * gpu_pct))` over the grid at `batch`.
pub fn knee_curve(profile: &ModelProfile, batch: u32) -> Result<Vec<(u32, f64)>> {
    let bi = profile.batches.binary_search(&batch).map_err(|_| Error::MissingCell {
        model: profile.name.clone(),
        gpu_pct: profile.gpu_pcts[0],
        batch,
    })?;
    Ok(profile
        .gpu_pcts
        .iter()
        .enumerate()
        .map(|(gi, &g)| {
            let l = profile.at(gi, bi);
            (g, 1.0 / (l * l * g as f64))
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    model: String,
    gpu_pct: u32,
    batch: u32,
    latency_ms: f64,
}

const PROFILE_COLUMNS: [&str; 4] = ["model", "gpu_pct", "batch", "latency_ms"];

/// Several model profiles keyed by name, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    profiles: Vec<ModelProfile>,
}

impl ProfileSet {
    pub fn new(profiles: Vec<ModelProfile>) -> Self {
        Self { profiles }
    }

    pub fn get(&self, name: &str) -> Option<&ModelProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn insert(&mut self, profile: ModelProfile) {
        match self.profiles.iter_mut().find(|p| p.name == profile.name) {
            Some(slot) => *slot = profile,
            None => self.profiles.push(profile),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelProfile> {
        self.profiles.iter()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Reads `model,gpu_pct,batch,latency_ms` rows for any number of models.
    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = rdr.headers()?.clone();
        for col in PROFILE_COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::MissingColumn(col.to_string()));
            }
        }
        let mut order: Vec<String> = Vec::new();
        let mut cells: BTreeMap<String, Vec<(u32, u32, f64)>> = BTreeMap::new();
        for rec in rdr.deserialize::<ProfileRow>() {
            let row = rec?;
            if !cells.contains_key(&row.model) {
                order.push(row.model.clone());
            }
            cells
                .entry(row.model)
                .or_default()
                .push((row.gpu_pct, row.batch, row.latency_ms));
        }
        let mut profiles = Vec::with_capacity(order.len());
        for name in order {
            let c = cells.remove(&name).unwrap_or_default();
            profiles.push(ModelProfile::from_cells(&name, c)?);
        }
        Ok(Self { profiles })
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        write_profiles(sink, self.profiles.iter())
    }
}

/// Reads a CSV holding exactly one model.
pub fn load_profile<R: Read>(source: R) -> Result<ModelProfile> {
    let set = ProfileSet::load(source)?;
    if set.len() != 1 {
        return Err(Error::NotSingleModel(set.len()));
    }
    Ok(set.profiles.into_iter().next().expect("len checked"))
}

pub fn write_profiles<'a, W, I>(sink: W, profiles: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ModelProfile>,
{
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(PROFILE_COLUMNS)?;
    for p in profiles {
        for (g, b, l) in p.cells() {
            w.write_record([p.name.clone(), g.to_string(), b.to_string(), l.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-model operating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub knee_pct: f64,
    pub slo_ms: f64,
    pub batch: u32,
    pub runtime_ms: f64,
    #[serde(default = "one")]
    pub share_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(name: &str, knee_pct: f64, slo_ms: f64, batch: u32, runtime_ms: f64) -> Self {
        Self {
            name: name.to_string(),
            knee_pct,
            slo_ms,
            batch,
            runtime_ms,
            share_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.knee_pct > 0.0 && self.knee_pct <= 100.0) {
            return Err(Error::InvalidParameter(format!(
                "model {}: knee_pct {} outside (0, 100]",
                self.name, self.knee_pct
            )));
        }
        if !(self.slo_ms > 0.0) || !(self.runtime_ms > 0.0) || self.batch == 0 {
            return Err(Error::InvalidParameter(format!(
                "model {}: slo, runtime and batch must be positive",
                self.name
            )));
        }
        if self.runtime_ms > self.slo_ms {
            return Err(Error::Admission {
                model: self.name.clone(),
                runtime_ms: self.runtime_ms,
                slo_ms: self.slo_ms,
            });
        }
        Ok(())
    }
}

const CATALOG: [(&str, f64, f64, u32, f64); 8] = [
    ("Mobilenet", 20.0, 25.0, 16, 10.0),
    ("Alexnet", 30.0, 25.0, 16, 8.0),
    ("BERT", 30.0, 25.0, 16, 9.0),
    ("ResNet-50", 40.0, 50.0, 16, 28.0),
    ("VGG-19", 50.0, 100.0, 16, 55.0),
    ("ResNet-18", 30.0, 25.0, 16, 12.0),
    ("Inception", 40.0, 50.0, 16, 25.0),
    ("ResNeXt-50", 50.0, 100.0, 16, 40.0),
];

/// The eight built-in models. Request share weight is proportional to `1/SLO`.
pub fn builtin_catalog() -> Vec<ModelConfig> {
    CATALOG
        .iter()
        .map(|&(n, k, s, b, l)| ModelConfig {
            share_weight: 100.0 / s,
            ..ModelConfig::new(n, k, s, b, l)
        })
        .collect()
}

/// Case-insensitive catalog lookup.
pub fn catalog_lookup(name: &str) -> Option<ModelConfig> {
    builtin_catalog()
        .into_iter()
        .find(|m| m.name.eq_ignore_ascii_case(name))
}

const MODEL_COLUMNS: [&str; 6] = ["name", "knee_pct", "slo_ms", "batch", "runtime_ms", "share_weight"];

pub fn write_model_configs<W: Write>(sink: W, models: &[ModelConfig]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MODEL_COLUMNS)?;
    for m in models {
        w.write_record([
            m.name.clone(),
            m.knee_pct.to_string(),
            m.slo_ms.to_string(),
            m.batch.to_string(),
            m.runtime_ms.to_string(),
            m.share_weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model_configs<R: Read>(source: R) -> Result<Vec<ModelConfig>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    for col in &MODEL_COLUMNS[..5] {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<ModelConfig>() {
        out.push(rec?);
    }
    Ok(out)
}

// Per-batch knees and latency factors for Mobilenet. Its small-batch knees
// follow the measured progression (about 10/20/40/50% for batches 1..8).
const MOBILENET_KNEES: [(u32, u32, f64); 7] = [
    (1, 10, 1.0),
    (2, 20, 1.05),
    (4, 30, 1.1),
    (8, 50, 1.3),
    (10, 50, 1.45),
    (12, 50, 1.6),
    (16, 50, 1.9),
];

/// Knee-shaped latency: `c * (1 + (k / min(p, k))^2)`, flat at and beyond the knee `k`.
/// Below the knee `p * latency` grows as `p` shrinks.
pub fn knee_shape(c: f64, knee: f64, p: f64) -> f64 {
    let r = knee / p.min(knee);
    c * (1.0 + r * r)
}

/// Synthetic grid for a catalog model on the standard grid.
///
/// Generic models: the knee at batch `b` is the catalog knee scaled by
/// `sqrt(b/B)` (rounded to the grid) and the latency scale grows as
/// `(b/B)^0.7`, so the profile reproduces the catalog runtime at
/// `(knee, B)` and `knee_from_profile(B)` returns the catalog knee.
pub fn catalog_profile(name: &str) -> Option<ModelProfile> {
    let m = catalog_lookup(name)?;
    let cells: Vec<(u32, u32, f64)> = if m.name == "Mobilenet" {
        let (_, _, top) = MOBILENET_KNEES[6];
        // Scale so the catalog runtime holds at (catalog knee, B).
        let k16 = MOBILENET_KNEES[6].1;
        let at_catalog = knee_shape(top, k16 as f64, m.knee_pct);
        let s = m.runtime_ms / at_catalog;
        GRID_GPU_PCTS
            .iter()
            .flat_map(|&g| {
                MOBILENET_KNEES
                    .iter()
                    .map(move |&(b, k, f)| (g, b, knee_shape(s * f, k as f64, g as f64)))
            })
            .collect()
    } else {
        return synthetic_profile(&m).ok();
    };
    ModelProfile::from_cells(&m.name, cells).ok()
}

/// Generic synthetic grid for any model configuration.
///
/// The knee at batch `b` is the configured knee scaled by `sqrt(b/B)`
/// (rounded to the 10% grid) and the latency scale grows as `(b/B)^0.7`, so
/// the grid reproduces the configured runtime at `(knee, B)` when the knee
/// lies on the grid. `B` joins the batch grid if missing.
pub fn synthetic_profile(m: &ModelConfig) -> Result<ModelProfile> {
    m.validate()?;
    let big_b = m.batch as f64;
    let mut batches: Vec<u32> = GRID_BATCHES.to_vec();
    if !batches.contains(&m.batch) {
        batches.push(m.batch);
    }
    let mut cells = Vec::with_capacity(GRID_GPU_PCTS.len() * batches.len());
    for &g in &GRID_GPU_PCTS {
        for &b in &batches {
            let ratio = b as f64 / big_b;
            let k = ((m.knee_pct * ratio.sqrt() / 10.0).round() * 10.0).clamp(10.0, 100.0);
            let c = m.runtime_ms / 2.0 * ratio.powf(0.7);
            cells.push((g, b, knee_shape(c, k, g as f64)));
        }
    }
    ModelProfile::from_cells(&m.name, cells)
}

/// Synthetic profiles for every catalog model.
pub fn catalog_profiles() -> ProfileSet {
    ProfileSet::new(
        builtin_catalog()
            .iter()
            .filter_map(|m| catalog_profile(&m.name))
            .collect(),
    )
}
