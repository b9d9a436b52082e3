//! Kernel-level analytical model of DNN execution on a partitioned GPU.
//!
//! A DNN is a chain of `k_max` kernels. The first kernel exposes `p * b`
//! parallel operations and every later kernel loses a fixed share of that,
//! so parallelism shrinks towards zero at the last kernel. Each SM retires
//! one parallel operation per `t_p`; launches and data waits are serialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-kernel data-wait term depends on the SM count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MemoryTerm {
    /// The memory term contributes nothing.
    Off,
    /// `d_i * S / M`, the formula as printed.
    Verbatim { bw_per_sm: f64 },
    /// `d_i / (M * S)`: aggregate bandwidth grows with the SM count.
    BandwidthScaling { bw_per_sm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDnn {
    pub k_max: usize,
    /// Parallel operations of the first kernel at batch 1.
    pub p: u64,
    /// Time for one SM to retire one parallel operation.
    pub t_p: f64,
    /// Serialized launch cost per kernel execution.
    pub t_np: f64,
    /// Repetitions of each kernel, length `k_max`.
    pub repeats: Vec<u32>,
    /// Bytes fetched by each kernel, length `k_max`.
    pub data_bytes: Vec<f64>,
    pub memory: MemoryTerm,
}

impl AnalyticDnn {
    /// Every kernel runs once and moves no data.
    pub fn uniform(k_max: usize, p: u64, t_p: f64, t_np: f64) -> Result<Self> {
        Self::new(k_max, p, t_p, t_np, vec![1; k_max], vec![0.0; k_max], MemoryTerm::Off)
    }

    pub fn new(
        k_max: usize,
        p: u64,
        t_p: f64,
        t_np: f64,
        repeats: Vec<u32>,
        data_bytes: Vec<f64>,
        memory: MemoryTerm,
    ) -> Result<Self> {
        let dnn = Self {
            k_max,
            p,
            t_p,
            t_np,
            repeats,
            data_bytes,
            memory,
        };
        dnn.validate()?;
        Ok(dnn)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.k_max == 0 {
            return bad("k_max must be at least 1");
        }
        if self.p == 0 {
            return bad("p must be at least 1");
        }
        if !(self.t_p > 0.0) {
            return bad("t_p must be positive");
        }
        if !(self.t_np >= 0.0) {
            return bad("t_np must be non-negative");
        }
        if self.repeats.len() != self.k_max || self.data_bytes.len() != self.k_max {
            return bad("repeats and data_bytes must have k_max entries");
        }
        if self.repeats.contains(&0) {
            return bad("every kernel repeat count must be at least 1");
        }
        if self.data_bytes.iter().any(|&d| !(d >= 0.0)) {
            return bad("data_bytes must be non-negative");
        }
        match self.memory {
            MemoryTerm::Verbatim { bw_per_sm } | MemoryTerm::BandwidthScaling { bw_per_sm } if !(bw_per_sm > 0.0) => {
                bad("memory bandwidth per SM must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn with_memory(mut self, memory: MemoryTerm) -> Result<Self> {
        self.memory = memory;
        self.validate()?;
        Ok(self)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.k_max {
            return Err(Error::KernelIndex {
                index: i,
                k_max: self.k_max,
            });
        }
        Ok(())
    }

    /// Parallel operations `N_i` of kernel `i` (1-based) at batch `b`.
    ///
    /// The per-kernel decrement `p*b/k_max` is kept exact; since `N_{i-1}` is
    /// an integer, `floor(N_{i-1} - x) == N_{i-1} - ceil(x)`.
    pub fn parallel_ops(&self, i: usize, b: u64) -> Result<u64> {
        self.check_index(i)?;
        if b == 0 {
            return Err(Error::InvalidParameter("batch must be at least 1".into()));
        }
        Ok(self.parallel_ops_unchecked(i, b))
    }

    fn parallel_ops_unchecked(&self, i: usize, b: u64) -> u64 {
        let first = self.p * b;
        let k = self.k_max as u64;
        let step = first.div_ceil(k);
        first.saturating_sub(step * (i as u64 - 1))
    }

    /// Execution time of kernel `i`'s parallel work on `s` SMs.
    pub fn kernel_exec_time(&self, i: usize, s: u64, b: u64) -> Result<f64> {
        let n = self.parallel_ops(i, b)?;
        Ok(exec_time(n, self.t_p, s))
    }

    /// Data-wait time of kernel `i` on `s` SMs.
    pub fn memory_wait(&self, i: usize, s: u64) -> Result<f64> {
        self.check_index(i)?;
        Ok(self.memory_wait_unchecked(i, s))
    }

    fn memory_wait_unchecked(&self, i: usize, s: u64) -> f64 {
        let d = self.data_bytes[i - 1];
        match self.memory {
            MemoryTerm::Off => 0.0,
            MemoryTerm::Verbatim { bw_per_sm } => d * s as f64 / bw_per_sm,
            MemoryTerm::BandwidthScaling { bw_per_sm } => d / (bw_per_sm * s.max(1) as f64),
        }
    }

    /// Total serialized time `b * sum_i R_i (t_np + E_m(i, s))`.
    pub fn serialized_time(&self, s: u64, b: u64) -> f64 {
        let per_item: f64 = (1..=self.k_max)
            .map(|i| self.repeats[i - 1] as f64 * (self.t_np + self.memory_wait_unchecked(i, s)))
            .sum();
        b as f64 * per_item
    }

    /// End-to-end execution time on `s` SMs at batch `b`.
    pub fn total_exec_time(&self, s: u64, b: u64) -> Result<f64> {
        if s == 0 || b == 0 {
            return Err(Error::InvalidParameter("SM count and batch must be at least 1".into()));
        }
        let parallel: f64 = (1..=self.k_max)
            .map(|i| {
                let n = self.parallel_ops_unchecked(i, b);
                self.repeats[i - 1] as f64 * exec_time(n, self.t_p, s)
            })
            .sum();
        Ok(self.serialized_time(s, b) + parallel)
    }

    /// `E_t(s)` for `s = 1..=s_max`.
    pub fn latency_curve(&self, b: u64, s_max: u64) -> Result<Vec<f64>> {
        (1..=s_max).map(|s| self.total_exec_time(s, b)).collect()
    }
}

fn exec_time(n: u64, t_p: f64, s: u64) -> f64 {
    let work = n as f64 * t_p;
    work / s.min(n).max(1) as f64
}

/// Efficiency metric `1 / (E_t^2 * s)` for one point of a latency curve.
pub fn knee_metric(latency: f64, s: f64) -> f64 {
    1.0 / (latency * latency * s)
}

/// SM count (1-based) maximising `1 / (E_t(s)^2 * s)`; ties go to the smaller `s`.
pub fn knee_from_curve(latencies: &[f64]) -> Result<usize> {
    if latencies.is_empty() {
        return Err(Error::EmptyInput("latency curve"));
    }
    if let Some(bad) = latencies.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "latency at s={} must be positive",
            bad + 1
        )));
    }
    let mut best = 1;
    let mut best_metric = knee_metric(latencies[0], 1.0);
    for (idx, &l) in latencies.iter().enumerate().skip(1) {
        let m = knee_metric(l, (idx + 1) as f64);
        if m > best_metric {
            best = idx + 1;
            best_metric = m;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelClassification {
    pub flops: f64,
    pub bytes: f64,
    pub intensity: f64,
    pub bound: Bound,
}

/// Arithmetic-intensity classification against a device's flops/byte index.
/// A kernel exactly at the index counts as memory bound.
pub fn classify_kernel(flops: f64, bytes: f64, device_index: f64) -> Result<KernelClassification> {
    if bytes == 0.0 {
        return Err(Error::ZeroBytes);
    }
    if !(bytes > 0.0) || !(flops >= 0.0) {
        return Err(Error::InvalidParameter("flops and bytes must be non-negative".into()));
    }
    let intensity = flops / bytes;
    let bound = if intensity > device_index {
        Bound::Compute
    } else {
        Bound::Memory
    };
    Ok(KernelClassification {
        flops,
        bytes,
        intensity,
        bound,
    })
}
