use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{ArrivalProcess, Scenario};

/// Independent stream seed per (model, GPU).
pub fn stream_seed(seed: u64, model: usize, gpu: usize) -> u64 {
    let tag = ((gpu as u64) << 32) | model as u64;
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Arrival instants in microseconds over `[0, duration)` for one stream.
///
/// `rate` is the base rate in req/s; phases scale it. A zero rate skips to the
/// next phase boundary.
pub fn arrival_times(scenario: &Scenario, model: &str, rate: f64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = scenario.duration_s * 1e6;
    let bounds: Vec<f64> = scenario.phase_bounds().iter().map(|s| s * 1e6).collect();
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let r = rate * scenario.multiplier(model, t / 1e6);
        if r <= 0.0 {
            match bounds.iter().find(|&&b| b > t) {
                Some(&b) if b < duration => {
                    t = b;
                    continue;
                }
                _ => break,
            }
        }
        let gap = 1e6 / r;
        t += match scenario.arrival {
            ArrivalProcess::Deterministic => gap,
            ArrivalProcess::UniformJittered => gap * rng.gen_range(0.5..1.5),
        };
        if t >= duration {
            break;
        }
        // a gap that crosses into a paused phase yields no arrival
        if rate * scenario.multiplier(model, t / 1e6) <= 0.0 {
            continue;
        }
        out.push(t.floor() as u64);
    }
    out
}
