use crate::error::{Error, Result};

/// Static partition: every model keeps its knee%, scaled down proportionally
/// when the knees sum past 100.
pub fn static_spatial(knees: &[f64]) -> Vec<f64> {
    let total: f64 = knees.iter().sum();
    if total <= 100.0 {
        knees.to_vec()
    } else {
        knees.iter().map(|k| k * 100.0 / total).collect()
    }
}

/// Weighted max-min: grant demands smallest first, then share any surplus in
/// proportion to demand. Results come back in input order.
pub fn wmax_min(knees: &[f64], max_gpu: f64) -> Result<Vec<f64>> {
    if !(max_gpu > 0.0) {
        return Err(Error::InvalidParameter("max_gpu must be positive".into()));
    }
    if knees.iter().any(|&k| !(k >= 0.0)) {
        return Err(Error::InvalidParameter("demands must be non-negative".into()));
    }
    let mut order: Vec<usize> = (0..knees.len()).collect();
    order.sort_by(|&a, &b| knees[a].total_cmp(&knees[b]).then(a.cmp(&b)));
    let mut rem = max_gpu;
    let mut ret = vec![0.0; knees.len()];
    // Equal demands are granted as a group so the result does not depend on
    // input order; a truncated remainder is split evenly inside the group.
    for group in order.chunk_by(|&a, &b| knees[a] == knees[b]) {
        let d = knees[group[0]];
        let need = d * group.len() as f64;
        if rem >= need {
            for &i in group {
                ret[i] = d;
            }
            rem -= need;
        } else if rem > 0.0 {
            for &i in group {
                ret[i] = rem / group.len() as f64;
            }
            rem = 0.0;
        }
    }
    let tot: f64 = knees.iter().sum();
    if rem > 0.0 && tot > 0.0 {
        for (r, k) in ret.iter_mut().zip(knees) {
            *r += k / tot * rem;
        }
    }
    Ok(ret)
}
