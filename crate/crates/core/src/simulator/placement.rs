use crate::error::{Error, Result};
use crate::profiles::ModelConfig;

use super::scenario::Placement;

/// Time-averaged GPU% a model needs: `knee * L / SLO`.
pub fn demand(m: &ModelConfig) -> f64 {
    m.knee_pct * m.runtime_ms / m.slo_ms
}

/// Model indices per GPU.
///
/// `Pack` places models first-fit-decreasing by knee% while each GPU's summed
/// demand stays at or below 100. With a single GPU every model lands on it and
/// admission is left to the scheduler.
pub fn place_multi_gpu(models: &[ModelConfig], gpu_count: usize, placement: Placement) -> Result<Vec<Vec<usize>>> {
    if gpu_count == 0 {
        return Err(Error::InvalidParameter("gpu_count must be at least 1".into()));
    }
    let mut gpus = vec![Vec::new(); gpu_count];
    match placement {
        Placement::Replicate => {
            for g in &mut gpus {
                g.extend(0..models.len());
            }
        }
        Placement::Exclusive => {
            if models.len() > gpu_count {
                return Err(Error::Scenario(format!(
                    "{} models need {} exclusive GPUs, have {gpu_count}",
                    models.len(),
                    models.len()
                )));
            }
            for (i, g) in gpus.iter_mut().enumerate().take(models.len()) {
                g.push(i);
            }
        }
        Placement::Pack if gpu_count == 1 => gpus[0].extend(0..models.len()),
        Placement::Pack => {
            let mut order: Vec<usize> = (0..models.len()).collect();
            order.sort_by(|&a, &b| {
                models[b]
                    .knee_pct
                    .total_cmp(&models[a].knee_pct)
                    .then(models[a].name.cmp(&models[b].name))
            });
            let mut load = vec![0.0; gpu_count];
            for i in order {
                let d = demand(&models[i]);
                let g = (0..gpu_count).find(|&g| load[g] + d <= 100.0 + 1e-9).ok_or_else(|| {
                    Error::Oversubscribed(format!("model {} (demand {d:.1}%) fits no GPU", models[i].name))
                })?;
                load[g] += d;
                gpus[g].push(i);
            }
            for g in &mut gpus {
                g.sort_unstable();
            }
        }
    }
    Ok(gpus)
}
