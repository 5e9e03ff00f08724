use rand::seq::index::sample;

use crate::comptask::stream_rng;
use crate::error::{Error, Result};

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error per unit of loss magnitude, so
/// derivatives below the round-off level of the difference quotient are
/// judged on absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Picks up to `count` distinct trainable coordinates, in increasing order.
pub fn check_coordinates(trainable: &[bool], count: usize, seed: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..trainable.len()).filter(|&i| trainable[i]).collect();
    if pool.is_empty() || count == 0 {
        return Err(Error::config("gradient check: no trainable coordinates to check"));
    }
    let mut rng = stream_rng(seed, 7);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), count.min(pool.len()))
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Compares `analytic` against central differences of `loss` at `params`
/// on the listed coordinates.
pub fn gradient_check(
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if coords.is_empty() {
        return Err(Error::config("gradient check: empty coordinate set"));
    }
    let mut p = params.to_vec();
    let floor = GRADCHECK_FLOOR * loss(&p)?.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords[0],
        checked: coords.len(),
    };
    for &i in coords {
        let orig = p[i];
        p[i] = orig + GRADCHECK_STEP;
        let up = loss(&p)?;
        p[i] = orig - GRADCHECK_STEP;
        let down = loss(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let denom = numeric.abs().max(analytic[i].abs()).max(floor);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
