use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnmodels::{ops, LatentCode, OutputActivation};

/// Probability clamp applied before taking logarithms in the Bernoulli loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionKind {
    BernoulliBce,
    Mse,
}

/// `Σ_d ½(μ_d² + σ_d² − log σ_d² − 1)` for one code.
pub fn kl_divergence(code: &LatentCode) -> Result<f64> {
    kl_terms(&code.mean, &code.log_variance)
}

pub fn kl_terms(mean: &[f64], log_variance: &[f64]) -> Result<f64> {
    if mean.iter().chain(log_variance).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite posterior parameters".into()));
    }
    Ok(mean
        .iter()
        .zip(log_variance)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum())
}

/// Batch-mean KL divergence.
pub fn kl_divergence_batch(codes: &[LatentCode]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let mut total = 0.0;
    for c in codes {
        total += kl_divergence(c)?;
    }
    Ok(total / codes.len() as f64)
}

/// Gradient of [`kl_terms`] with respect to `(μ, log σ²)`.
pub fn kl_grad(mean: &[f64], log_variance: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gm = mean.to_vec();
    let glv = log_variance.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect();
    (gm, glv)
}

/// Per-image loss summed over pixels.
pub fn image_loss(xhat: &[f64], x: &[f64], kind: ReconstructionKind) -> f64 {
    debug_assert_eq!(xhat.len(), x.len());
    match kind {
        ReconstructionKind::Mse => xhat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(),
        ReconstructionKind::BernoulliBce => xhat
            .iter()
            .zip(x)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    }
}

/// Summed over pixels, averaged over the batch.
pub fn reconstruction_loss(xhat: &[Vec<f64>], x: &[Vec<f64>], kind: ReconstructionKind) -> Result<f64> {
    if xhat.len() != x.len() || xhat.is_empty() {
        return Err(Error::shape("batch sizes differ or are empty"));
    }
    let mut total = 0.0;
    for (a, b) in xhat.iter().zip(x) {
        if a.len() != b.len() {
            return Err(Error::shape("image sizes differ"));
        }
        total += image_loss(a, b, kind);
    }
    Ok(total / x.len() as f64)
}

/// Loss of one raw decoder output against its target, with the gradient
/// with respect to the raw output.
pub fn raw_image_loss(raw: &[f64], x: &[f64], kind: ReconstructionKind, output: OutputActivation) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; raw.len()];
    let mut loss = 0.0;
    match (kind, output) {
        (ReconstructionKind::BernoulliBce, OutputActivation::Sigmoid) => {
            for i in 0..raw.len() {
                let s = ops::sigmoid(raw[i]);
                let p = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                loss -= x[i] * p.ln() + (1.0 - x[i]) * (1.0 - p).ln();
                if p == s {
                    grad[i] = s - x[i];
                }
            }
        }
        (ReconstructionKind::BernoulliBce, OutputActivation::Linear) => {
            for i in 0..raw.len() {
                let p = raw[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                loss -= x[i] * p.ln() + (1.0 - x[i]) * (1.0 - p).ln();
                if p == raw[i] {
                    grad[i] = -x[i] / p + (1.0 - x[i]) / (1.0 - p);
                }
            }
        }
        (ReconstructionKind::Mse, OutputActivation::Linear) => {
            for i in 0..raw.len() {
                let d = raw[i] - x[i];
                loss += d * d;
                grad[i] = 2.0 * d;
            }
        }
        (ReconstructionKind::Mse, OutputActivation::Sigmoid) => {
            for i in 0..raw.len() {
                let s = ops::sigmoid(raw[i]);
                let d = s - x[i];
                loss += d * d;
                grad[i] = 2.0 * d * s * (1.0 - s);
            }
        }
    }
    (loss, grad)
}

/// Inverse multiquadratic kernel `C / (C + ‖x − y‖²)`.
pub fn imq_kernel(x: &[f64], y: &[f64], scale: f64) -> f64 {
    scale / (scale + sq_dist(x, y))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_mmd_inputs(z: &[Vec<f64>], prior: &[Vec<f64>]) -> Result<()> {
    if z.len() != prior.len() {
        return Err(Error::shape("MMD batches differ in size"));
    }
    if z.len() < 2 {
        return Err(Error::shape("MMD needs at least two points per batch"));
    }
    Ok(())
}

/// Unbiased U-statistic estimate of MMD² with the IMQ kernel.
pub fn mmd_estimate(z: &[Vec<f64>], prior: &[Vec<f64>], scale: f64) -> Result<f64> {
    Ok(mmd_with_grad(z, prior, scale)?.0)
}

/// MMD² together with its gradient with respect to every point of `z`.
pub fn mmd_with_grad(z: &[Vec<f64>], prior: &[Vec<f64>], scale: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_mmd_inputs(z, prior)?;
    let n = z.len();
    let nf = n as f64;
    let same = 1.0 / (nf * (nf - 1.0));
    let cross = 2.0 / (nf * nf);
    let mut value = 0.0;
    let mut grad: Vec<Vec<f64>> = z.iter().map(|v| vec![0.0; v.len()]).collect();
    // dk/dx for k(x, y) = C / (C + d²) is −2C (x − y) / (C + d²)².
    let mut accumulate = |i: usize, other: &[f64], weight: f64| {
        let d2 = sq_dist(&z[i], other);
        let coef = -2.0 * scale / ((scale + d2) * (scale + d2)) * weight;
        for (g, (a, b)) in grad[i].iter_mut().zip(z[i].iter().zip(other)) {
            *g += coef * (a - b);
        }
    };
    for i in 0..n {
        for j in 0..n {
            if i != j {
                value += same * imq_kernel(&z[i], &z[j], scale);
                value += same * imq_kernel(&prior[i], &prior[j], scale);
                // both arguments of the symmetric kernel move with z
                accumulate(i, &z[j], 2.0 * same);
            }
            value -= cross * imq_kernel(&z[i], &prior[j], scale);
            accumulate(i, &prior[j], -cross);
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_terms(&[0.0; 10], &[0.0; 10]).unwrap(), 0.0);
        assert_eq!(kl_terms(&[1.0], &[0.0]).unwrap(), 0.5);
        assert!(kl_terms(&[f64::NAN], &[0.0]).is_err());
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        for _ in 0..1000 {
            let m: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..3.0)).collect();
            assert!(kl_terms(&m, &lv).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_gradient() {
        let m = [0.3, -1.2];
        let lv = [0.5, -0.7];
        let (gm, glv) = kl_grad(&m, &lv);
        let h = 1e-6;
        for i in 0..2 {
            let mut a = m;
            a[i] += h;
            let mut b = m;
            b[i] -= h;
            let num = (kl_terms(&a, &lv).unwrap() - kl_terms(&b, &lv).unwrap()) / (2.0 * h);
            assert!((num - gm[i]).abs() < 1e-8);
            let mut a = lv;
            a[i] += h;
            let mut b = lv;
            b[i] -= h;
            let num = (kl_terms(&m, &a).unwrap() - kl_terms(&m, &b).unwrap()) / (2.0 * h);
            assert!((num - glv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn reconstruction_closed_forms() {
        let half = vec![vec![0.5; 4096]];
        let bce = reconstruction_loss(&half, &half, ReconstructionKind::BernoulliBce).unwrap();
        assert!((bce - 4096.0 * std::f64::consts::LN_2).abs() < 1e-6);
        let a = vec![vec![0.1, 0.9, 0.4]];
        let b = vec![vec![0.3, 0.2, 0.4]];
        assert_eq!(reconstruction_loss(&a, &a, ReconstructionKind::Mse).unwrap(), 0.0);
        assert_eq!(
            reconstruction_loss(&a, &b, ReconstructionKind::Mse).unwrap(),
            reconstruction_loss(&b, &a, ReconstructionKind::Mse).unwrap()
        );
        // clamped rather than infinite
        let l = image_loss(&[0.0, 1.0], &[1.0, 0.0], ReconstructionKind::BernoulliBce);
        assert!((l - 2.0 * -(BCE_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn raw_losses_agree_with_activated_losses_and_gradients() {
        let raw = [-1.3, 0.2, 2.5, 0.0];
        let x = [0.0, 0.4, 1.0, 0.5];
        for (kind, out) in [
            (ReconstructionKind::BernoulliBce, OutputActivation::Sigmoid),
            (ReconstructionKind::Mse, OutputActivation::Linear),
            (ReconstructionKind::Mse, OutputActivation::Sigmoid),
        ] {
            let act = crate::nnmodels::activate(out, &raw);
            let (l, g) = raw_image_loss(&raw, &x, kind, out);
            assert!((l - image_loss(&act, &x, kind)).abs() < 1e-12);
            let h = 1e-6;
            for i in 0..raw.len() {
                let mut a = raw;
                a[i] += h;
                let mut b = raw;
                b[i] -= h;
                let num = (raw_image_loss(&a, &x, kind, out).0 - raw_image_loss(&b, &x, kind, out).0) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-7, "{kind:?} {out:?} {i}");
            }
        }
        let raw = [0.2, 0.7];
        let (_, g) = raw_image_loss(&raw, &[0.0, 1.0], ReconstructionKind::BernoulliBce, OutputActivation::Linear);
        assert!((g[0] - 1.0 / 0.8).abs() < 1e-12 && (g[1] + 1.0 / 0.7).abs() < 1e-12);
    }

    fn cloud(rng: &mut Xoshiro256PlusPlus, n: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..10)
                    .map(|d| rng.sample::<f64, _>(StandardNormal) + if d == 0 { shift } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn mmd_properties() {
        let a = [0.3, 0.1];
        assert_eq!(imq_kernel(&a, &a, 20.0), 1.0);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let z = cloud(&mut rng, 64, 0.0);
        assert!(mmd_estimate(&z, &z, 20.0).unwrap() <= 1e-12);
        let far = cloud(&mut rng, 64, 10.0);
        assert!(mmd_estimate(&far, &z, 20.0).unwrap() > 0.5);
        assert!(mmd_estimate(&z[..1], &z[..1], 20.0).is_err());
        assert!(mmd_estimate(&z[..3], &z[..4], 20.0).is_err());
    }

    #[test]
    fn mmd_gradient() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let z = cloud(&mut rng, 5, 1.0);
        let p = cloud(&mut rng, 5, 0.0);
        let (_, g) = mmd_with_grad(&z, &p, 20.0).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for d in 0..10 {
                let mut a = z.clone();
                a[i][d] += h;
                let mut b = z.clone();
                b[i][d] -= h;
                let num = (mmd_estimate(&a, &p, 20.0).unwrap() - mmd_estimate(&b, &p, 20.0).unwrap()) / (2.0 * h);
                assert!((num - g[i][d]).abs() < 1e-8);
            }
        }
    }
}
