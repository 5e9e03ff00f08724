use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{ParamStore, Slot};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `W_out · ReLU(W [z_og; z_trans; q] + b)`; tends to entangle the code.
    Mlp,
    /// `W_out · [z_og; z_trans; q]`; tends to entangle the code.
    Linear,
    /// Interpolation with coefficients `σ(W [z_og; z_trans; q] + b)`.
    InterpLearned,
    /// Interpolation with coefficients given by `q` padded with zeros.
    InterpFixed,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Mlp,
        OperatorKind::Linear,
        OperatorKind::InterpLearned,
        OperatorKind::InterpFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Mlp => "mlp",
            OperatorKind::Linear => "linear",
            OperatorKind::InterpLearned => "interp_learned",
            OperatorKind::InterpFixed => "interp_fixed",
        }
    }

    pub fn low_disentanglement(self) -> bool {
        matches!(self, OperatorKind::Mlp | OperatorKind::Linear)
    }
}

/// Intermediate values of one operator application.
#[derive(Clone, Debug)]
pub struct OperatorTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    coefficients: Vec<f64>,
}

impl OperatorTrace {
    /// Interpolation coefficients `c` (empty for the non-interpolating variants).
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionOperator {
    pub kind: OperatorKind,
    latent: usize,
    n_factors: usize,
    w: Option<Slot>,
    b: Option<Slot>,
    w_out: Option<Slot>,
}

impl CompositionOperator {
    pub fn new(
        kind: OperatorKind,
        latent: usize,
        n_factors: usize,
        mlp_hidden: usize,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if n_factors == 0 || n_factors > latent {
            return Err(Error::config(format!(
                "query of length {n_factors} does not fit a latent of size {latent}"
            )));
        }
        let inp = 2 * latent + n_factors;
        let (w, b, w_out) = match kind {
            OperatorKind::Mlp => {
                let w = store.alloc("operator.weight", &[mlp_hidden, inp]);
                let b = store.alloc("operator.bias", &[mlp_hidden]);
                let wo = store.alloc("operator.out_weight", &[latent, mlp_hidden]);
                (Some(w), Some(b), Some(wo))
            }
            OperatorKind::Linear => (None, None, Some(store.alloc("operator.out_weight", &[latent, inp]))),
            OperatorKind::InterpLearned => {
                let w = store.alloc("operator.weight", &[latent, inp]);
                let b = store.alloc("operator.bias", &[latent]);
                (Some(w), Some(b), None)
            }
            OperatorKind::InterpFixed => (None, None, None),
        };
        Ok(CompositionOperator {
            kind,
            latent,
            n_factors,
            w,
            b,
            w_out,
        })
    }

    pub fn n_params(&self) -> usize {
        [self.w, self.b, self.w_out].iter().flatten().map(|s| s.len).sum()
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let inp = (2 * self.latent + self.n_factors) as f64;
        if let Some(w) = self.w {
            let gain: f64 = if self.kind == OperatorKind::Mlp { 6.0 } else { 3.0 };
            store.init_uniform(w, (gain / inp).sqrt(), rng);
        }
        if let Some(b) = self.b {
            store.init_uniform(b, 0.0, rng);
        }
        if let Some(wo) = self.w_out {
            let fan_in = (wo.len / self.latent) as f64;
            store.init_uniform(wo, (3.0 / fan_in).sqrt(), rng);
        }
    }

    pub fn check_query(&self, q: &[f64]) -> Result<usize> {
        if q.len() != self.n_factors {
            return Err(Error::shape(format!("query has length {}, expected {}", q.len(), self.n_factors)));
        }
        let ones: Vec<usize> = q.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        if ones.len() != 1 || q.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape("query is not one-hot"));
        }
        Ok(ones[0])
    }

    pub fn forward(&self, p: &[f64], z_og: &[f64], z_trans: &[f64], q: &[f64]) -> Result<(Vec<f64>, OperatorTrace)> {
        self.check_query(q)?;
        if z_og.len() != self.latent || z_trans.len() != self.latent {
            return Err(Error::shape("latent length mismatch"));
        }
        let input: Vec<f64> = z_og.iter().chain(z_trans).chain(q).copied().collect();
        let mut trace = OperatorTrace {
            input,
            hidden: Vec::new(),
            coefficients: Vec::new(),
        };
        let out = match self.kind {
            OperatorKind::Mlp => {
                let w = self.w.expect("mlp weight");
                let b = self.b.expect("mlp bias");
                let pre = ops::linear_forward(&trace.input, w.get(p), Some(b.get(p)), b.len);
                trace.hidden = ops::relu_forward(&pre);
                ops::linear_forward(&trace.hidden, self.w_out.expect("mlp out").get(p), None, self.latent)
            }
            OperatorKind::Linear => {
                ops::linear_forward(&trace.input, self.w_out.expect("linear out").get(p), None, self.latent)
            }
            OperatorKind::InterpLearned => {
                let w = self.w.expect("interp weight");
                let b = self.b.expect("interp bias");
                let pre = ops::linear_forward(&trace.input, w.get(p), Some(b.get(p)), self.latent);
                trace.coefficients = pre.iter().map(|&v| ops::sigmoid(v)).collect();
                interpolate(z_og, z_trans, &trace.coefficients)
            }
            OperatorKind::InterpFixed => {
                let mut c = vec![0.0; self.latent];
                c[..q.len()].copy_from_slice(q);
                trace.coefficients = c;
                interpolate(z_og, z_trans, &trace.coefficients)
            }
        };
        Ok((out, trace))
    }

    /// Returns gradients with respect to `z_og` and `z_trans`.
    pub fn backward(&self, p: &[f64], trace: &OperatorTrace, gz: &[f64], grads: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let l = self.latent;
        let g_input = match self.kind {
            OperatorKind::Mlp => {
                let wo = self.w_out.expect("mlp out");
                let gh = ops::linear_backward(&trace.hidden, wo.get(p), gz, wo.get_mut(grads), None);
                let gpre = ops::relu_backward(&trace.hidden, &gh);
                let (w, b) = (self.w.expect("mlp weight"), self.b.expect("mlp bias"));
                let (gw, gb) = two_slots(grads, w, b);
                ops::linear_backward(&trace.input, w.get(p), &gpre, gw, Some(gb))
            }
            OperatorKind::Linear => {
                let wo = self.w_out.expect("linear out");
                ops::linear_backward(&trace.input, wo.get(p), gz, wo.get_mut(grads), None)
            }
            OperatorKind::InterpLearned | OperatorKind::InterpFixed => {
                let c = &trace.coefficients;
                let (og, tr) = (&trace.input[..l], &trace.input[l..2 * l]);
                let mut g_og: Vec<f64> = gz.iter().zip(c).map(|(g, c)| g * (1.0 - c)).collect();
                let mut g_tr: Vec<f64> = gz.iter().zip(c).map(|(g, c)| g * c).collect();
                if self.kind == OperatorKind::InterpLearned {
                    let gc: Vec<f64> = (0..l).map(|i| gz[i] * (tr[i] - og[i])).collect();
                    let gpre = ops::sigmoid_backward(c, &gc);
                    let (w, b) = (self.w.expect("interp weight"), self.b.expect("interp bias"));
                    let (gw, gb) = two_slots(grads, w, b);
                    let gi = ops::linear_backward(&trace.input, w.get(p), &gpre, gw, Some(gb));
                    for i in 0..l {
                        g_og[i] += gi[i];
                        g_tr[i] += gi[l + i];
                    }
                }
                return (g_og, g_tr);
            }
        };
        (g_input[..l].to_vec(), g_input[l..2 * l].to_vec())
    }
}

fn two_slots(grads: &mut [f64], w: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    let (gw, rest) = grads[w.offset..].split_at_mut(w.len);
    (gw, &mut rest[b.offset - w.offset - w.len..][..b.len])
}

/// `z_og ⊙ (1 − c) + z_trans ⊙ c`.
pub fn interpolate(z_og: &[f64], z_trans: &[f64], c: &[f64]) -> Vec<f64> {
    z_og.iter()
        .zip(z_trans)
        .zip(c)
        .map(|((&a, &b), &c)| a * (1.0 - c) + b * c)
        .collect()
}
