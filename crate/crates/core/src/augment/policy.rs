//! Learnable policies: softmax-weighted blends of all operations, composed
//! sequentially over sub-policies.

use serde::{Deserialize, Serialize};

use super::ops::{apply_aug, AugOpKind, AugmentConfig, NUM_OPS};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// Per-sub-policy operation logits and unconstrained magnitudes, both
/// `[n_subpolicies, NUM_OPS]`.
#[derive(Debug, Clone)]
pub struct PolicyParams<F: Element = f32> {
    pub logits: Tensor<F>,
    pub raw_magnitudes: Tensor<F>,
    pub temperature: f64,
}

impl<F: Element> PolicyParams<F> {
    /// Uniform logits and range-midpoint magnitudes.
    pub fn new(n_subpolicies: usize, temperature: f64) -> Result<Self> {
        if n_subpolicies == 0 {
            return Err(Error::invalid("a policy needs at least one sub-policy"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("policy temperature must be positive, got {temperature}")));
        }
        let shape = [n_subpolicies, NUM_OPS];
        Ok(Self {
            logits: Tensor::zeros(&shape),
            raw_magnitudes: Tensor::zeros(&shape),
            temperature,
        })
    }

    pub fn from_parts(logits: Tensor<F>, raw_magnitudes: Tensor<F>, temperature: f64) -> Result<Self> {
        let ok = |t: &Tensor<F>| t.ndim() == 2 && t.shape()[1] == NUM_OPS && t.shape()[0] > 0;
        if !ok(&logits) || logits.shape() != raw_magnitudes.shape() {
            return Err(Error::shape("PolicyParams", logits.shape(), raw_magnitudes.shape()));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("policy temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            logits,
            raw_magnitudes,
            temperature,
        })
    }

    pub fn n_subpolicies(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Copies of both parameter matrices registered as leaves on `tape`.
    pub fn attach(&self, tape: &Tape<F>) -> Self {
        Self {
            logits: tape.leaf(&self.logits.detach()),
            raw_magnitudes: tape.leaf(&self.raw_magnitudes.detach()),
            temperature: self.temperature,
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.detach(),
            raw_magnitudes: self.raw_magnitudes.detach(),
            temperature: self.temperature,
        }
    }

    pub fn logits_row(&self, n: usize) -> Result<Tensor<F>> {
        self.logits.narrow(n, 1)?.reshape(&[NUM_OPS])
    }

    pub fn raw_row(&self, n: usize) -> Result<Tensor<F>> {
        self.raw_magnitudes.narrow(n, 1)?.reshape(&[NUM_OPS])
    }

    /// `softmax(w[n] / temperature)`.
    pub fn weights(&self, n: usize) -> Result<Tensor<F>> {
        blend_weights(&self.logits_row(n)?, self.temperature)
    }

    /// Magnitudes of row `n` mapped into each operation's range.
    pub fn magnitudes(&self, n: usize, config: &AugmentConfig) -> Result<Tensor<F>> {
        map_magnitudes(&self.raw_row(n)?, config)
    }

    pub fn to_record(&self) -> PolicyRecord {
        PolicyRecord {
            temperature: self.temperature,
            logits: rows(&self.logits),
            raw_magnitudes: rows(&self.raw_magnitudes),
        }
    }

    pub fn from_record(record: &PolicyRecord) -> Result<Self> {
        let flat = |m: &[Vec<f64>]| -> Result<Tensor<F>> {
            if m.iter().any(|r| r.len() != NUM_OPS) {
                return Err(Error::invalid("policy rows must have one entry per operation"));
            }
            Tensor::new(&[m.len(), NUM_OPS], m.iter().flatten().map(|&v| F::c(v)).collect())
        };
        Self::from_parts(flat(&record.logits)?, flat(&record.raw_magnitudes)?, record.temperature)
    }
}

fn rows<F: Element>(t: &Tensor<F>) -> Vec<Vec<f64>> {
    t.data()
        .chunks(NUM_OPS)
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect()
}

/// Serializable snapshot of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub temperature: f64,
    pub logits: Vec<Vec<f64>>,
    pub raw_magnitudes: Vec<Vec<f64>>,
}

pub fn blend_weights<F: Element>(logits_row: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    logits_row.scale(F::c(1.0 / temperature)).softmax(0)
}

/// Maps one unconstrained parameter into the range of `kind`.
pub fn map_magnitude<F: Element>(kind: AugOpKind, raw: &Tensor<F>, config: &AugmentConfig) -> Tensor<F> {
    let spec = kind.magnitude_spec();
    if !spec.has_magnitude() {
        return raw.scale(F::zero());
    }
    if kind == AugOpKind::GaussianBlur {
        return raw.softplus().scale(F::c(config.blur_sigma_scale));
    }
    raw.sigmoid().affine(F::c(spec.high - spec.low), F::c(spec.low))
}

/// Scalar version of [`map_magnitude`].
pub fn map_magnitude_value(kind: AugOpKind, raw: f64, config: &AugmentConfig) -> f64 {
    map_magnitude(kind, &Tensor::<f64>::scalar(raw), config).data()[0]
}

pub fn map_magnitudes<F: Element>(raw_row: &Tensor<F>, config: &AugmentConfig) -> Result<Tensor<F>> {
    let parts = AugOpKind::ALL
        .into_iter()
        .map(|k| Ok(map_magnitude(k, &raw_row.take(vec![k.index()], &[1])?, config)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// One blended sub-policy: `sum_k softmax(w / temperature)_k * O_k(x; m_k)`.
/// `magnitudes_row` holds mapped (in-range) magnitudes; `index` only labels errors.
pub fn subpolicy_forward<F: Element>(
    images: &Tensor<F>,
    logits_row: &Tensor<F>,
    magnitudes_row: &Tensor<F>,
    temperature: f64,
    index: usize,
    config: &AugmentConfig,
) -> Result<Tensor<F>> {
    if logits_row.shape() != [NUM_OPS] || magnitudes_row.shape() != [NUM_OPS] {
        return Err(Error::shape("subpolicy_forward", logits_row.shape(), magnitudes_row.shape()));
    }
    if logits_row.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NanLogits { subpolicy: index });
    }
    let weights = blend_weights(logits_row, temperature)?;
    let mut out: Option<Tensor<F>> = None;
    for kind in AugOpKind::ALL {
        let k = kind.index();
        let m = magnitudes_row.take(vec![k], &[])?;
        let w = weights.take(vec![k], &[])?;
        let term = apply_aug(images, kind, &m, config)?.mul(&w)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(out.expect("NUM_OPS > 0").clamp(F::zero(), F::one()))
}

/// `tau(x)`: the sub-policy blends applied in index order.
pub fn policy_forward_search<F: Element>(
    images: &Tensor<F>,
    params: &PolicyParams<F>,
    config: &AugmentConfig,
) -> Result<Tensor<F>> {
    let mut x = images.clone();
    for n in 0..params.n_subpolicies() {
        x = subpolicy_forward(
            &x,
            &params.logits_row(n)?,
            &params.magnitudes(n, config)?,
            params.temperature,
            n,
            config,
        )?;
    }
    Ok(x)
}
