//! Losses minimised by the policy search. Every objective sees the same
//! augmented views; only the scalar it builds from them differs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{base_view, BaseAugmentConfig};
use crate::contrastive::{cross_entropy, ntxent, stream_rng, streams, Encoder, Linear, Mode, Optimizer, OptimizerConfig, Projector};
use crate::error::{Error, Result};
use crate::lid::{dda_loss, LidConfig, LidLoss};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Dda,
    SelfAugment,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dda" => Ok(Self::Dda),
            "self-augment" | "selfaugment" => Ok(Self::SelfAugment),
            _ => Err(Error::invalid(format!("unknown search objective {s:?} (dda, self-augment)"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dda => "dda",
            Self::SelfAugment => "self-augment",
        })
    }
}

pub struct ObjectiveValue {
    pub loss: Tensor<f32>,
    /// LID diagnostic of the batch representations, when the objective computes one.
    pub lid: Option<LidLoss<f32>>,
}

pub trait SearchObjective {
    fn name(&self) -> &str;

    /// Augmented views consumed per batch, 1 or 2.
    fn n_views(&self) -> usize;

    /// Scalar loss of the policy-augmented `views` under the frozen encoder.
    fn evaluate(&self, encoder: &Encoder<f32>, views: &[Tensor<f32>]) -> Result<ObjectiveValue>;
}

/// `-mean ln LID` of the representations of one augmented view.
pub struct DdaObjective {
    pub lid: LidConfig,
}

impl SearchObjective for DdaObjective {
    fn name(&self) -> &str {
        "dda"
    }

    fn n_views(&self) -> usize {
        1
    }

    fn evaluate(&self, encoder: &Encoder<f32>, views: &[Tensor<f32>]) -> Result<ObjectiveValue> {
        let (z, _) = encoder.forward(&views[0], Mode::Eval)?;
        let lid = dda_loss(&z, &self.lid)?;
        Ok(ObjectiveValue {
            loss: lid.loss.clone(),
            lid: Some(lid),
        })
    }
}

/// Linear 4-way rotation classifier on standardised frozen features.
#[derive(Debug, Clone)]
pub struct RotationHead {
    pub linear: Linear<f32>,
    pub mean: Tensor<f32>,
    pub inv_std: Tensor<f32>,
    /// Held-out accuracy measured when the head was fitted.
    pub accuracy: f64,
}

impl RotationHead {
    pub fn logits(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.linear.forward(&z.sub(&self.mean)?.mul(&self.inv_std)?)
    }
}

/// Each image `i` rotated by `i mod 4` quarter turns, with the turn counts as labels.
pub fn rotate_batch(images: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = images.shape()[0];
    let mut parts = Vec::with_capacity(4);
    let mut labels = Vec::with_capacity(n);
    for r in 0..4 {
        let idx: Vec<usize> = (r..n).step_by(4).collect();
        if idx.is_empty() {
            continue;
        }
        parts.push(images.index_select(&idx)?.rot90(r)?);
        labels.extend(std::iter::repeat_n(r, idx.len()));
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok((Tensor::concat(&refs)?, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            train_fraction: 0.8,
        }
    }
}

/// Fits the rotation head once on all four rotations of base-augmented images.
pub fn train_rotation_head(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    base: &BaseAugmentConfig,
    config: &RotationConfig,
    seed: u64,
) -> Result<RotationHead> {
    let n = images.shape()[0];
    let mut rng = stream_rng(seed, streams::ROTATION);
    let views = base_view(images, &mut rng, base)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * config.train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let featurize = |idx: &[usize]| -> Result<(Tensor<f32>, Vec<usize>)> {
        let sel = views.index_select(idx)?;
        let mut feats = Vec::with_capacity(4);
        let mut labels = Vec::with_capacity(4 * idx.len());
        for r in 0..4 {
            feats.push(encoder.encode_batched(&sel.rot90(r)?, 256)?);
            labels.extend(std::iter::repeat_n(r, idx.len()));
        }
        let refs: Vec<&Tensor<f32>> = feats.iter().collect();
        Ok((Tensor::concat(&refs)?, labels))
    };
    let (train_x, train_y) = featurize(&order[..n_train])?;
    let d = train_x.shape()[1];
    let rows = train_x.shape()[0] as f64;
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for row in train_x.data().chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x) / rows;
        }
    }
    for row in train_x.data().chunks(d) {
        for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (f64::from(x) - m).powi(2) / rows;
        }
    }
    let mut head = RotationHead {
        linear: Linear::zeros(d, 4),
        mean: Tensor::new(&[d], mean.iter().map(|&m| m as f32).collect())?,
        inv_std: Tensor::new(&[d], var.iter().map(|&v| if v > 1e-12 { (1.0 / v.sqrt()) as f32 } else { 0.0 }).collect())?,
        accuracy: 0.0,
    };
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr));
    for _ in 0..config.epochs {
        let tape = Tape::new();
        let live = Linear {
            weight: tape.leaf(&head.linear.weight),
            bias: tape.leaf(&head.linear.bias),
        };
        let probe = RotationHead {
            linear: live.clone(),
            ..head.clone()
        };
        let loss = cross_entropy(&probe.logits(&train_x)?, &train_y)?;
        let grads = tape.backward(&loss)?;
        let gw = grads.get(&live.weight).ok_or_else(|| Error::Backward("rotation head weight".into()))?;
        let gb = grads.get(&live.bias).ok_or_else(|| Error::Backward("rotation head bias".into()))?;
        opt.step(&mut [&mut head.linear.weight, &mut head.linear.bias], &[gw, gb])?;
    }
    let held_out = if n_train < n { &order[n_train..] } else { &order[..n_train] };
    let (test_x, test_y) = featurize(held_out)?;
    let logits = head.logits(&test_x)?;
    let hits = logits
        .data()
        .chunks(4)
        .zip(&test_y)
        .filter(|(row, &y)| (0..4).fold(0, |b, j| if row[j] > row[b] { j } else { b }) == y)
        .count();
    head.accuracy = hits as f64 / test_y.len() as f64;
    Ok(head)
}

/// SelfAugment min-max: rotation cross-entropy on view 1 minus NT-Xent over both views.
pub struct SelfAugmentObjective {
    pub projector: Projector<f32>,
    pub head: RotationHead,
    pub temperature: f64,
}

impl SelfAugmentObjective {
    /// `(L_SS, L_NTXent)` of the given views.
    pub fn components(&self, encoder: &Encoder<f32>, views: &[Tensor<f32>]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (rotated, labels) = rotate_batch(&views[0])?;
        let (z_rot, _) = encoder.forward(&rotated, Mode::Eval)?;
        let l_ss = cross_entropy(&self.head.logits(&z_rot)?, &labels)?;
        let (z, _) = encoder.forward(&Tensor::concat(&[&views[0], &views[1]])?, Mode::Eval)?;
        let l_nt = ntxent(&self.projector.project(&z)?, self.temperature)?;
        Ok((l_ss, l_nt))
    }
}

impl SearchObjective for SelfAugmentObjective {
    fn name(&self) -> &str {
        "self-augment"
    }

    fn n_views(&self) -> usize {
        2
    }

    fn evaluate(&self, encoder: &Encoder<f32>, views: &[Tensor<f32>]) -> Result<ObjectiveValue> {
        let (l_ss, l_nt) = self.components(encoder, views)?;
        Ok(ObjectiveValue {
            loss: l_ss.sub(&l_nt)?,
            lid: None,
        })
    }
}
