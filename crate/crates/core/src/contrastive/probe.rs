//! Linear-probe evaluation of frozen features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::cross_entropy;
use super::model::{Encoder, Linear};
use super::optim::{Optimizer, OptimizerConfig};
use super::train::{stream_rng, streams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Images encoded per forward pass.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
            train_fraction: 0.8,
            seed: 0,
            chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Held-out accuracy in [0, 1].
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

/// Seeded per-class split; every class with at least two members lands in both halves.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = stream_rng(seed, streams::PROBE);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut k = (members.len() as f64 * train_fraction).round() as usize;
        if members.len() >= 2 {
            k = k.clamp(1, members.len() - 1);
        } else {
            k = 1;
        }
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn standardize(train: &Tensor<f32>, test: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = train.shape()[1];
    let n = train.shape()[0] as f64;
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for row in train.data().chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x) / n;
        }
    }
    for row in train.data().chunks(d) {
        for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (f64::from(x) - m).powi(2) / n;
        }
    }
    let apply = |t: &Tensor<f32>| {
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter().enumerate().map(|(j, &x)| {
                    let sd = var[j].sqrt();
                    if sd < 1e-6 {
                        0.0
                    } else {
                        ((f64::from(x) - mean[j]) / sd) as f32
                    }
                })
            })
            .collect();
        Tensor::new(t.shape(), data)
    };
    Ok((apply(train)?, apply(test)?))
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a softmax linear classifier on standardised `[n, d]` features with
/// full-batch Adam and reports held-out accuracy.
pub fn probe_features(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (&[n_train, d], &[n_test, d2]) = (train_x.shape(), test_x.shape()) else {
        return Err(Error::shape("linear_probe", train_x.shape(), test_x.shape()));
    };
    if d != d2 || n_train != train_y.len() || n_test != test_y.len() {
        return Err(Error::invalid(format!(
            "linear probe: {n_train}x{d} / {n_test}x{d2} features for {} / {} labels",
            train_y.len(),
            test_y.len()
        )));
    }
    if n_train == 0 {
        return Err(Error::EmptyCorpus);
    }
    let n_classes = train_y.iter().max().map_or(0, |m| m + 1);
    if let Some(&bad) = test_y.iter().find(|&&y| !train_y.contains(&y)) {
        return Err(Error::invalid(format!("test label {bad} never appears in the training split")));
    }
    let (train_x, test_x) = standardize(train_x, test_x)?;
    let mut layer = Linear::<f32>::zeros(d, n_classes.max(2));
    let mut opt = Optimizer::new(OptimizerConfig {
        weight_decay: config.weight_decay,
        ..OptimizerConfig::adam(config.lr)
    });
    for _ in 0..config.epochs {
        let tape = Tape::new();
        let live = Linear {
            weight: tape.leaf(&layer.weight),
            bias: tape.leaf(&layer.bias),
        };
        let loss = cross_entropy(&live.forward(&train_x)?, train_y)?;
        let grads = tape.backward(&loss)?;
        let gw = grads.get(&live.weight).ok_or_else(|| Error::Backward("probe weight".into()))?;
        let gb = grads.get(&live.bias).ok_or_else(|| Error::Backward("probe bias".into()))?;
        opt.step(&mut [&mut layer.weight, &mut layer.bias], &[gw, gb])?;
    }
    Ok(ProbeResult {
        accuracy: accuracy(&layer.forward(&test_x)?, test_y),
        train_accuracy: accuracy(&layer.forward(&train_x)?, train_y),
        n_train,
        n_test,
        n_classes,
    })
}

/// Splits labelled images, encodes them with the frozen encoder and probes the features.
pub fn linear_probe(
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n != labels.len() {
        return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
    }
    let (train, test) = stratified_split(labels, config.train_fraction, config.seed)?;
    let features = encoder.encode_batched(images, config.chunk.max(1))?;
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    probe_features(
        &features.index_select(&train)?,
        &pick(&train),
        &features.index_select(&test)?,
        &pick(&test),
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let (tr, te) = stratified_split(&labels, 0.8, 7).unwrap();
        assert_eq!(tr.len() + te.len(), 50);
        assert!(tr.iter().all(|i| !te.contains(i)));
        for c in 0..3 {
            assert!(te.iter().any(|&i| labels[i] == c));
        }
        assert_eq!(stratified_split(&labels, 0.8, 7).unwrap(), (tr, te));
    }

    #[test]
    fn unseen_test_label_is_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(probe_features(&x, &[0, 0], &x, &[0, 1], &ProbeConfig::default()).is_err());
    }
}
