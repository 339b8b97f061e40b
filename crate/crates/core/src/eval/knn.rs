use crate::contrastive::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::corpus::{ImageCorpus, SplitManifest};

/// Majority vote over the `k` nearest training rows in Euclidean distance.
/// Distance ties go to the lower training index, vote ties to the lower class.
pub fn knn_classify(
    train_x: &[f32],
    train_y: &[usize],
    test_x: &[f32],
    dim: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if dim == 0 || train_x.len() != train_y.len() * dim || test_x.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "knn: {} training values for {} labels at dimension {dim}",
            train_x.len(),
            train_y.len()
        )));
    }
    if k == 0 || train_y.len() < k {
        return Err(Error::invalid(format!(
            "knn: training split of {} is smaller than k = {k}",
            train_y.len()
        )));
    }
    let n_classes = train_y.iter().max().map_or(0, |m| m + 1);
    Ok(test_x
        .chunks(dim)
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train_x
                .chunks(dim)
                .enumerate()
                .map(|(j, t)| {
                    let s = q.iter().zip(t).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; n_classes];
            for &(_, j) in &d[..k] {
                votes[train_y[j]] += 1;
            }
            votes.iter().enumerate().fold(0, |best, (c, &v)| if v > votes[best] { c } else { best })
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// kNN accuracy of frozen encoder features on the test half of `split`.
pub fn knn_eval(encoder: &Encoder<f32>, corpus: &ImageCorpus, split: &SplitManifest, k: usize) -> Result<f64> {
    let labels = corpus.require_labels()?;
    let features: Tensor<f32> = encoder.encode_batched(&corpus.images, 256)?;
    let dim = features.shape()[1];
    let train = features.index_select(&split.train_index)?;
    let test = features.index_select(&split.test_index)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let predicted = knn_classify(train.data(), &pick(&split.train_index), test.data(), dim, k)?;
    Ok(accuracy(&predicted, &pick(&split.test_index)))
}
