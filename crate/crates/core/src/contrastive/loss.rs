use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Added to self-similarities so they vanish from the softmax.
const SELF_MASK: f64 = -1e9;

/// NT-Xent over `2M` unit-norm embeddings where rows `i` and `i + M` are the
/// two views of image `i`: the mean over all anchors of the cross-entropy
/// of picking the positive among the other `2M - 1` rows at temperature `tau`.
pub fn ntxent<F: Element>(embeddings: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    let &[rows, _] = embeddings.shape() else {
        return Err(Error::shape("ntxent", embeddings.shape(), &[0, 0]));
    };
    if rows % 2 != 0 || rows < 4 {
        return Err(Error::invalid(format!(
            "ntxent needs two views of at least 2 images, got {rows} rows"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("ntxent temperature must be positive, got {temperature}")));
    }
    let m = rows / 2;
    let sim = embeddings
        .matmul(&embeddings.transpose2d()?)?
        .scale(F::c(1.0 / temperature));
    let mut mask = vec![F::zero(); rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = F::c(SELF_MASK);
    }
    let logp = sim.add(&Tensor::new(&[rows, rows], mask)?)?.log_softmax(1)?;
    let positives: Vec<Vec<usize>> = (0..rows).map(|i| vec![(i + m) % rows]).collect();
    Ok(logp.gather_cols(&positives)?.mean_all().neg())
}

/// Softmax cross-entropy of `[N, C]` logits against integer labels.
pub fn cross_entropy<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len(), 0]));
    };
    if n != labels.len() || labels.iter().any(|&l| l >= c) {
        return Err(Error::invalid(format!(
            "cross_entropy: {} labels for {n} rows of {c} classes",
            labels.len()
        )));
    }
    let picked: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    Ok(logits.log_softmax(1)?.gather_cols(&picked)?.mean_all().neg())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_log_three() {
        let e = Tensor::<f64>::new(&[4, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let l = ntxent(&e, 0.2).unwrap().item().unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_image_batch_is_rejected() {
        assert!(ntxent(&Tensor::<f64>::zeros(&[2, 3]), 0.2).is_err());
        assert!(ntxent(&Tensor::<f64>::zeros(&[5, 3]), 0.2).is_err());
    }

    #[test]
    fn aligned_positives_beat_uniform() {
        let e = Tensor::<f64>::new(&[4, 2], vec![1., 0., 0., 1., 1., 0., 0., 1.]).unwrap();
        assert!(ntxent(&e, 0.2).unwrap().item().unwrap() < 3f64.ln());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l.item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&Tensor::<f64>::zeros(&[3, 4]), &[0, 1, 4]).is_err());
    }
}
