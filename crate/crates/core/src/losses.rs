//! Training objectives: label-smoothed cross-entropy, batch-hard triplet
//! loss on the pre-batch-norm embeddings, and their unit-weighted sum.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Smoothed target distribution for a 1-based label y in {1, ..., n}:
/// q'(i) = (1 - eps) * [i == y] + eps / n.
pub fn smoothed_labels<F: Scalar>(y: usize, eps: F, n: usize) -> Result<Vec<F>> {
    if n == 0 {
        return Err(Error::invalid("label smoothing", "num_classes must be positive"));
    }
    if y < 1 || y > n {
        return Err(Error::invalid(
            "label",
            format!("y = {} out of range 1..={}", y, n),
        ));
    }
    if eps < F::zero() || eps >= F::one() {
        return Err(Error::invalid(
            "smoothing epsilon",
            format!("must be in [0, 1), got {}", eps),
        ));
    }
    let floor = eps / cast::<F>(n as f64);
    Ok((1..=n)
        .map(|i| if i == y { F::one() - eps + floor } else { floor })
        .collect())
}

/// Stacks smoothed labels for a batch of 1-based class labels into a
/// B x N target matrix.
pub fn smoothed_label_matrix<F: Scalar>(ys: &[usize], eps: F, n: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(ys.len() * n);
    for &y in ys {
        data.extend(smoothed_labels(y, eps, n)?);
    }
    Tensor::new(vec![ys.len(), n], data)
}

/// Mean over the batch of the cross-entropy between fixed target rows and
/// softmax(logits), with max-shift stabilization.
pub fn cross_entropy<F: Scalar>(
    tape: &mut Tape<F>,
    logits: ValueId,
    targets: &Tensor<F>,
) -> Result<ValueId> {
    tape.cross_entropy(logits, targets)
}

/// Batch-hard triplet loss: per anchor the farthest positive and nearest
/// negative by Euclidean distance, hinged at the margin and averaged.
pub fn batch_hard_triplet<F: Scalar>(
    tape: &mut Tape<F>,
    embeddings: ValueId,
    ids: &[usize],
    margin: F,
) -> Result<ValueId> {
    tape.batch_hard_triplet(embeddings, ids, margin)
}

/// Unit-weighted total objective: all cross-entropy terms, then all
/// triplet terms, then the penalty, summed in that fixed order.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    ce_terms: &[ValueId],
    triplet_terms: &[ValueId],
    penalty: Option<ValueId>,
) -> Result<ValueId> {
    let mut acc: Option<ValueId> = None;
    for &term in ce_terms.iter().chain(triplet_terms.iter()).chain(penalty.iter()) {
        acc = Some(match acc {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::invalid("total loss", "no loss terms supplied"))
}
