//! Softmax cross-entropy over per-row class logits.

use super::tensor::FeatureMatrix;
use super::NnError;

/// Mean softmax cross-entropy over rows whose label is not `ignore_index`,
/// with the gradient w.r.t. the logits.
///
/// The per-row term uses a max-shifted log-sum-exp so saturated logits stay
/// finite. Gradient rows for ignored labels are zero.
pub fn cross_entropy(
    logits: &FeatureMatrix,
    labels: &[u32],
    ignore_index: Option<u32>,
) -> Result<(f32, FeatureMatrix), NnError> {
    assert_eq!(logits.rows(), labels.len(), "one label per row");
    let classes = logits.cols();
    let counted = labels.iter().filter(|&&l| Some(l) != ignore_index).count();
    if counted == 0 {
        return Err(NnError::EmptyLoss);
    }
    for (row, &l) in labels.iter().enumerate() {
        if Some(l) != ignore_index && l as usize >= classes {
            return Err(NnError::LabelOutOfRange {
                label: l,
                classes,
                row,
            });
        }
    }

    let inv_count = 1.0 / counted as f32;
    let mut grad = FeatureMatrix::zeros(logits.rows(), classes);
    let mut loss = 0.0f32;
    for r in 0..logits.rows() {
        if Some(labels[r]) == ignore_index {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let label = labels[r] as usize;
        loss += (log_denom - (row[label] - max)) * inv_count;

        let g = grad.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            let softmax = (v - max).exp() / denom;
            g[j] = (softmax - if j == label { 1.0 } else { 0.0 }) * inv_count;
        }
    }
    Ok((loss, grad))
}
