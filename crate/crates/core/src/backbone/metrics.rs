//! Intersection-over-union for per-point semantic predictions.

/// Per-class IoU (`None` when a class appears in neither prediction nor
/// label) and their mean over the present classes.
#[derive(Debug, Clone)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `IoU_c = TP / (TP + FP + FN)` per class; rows whose label equals
/// `ignore_index` are skipped entirely.
pub fn miou(
    predictions: &[u32],
    labels: &[u32],
    class_count: usize,
    ignore_index: Option<u32>,
) -> IouReport {
    assert_eq!(predictions.len(), labels.len());
    let mut tp = vec![0u64; class_count];
    let mut fp = vec![0u64; class_count];
    let mut fnc = vec![0u64; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        if Some(l) == ignore_index {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        if p == l {
            tp[p] += 1;
        } else {
            if p < class_count {
                fp[p] += 1;
            }
            fnc[l] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..class_count)
        .map(|c| {
            let denom = tp[c] + fp[c] + fnc[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, mean }
}

/// Row-wise argmax over logits, the prediction rule used everywhere.
pub fn argmax_rows(logits: &crate::nn::FeatureMatrix) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
