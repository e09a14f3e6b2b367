//! Spatio-temporal IoU, one-to-one track matching, mIoU and Recall.

use crate::error::{Error, Result};
use crate::mask::MaskTrack;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection and union pixels pooled over all frames before dividing.
/// Two empty tracks score 1.
pub fn st_iou(pred: &MaskTrack, gt: &MaskTrack) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "track lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.masks.iter().zip(&gt.masks) {
        if p.dims() != g.dims() {
            return Err(Error::Input(format!(
                "mask resolution differs: {:?} vs {:?}",
                p.dims(),
                g.dims()
            )));
        }
        inter += p.intersection_area(g);
        union += p.union_area(g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Greedy one-to-one matching by descending IoU. Returns, for each reference,
/// the IoU of its matched prediction (0 when unmatched).
pub fn match_tracks(predicted: &[MaskTrack], reference: &[MaskTrack]) -> Result<Vec<f64>> {
    let mut candidates = Vec::with_capacity(predicted.len() * reference.len());
    for (pi, p) in predicted.iter().enumerate() {
        for (ri, r) in reference.iter().enumerate() {
            candidates.push((st_iou(p, r)?, pi, ri));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; predicted.len()];
    let mut matched = vec![None; reference.len()];
    for (iou, pi, ri) in candidates {
        if pred_used[pi] || matched[ri].is_some() {
            continue;
        }
        pred_used[pi] = true;
        matched[ri] = Some(iou);
    }
    Ok(matched.into_iter().map(|m| m.unwrap_or(0.0)).collect())
}

/// Per-sample `(miou, recall)` from the matched reference IoUs; `None` when the
/// sample has no reference objects.
pub fn sample_grounding(matched: &[f64], iou_threshold: f64) -> Option<(f64, f64)> {
    if matched.is_empty() {
        return None;
    }
    let n = matched.len() as f64;
    let miou = matched.iter().sum::<f64>() / n;
    let recall = matched.iter().filter(|&&v| v >= iou_threshold).count() as f64 / n;
    Some((miou, recall))
}

/// Corpus `(miou, recall)`: means of the per-sample values over samples with
/// at least one reference object.
pub fn grounding_scores(
    samples: &[(Vec<MaskTrack>, Vec<MaskTrack>)],
    iou_threshold: f64,
) -> Result<(f64, f64)> {
    let mut per = Vec::new();
    for (pred, refs) in samples {
        if let Some(s) = sample_grounding(&match_tracks(pred, refs)?, iou_threshold) {
            per.push(s);
        }
    }
    if per.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = per.len() as f64;
    Ok((
        per.iter().map(|s| s.0).sum::<f64>() / n,
        per.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}
