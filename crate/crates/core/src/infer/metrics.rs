use crate::data::Mask;
use crate::error::{Error, Result};

/// Set sizes `(|A ∩ B|, |A|, |B|)` for two masks of equal shape.
pub fn overlap_counts(pred: &Mask, reference: &Mask) -> Result<(usize, usize, usize)> {
    if (pred.height(), pred.width()) != (reference.height(), reference.width()) {
        return Err(Error::dim(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        )));
    }
    let (mut both, mut a, mut b) = (0, 0, 0);
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        both += (p & r) as usize;
        a += p as usize;
        b += r as usize;
    }
    Ok((both, a, b))
}

/// Dice from overlap counts; two empty sets score 1.
pub fn dice_from_counts(both: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Dice overlap `2|A ∩ B| / (|A| + |B|)`.
pub fn dice(pred: &Mask, reference: &Mask) -> Result<f64> {
    let (both, a, b) = overlap_counts(pred, reference)?;
    Ok(dice_from_counts(both, a, b))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, with
/// average ranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {bad} is not in {{0, 1}}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut lo = 0;
    while lo < order.len() {
        let mut hi = lo + 1;
        while hi < order.len() && scores[order[hi]] == scores[order[lo]] {
            hi += 1;
        }
        // ranks lo+1 ..= hi share their mean
        let mean_rank = (lo + 1 + hi) as f64 / 2.0;
        let tied_pos = order[lo..hi].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += mean_rank * tied_pos as f64;
        lo = hi;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
