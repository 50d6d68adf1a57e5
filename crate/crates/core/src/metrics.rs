//! Classification accuracy and part-segmentation mIoU.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    /// Fraction of samples predicted correctly.
    pub instance: f64,
    /// Unweighted mean of per-class recall over classes present in `labels`.
    pub class: f64,
}

pub fn accuracy_metrics(preds: &[usize], labels: &[usize]) -> Result<Accuracy> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    // (correct, total) per class, iterated in class order.
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &l) in preds.iter().zip(labels) {
        let e = per.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
            correct += 1;
        }
    }
    let recall_sum: f64 = per.values().map(|&(c, t)| c as f64 / t as f64).sum();
    Ok(Accuracy {
        instance: correct as f64 / labels.len() as f64,
        class: recall_sum / per.len() as f64,
    })
}

/// Mean over the shape's category parts of |pred ∩ gt| / |pred ∪ gt|. A part
/// absent from both counts as IoU 1.
pub fn shape_iou(pred: &[usize], gt: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted points for {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("category has no parts".into()));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|l| !parts.contains(l)) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} is not a part of this category {parts:?}"
        )));
    }
    let total: f64 = parts
        .iter()
        .map(|&part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt) {
                let (a, b) = (p == part, g == part);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / parts.len() as f64)
}

/// Mean of [`shape_iou`] over shapes. `category_parts[i]` is the part set of
/// shape `i`'s category.
pub fn part_miou(preds: &[Vec<usize>], gts: &[Vec<usize>], category_parts: &[&[usize]]) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != category_parts.len() {
        return Err(Error::InvalidArgument("mismatched shape counts".into()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("mIoU of an empty set".into()));
    }
    let mut sum = 0.0;
    for ((p, g), parts) in preds.iter().zip(gts).zip(category_parts) {
        sum += shape_iou(p, g, parts)?;
    }
    Ok(sum / preds.len() as f64)
}
