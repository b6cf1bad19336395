//! Triplet recall: mR@K over IoU thresholds and their average AR.
//!
//! A prediction recalls a ground truth when both box pairs reach the IoU
//! threshold and the classes agree. Matching is one-to-one and greedy in score
//! order: each prediction claims the unclaimed ground truth with the largest
//! `min(individual IoU, group IoU)`, lowest index first on ties.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::inference::{ImageTriplets, Triplet};

pub const KS: [usize; 3] = [25, 50, 100];
pub const THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

pub fn match_triplet(pred: &Triplet, gt: &Triplet, t: f64) -> bool {
    pred.class_id == gt.class_id && iou(pred.individual_box, gt.individual_box) >= t && iou(pred.group_box, gt.group_box) >= t
}

/// Score-descending order that does not depend on input order.
fn ranked(ts: &[Triplet]) -> Vec<Triplet> {
    let mut v = ts.to_vec();
    let key = |t: &Triplet| {
        let (a, b) = (t.individual_box.to_array(), t.group_box.to_array());
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    };
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then_with(|| {
                key(a).iter().zip(key(b).iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    v
}

/// Recalled-ground-truth flags for one image at one `(K, t)`.
pub fn match_image(preds: &[Triplet], gts: &[Triplet], k: usize, t: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    for p in ranked(preds).iter().take(k) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || !match_triplet(p, g, t) {
                continue;
            }
            let q = iou(p.individual_box, g.individual_box).min(iou(p.group_box, g.group_box));
            if best.is_none_or(|(_, bq)| q > bq) {
                best = Some((j, q));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
    }
    taken
}

/// Pair prediction and ground-truth images by id; both sides must list the same ids.
fn align<'a>(preds: &'a [ImageTriplets], gts: &'a [ImageTriplets]) -> Result<Vec<(&'a [Triplet], &'a [Triplet])>> {
    let mut by_id: BTreeMap<&str, &ImageTriplets> = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    for p in preds {
        if by_id.insert(&p.image_id, p).is_some() {
            duplicates.insert(p.image_id.clone());
        }
    }
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    let missing: Vec<&str> = gts.iter().map(|g| g.image_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    let extra: Vec<&str> = by_id.keys().copied().filter(|id| !gt_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() || !duplicates.is_empty() || gt_ids.len() != gts.len() {
        let mut msg = String::new();
        if !missing.is_empty() {
            let _ = write!(msg, "missing predictions for [{}]", missing.join(", "));
        }
        if !extra.is_empty() {
            let _ = write!(msg, "{}predictions for unknown images [{}]", if msg.is_empty() { "" } else { "; " }, extra.join(", "));
        }
        if !duplicates.is_empty() {
            let d: Vec<String> = duplicates.into_iter().collect();
            let _ = write!(msg, "{}duplicate prediction blocks [{}]", if msg.is_empty() { "" } else { "; " }, d.join(", "));
        }
        if gt_ids.len() != gts.len() {
            let _ = write!(msg, "{}duplicate ground-truth image ids", if msg.is_empty() { "" } else { "; " });
        }
        return Err(Error::ImageIdMismatch(msg));
    }
    Ok(gts.iter().map(|g| (by_id[g.image_id.as_str()].triplets.as_slice(), g.triplets.as_slice())).collect())
}

/// Per-class recall at `(K, t)`; `None` for classes without ground truth.
pub fn recall_at_k(
    preds: &[ImageTriplets],
    gts: &[ImageTriplets],
    k: usize,
    t: f64,
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let pairs = align(preds, gts)?;
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (p, g) in pairs {
        let flags = match_image(p, g, k, t);
        for (gt, f) in g.iter().zip(flags) {
            total[gt.class_id] += 1;
            hit[gt.class_id] += usize::from(f);
        }
    }
    Ok(hit.iter().zip(&total).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecall {
    pub class_id: usize,
    pub gt_count: usize,
    /// `recall[k][t]` in `[0, 1]`, indexed like [`KS`] and [`THRESHOLDS`].
    pub recall: [[f64; 3]; 3],
}

impl ClassRecall {
    /// Threshold-averaged recall at `KS[k]`.
    pub fn mean_over_thresholds(&self, k: usize) -> f64 {
        self.recall[k].iter().sum::<f64>() / THRESHOLDS.len() as f64
    }
}

/// Evaluation summary. Fractions are stored in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Classes with at least one ground truth.
    pub per_class: Vec<ClassRecall>,
    /// mR@K for K in [`KS`].
    pub mean_recall: [f64; 3],
    pub average_recall: f64,
}

impl MetricReport {
    pub fn mean_recall_percent(&self) -> [f64; 3] {
        self.mean_recall.map(|v| 100.0 * v)
    }

    pub fn ar_percent(&self) -> f64 {
        100.0 * self.average_recall
    }

    pub fn to_kv(&self, per_class: bool) -> String {
        let mut s = String::new();
        for (k, v) in KS.iter().zip(self.mean_recall_percent()) {
            let _ = writeln!(s, "mR@{k} = {v:.4}");
        }
        let _ = writeln!(s, "AR = {:.4}", self.ar_percent());
        if per_class {
            for c in &self.per_class {
                let _ = writeln!(s, "class{}.gt = {}", c.class_id, c.gt_count);
                for (ki, k) in KS.iter().enumerate() {
                    let _ = writeln!(s, "class{}.R@{k} = {:.4}", c.class_id, 100.0 * c.mean_over_thresholds(ki));
                }
            }
        }
        s
    }

    pub fn to_table(&self, per_class: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "", "mR@25", "mR@50", "mR@100", "AR");
        let m = self.mean_recall_percent();
        let _ = writeln!(s, "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", "all", m[0], m[1], m[2], self.ar_percent());
        if per_class {
            let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "class", "R@25", "R@50", "R@100", "#gt");
            for c in &self.per_class {
                let r: Vec<f64> = (0..3).map(|k| 100.0 * c.mean_over_thresholds(k)).collect();
                let _ = writeln!(s, "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>8}", c.class_id, r[0], r[1], r[2], c.gt_count);
            }
        }
        s
    }
}

/// Full report over a split. Classes absent from the ground truth are left out of every mean.
pub fn evaluate(preds: &[ImageTriplets], gts: &[ImageTriplets], num_classes: usize) -> Result<MetricReport> {
    let mut table = vec![[[None; 3]; 3]; num_classes];
    for (ki, &k) in KS.iter().enumerate() {
        for (ti, &t) in THRESHOLDS.iter().enumerate() {
            for (c, r) in recall_at_k(preds, gts, k, t, num_classes)?.into_iter().enumerate() {
                table[c][ki][ti] = r;
            }
        }
    }
    let mut counts = vec![0usize; num_classes];
    for g in gts.iter().flat_map(|i| &i.triplets) {
        if g.class_id >= num_classes {
            return Err(Error::Annotation {
                location: "ground truth".into(),
                message: format!("class {} out of range for {num_classes} classes", g.class_id),
            });
        }
        counts[g.class_id] += 1;
    }
    let per_class: Vec<ClassRecall> = (0..num_classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| ClassRecall {
            class_id: c,
            gt_count: counts[c],
            recall: table[c].map(|row| row.map(|v| v.expect("class with ground truth has a recall"))),
        })
        .collect();
    let mut mean_recall = [0.0; 3];
    if !per_class.is_empty() {
        for (ki, m) in mean_recall.iter_mut().enumerate() {
            *m = per_class.iter().map(|c| c.mean_over_thresholds(ki)).sum::<f64>() / per_class.len() as f64;
        }
    }
    let average_recall = mean_recall.iter().sum::<f64>() / 3.0;
    Ok(MetricReport { per_class, mean_recall, average_recall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, CornerBox};
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(CornerBox { x1, y1, x2, y2 })
    }

    fn t(ind: BBox, grp: BBox, class_id: usize, score: f64) -> Triplet {
        Triplet { individual_box: ind, group_box: grp, class_id, score, individual_index: 0, group_index: 0 }
    }

    fn img(id: &str, ts: Vec<Triplet>) -> ImageTriplets {
        ImageTriplets { image_id: id.into(), triplets: ts }
    }

    #[test]
    fn match_rule_examples() {
        let a = corners(0.1, 0.1, 0.3, 0.5);
        let g = corners(0.0, 0.0, 0.6, 0.6);
        assert!(THRESHOLDS.iter().all(|&th| match_triplet(&t(a, g, 2, 0.5), &t(a, g, 2, 1.0), th)));
        assert!(!match_triplet(&t(a, g, 1, 0.5), &t(a, g, 2, 1.0), 0.25));
        // individual IoU 0.6 (0.6 of a unit square overlapping), group IoU 0.4
        let ind_p = corners(0.0, 0.0, 1.0, 1.0);
        let ind_g = corners(0.0, 0.0, 0.6, 1.0);
        let grp_p = corners(0.0, 0.0, 1.0, 1.0);
        let grp_g = corners(0.0, 0.0, 0.4, 1.0);
        assert!((iou(ind_p, ind_g) - 0.6).abs() < 1e-12 && (iou(grp_p, grp_g) - 0.4).abs() < 1e-12);
        let (p, q) = (t(ind_p, grp_p, 0, 0.9), t(ind_g, grp_g, 0, 1.0));
        assert!(match_triplet(&p, &q, 0.25));
        assert!(!match_triplet(&p, &q, 0.5));
    }

    #[test]
    fn perfect_predictions_score_one_hundred() {
        let a = corners(0.1, 0.1, 0.3, 0.5);
        let g = corners(0.0, 0.0, 0.6, 0.6);
        let gts = vec![img("a", vec![t(a, g, 0, 1.0), t(a, g, 2, 1.0)]), img("b", vec![t(g, g, 1, 1.0)])];
        let r = evaluate(&gts, &gts, 4).unwrap();
        assert_eq!(r.ar_percent(), 100.0);
        assert_eq!(r.mean_recall_percent(), [100.0; 3]);
        assert_eq!(r.per_class.len(), 3);
        let zero_k = recall_at_k(&gts, &gts, 0, 0.5, 4).unwrap();
        assert_eq!(zero_k, vec![Some(0.0), Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn image_id_mismatch_lists_offenders() {
        let gts = vec![img("a", vec![]), img("b", vec![])];
        let preds = vec![img("a", vec![]), img("c", vec![])];
        let err = evaluate(&preds, &gts, 2).unwrap_err().to_string();
        assert!(err.contains("b") && err.contains("c"), "{err}");
    }

    #[test]
    fn one_prediction_recalls_one_ground_truth() {
        let a = corners(0.1, 0.1, 0.3, 0.5);
        let g = corners(0.0, 0.0, 0.6, 0.6);
        let gts = vec![img("a", vec![t(a, g, 0, 1.0), t(a, g, 0, 1.0)])];
        let preds = vec![img("a", vec![t(a, g, 0, 0.9)])];
        assert_eq!(recall_at_k(&preds, &gts, 100, 0.5, 1).unwrap(), vec![Some(0.5)]);
    }

    fn arb_split() -> impl Strategy<Value = (Vec<ImageTriplets>, Vec<ImageTriplets>)> {
        let bx = (0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.3, 0.05f64..0.3).prop_map(|(a, b, c, d)| BBox::raw(a, b, c, d));
        let tr = (bx.clone(), bx, 0usize..3, 0.0f64..1.0).prop_map(|(i, g, c, s)| t(i, g, c, s));
        let image = (prop::collection::vec(tr.clone(), 0..40), prop::collection::vec(tr, 0..6));
        prop::collection::vec(image, 1..4).prop_map(|imgs| {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for (i, (p, g)) in imgs.into_iter().enumerate() {
                // make some predictions near-copies of ground truth
                let mut p = p;
                for (j, gt) in g.iter().enumerate() {
                    if j % 2 == 0 {
                        p.push(t(gt.individual_box.translated(0.01, 0.0), gt.group_box, gt.class_id, 0.5));
                    }
                }
                preds.push(img(&format!("img{i}"), p));
                gts.push(img(&format!("img{i}"), g));
            }
            (preds, gts)
        })
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k_and_threshold((preds, gts) in arb_split()) {
            for c in 0..3 {
                let mut prev_k: Option<f64> = None;
                for k in [0, 1, 5, 25, 50, 100] {
                    let r = recall_at_k(&preds, &gts, k, 0.5, 3).unwrap()[c];
                    if let (Some(a), Some(b)) = (prev_k, r) {
                        prop_assert!(b >= a);
                    }
                    prev_k = r;
                }
                let mut prev_t: Option<f64> = None;
                for th in [0.1, 0.25, 0.5, 0.75, 0.9] {
                    let r = recall_at_k(&preds, &gts, 100, th, 3).unwrap()[c];
                    if let (Some(a), Some(b)) = (prev_t, r) {
                        prop_assert!(b <= a);
                    }
                    prev_t = r;
                }
            }
        }

        #[test]
        fn order_independent_and_zero_score_duplicates_harmless((preds, gts) in arb_split()) {
            let base = evaluate(&preds, &gts, 3).unwrap();
            let mut shuffled: Vec<ImageTriplets> = preds.iter().rev().cloned().collect();
            for im in &mut shuffled {
                im.triplets.reverse();
            }
            prop_assert_eq!(&evaluate(&shuffled, &gts, 3).unwrap(), &base);
            let mut dup = preds.clone();
            for im in &mut dup {
                if let Some(first) = im.triplets.first().copied() {
                    im.triplets.push(Triplet { score: 0.0, ..first });
                }
            }
            // a zero-score copy ranks last; with K large enough it cannot displace anything
            let r = evaluate(&dup, &gts, 3).unwrap();
            for (a, b) in r.per_class.iter().zip(&base.per_class) {
                prop_assert_eq!(a.recall, b.recall);
            }
        }

        #[test]
        fn matching_is_one_to_one((preds, gts) in arb_split()) {
            for (p, g) in preds.iter().zip(&gts) {
                let flags = match_image(&p.triplets, &g.triplets, 100, 0.25);
                prop_assert!(flags.iter().filter(|&&f| f).count() <= p.triplets.len().min(100));
            }
        }
    }
}
