//! Triplet assembly from head outputs, duplicate suppression, and the
//! prediction file format.
//!
//! Prediction file, one block per image:
//!
//! ```text
//! image <image_id> <count>
//! <ind_x1> <ind_y1> <ind_x2> <ind_y2> <grp_x1> <grp_y1> <grp_x2> <grp_y2> <class> <score> [<ind_idx> <grp_idx>]
//! ```
//!
//! Coordinates are normalized corners. Lines starting with `#` are comments.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, CornerBox};
use crate::losses::sigmoid;
use crate::network::PredictionSet;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_TRIPLETS: usize = 100;

/// One `<individual, group, interaction>` prediction or ground-truth entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub individual_box: BBox,
    pub group_box: BBox,
    pub class_id: usize,
    pub score: f64,
    pub individual_index: usize,
    pub group_index: usize,
}

/// Triplets of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTriplets {
    pub image_id: String,
    pub triplets: Vec<Triplet>,
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Every group query pairs with its most similar individual query; one triplet
/// per class whose probability is at least `score_floor`. Boxes are clipped to the image.
pub fn assemble_triplets(p: &PredictionSet, score_floor: f64) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (gi, (logits, sim)) in p.class_logits.iter().zip(&p.similarity).enumerate() {
        let Some(j) = argmax(sim) else { continue };
        for (k, &logit) in logits.iter().enumerate() {
            let score = sigmoid(logit);
            if score >= score_floor {
                out.push(Triplet {
                    individual_box: p.individual_boxes[j].clamped(),
                    group_box: p.group_boxes[gi].clamped(),
                    class_id: k,
                    score,
                    individual_index: j,
                    group_index: gi,
                });
            }
        }
    }
    out
}

/// Descending score, then group index, then class index.
pub fn score_order(a: &Triplet, b: &Triplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.group_index.cmp(&b.group_index))
        .then(a.class_id.cmp(&b.class_id))
}

/// True when `a` and `b` have the same class and both box pairs overlap with IoU above `theta`.
pub fn suppresses(a: &Triplet, b: &Triplet, theta: f64) -> bool {
    a.class_id == b.class_id && iou(a.individual_box, b.individual_box) > theta && iou(a.group_box, b.group_box) > theta
}

/// Greedy triplet NMS. Output is sorted by [`score_order`].
pub fn triplet_nms(ts: &[Triplet], theta: f64) -> Vec<Triplet> {
    let mut sorted = ts.to_vec();
    sorted.sort_by(score_order);
    let mut kept: Vec<Triplet> = Vec::new();
    for t in sorted {
        if !kept.iter().any(|k| suppresses(k, &t, theta)) {
            kept.push(t);
        }
    }
    kept
}

/// Assemble, suppress, and keep the `cap` best.
pub fn postprocess(p: &PredictionSet, score_floor: f64, theta: f64, cap: usize) -> Vec<Triplet> {
    let mut ts = triplet_nms(&assemble_triplets(p, score_floor), theta);
    ts.truncate(cap);
    ts
}

fn corners_str(b: BBox) -> String {
    let c = b.to_corners();
    format!("{} {} {} {}", c.x1, c.y1, c.x2, c.y2)
}

pub fn format_predictions(images: &[ImageTriplets]) -> String {
    let mut s = String::from(
        "# ind_x1 ind_y1 ind_x2 ind_y2 grp_x1 grp_y1 grp_x2 grp_y2 class score ind_idx grp_idx\n",
    );
    for img in images {
        let _ = writeln!(s, "image {} {}", img.image_id, img.triplets.len());
        for t in &img.triplets {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                corners_str(t.individual_box),
                corners_str(t.group_box),
                t.class_id,
                t.score,
                t.individual_index,
                t.group_index
            );
        }
    }
    s
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<ImageTriplets>> {
    let mut out: Vec<ImageTriplets> = Vec::new();
    let mut remaining = 0usize;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let location = format!("{source}:{}", i + 1);
        last_line = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "image" {
            if remaining != 0 {
                return Err(Error::parse(location, format!("previous image is missing {remaining} triplets")));
            }
            if fields.len() != 3 {
                return Err(Error::parse(location, "expected `image <id> <count>`"));
            }
            remaining = fields[2].parse().map_err(|e| Error::parse(&location, format!("count: {e}")))?;
            out.push(ImageTriplets { image_id: fields[1].to_string(), triplets: Vec::with_capacity(remaining) });
            continue;
        }
        let Some(img) = out.last_mut().filter(|_| remaining > 0) else {
            return Err(Error::parse(location, "triplet line outside an image block"));
        };
        if fields.len() != 10 && fields.len() != 12 {
            return Err(Error::parse(location, format!("expected 10 or 12 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse::<f64>().map_err(|e| Error::parse(&location, format!("field {}: {e}", k + 1)))
        };
        let idx = |k: usize| -> Result<usize> {
            fields[k].parse::<usize>().map_err(|e| Error::parse(&location, format!("field {}: {e}", k + 1)))
        };
        let corner = |o: usize| -> Result<BBox> {
            Ok(BBox::from_corners(CornerBox { x1: num(o)?, y1: num(o + 1)?, x2: num(o + 2)?, y2: num(o + 3)? }))
        };
        let (individual_index, group_index) = if fields.len() == 12 { (idx(10)?, idx(11)?) } else { (0, 0) };
        img.triplets.push(Triplet {
            individual_box: corner(0)?,
            group_box: corner(4)?,
            class_id: idx(8)?,
            score: num(9)?,
            individual_index,
            group_index,
        });
        remaining -= 1;
    }
    if remaining != 0 {
        return Err(Error::parse(format!("{source}:{last_line}"), format!("file ends {remaining} triplets short")));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, images: &[ImageTriplets]) -> Result<()> {
    std::fs::write(path, format_predictions(images)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ImageTriplets>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triplet(ind: BBox, grp: BBox, class_id: usize, score: f64, gi: usize) -> Triplet {
        Triplet { individual_box: ind, group_box: grp, class_id, score, individual_index: 0, group_index: gi }
    }

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn prediction(sim: Vec<Vec<f64>>, logits: Vec<Vec<f64>>) -> PredictionSet {
        let n_i = sim[0].len();
        let n_g = sim.len();
        PredictionSet {
            individual_boxes: (0..n_i).map(|j| bx(0.1 + 0.1 * j as f64, 0.5, 0.05, 0.2)).collect(),
            objectness: vec![0.0; n_i],
            group_boxes: (0..n_g).map(|i| bx(0.5, 0.2 + 0.1 * i as f64, 0.4, 0.1)).collect(),
            class_logits: logits,
            similarity: sim,
        }
    }

    #[test]
    fn argmax_picks_unique_max_and_lowest_tie() {
        assert_eq!(argmax(&[0.1, 0.2, 0.0, 0.9, 0.3]), Some(3));
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        let shifted: Vec<f64> = [0.1, 0.2, 0.0, 0.9, 0.3].iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&shifted), Some(3));
    }

    #[test]
    fn triplet_uses_most_similar_individual() {
        let p = prediction(vec![vec![0.0, 1.0, -1.0, 5.0, 2.0]], vec![vec![3.0, -3.0]]);
        let ts = assemble_triplets(&p, 0.5);
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].individual_index, 3);
        assert_eq!(ts[0].individual_box, p.individual_boxes[3]);
        assert_eq!(ts[0].class_id, 0);
        assert!((ts[0].score - sigmoid(3.0)).abs() < 1e-15);
    }

    #[test]
    fn multi_label_group_emits_one_triplet_per_class() {
        let p = prediction(vec![vec![0.0, 2.0]], vec![vec![2.0, -4.0, 1.0]]);
        let ts = assemble_triplets(&p, 0.5);
        let classes: Vec<usize> = ts.iter().map(|t| t.class_id).collect();
        assert_eq!(classes, vec![0, 2]);
        assert!(ts.iter().all(|t| t.individual_box == ts[0].individual_box && t.group_box == ts[0].group_box));
        assert_ne!(ts[0].score, ts[1].score);
        // floor 0 emits every class
        assert_eq!(assemble_triplets(&p, 0.0).len(), 3);
    }

    #[test]
    fn boxes_clipped_at_inference() {
        let mut p = prediction(vec![vec![1.0]], vec![vec![0.0]]);
        p.individual_boxes[0] = BBox::raw(0.95, 0.5, 0.2, 0.2);
        let t = assemble_triplets(&p, 0.0)[0];
        assert!((t.individual_box.to_corners().x2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_theta_can_shrink_greedy_output() {
        // A suppresses B only at the low threshold; once B survives it
        // suppresses C and D, which A alone cannot reach.
        let t = |ind_cx: f64, grp_cx: f64, score: f64| Triplet {
            individual_box: BBox::raw(ind_cx, 0.5, 0.2, 0.4),
            group_box: BBox::raw(grp_cx, 0.5, 0.2, 0.3),
            class_id: 0,
            score,
            individual_index: 0,
            group_index: 0,
        };
        let ts = [t(0.5, 0.3, 0.9), t(0.5, 0.358, 0.8), t(0.46, 0.398, 0.7), t(0.54, 0.398, 0.6)];
        assert_eq!(triplet_nms(&ts, 0.5).len(), 3);
        assert_eq!(triplet_nms(&ts, 0.6).len(), 2);
    }

    #[test]
    fn identical_triplets_keep_higher_score() {
        let (a, g) = (bx(0.3, 0.3, 0.2, 0.2), bx(0.4, 0.4, 0.5, 0.5));
        let out = triplet_nms(&[triplet(a, g, 1, 0.8, 1), triplet(a, g, 1, 0.9, 0)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn different_classes_both_survive() {
        let (a, g) = (bx(0.3, 0.3, 0.2, 0.2), bx(0.4, 0.4, 0.5, 0.5));
        let out = triplet_nms(&[triplet(a, g, 1, 0.9, 0), triplet(a, g, 2, 0.8, 0)], 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn only_individual_overlap_is_not_enough() {
        let a = bx(0.3, 0.3, 0.2, 0.2);
        let out = triplet_nms(
            &[triplet(a, bx(0.2, 0.2, 0.3, 0.3), 1, 0.9, 0), triplet(a, bx(0.7, 0.7, 0.3, 0.3), 1, 0.8, 1)],
            0.5,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn prediction_file_round_trip() {
        let images = vec![
            ImageTriplets {
                image_id: "scene_0001".into(),
                triplets: vec![triplet(bx(0.3, 0.3, 0.2, 0.2), bx(0.4, 0.4, 0.5, 0.5), 3, 0.123456789, 7)],
            },
            ImageTriplets { image_id: "scene_0002".into(), triplets: vec![] },
        ];
        let text = format_predictions(&images);
        let back = parse_predictions(&text, "mem").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].triplets[0].score, 0.123456789);
        assert_eq!(back[0].triplets[0].group_index, 7);
        assert_eq!(back[0].triplets[0].class_id, 3);
        assert!((back[0].triplets[0].individual_box.cx - 0.3).abs() < 1e-15);
        assert!(parse_predictions("image a 2\n0 0 1 1 0 0 1 1 0 0.5\n", "x").is_err());
        assert!(parse_predictions("0 0 1 1 0 0 1 1 0 0.5\n", "x").is_err());
    }

    fn arb_triplets() -> impl Strategy<Value = Vec<Triplet>> {
        let one = (0.2f64..0.8, 0.2f64..0.8, 0.1f64..0.3, 0.1f64..0.3, 0usize..2, 0.0f64..1.0, 0usize..5);
        prop::collection::vec(one, 0..25).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (cx, cy, w, h, c, s, gi))| {
                    let ind = BBox::raw(cx, cy, w, h);
                    let grp = BBox::raw(cx + 0.02 * (i % 3) as f64, cy, w + 0.1, h + 0.1);
                    triplet(ind, grp, c, s, gi)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_subset_and_sorted(ts in arb_triplets(), theta in 0.1f64..0.9) {
            let once = triplet_nms(&ts, theta);
            prop_assert_eq!(triplet_nms(&once, theta), once.clone());
            for t in &once {
                prop_assert!(ts.contains(t));
            }
            for w in once.windows(2) {
                prop_assert!(score_order(&w[0], &w[1]) != Ordering::Greater);
            }
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(!suppresses(a, b, theta));
                }
            }
        }
    }
}
