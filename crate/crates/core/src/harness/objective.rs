//! Per-batch targets, Hungarian matching and the five training losses over
//! detached head outputs.

use rand::Rng;

use crate::data::{derive_group_targets, GroupTargets, RgbImage, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{asl_loss, assn_loss, focal_loss, loc_loss, part_loss, sigmoid, LossComponents, LossGrad};
use crate::matching::{
    association_match_cost, group_match_cost, hungarian, individual_match_cost, representative_match_cost, Assignment,
};
use crate::network::ModelConfig;
use crate::partmask::{keypoints_to_masks, perturb_keypoints, window_size, KeypointSet};

use super::TrainConfig;

/// Channel statistics used to normalize pixels.
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// `[3, H, W]` normalized planes of an RGB image.
pub fn image_planes(im: &RgbImage) -> Vec<f32> {
    let n = im.width * im.height;
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in im.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = (f32::from(px[c]) / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    out
}

/// One training scene with decoded pixels and derived targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: String,
    pub pixels: Vec<f32>,
    pub persons: Vec<BBox>,
    pub keypoints: Option<KeypointSet>,
    pub groups: GroupTargets,
}

/// Check a split against the model and build samples.
pub fn prepare_samples(split: &Split, images: &[RgbImage], model: &ModelConfig) -> Result<Vec<Sample>> {
    if split.num_classes() != model.num_classes {
        return Err(Error::Config(format!(
            "split has {} classes, model expects {}",
            split.num_classes(),
            model.num_classes
        )));
    }
    split
        .scenes
        .iter()
        .zip(images)
        .map(|(s, im)| {
            if (im.width, im.height) != (model.image_width, model.image_height) {
                return Err(Error::Config(format!(
                    "image {} is {}x{}, model expects {}x{}",
                    s.image_id, im.width, im.height, model.image_width, model.image_height
                )));
            }
            if s.persons.len() > model.num_individual_queries || s.groups.len() > model.num_group_queries {
                return Err(Error::MoreTruthsThanQueries {
                    truths: s.persons.len().max(s.groups.len()),
                    queries: model.num_individual_queries.min(model.num_group_queries),
                });
            }
            Ok(Sample {
                image_id: s.image_id.clone(),
                pixels: image_planes(im),
                persons: s.person_boxes(),
                keypoints: s.keypoints.clone(),
                groups: derive_group_targets(s),
            })
        })
        .collect()
}

/// Mask values `[person][part * cells]` and validity `[person][part]`.
pub type PartTargets = (Vec<Vec<f64>>, Vec<Vec<bool>>);

/// Binary part masks for every person of a sample, `[person][part * cells]`,
/// plus the validity of each `(person, part)`. `None` without keypoints.
pub fn part_targets<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<PartTargets>> {
    let Some(kps) = &sample.keypoints else { return Ok(None) };
    let m = &cfg.model;
    let windows: Vec<f64> =
        sample.persons.iter().map(|&b| window_size(b, cfg.alpha, m.image_width, m.image_height)).collect();
    let kps = perturb_keypoints(kps, cfg.keypoint_noise, &windows, rng);
    let masks = keypoints_to_masks(&kps, &sample.persons, m.num_parts, cfg.alpha, (m.image_width, m.image_height), m.grid())?;
    let mut cells = Vec::with_capacity(sample.persons.len());
    let mut valid = Vec::with_capacity(sample.persons.len());
    for person in masks.chunks(m.num_parts) {
        cells.push(person.iter().flat_map(|pm| pm.cells.iter().map(|&c| if c { 1.0 } else { 0.0 })).collect());
        valid.push(person.iter().map(|pm| pm.valid).collect());
    }
    Ok(Some((cells, valid)))
}

/// Detached head outputs for a batch, row-major.
#[derive(Clone, Debug, Default)]
pub struct HeadValues {
    pub batch: usize,
    /// `[B, N_I, 4]`
    pub individual_boxes: Vec<f64>,
    /// `[B, N_I]` logits
    pub objectness: Vec<f64>,
    /// `[B, N_G, 4]`
    pub group_boxes: Vec<f64>,
    /// `[B, N_G, N_C]`
    pub class_logits: Vec<f64>,
    /// `[B, N_G, N_I]`
    pub similarity: Vec<f64>,
    /// `[B, N_I * P, H * W]`
    pub part_attention: Vec<f64>,
}

fn boxes(flat: &[f64]) -> Vec<BBox> {
    flat.chunks_exact(4).map(|c| BBox::raw(c[0], c[1], c[2], c[3])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matches {
    pub individuals: Assignment,
    pub groups: Assignment,
}

/// Hungarian matching of one batch item.
pub fn match_item(h: &HeadValues, b: usize, sample: &Sample, cfg: &TrainConfig) -> Result<Matches> {
    let m = &cfg.model;
    let (ni, ng, nc) = (m.num_individual_queries, m.num_group_queries, m.num_classes);
    let ind_boxes = boxes(&h.individual_boxes[b * ni * 4..(b + 1) * ni * 4]);
    let obj: Vec<f64> = h.objectness[b * ni..(b + 1) * ni].iter().map(|&x| sigmoid(x)).collect();
    let individuals = hungarian(&individual_match_cost(&ind_boxes, &obj, &sample.persons, &cfg.loss))?;
    let grp_boxes = boxes(&h.group_boxes[b * ng * 4..(b + 1) * ng * 4]);
    let logits: Vec<Vec<f64>> = h.class_logits[b * ng * nc..(b + 1) * ng * nc].chunks_exact(nc).map(<[f64]>::to_vec).collect();
    let t = &sample.groups;
    let mut cost = group_match_cost(&grp_boxes, &logits, &t.boxes, &t.classes, &cfg.loss);
    if cfg.match_association && cfg.loss.assn > 0.0 && !t.boxes.is_empty() {
        let sim: Vec<Vec<f64>> = h.similarity[b * ng * ni..(b + 1) * ng * ni].chunks_exact(ni).map(<[f64]>::to_vec).collect();
        let matched: Vec<usize> = (0..sample.persons.len()).map(|j| individuals.pred_for(j).expect("every person matched")).collect();
        cost.add_scaled(&association_match_cost(&sim, &t.membership, &matched), cfg.loss.assn);
    }
    let groups = hungarian(&cost)?;
    if cfg.match_representative && cfg.loss.assn > 0.0 && !t.boxes.is_empty() {
        let rows: Vec<Vec<f64>> = (0..t.boxes.len())
            .map(|c| {
                let q = groups.pred_for(c).expect("every group matched");
                h.similarity[(b * ng + q) * ni..(b * ng + q + 1) * ni].to_vec()
            })
            .collect();
        let mut ind_cost = individual_match_cost(&ind_boxes, &obj, &sample.persons, &cfg.loss);
        ind_cost.add_scaled(&representative_match_cost(&rows, &t.membership, sample.persons.len()), cfg.loss.assn);
        let individuals = hungarian(&ind_cost)?;
        return Ok(Matches { individuals, groups });
    }
    Ok(Matches { individuals, groups })
}

/// Loss values and their gradients with respect to each head output.
#[derive(Clone, Debug)]
pub struct Objective {
    pub components: LossComponents,
    pub d_objectness: Vec<f64>,
    pub d_class_logits: Vec<f64>,
    pub d_individual_boxes: Vec<f64>,
    pub d_group_boxes: Vec<f64>,
    pub d_part_attention: Vec<f64>,
    pub d_similarity: Vec<f64>,
}

/// Mean-reduced loss rescaled to `sum / norm`.
fn renormalize(mut l: LossGrad, norm: usize) -> LossGrad {
    let f = l.grad.len() as f64 / norm.max(1) as f64;
    l.value *= f;
    l.grad.iter_mut().for_each(|g| *g *= f);
    l
}

/// All five losses of a batch.
///
/// Objectness and class losses are summed over queries and divided by the
/// number of ground-truth persons and groups; localization averages over
/// matched pairs of both kinds; part supervision averages over matched,
/// valid `(person, part)` maps; association averages over images that have groups.
pub fn objective(
    h: &HeadValues,
    samples: &[&Sample],
    parts: &[Option<PartTargets>],
    matches: &[Matches],
    cfg: &TrainConfig,
) -> Objective {
    let m = &cfg.model;
    let (ni, ng, nc, p, cells) = (m.num_individual_queries, m.num_group_queries, m.num_classes, m.num_parts, m.grid().cells());
    let bsz = h.batch;
    let mut obj_targets = vec![false; bsz * ni];
    let mut cls_targets = vec![false; bsz * ng * nc];
    let (mut loc_pred, mut loc_gt, mut loc_slot) = (Vec::new(), Vec::new(), Vec::new());
    let mut masks = vec![0.0; bsz * ni * p * cells];
    let mut supervised = vec![false; bsz * ni * p];
    let mut d_similarity = vec![0.0; h.similarity.len()];
    let mut assn_value = 0.0;
    let mut assn_images = 0usize;
    let (mut n_persons, mut n_groups) = (0, 0);
    for (b, (s, mt)) in samples.iter().zip(matches).enumerate() {
        n_persons += s.persons.len();
        n_groups += s.groups.boxes.len();
        for &(q, j) in &mt.individuals.pairs {
            obj_targets[b * ni + q] = true;
            loc_pred.push(BBox::from_array(h.individual_boxes[(b * ni + q) * 4..][..4].try_into().unwrap()));
            loc_gt.push(s.persons[j]);
            loc_slot.push((false, (b * ni + q) * 4));
            if let Some((cells_of, valid)) = &parts[b] {
                for k in 0..p {
                    if valid[j][k] {
                        let map = (b * ni + q) * p + k;
                        supervised[map] = true;
                        masks[map * cells..(map + 1) * cells].copy_from_slice(&cells_of[j][k * cells..(k + 1) * cells]);
                    }
                }
            }
        }
        for &(q, gi) in &mt.groups.pairs {
            for (k, &on) in s.groups.classes[gi].iter().enumerate() {
                cls_targets[(b * ng + q) * nc + k] = on;
            }
            loc_pred.push(BBox::from_array(h.group_boxes[(b * ng + q) * 4..][..4].try_into().unwrap()));
            loc_gt.push(s.groups.boxes[gi]);
            loc_slot.push((true, (b * ng + q) * 4));
        }
        if !s.groups.boxes.is_empty() && !s.persons.is_empty() {
            let group_query: Vec<usize> = (0..s.groups.boxes.len()).map(|g| mt.groups.pred_for(g).unwrap()).collect();
            let ind_query: Vec<usize> = (0..s.persons.len()).map(|j| mt.individuals.pred_for(j).unwrap()).collect();
            let sim = &h.similarity[b * ng * ni..(b + 1) * ng * ni];
            let l = assn_loss(sim, ni, &s.groups.membership, &group_query, &ind_query);
            assn_value += l.value;
            for (d, g) in d_similarity[b * ng * ni..(b + 1) * ng * ni].iter_mut().zip(l.grad) {
                *d += g;
            }
            assn_images += 1;
        }
    }
    if assn_images > 1 {
        let inv = 1.0 / assn_images as f64;
        assn_value *= inv;
        d_similarity.iter_mut().for_each(|g| *g *= inv);
    }
    let ind = renormalize(focal_loss(&h.objectness, &obj_targets, &cfg.focal), n_persons);
    let cls = renormalize(asl_loss(&h.class_logits, &cls_targets, &cfg.asl), n_groups);
    let loc = loc_loss(&loc_pred, &loc_gt, cfg.loss.l1, cfg.loss.giou);
    let mut d_individual_boxes = vec![0.0; h.individual_boxes.len()];
    let mut d_group_boxes = vec![0.0; h.group_boxes.len()];
    for (i, &(is_group, off)) in loc_slot.iter().enumerate() {
        let dst = if is_group { &mut d_group_boxes } else { &mut d_individual_boxes };
        dst[off..off + 4].copy_from_slice(&loc.grad[4 * i..4 * i + 4]);
    }
    let part = part_loss(&h.part_attention, &masks, &supervised, cells);
    Objective {
        components: LossComponents { ind: ind.value, cls: cls.value, loc: loc.value, part: part.value, assn: assn_value },
        d_objectness: ind.grad,
        d_class_logits: cls.grad,
        d_individual_boxes,
        d_group_boxes,
        d_part_attention: part.grad,
        d_similarity,
    }
}
