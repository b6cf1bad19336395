//! Inference over a split and attention dumps.

use std::path::{Path, PathBuf};

use partgroup_autograd::{Graph, ParamStore, Tensor};

use super::objective::image_planes;
use super::TrainConfig;
use crate::data::{save_gray_png, RgbImage, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricReport};
use crate::inference::{postprocess, ImageTriplets, DEFAULT_MAX_TRIPLETS};
use crate::network::{Model, PredictionSet};
use crate::partmask::PART_NAMES;

/// Images per forward pass during inference.
pub const INFER_BATCH: usize = 8;

fn check_size(model: &Model, im: &RgbImage) -> Result<()> {
    let c = model.config();
    if (im.width, im.height) != (c.image_width, c.image_height) {
        return Err(Error::Config(format!(
            "image is {}x{}, model expects {}x{}",
            im.width, im.height, c.image_width, c.image_height
        )));
    }
    Ok(())
}

/// Raw head outputs for each image.
pub fn predict(model: &Model, params: &ParamStore<f32>, images: &[RgbImage]) -> Result<Vec<PredictionSet>> {
    let c = model.config();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let mut pixels = Vec::new();
        for im in chunk {
            check_size(model, im)?;
            pixels.extend(image_planes(im));
        }
        let g = Graph::new(params);
        let x = g.constant(Tensor::new(&[chunk.len(), 3, c.image_height, c.image_width], pixels));
        let fwd = model.forward(&g, x, None);
        out.extend(fwd.prediction_sets(&g));
    }
    Ok(out)
}

/// Ranked, de-duplicated triplets for every scene of a split.
pub fn infer_split(
    model: &Model,
    params: &ParamStore<f32>,
    split: &Split,
    images: &[RgbImage],
    cfg: &TrainConfig,
) -> Result<Vec<ImageTriplets>> {
    let sets = predict(model, params, images)?;
    Ok(split
        .scenes
        .iter()
        .zip(&sets)
        .map(|(s, p)| ImageTriplets {
            image_id: s.image_id.clone(),
            triplets: postprocess(p, cfg.score_floor, cfg.nms_theta, DEFAULT_MAX_TRIPLETS),
        })
        .collect())
}

/// Infer and score a split against its own annotations.
pub fn evaluate_split(
    model: &Model,
    params: &ParamStore<f32>,
    split: &Split,
    images: &[RgbImage],
    cfg: &TrainConfig,
) -> Result<MetricReport> {
    let preds = infer_split(model, params, split, images, cfg)?;
    evaluate(&preds, &split.ground_truth(), split.num_classes())
}

/// Write the part attention of every individual query as grayscale PNGs
/// named `q{query}_{part}.png`, each scaled to its own maximum.
pub fn dump_attention(model: &Model, params: &ParamStore<f32>, image: &RgbImage, dir: &Path) -> Result<Vec<PathBuf>> {
    check_size(model, image)?;
    let c = model.config();
    let grid = c.grid();
    let g = Graph::new(params);
    let x = g.constant(Tensor::new(&[1, 3, c.image_height, c.image_width], image_planes(image)));
    let fwd = model.forward(&g, x, None);
    let attn = g.value(fwd.enhanced.part_attention).to_f64_vec();
    let cells = grid.height * grid.width;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (k, map) in attn.chunks(cells).enumerate() {
        let (q, p) = (k / c.num_parts, k % c.num_parts);
        let max = map.iter().cloned().fold(0.0, f64::max);
        let bytes: Vec<u8> = map
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
            .collect();
        let part = PART_NAMES.get(p).copied().map(str::to_owned).unwrap_or_else(|| format!("part{p}"));
        let path = dir.join(format!("q{q:02}_{part}.png"));
        save_gray_png(&path, grid.width, grid.height, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
