use partgroup_autograd::{Graph, Scalar, Tensor};

use super::config::ModelConfig;
use super::model::ForwardOutput;
use crate::geometry::BBox;

/// Per-image head outputs in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub individual_boxes: Vec<BBox>,
    /// Objectness logits, one per individual query.
    pub objectness: Vec<f64>,
    pub group_boxes: Vec<BBox>,
    /// `[N_G][N_C]` interaction logits.
    pub class_logits: Vec<Vec<f64>>,
    /// `[N_G][N_I]` association logits.
    pub similarity: Vec<Vec<f64>>,
}

/// Per-image intermediate embeddings in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `F`, `[H, W, D]`.
    pub feature: Tensor<f64>,
    /// `E_I`, `[N_I, D]`.
    pub individuals: Tensor<f64>,
    /// `E_P`, `[N_I, P, D]`.
    pub parts: Tensor<f64>,
    /// `E_A`, `[N_I, D]`.
    pub part_aware: Tensor<f64>,
    /// `E_G`, `[N_G, D]`.
    pub groups: Tensor<f64>,
    /// `A`, `[N_I, P, H, W]`.
    pub part_attention: Tensor<f64>,
}

fn item<T: Scalar>(t: &Tensor<T>, b: usize) -> Vec<f64> {
    let per = t.numel() / t.shape()[0];
    t.data()[b * per..(b + 1) * per].iter().map(|x| x.as_f64()).collect()
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(width).map(<[f64]>::to_vec).collect()
}

fn boxes(flat: &[f64]) -> Vec<BBox> {
    flat.chunks_exact(4).map(|c| BBox::raw(c[0], c[1], c[2], c[3])).collect()
}

impl ForwardOutput {
    pub fn prediction_set<T: Scalar>(&self, g: &Graph<'_, T>, b: usize) -> PredictionSet {
        let v = |var| item(&g.value(var), b);
        let n_i = g.shape(self.individuals.boxes)[1];
        let n_c = g.shape(self.groups.class_logits)[2];
        PredictionSet {
            individual_boxes: boxes(&v(self.individuals.boxes)),
            objectness: v(self.individuals.objectness),
            group_boxes: boxes(&v(self.groups.boxes)),
            class_logits: rows(&v(self.groups.class_logits), n_c),
            similarity: rows(&v(self.similarity), n_i),
        }
    }

    pub fn prediction_sets<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<PredictionSet> {
        (0..self.batch).map(|b| self.prediction_set(g, b)).collect()
    }

    pub fn embedding_set<T: Scalar>(&self, g: &Graph<'_, T>, b: usize, c: &ModelConfig) -> EmbeddingSet {
        let grid = c.grid();
        let (d, n_i, n_g, p) = (c.dim, c.num_individual_queries, c.num_group_queries, c.num_parts);
        let v = |var| item(&g.value(var), b);
        let per_item = |var, shape: &[usize]| {
            let t = g.value(var);
            let per = t.numel() / self.batch;
            let data: Vec<f64> = t.data()[b * per..(b + 1) * per].iter().map(|x| x.as_f64()).collect();
            Tensor::new(shape, data)
        };
        EmbeddingSet {
            feature: Tensor::new(&[grid.height, grid.width, d], v(self.encoded.feature)),
            individuals: Tensor::new(&[n_i, d], v(self.individuals.embeddings)),
            parts: per_item(self.enhanced.parts, &[n_i, p, d]),
            part_aware: Tensor::new(&[n_i, d], v(self.part_aware)),
            groups: Tensor::new(&[n_g, d], v(self.groups.embeddings)),
            part_attention: Tensor::new(&[n_i, p, grid.height, grid.width], v(self.enhanced.part_attention)),
        }
    }
}
