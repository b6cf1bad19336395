//! The training loop.

use std::fmt;

use partgroup_autograd::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, OptimizerState};
use super::objective::{match_item, objective, part_targets, HeadValues, Sample};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossComponents};
use crate::network::{ForwardOutput, Model};

/// Stream offsets separating the random sources of one seed.
const SHUFFLE_STREAM: u64 = 1 << 40;
const NOISE_STREAM: u64 = 2 << 40;

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: LossComponents,
    pub grad_norm: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.components;
        write!(
            f,
            "step={} epoch={} lr={} loss={} ind={} cls={} loc={} part={} assn={} grad_norm={}",
            self.step, self.epoch, self.lr, self.loss, c.ind, c.cls, c.loc, c.part, c.assn, self.grad_norm
        )
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    params: ParamStore<f32>,
    opt: AdamW<f32>,
    samples: Vec<Sample>,
    backbone: Vec<bool>,
    step: u64,
}

/// Detached copies of the head outputs.
pub fn head_values<T: partgroup_autograd::Scalar>(g: &Graph<'_, T>, out: &ForwardOutput) -> HeadValues {
    let v = |x| g.value(x).to_f64_vec();
    HeadValues {
        batch: out.batch,
        individual_boxes: v(out.individuals.boxes),
        objectness: v(out.individuals.objectness),
        group_boxes: v(out.groups.boxes),
        class_logits: v(out.groups.class_logits),
        similarity: v(out.similarity),
        part_attention: v(out.enhanced.part_attention),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let (model, params) = Model::init::<f32>(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        let backbone = params.iter().map(|(_, name, _)| name.starts_with(Model::BACKBONE_PREFIX)).collect();
        Ok(Self { cfg, model, params, opt, samples, backbone, step: 0 })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, samples: Vec<Sample>, ck: Checkpoint) -> Result<Self> {
        if ck.model != cfg.model {
            return Err(Error::Config("checkpoint model config differs from the training config".into()));
        }
        let mut t = Self::new(cfg, samples)?;
        t.params = ck.params;
        if let Some(o) = ck.optimizer {
            t.step = o.step;
            t.opt.restore(o.step, o.m, o.v);
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.cfg.epochs * self.steps_per_epoch()) as u64;
        if self.cfg.max_steps > 0 {
            full.min(self.cfg.max_steps as u64)
        } else {
            full
        }
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        let ids: Vec<ParamId> = self.params.ids().collect();
        OptimizerState {
            step: self.step,
            m: ids.iter().map(|&id| self.opt.first_moment(id).clone()).collect(),
            v: ids.iter().map(|&id| self.opt.second_moment(id).clone()).collect(),
        }
    }

    /// Epoch and sample indices of global step `step`; each epoch is a fresh seeded shuffle.
    pub fn batch_indices(&self, step: u64) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch() as u64;
        let epoch = (step / spe) as usize;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        order.shuffle(&mut rng);
        let start = (step % spe) as usize * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(order.len());
        (epoch, order[start..end].to_vec())
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let (epoch, idx) = self.batch_indices(step);
        let (lr, backbone_lr) = self.cfg.rates(epoch);
        let cfg = &self.cfg;
        let m = &cfg.model;
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise.set_stream(NOISE_STREAM + step);
        let parts = batch.iter().map(|s| part_targets(s, cfg, &mut noise)).collect::<Result<Vec<_>>>()?;

        let (components, mut grads) = {
            let g = Graph::new(&self.params);
            let pixels: Vec<f32> = batch.iter().flat_map(|s| s.pixels.iter().copied()).collect();
            let images = g.constant(Tensor::new(&[batch.len(), 3, m.image_height, m.image_width], pixels));
            let out = self.model.forward(&g, images, None);
            let h = head_values(&g, &out);
            let matches = batch.iter().enumerate().map(|(b, s)| match_item(&h, b, s, cfg)).collect::<Result<Vec<_>>>()?;
            let o = objective(&h, &batch, &parts, &matches, cfg);
            let c = o.components;
            for (name, v) in LossComponents::NAMES.iter().zip(c.as_array()) {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { component: name, step });
                }
            }
            let t = |var: Var, d: Vec<f64>| Tensor::from_f64(&g.shape(var), &d);
            let w = &cfg.loss;
            let mut terms = Vec::new();
            if w.ind > 0.0 {
                let n = g.custom_scalar(&[out.individuals.objectness], c.ind, vec![t(out.individuals.objectness, o.d_objectness)]);
                terms.push((n, w.ind));
            }
            if w.cls > 0.0 {
                let n = g.custom_scalar(&[out.groups.class_logits], c.cls, vec![t(out.groups.class_logits, o.d_class_logits)]);
                terms.push((n, w.cls));
            }
            if w.loc > 0.0 {
                let n = g.custom_scalar(
                    &[out.individuals.boxes, out.groups.boxes],
                    c.loc,
                    vec![t(out.individuals.boxes, o.d_individual_boxes), t(out.groups.boxes, o.d_group_boxes)],
                );
                terms.push((n, w.loc));
            }
            if w.part > 0.0 {
                let pa = out.enhanced.part_attention;
                terms.push((g.custom_scalar(&[pa], c.part, vec![t(pa, o.d_part_attention)]), w.part));
            }
            if w.assn > 0.0 {
                let s = out.similarity;
                terms.push((g.custom_scalar(&[s], c.assn, vec![t(s, o.d_similarity)]), w.assn));
            }
            if terms.is_empty() {
                return Err(Error::Config("every loss weight is zero".into()));
            }
            let total = g.weighted_sum(&terms);
            (c, g.backward(total).into_param_grads())
        };
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { component: "gradient", step });
        }
        let grad_norm = grads.clip_global_norm(self.cfg.grad_clip);
        let backbone = &self.backbone;
        self.opt.step(&mut self.params, &grads, |id| if backbone[id.index()] { backbone_lr } else { lr });
        self.step += 1;
        Ok(StepRecord { step, epoch, lr, loss: total_loss(&components, &self.cfg.loss), components, grad_norm })
    }

    /// Train until the configured budget is spent, reporting every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.total_steps() {
            let rec = self.train_step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}
