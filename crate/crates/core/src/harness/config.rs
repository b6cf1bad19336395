//! Training configuration as flat `key = value` text.
//!
//! `profile = desk | table_s1` (default `desk`) picks the starting values;
//! every other key overrides one field. Model keys are those of
//! [`ModelConfig::to_kv`].

use crate::error::{Error, Result};
use crate::inference::DEFAULT_NMS_THRESHOLD;
use crate::kv::{render, KvMap};
use crate::losses::{AslParams, FocalParams, LossWeights};
use crate::network::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    TableS1,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::TableS1 => "table_s1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "table_s1" => Ok(Profile::TableS1),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or table_s1)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain; 0 disables the cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rate of the convolutional stem.
    pub backbone_lr: f64,
    /// First epoch trained at the decayed rates.
    pub decay_epoch: usize,
    /// Base rate from `decay_epoch` on; the backbone rate is scaled by the same factor.
    pub decayed_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub asl: AslParams,
    /// Add the association BCE (scaled by `λ_a`) to the group matching cost.
    pub match_association: bool,
    /// Re-match individuals after group matching, adding the cross-entropy of
    /// each matched group's similarity row (scaled by `λ_a`).
    pub match_representative: bool,
    pub nms_theta: f64,
    /// Part-window proportion `α`.
    pub alpha: f64,
    /// Keypoint perturbation scale `ε` (fraction of the window size).
    pub keypoint_noise: f64,
    pub score_floor: f64,
    pub log_every: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Small model, 2000 steps on a 64-scene synthetic split.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            model: ModelConfig::desk(),
            epochs: 250,
            max_steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            backbone_lr: 1e-3,
            decay_epoch: 200,
            decayed_lr: 1e-4,
            ..Self::table_s1()
        }
    }

    /// Full-size hyperparameters.
    pub fn table_s1() -> Self {
        Self {
            profile: Profile::TableS1,
            model: ModelConfig::table_s1(),
            epochs: 90,
            max_steps: 0,
            batch_size: 16,
            lr: 1e-4,
            backbone_lr: 1e-5,
            decay_epoch: 60,
            decayed_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            asl: AslParams::default(),
            match_association: true,
            match_representative: true,
            nms_theta: DEFAULT_NMS_THRESHOLD,
            alpha: 0.2,
            keypoint_noise: 0.0,
            score_floor: 0.0,
            log_every: 1,
            checkpoint_every: 0,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::TableS1 => Self::table_s1(),
        }
    }

    /// Base and backbone rates at `epoch`.
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        if epoch >= self.decay_epoch {
            let f = self.decayed_lr / self.lr;
            (self.decayed_lr, self.backbone_lr * f)
        } else {
            (self.lr, self.backbone_lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr", self.lr), ("backbone_lr", self.backbone_lr), ("decayed_lr", self.decayed_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.decay_epoch >= self.epochs {
            return fail(format!("decay_epoch {} must be below epochs {}", self.decay_epoch, self.epochs));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("adam moments must lie in [0, 1) and adam_eps be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return fail("weight_decay must be nonnegative and grad_clip positive".into());
        }
        if !(0.0..=1.0).contains(&self.nms_theta) || self.alpha < 0.0 || self.keypoint_noise < 0.0 {
            return fail("nms_theta must lie in [0, 1]; alpha and keypoint_noise must be nonnegative".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("profile", self.profile.name().into()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("backbone_lr", self.backbone_lr.to_string()),
            ("decay_epoch", self.decay_epoch.to_string()),
            ("decayed_lr", self.decayed_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda_ind", self.loss.ind.to_string()),
            ("lambda_cls", self.loss.cls.to_string()),
            ("lambda_loc", self.loss.loc.to_string()),
            ("lambda_l1", self.loss.l1.to_string()),
            ("lambda_giou", self.loss.giou.to_string()),
            ("lambda_part", self.loss.part.to_string()),
            ("lambda_assn", self.loss.assn.to_string()),
            ("focal_gamma", self.focal.gamma.to_string()),
            ("focal_alpha", self.focal.alpha.map_or("none".into(), |a| a.to_string())),
            ("asl_gamma_pos", self.asl.gamma_pos.to_string()),
            ("asl_gamma_neg", self.asl.gamma_neg.to_string()),
            ("asl_margin", self.asl.margin.to_string()),
            ("match_association", self.match_association.to_string()),
            ("match_representative", self.match_representative.to_string()),
            ("nms_theta", self.nms_theta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("keypoint_noise", self.keypoint_noise.to_string()),
            ("score_floor", self.score_floor.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        pairs.extend(self.model.to_kv());
        render(&pairs)
    }

    /// Build from key-value text; unknown keys are an error.
    pub fn from_kv(text: &str, source: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text, source)?;
        let profile = match kv.take::<String>("profile")? {
            Some(p) => Profile::parse(&p)?,
            None => Profile::Desk,
        };
        let mut c = Self::for_profile(profile);
        c.apply(&mut kv)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// Apply `key=value` overrides (e.g. from the command line) on top of `self`.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        let mut kv = KvMap::parse(&overrides.join("\n"), "command line")?;
        if let Some(p) = kv.take::<String>("profile")? {
            let keep = self.clone();
            self = Self::for_profile(Profile::parse(&p)?);
            self.seed = keep.seed;
        }
        self.apply(&mut kv)?;
        kv.finish()?;
        self.validate()?;
        Ok(self)
    }

    fn apply(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("epochs", &mut self.epochs)?;
        kv.take_into("max_steps", &mut self.max_steps)?;
        kv.take_into("batch_size", &mut self.batch_size)?;
        kv.take_into("lr", &mut self.lr)?;
        kv.take_into("backbone_lr", &mut self.backbone_lr)?;
        kv.take_into("decay_epoch", &mut self.decay_epoch)?;
        kv.take_into("decayed_lr", &mut self.decayed_lr)?;
        kv.take_into("beta1", &mut self.beta1)?;
        kv.take_into("beta2", &mut self.beta2)?;
        kv.take_into("adam_eps", &mut self.adam_eps)?;
        kv.take_into("weight_decay", &mut self.weight_decay)?;
        kv.take_into("grad_clip", &mut self.grad_clip)?;
        kv.take_into("seed", &mut self.seed)?;
        kv.take_into("lambda_ind", &mut self.loss.ind)?;
        kv.take_into("lambda_cls", &mut self.loss.cls)?;
        kv.take_into("lambda_loc", &mut self.loss.loc)?;
        kv.take_into("lambda_l1", &mut self.loss.l1)?;
        kv.take_into("lambda_giou", &mut self.loss.giou)?;
        kv.take_into("lambda_part", &mut self.loss.part)?;
        kv.take_into("lambda_assn", &mut self.loss.assn)?;
        kv.take_into("focal_gamma", &mut self.focal.gamma)?;
        if let Some(a) = kv.take::<String>("focal_alpha")? {
            self.focal.alpha = match a.as_str() {
                "none" => None,
                v => Some(v.parse().map_err(|e| Error::Config(format!("focal_alpha `{v}`: {e}")))?),
            };
        }
        kv.take_into("asl_gamma_pos", &mut self.asl.gamma_pos)?;
        kv.take_into("asl_gamma_neg", &mut self.asl.gamma_neg)?;
        kv.take_into("asl_margin", &mut self.asl.margin)?;
        kv.take_into("match_association", &mut self.match_association)?;
        kv.take_into("match_representative", &mut self.match_representative)?;
        kv.take_into("nms_theta", &mut self.nms_theta)?;
        kv.take_into("alpha", &mut self.alpha)?;
        kv.take_into("keypoint_noise", &mut self.keypoint_noise)?;
        kv.take_into("score_floor", &mut self.score_floor)?;
        kv.take_into("log_every", &mut self.log_every)?;
        kv.take_into("checkpoint_every", &mut self.checkpoint_every)?;
        self.model.update_from_kv(kv)
    }
}
