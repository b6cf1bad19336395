use crate::error::{Error, Result};
use crate::kv::{format_list, parse_list, KvMap};
use crate::partmask::Grid;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Transformer width `D`.
    pub dim: usize,
    pub num_individual_queries: usize,
    pub num_group_queries: usize,
    pub num_parts: usize,
    pub num_classes: usize,
    pub encoder_layers: usize,
    pub individual_decoder_layers: usize,
    pub enhancer_layers: usize,
    pub group_decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Output channels of the stride-2 convolutions of the stem; the feature
    /// stride is `2^len`.
    pub stem_channels: Vec<usize>,
    pub image_width: usize,
    pub image_height: usize,
}

impl ModelConfig {
    /// Small profile that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            num_individual_queries: 12,
            num_group_queries: 16,
            num_parts: 13,
            num_classes: 8,
            encoder_layers: 2,
            individual_decoder_layers: 2,
            enhancer_layers: 2,
            group_decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            stem_channels: vec![16, 32, 64],
            image_width: 128,
            image_height: 128,
        }
    }

    /// Full-size hyperparameters (22 interaction classes).
    pub fn table_s1() -> Self {
        Self {
            dim: 256,
            num_individual_queries: 24,
            num_group_queries: 32,
            num_parts: 13,
            num_classes: 22,
            encoder_layers: 6,
            individual_decoder_layers: 3,
            enhancer_layers: 3,
            group_decoder_layers: 3,
            heads: 8,
            ffn_dim: 2048,
            stem_channels: vec![32, 64, 128, 256, 256],
            image_width: 512,
            image_height: 512,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    pub fn grid(&self) -> Grid {
        Grid { width: self.image_width / self.stride(), height: self.image_height / self.stride(), stride: self.stride() }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("dim", self.dim),
            ("num_individual_queries", self.num_individual_queries),
            ("num_group_queries", self.num_group_queries),
            ("num_parts", self.num_parts),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("image_width", self.image_width),
            ("image_height", self.image_height),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(4) {
            return fail(format!("dim {} must be a multiple of 4 for the 2-D sine encoding", self.dim));
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return fail("stem_channels must be a nonempty list of positive widths".into());
        }
        let s = self.stride();
        if !self.image_width.is_multiple_of(s) || !self.image_height.is_multiple_of(s) {
            return fail(format!(
                "image {}x{} is not divisible by the feature stride {s}",
                self.image_width, self.image_height
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim", self.dim.to_string()),
            ("num_individual_queries", self.num_individual_queries.to_string()),
            ("num_group_queries", self.num_group_queries.to_string()),
            ("num_parts", self.num_parts.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("individual_decoder_layers", self.individual_decoder_layers.to_string()),
            ("enhancer_layers", self.enhancer_layers.to_string()),
            ("group_decoder_layers", self.group_decoder_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("stem_channels", format_list(&self.stem_channels)),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
        ]
    }

    /// Consume any model keys present in `kv`, starting from `self`.
    pub fn update_from_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("dim", &mut self.dim)?;
        kv.take_into("num_individual_queries", &mut self.num_individual_queries)?;
        kv.take_into("num_group_queries", &mut self.num_group_queries)?;
        kv.take_into("num_parts", &mut self.num_parts)?;
        kv.take_into("num_classes", &mut self.num_classes)?;
        kv.take_into("encoder_layers", &mut self.encoder_layers)?;
        kv.take_into("individual_decoder_layers", &mut self.individual_decoder_layers)?;
        kv.take_into("enhancer_layers", &mut self.enhancer_layers)?;
        kv.take_into("group_decoder_layers", &mut self.group_decoder_layers)?;
        kv.take_into("heads", &mut self.heads)?;
        kv.take_into("ffn_dim", &mut self.ffn_dim)?;
        if let Some(v) = kv.take::<String>("stem_channels")? {
            self.stem_channels =
                parse_list(&v).map_err(|e| Error::Config(format!("stem_channels `{v}`: {e}")))?;
        }
        kv.take_into("image_width", &mut self.image_width)?;
        kv.take_into("image_height", &mut self.image_height)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::table_s1().validate().unwrap();
        assert_eq!(ModelConfig::desk().stride(), 8);
        assert_eq!(ModelConfig::desk().grid(), Grid { width: 16, height: 16, stride: 8 });
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = ModelConfig { heads: 3, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        let c = ModelConfig { image_width: 100, ..ModelConfig::desk() };
        assert!(c.validate().unwrap_err().to_string().contains("stride"));
        let c = ModelConfig { num_parts: 0, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig::table_s1();
        let text = crate::kv::render(&c.to_kv());
        let mut kv = KvMap::parse(&text, "model").unwrap();
        let mut back = ModelConfig::desk();
        back.update_from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
    }
}
