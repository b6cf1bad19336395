use partgroup_autograd::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{with_pos, Attention, Builder, LayerNorm, Linear, Mlp};
use super::posenc::sine_2d;
use crate::error::Result;

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// Residual attention sub-block followed by layer norm (post-norm).
#[derive(Clone, Debug)]
struct AttnBlock {
    attn: Attention,
    norm: LayerNorm,
}

impl AttnBlock {
    fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        tgt: Var,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> (Var, Var) {
        let (o, a) = self.attn.forward(g, query, key, value, mask);
        (self.norm.forward(g, g.add(tgt, o)), a)
    }
}

#[derive(Clone, Debug)]
struct FfnBlock {
    mlp: Mlp,
    norm: LayerNorm,
}

impl FfnBlock {
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = self.mlp.forward(g, x);
        self.norm.forward(g, g.add(x, y))
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: AttnBlock,
    ffn: FfnBlock,
}

/// Self-attention, cross-attention, FFN.
#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttnBlock,
    cross_attn: AttnBlock,
    ffn: FfnBlock,
}

/// Self-attention, cross-attention to individuals, cross-attention to the feature map, FFN.
#[derive(Clone, Debug)]
struct GroupDecoderLayer {
    self_attn: AttnBlock,
    individual_attn: AttnBlock,
    feature_attn: AttnBlock,
    ffn: FfnBlock,
}

/// Parameter handles of the full model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    stem: Vec<Conv>,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    individual_queries: ParamId,
    individual_decoder: Vec<DecoderLayer>,
    individual_norm: LayerNorm,
    part_proj: Linear,
    part_pos: ParamId,
    enhancer: Vec<DecoderLayer>,
    enhancer_norm: LayerNorm,
    fuse: Linear,
    group_queries: ParamId,
    group_decoder: Vec<GroupDecoderLayer>,
    group_norm: LayerNorm,
    individual_box: Mlp,
    objectness: Linear,
    group_box: Mlp,
    group_class: Linear,
    sim_group: Mlp,
    sim_individual: Mlp,
}

/// Feature-map encoding of a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, H*W, D]`.
    pub feature: Var,
    /// Constant `[H*W, D]` positional table.
    pub pos: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct IndividualOut {
    /// `E_I`, `[B, N_I, D]`.
    pub embeddings: Var,
    /// Sigmoid boxes `[B, N_I, 4]`.
    pub boxes: Var,
    /// Objectness logits `[B, N_I, 1]`.
    pub objectness: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    /// `E_P`, `[B * N_I, P, D]`.
    pub parts: Var,
    /// Head-averaged last-layer attention `[B, N_I * P, H*W]`.
    pub part_attention: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GroupOut {
    /// `E_G`, `[B, N_G, D]`.
    pub embeddings: Var,
    /// Sigmoid boxes `[B, N_G, 4]`.
    pub boxes: Var,
    /// `[B, N_G, N_C]`.
    pub class_logits: Var,
    /// Weights over individuals per layer, `[B, H, N_G, N_I]`.
    pub individual_attention: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Every tape node of one forward pass worth inspecting.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub batch: usize,
    pub encoded: Encoded,
    pub individuals: IndividualOut,
    /// `Q_P`, `[B * N_I, P, D]`.
    pub part_queries: Var,
    pub enhanced: Enhanced,
    /// `E_A`, `[B, N_I, D]`.
    pub part_aware: Var,
    pub groups: GroupOut,
    /// `S`, `[B, N_G, N_I]`.
    pub similarity: Var,
}

impl ForwardOutput {
    /// All attention weight tensors `[B, H, Nq, Nk]` with a descriptive label.
    pub fn attention_maps(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let mut push = |label: &str, vars: &[Var]| {
            out.extend(vars.iter().enumerate().map(|(i, &v)| (format!("{label}.{i}"), v)));
        };
        push("encoder", &self.encoded.attention);
        push("individual_decoder", &self.individuals.attention);
        push("enhancer", &self.enhanced.attention);
        push("group_decoder", &self.groups.attention);
        out
    }
}

impl Model {
    /// Build the model and its freshly initialized parameters.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let c = config;
        let d = c.dim;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);

        let mut in_ch = 3;
        let stem = b.scoped("stem", |b| {
            c.stem_channels
                .iter()
                .enumerate()
                .map(|(i, &out_ch)| {
                    let fan_in = in_ch * 9;
                    let conv = b.scoped(i.to_string(), |b| {
                        let w = init::fan_in_uniform(b.rng, &[out_ch, in_ch, 3, 3], fan_in);
                        let bias = init::fan_in_uniform(b.rng, &[out_ch], fan_in);
                        Conv { w: b.add("weight", w), b: b.add("bias", bias) }
                    });
                    in_ch = out_ch;
                    conv
                })
                .collect()
        });
        let input_proj = b.linear("input_proj", in_ch, d, true);

        let attn_block = |b: &mut Builder<'_, T, ChaCha8Rng>, name: &str| {
            b.scoped(name, |b| AttnBlock { attn: b.attention("attn", d, c.heads), norm: b.layer_norm("norm", d) })
        };
        let ffn_block = |b: &mut Builder<'_, T, ChaCha8Rng>| {
            b.scoped("ffn", |b| FfnBlock { mlp: b.ffn("mlp", d, c.ffn_dim), norm: b.layer_norm("norm", d) })
        };
        let decoder_layer = |b: &mut Builder<'_, T, ChaCha8Rng>, i: usize| {
            b.scoped(i.to_string(), |b| DecoderLayer {
                self_attn: attn_block(b, "self_attn"),
                cross_attn: attn_block(b, "cross_attn"),
                ffn: ffn_block(b),
            })
        };

        let encoder = b.scoped("encoder", |b| {
            (0..c.encoder_layers)
                .map(|i| {
                    b.scoped(i.to_string(), |b| EncoderLayer { self_attn: attn_block(b, "self_attn"), ffn: ffn_block(b) })
                })
                .collect()
        });

        let (individual_queries, individual_decoder, individual_norm) = b.scoped("individual_decoder", |b| {
            let q = b.embedding("queries", c.num_individual_queries, d);
            let layers = (0..c.individual_decoder_layers).map(|i| decoder_layer(b, i)).collect();
            (q, layers, b.layer_norm("norm", d))
        });

        let (part_proj, part_pos, enhancer, enhancer_norm) = b.scoped("enhancer", |b| {
            let proj = b.linear("part_proj", d, c.num_parts * d, false);
            let pos = b.embedding("part_pos", c.num_parts, d);
            let layers = (0..c.enhancer_layers).map(|i| decoder_layer(b, i)).collect();
            (proj, pos, layers, b.layer_norm("norm", d))
        });
        let fuse = b.linear("fuse", (c.num_parts + 1) * d, d, false);

        let (group_queries, group_decoder, group_norm) = b.scoped("group_decoder", |b| {
            let q = b.embedding("queries", c.num_group_queries, d);
            let layers = (0..c.group_decoder_layers)
                .map(|i| {
                    b.scoped(i.to_string(), |b| GroupDecoderLayer {
                        self_attn: attn_block(b, "self_attn"),
                        individual_attn: attn_block(b, "individual_attn"),
                        feature_attn: attn_block(b, "feature_attn"),
                        ffn: ffn_block(b),
                    })
                })
                .collect();
            (q, layers, b.layer_norm("norm", d))
        });

        let individual_box = b.mlp("individual_box", &[d, d, d, 4]);
        let objectness = b.linear("objectness", d, 1, true);
        let group_box = b.mlp("group_box", &[d, d, d, 4]);
        let group_class = b.linear("group_class", d, c.num_classes, true);
        let sim_group = b.mlp("sim_group", &[d, d, d]);
        let sim_individual = b.mlp("sim_individual", &[d, d, d]);

        let model = Model {
            config: config.clone(),
            stem,
            input_proj,
            encoder,
            individual_queries,
            individual_decoder,
            individual_norm,
            part_proj,
            part_pos,
            enhancer,
            enhancer_norm,
            fuse,
            group_queries,
            group_decoder,
            group_norm,
            individual_box,
            objectness,
            group_box,
            group_class,
            sim_group,
            sim_individual,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter-name prefix of the convolutional backbone.
    pub const BACKBONE_PREFIX: &'static str = "stem.";

    pub fn part_projection(&self) -> ParamId {
        self.part_proj.w
    }

    pub fn fuse_weight(&self) -> ParamId {
        self.fuse.w
    }

    /// Broadcast a `[N, D]` table to `[B, N, D]`.
    fn tile<T: Scalar>(g: &Graph<'_, T>, table: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend(g.shape(table));
        g.add_broadcast(g.constant(Tensor::zeros(&shape)), table)
    }

    /// Images `[B, 3, H, W]` to the encoded feature map.
    pub fn encode<T: Scalar>(&self, g: &Graph<'_, T>, images: Var) -> Encoded {
        let c = &self.config;
        let s = g.shape(images);
        assert_eq!(&s[1..], &[3, c.image_height, c.image_width], "image batch shape");
        let mut x = images;
        for conv in &self.stem {
            x = g.relu(g.conv2d(x, g.param(conv.w), g.param(conv.b), 2, 1));
        }
        let tokens = g.nchw_to_nlc(x);
        let mut src = self.input_proj.forward(g, tokens);
        let grid = c.grid();
        let pos = g.constant(Tensor::from_f64(&[grid.cells(), c.dim], &sine_2d(grid.height, grid.width, c.dim)));
        let mut attention = Vec::new();
        for layer in &self.encoder {
            let q = with_pos(g, src, Some(pos));
            let (y, a) = layer.self_attn.forward(g, src, q, q, src, None);
            src = layer.ffn.forward(g, y);
            attention.push(a);
        }
        Encoded { feature: src, pos, attention }
    }

    pub fn decode_individuals<T: Scalar>(&self, g: &Graph<'_, T>, enc: &Encoded) -> IndividualOut {
        let batch = g.shape(enc.feature)[0];
        let qpos = g.param(self.individual_queries);
        let mut tgt = Self::tile(g, qpos, batch);
        let key = with_pos(g, enc.feature, Some(enc.pos));
        let mut attention = Vec::new();
        for layer in &self.individual_decoder {
            let q = with_pos(g, tgt, Some(qpos));
            let (t, a_self) = layer.self_attn.forward(g, tgt, q, q, tgt, None);
            let q = with_pos(g, t, Some(qpos));
            let (t, a_cross) = layer.cross_attn.forward(g, t, q, key, enc.feature, None);
            tgt = layer.ffn.forward(g, t);
            attention.extend([a_self, a_cross]);
        }
        let e = self.individual_norm.forward(g, tgt);
        let boxes = g.sigmoid(self.individual_box.forward(g, e));
        let objectness = self.objectness.forward(g, e);
        IndividualOut { embeddings: e, boxes, objectness, attention }
    }

    /// `Q_P = E_I · [W_1, …, W_P]`, returned as `[B * N_I, P, D]`.
    pub fn make_part_queries<T: Scalar>(&self, g: &Graph<'_, T>, individuals: Var) -> Var {
        let s = g.shape(individuals);
        let q = self.part_proj.forward(g, individuals);
        g.reshape(q, &[s[0] * s[1], self.config.num_parts, self.config.dim])
    }

    /// Refine part queries: self-attention among each individual's parts, then
    /// cross-attention to the feature map.
    pub fn enhance<T: Scalar>(&self, g: &Graph<'_, T>, part_queries: Var, enc: &Encoded) -> Enhanced {
        let (c, s) = (&self.config, g.shape(part_queries));
        let batch = g.shape(enc.feature)[0];
        let (bi, p, d) = (s[0], s[1], s[2]);
        let flat = [batch, bi / batch * p, d];
        let pos = g.param(self.part_pos);
        let key = with_pos(g, enc.feature, Some(enc.pos));
        let mut tgt = part_queries;
        let mut attention = Vec::new();
        let mut last = None;
        for layer in &self.enhancer {
            let q = with_pos(g, tgt, Some(pos));
            let (t, a_self) = layer.self_attn.forward(g, tgt, q, q, tgt, None);
            let q = g.reshape(with_pos(g, t, Some(pos)), &flat);
            let (t, a_cross) = layer.cross_attn.forward(g, g.reshape(t, &flat), q, key, enc.feature, None);
            tgt = g.reshape(layer.ffn.forward(g, t), &[bi, p, d]);
            attention.extend([a_self, a_cross]);
            last = Some(a_cross);
        }
        let parts = self.enhancer_norm.forward(g, tgt);
        let part_attention = match last {
            Some(a) => g.head_mean(a),
            None => g.constant(Tensor::full(&[batch, flat[1], c.grid().cells()], T::from_real(1.0 / c.grid().cells() as f64))),
        };
        Enhanced { parts, part_attention, attention }
    }

    /// `E_A = [E_I, E_P¹, …, E_P^P] · W_fuse`.
    pub fn fuse<T: Scalar>(&self, g: &Graph<'_, T>, individuals: Var, parts: Var) -> Var {
        let s = g.shape(individuals);
        let flat = g.reshape(parts, &[s[0], s[1], self.config.num_parts * self.config.dim]);
        self.fuse.forward(g, g.concat_last(&[individuals, flat]))
    }

    /// Group decoder. `individual_mask` (`B * N_I` entries) hides individuals from
    /// the cross-attention over `E_A`.
    pub fn decode_groups<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        part_aware: Var,
        enc: &Encoded,
        individual_mask: Option<&[bool]>,
    ) -> GroupOut {
        let batch = g.shape(enc.feature)[0];
        let qpos = g.param(self.group_queries);
        let mut tgt = Self::tile(g, qpos, batch);
        let key = with_pos(g, enc.feature, Some(enc.pos));
        let mut attention = Vec::new();
        let mut individual_attention = Vec::new();
        for layer in &self.group_decoder {
            let q = with_pos(g, tgt, Some(qpos));
            let (t, a_self) = layer.self_attn.forward(g, tgt, q, q, tgt, None);
            let q = with_pos(g, t, Some(qpos));
            let (t, a_ind) = layer.individual_attn.forward(g, t, q, part_aware, part_aware, individual_mask);
            let q = with_pos(g, t, Some(qpos));
            let (t, a_feat) = layer.feature_attn.forward(g, t, q, key, enc.feature, None);
            tgt = layer.ffn.forward(g, t);
            attention.extend([a_self, a_ind, a_feat]);
            individual_attention.push(a_ind);
        }
        let e = self.group_norm.forward(g, tgt);
        let boxes = g.sigmoid(self.group_box.forward(g, e));
        let class_logits = self.group_class.forward(g, e);
        GroupOut { embeddings: e, boxes, class_logits, individual_attention, attention }
    }

    /// `S = MLP(E_G) · MLP(E_I)ᵀ`, `[B, N_G, N_I]`.
    pub fn similarity<T: Scalar>(&self, g: &Graph<'_, T>, groups: Var, individuals: Var) -> Var {
        let a = self.sim_group.forward(g, groups);
        let b = self.sim_individual.forward(g, individuals);
        g.bmm_nt(a, b)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, images: Var, individual_mask: Option<&[bool]>) -> ForwardOutput {
        let batch = g.shape(images)[0];
        let encoded = self.encode(g, images);
        let individuals = self.decode_individuals(g, &encoded);
        let part_queries = self.make_part_queries(g, individuals.embeddings);
        let enhanced = self.enhance(g, part_queries, &encoded);
        let part_aware = self.fuse(g, individuals.embeddings, enhanced.parts);
        let groups = self.decode_groups(g, part_aware, &encoded, individual_mask);
        let similarity = self.similarity(g, groups.embeddings, individuals.embeddings);
        ForwardOutput { batch, encoded, individuals, part_queries, enhanced, part_aware, groups, similarity }
    }
}
