//! A compact deformable-attention detector: convolutional backbone producing a
//! three-level pyramid, deformable encoder, query decoder and box/class heads.

mod checkpoint;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::image::Image;
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    positional_encoding_2d, token_centers, DeformAttn, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {height}x{width} is not divisible by {multiple}")]
    BadInputDims {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Overall downsampling of the deepest level; inputs must be divisible by it.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
    /// Pyramid levels used, taken from strides 8, 16, 32 in order.
    pub levels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    /// Backbone stage widths.
    pub backbone_channels: [usize; 4],
    pub norm_groups: usize,
    /// Prior nodule probability used to initialize the class bias.
    pub prior_prob: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            points: 4,
            levels: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 20,
            ffn_dim: 128,
            backbone_channels: [16, 32, 64, 64],
            norm_groups: 8,
            prior_prob: 0.01,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be divisible by 4", self.d_model));
        }
        if self.norm_groups == 0 || !self.d_model.is_multiple_of(self.norm_groups) {
            return bad(format!(
                "norm_groups {} must divide d_model {}",
                self.norm_groups, self.d_model
            ));
        }
        if !(1..=3).contains(&self.levels)
            || self.points == 0
            || self.num_queries == 0
            || self.ffn_dim == 0
        {
            return bad("levels must be 1..=3; points, queries and ffn_dim positive".into());
        }
        if self.backbone_channels.contains(&0) {
            return bad("backbone channels must be positive".into());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad(format!("prior_prob {} outside (0, 1)", self.prior_prob));
        }
        Ok(())
    }
}

/// One convolution of the backbone.
#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 1×1 projection to `d_model` followed by group normalization.
#[derive(Debug, Clone)]
struct LevelProjection {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
}

/// Multi-scale features, each level `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub dims: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Vec<Conv>,
    stages: Vec<Conv>,
    projections: Vec<LevelProjection>,
    norm_groups: usize,
}

impl Backbone {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut rng::DetRng) -> Self {
        let group = ParamGroup::Backbone;
        let mut conv = |store: &mut ParamStore,
                        name: &str,
                        cin: usize,
                        cout: usize,
                        k: usize,
                        stride: usize| {
            let fan_in = cin * k * k;
            Conv {
                w: store.uniform(
                    format!("{name}.w"),
                    vec![cout, cin, k, k],
                    (6.0 / fan_in as f64).sqrt(),
                    group,
                    rng,
                ),
                b: store.zeros(format!("{name}.b"), vec![cout], group),
                stride,
                pad: k / 2,
            }
        };
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        let stem = vec![
            conv(store, "backbone.stem0", 1, c1, 3, 2),
            conv(store, "backbone.stem1", c1, c1, 3, 2),
        ];
        let stages = vec![
            conv(store, "backbone.stage2", c1, c2, 3, 2),
            conv(store, "backbone.stage3", c2, c3, 3, 2),
            conv(store, "backbone.stage4", c3, c4, 3, 2),
        ];
        let projections = [c2, c3, c4]
            .iter()
            .take(cfg.levels)
            .enumerate()
            .map(|(l, &c)| LevelProjection {
                conv: conv(store, &format!("backbone.proj{l}"), c, cfg.d_model, 1, 1),
                gamma: store.filled(
                    format!("backbone.proj{l}.gamma"),
                    vec![cfg.d_model],
                    group,
                    1.0,
                ),
                beta: store.zeros(format!("backbone.proj{l}.beta"), vec![cfg.d_model], group),
            })
            .collect();
        Backbone {
            stem,
            stages,
            projections,
            norm_groups: cfg.norm_groups,
        }
    }

    /// `x: [1, H, W]` with `H` and `W` divisible by 32.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<FeaturePyramid> {
        let shape = g.value(x).shape.clone();
        let (h, w) = (shape[1], shape[2]);
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(ModelError::BadInputDims {
                height: h,
                width: w,
                multiple: INPUT_MULTIPLE,
            });
        }
        let mut cur = x;
        for c in &self.stem {
            let y = c.forward(g, store, cur);
            cur = g.relu(y);
        }
        let mut levels = Vec::new();
        let mut dims = Vec::new();
        let mut strides = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let y = stage.forward(g, store, cur);
            cur = g.relu(y);
            if let Some(p) = self.projections.get(i) {
                let y = p.conv.forward(g, store, cur);
                let gamma = g.param(store, p.gamma);
                let beta = g.param(store, p.beta);
                let y = g.group_norm(y, gamma, beta, self.norm_groups);
                let s = g.value(y).shape.clone();
                dims.push((s[1], s[2]));
                strides.push(8 << i);
                levels.push(y);
            }
        }
        Ok(FeaturePyramid {
            levels,
            dims,
            strides,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: DeformAttn,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub class: Linear,
    pub box_mlp: Vec<Linear>,
}

impl Heads {
    /// Box head on `states: [Nq, d]`, offset by the reference logits `[Nq, 2]`.
    /// Returns `(class logits [Nq, 1], boxes [Nq, 4])`, boxes after the sigmoid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        ref_logits: Var,
    ) -> (Var, Var) {
        let logits = self.class.forward(g, store, states);
        let mut h = states;
        for (i, layer) in self.box_mlp.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.box_mlp.len() {
                h = g.relu(h);
            }
        }
        let nq = g.value(states).dims2().0;
        let zeros = g.constant(Tensor::zeros(vec![nq, 2]));
        let shift = g.concat_cols(&[ref_logits, zeros]);
        let raw = g.add(h, shift);
        (logits, g.sigmoid(raw))
    }
}

/// Model outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[Nq, 1]` nodule probability.
    pub probs: Var,
    /// `[Nq, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Var,
}

/// Plain per-query predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub boxes: Vec<[f64; 4]>,
    pub class_prob: Vec<f64>,
}

impl Detections {
    pub fn from_graph(g: &Graph, out: &ForwardOutput) -> Self {
        Detections {
            boxes: g
                .value(out.boxes)
                .data
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
            class_prob: g.value(out.probs).data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_prob.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DetrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: Vec<EncoderLayer>,
    pub query_embed: ParamId,
    pub ref_proj: Linear,
    pub decoder: Vec<DecoderLayer>,
    pub heads: Heads,
}

impl DetrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derived(config.init_seed, "model-init");
        let mut store = ParamStore::new();
        let d = config.d_model;
        let backbone = Backbone::new(&mut store, &config, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("encoder{i}");
                EncoderLayer {
                    attn: DeformAttn::new(
                        &mut store,
                        &format!("{n}.attn"),
                        d,
                        config.heads,
                        config.levels,
                        config.points,
                        &mut rng,
                    ),
                    norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    ffn: FeedForward::new(
                        &mut store,
                        &format!("{n}.ffn"),
                        d,
                        config.ffn_dim,
                        &mut rng,
                    ),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let query_embed = store.uniform(
            "queries",
            vec![config.num_queries, 2 * d],
            3f64.sqrt(),
            ParamGroup::Main,
            &mut rng,
        );
        let ref_proj = Linear::new(&mut store, "reference", d, 2, ParamGroup::Main, &mut rng);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("decoder{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(
                        &mut store,
                        &format!("{n}.self_attn"),
                        d,
                        config.heads,
                        &mut rng,
                    ),
                    norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    cross_attn: DeformAttn::new(
                        &mut store,
                        &format!("{n}.cross_attn"),
                        d,
                        config.heads,
                        config.levels,
                        config.points,
                        &mut rng,
                    ),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                    ffn: FeedForward::new(
                        &mut store,
                        &format!("{n}.ffn"),
                        d,
                        config.ffn_dim,
                        &mut rng,
                    ),
                    norm3: LayerNorm::new(&mut store, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        let class = Linear::new(&mut store, "head.class", d, 1, ParamGroup::Main, &mut rng);
        let p = config.prior_prob;
        store.get_mut(class.b).value[0] = -((1.0 - p) / p).ln();
        let box_mlp = vec![
            Linear::new(&mut store, "head.box0", d, d, ParamGroup::Main, &mut rng),
            Linear::new(&mut store, "head.box1", d, d, ParamGroup::Main, &mut rng),
            Linear::zeroed(&mut store, "head.box2", d, 4, ParamGroup::Main),
        ];
        Ok(DetrModel {
            config,
            store,
            backbone,
            encoder,
            query_embed,
            ref_proj,
            decoder,
            heads: Heads { class, box_mlp },
        })
    }

    /// Flatten the pyramid into tokens and refine them with the encoder.
    /// Returns `(memory [S, d], positional encodings [S, d])`.
    pub fn encoder_forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> (Var, Var) {
        let store = &self.store;
        let d = self.config.d_model;
        let mut tokens = Vec::new();
        let mut pos = Vec::new();
        for (&level, &(h, w)) in pyramid.levels.iter().zip(&pyramid.dims) {
            let flat = g.reshape(level, vec![d, h * w]);
            tokens.push(g.transpose(flat));
            pos.extend(positional_encoding_2d(h, w, d).expect("d_model validated divisible by 4"));
        }
        let mut src = g.concat_rows(&tokens);
        let s = g.value(src).dims2().0;
        let pos = g.constant(Tensor::new(vec![s, d], pos));
        let reference = g.constant(token_centers(&pyramid.dims));
        for layer in &self.encoder {
            let q = g.add(src, pos);
            let attn = layer
                .attn
                .forward(g, store, q, reference, src, &pyramid.dims);
            let res = g.add(src, attn);
            src = layer.norm1.forward(g, store, res);
            let ff = layer.ffn.forward(g, store, src);
            let res = g.add(src, ff);
            src = layer.norm2.forward(g, store, res);
        }
        (src, pos)
    }

    /// Decode the object queries against `memory`. Returns the final query
    /// states `[Nq, d]` and the reference logits `[Nq, 2]`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        memory: Var,
        level_dims: &[(usize, usize)],
    ) -> (Var, Var) {
        let store = &self.store;
        let d = self.config.d_model;
        let embed = g.param(store, self.query_embed);
        let query_pos = g.slice_cols(embed, 0, d);
        let mut tgt = g.slice_cols(embed, d, 2 * d);
        let ref_logits = self.ref_proj.forward(g, store, query_pos);
        let reference = g.sigmoid(ref_logits);
        for layer in &self.decoder {
            let qk = g.add(tgt, query_pos);
            let sa = layer.self_attn.forward(g, store, qk, tgt);
            let res = g.add(tgt, sa);
            tgt = layer.norm1.forward(g, store, res);
            let q = g.add(tgt, query_pos);
            let ca = layer
                .cross_attn
                .forward(g, store, q, reference, memory, level_dims);
            let res = g.add(tgt, ca);
            tgt = layer.norm2.forward(g, store, res);
            let ff = layer.ffn.forward(g, store, tgt);
            let res = g.add(tgt, ff);
            tgt = layer.norm3.forward(g, store, res);
        }
        (tgt, ref_logits)
    }

    /// Full forward pass on one image.
    pub fn forward(&self, g: &mut Graph, image: &Image) -> Result<ForwardOutput> {
        let x = g.constant(Tensor::new(
            vec![1, image.height, image.width],
            image.pixels.iter().map(|&v| v as f64).collect(),
        ));
        self.forward_var(g, x)
    }

    /// Forward pass from an input node `[1, H, W]`.
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
        let pyramid = self.backbone.forward(g, &self.store, x)?;
        let (memory, _) = self.encoder_forward(g, &pyramid);
        let (states, ref_logits) = self.decoder_forward(g, memory, &pyramid.dims);
        let (logits, boxes) = self.heads.forward(g, &self.store, states, ref_logits);
        let probs = g.sigmoid(logits);
        Ok(ForwardOutput { probs, boxes })
    }

    /// Inference without keeping the graph.
    pub fn predict(&self, image: &Image) -> Result<Detections> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image)?;
        Ok(Detections::from_graph(&g, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            points: 2,
            levels: 3,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 5,
            ffn_dim: 16,
            backbone_channels: [4, 4, 8, 8],
            norm_groups: 4,
            prior_prob: 0.01,
            init_seed: 3,
        }
    }

    #[test]
    fn pyramid_dims_follow_strides() {
        let model = DetrModel::new(tiny()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 64, 64]));
        let p = model.backbone.forward(&mut g, &model.store, x).unwrap();
        assert_eq!(p.dims, vec![(8, 8), (4, 4), (2, 2)]);
        assert_eq!(p.strides, vec![8, 16, 32]);
        for &l in &p.levels {
            assert_eq!(g.value(l).shape[0], 16);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let model = DetrModel::new(tiny()).unwrap();
        assert!(matches!(
            model.predict(&Image::filled(48, 64, 0.0)),
            Err(ModelError::BadInputDims { .. })
        ));
    }

    #[test]
    fn emits_every_query_inside_unit_interval() {
        let model = DetrModel::new(tiny()).unwrap();
        let img = Image::new(32, 32, (0..1024).map(|i| (i % 7) as f32 / 7.0).collect());
        let det = model.predict(&img).unwrap();
        assert_eq!(det.len(), 5);
        assert!(det.class_prob.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(det.boxes.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        assert!((det.class_prob[0] - 0.01).abs() < 0.02);
    }

    #[test]
    fn forward_is_bit_identical() {
        let model = DetrModel::new(tiny()).unwrap();
        let img = Image::new(
            32,
            32,
            (0..1024).map(|i| ((i * 13) % 31) as f32 / 31.0).collect(),
        );
        assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(DetrModel::new(c).is_err());
        let mut c = tiny();
        c.d_model = 18;
        c.heads = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn positional_encoding_contract() {
        assert!(positional_encoding_2d(2, 2, 6).is_none());
        let pe = positional_encoding_2d(8, 8, 16).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in (0..16).step_by(2) {
            assert_eq!(pe[i], 0.0);
        }
    }
}
