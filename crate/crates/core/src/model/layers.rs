//! Parameterized building blocks shared by the encoder and decoder.

use std::f64::consts::PI;

use crate::autodiff::{DeformSpec, Graph, Tensor, Var};
use crate::rng::DetRng;

use super::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut DetRng,
    ) -> Self {
        Linear {
            w: store.xavier(
                format!("{name}.w"),
                vec![d_in, d_out],
                d_in,
                d_out,
                group,
                rng,
            ),
            b: store.zeros(format!("{name}.b"), vec![d_out], group),
        }
    }

    /// Weights and bias start at zero.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Self {
        Linear {
            w: store.zeros(format!("{name}.w"), vec![d_in, d_out], group),
            b: store.zeros(format!("{name}.b"), vec![d_out], group),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.filled(format!("{name}.gamma"), vec![d], ParamGroup::Main, 1.0),
            beta: store.zeros(format!("{name}.beta"), vec![d], ParamGroup::Main),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut DetRng,
    ) -> Self {
        FeedForward {
            up: Linear::new(
                store,
                &format!("{name}.up"),
                d,
                hidden,
                ParamGroup::Main,
                rng,
            ),
            down: Linear::new(
                store,
                &format!("{name}.down"),
                hidden,
                d,
                ParamGroup::Main,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Multi-scale deformable attention: each query reads `heads · levels · points`
/// bilinear samples around its reference point.
#[derive(Debug, Clone)]
pub struct DeformAttn {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub output: Linear,
}

impl DeformAttn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut DetRng,
    ) -> Self {
        let samples = heads * levels * points;
        let offsets = Linear::zeroed(
            store,
            &format!("{name}.offsets"),
            d,
            samples * 2,
            ParamGroup::Main,
        );
        // Head m starts looking along direction 2πm/M, point k at distance k+1 pixels.
        let bias = &mut store.get_mut(offsets.b).value;
        for m in 0..heads {
            let theta = 2.0 * PI * m as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let norm = c.abs().max(s.abs());
            for l in 0..levels {
                for k in 0..points {
                    let i = ((m * levels + l) * points + k) * 2;
                    bias[i] = c / norm * (k + 1) as f64;
                    bias[i + 1] = s / norm * (k + 1) as f64;
                }
            }
        }
        DeformAttn {
            heads,
            points,
            levels,
            value: Linear::new(store, &format!("{name}.value"), d, d, ParamGroup::Main, rng),
            offsets,
            weights: Linear::zeroed(
                store,
                &format!("{name}.weights"),
                d,
                samples,
                ParamGroup::Main,
            ),
            output: Linear::new(
                store,
                &format!("{name}.output"),
                d,
                d,
                ParamGroup::Main,
                rng,
            ),
        }
    }

    /// `query: [Nq, d]`, `reference: [Nq, 2]`, `input: [S, d]` over `level_dims`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        reference: Var,
        input: Var,
        level_dims: &[(usize, usize)],
    ) -> Var {
        assert_eq!(level_dims.len(), self.levels, "level count mismatch");
        let spec = DeformSpec {
            heads: self.heads,
            points: self.points,
            levels: level_dims.to_vec(),
        };
        let value = self.value.forward(g, store, input);
        let offsets = self.offsets.forward(g, store, query);
        let logits = self.weights.forward(g, store, query);
        let attn = g.softmax_groups(logits, self.levels * self.points);
        let sampled = g.deform_sample(value, reference, offsets, attn, &spec);
        self.output.forward(g, store, sampled)
    }
}

/// Scaled dot-product self-attention among a set of tokens.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut DetRng,
    ) -> Self {
        MultiHeadAttention {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, ParamGroup::Main, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, ParamGroup::Main, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, ParamGroup::Main, rng),
            output: Linear::new(
                store,
                &format!("{name}.output"),
                d,
                d,
                ParamGroup::Main,
                rng,
            ),
        }
    }

    /// Queries and keys come from `qk`, values from `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, qk: Var, x: Var) -> Var {
        let (n, d) = g.value(x).dims2();
        let dh = d / self.heads;
        let q = self.q.forward(g, store, qk);
        let k = self.k.forward(g, store, qk);
        let v = self.v.forward(g, store, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_groups(scores, n);
            let vh = g.slice_cols(v, a, b);
            outs.push(g.matmul(attn, vh));
        }
        let joined = g.concat_cols(&outs);
        self.output.forward(g, store, joined)
    }
}

/// Sine-cosine encoding of a `height × width` grid as `[height·width, channels]`.
///
/// The first half of the channels encodes the row, the second half the column.
/// Within each half, channel pairs `(2i, 2i+1)` hold `sin` and `cos` of
/// `2π·pos/len · 10000^(-2i/half)`.
pub fn positional_encoding_2d(height: usize, width: usize, channels: usize) -> Option<Vec<f64>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return None;
    }
    let half = channels / 2;
    let mut out = vec![0.0; height * width * channels];
    for y in 0..height {
        for x in 0..width {
            let row = &mut out[(y * width + x) * channels..(y * width + x + 1) * channels];
            for (axis, (pos, len)) in [(y, height), (x, width)].into_iter().enumerate() {
                let angle0 = 2.0 * PI * pos as f64 / len as f64;
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    let (s, c) = (angle0 * freq).sin_cos();
                    row[axis * half + 2 * i] = s;
                    row[axis * half + 2 * i + 1] = c;
                }
            }
        }
    }
    Some(out)
}

/// Normalized pixel centers of every token, level by level.
pub fn token_centers(level_dims: &[(usize, usize)]) -> Tensor {
    let mut data = Vec::new();
    for &(h, w) in level_dims {
        for y in 0..h {
            for x in 0..w {
                data.push((x as f64 + 0.5) / w as f64);
                data.push((y as f64 + 0.5) / h as f64);
            }
        }
    }
    let n = data.len() / 2;
    Tensor::new(vec![n, 2], data)
}
