//! Randomized gradient checks for every differentiable building block.
//!
//! Each case draws one random configuration from the generator it is given
//! and returns the worst relative error it saw.

use rand::Rng;

use super::{
    check_function, check_graph, check_params, random_tensor, randomize, sample_indices,
    CheckReport,
};
use crate::autodiff::{bilinear_sample, bilinear_sample_backward, DeformSpec, Tensor, Var};
use crate::image::Image;
use crate::loss::{giou_grad, set_loss, CostWeights, FocalParams};
use crate::model::{
    DeformAttn, Detections, DetrModel, FeaturePyramid, ModelConfig, MultiHeadAttention, ParamGroup,
    ParamStore,
};
use crate::projection::GroundTruthBox;
use crate::rng::DetRng;
use crate::trainer::{image_gradients, image_loss, LossConfig, Sample};

pub type Case = fn(&mut DetRng) -> CheckReport;

/// Named checks in a fixed order.
pub fn all_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d as Case),
        ("group_norm", group_norm),
        ("layer_norm", layer_norm),
        ("softmax", softmax),
        ("elementwise_and_shape_ops", elementwise),
        ("relu", relu),
        ("bilinear_sample", bilinear),
        ("deform_sample", deform_sample),
        ("deformable_attention", deformable_attention),
        ("multi_head_attention", multi_head_attention),
        ("giou", giou),
        ("set_loss", set_loss_outputs),
        ("backbone", backbone),
        ("encoder", encoder),
        ("decoder", decoder),
        ("heads", heads),
        ("model_with_set_loss", model_with_set_loss),
    ]
}

/// Smallest configuration that still exercises every code path.
pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        points: 2,
        levels: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        num_queries: 4,
        ffn_dim: 8,
        backbone_channels: [2, 2, 4, 4],
        norm_groups: 2,
        prior_prob: 0.1,
        init_seed: seed,
    }
}

fn conv2d(rng: &mut DetRng) -> CheckReport {
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let stride = rng.random_range(1..=2);
    let pad = if rng.random_bool(0.5) { 0 } else { k / 2 };
    let (h, w) = (rng.random_range(k..=7), rng.random_range(k..=7));
    let inputs = [
        random_tensor(vec![c, h, w], 1.0, rng),
        random_tensor(vec![o, c, k, k], 1.0, rng),
        random_tensor(vec![o], 1.0, rng),
    ];
    check_graph(
        &inputs,
        move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        40,
        rng,
    )
}

fn group_norm(rng: &mut DetRng) -> CheckReport {
    let groups = rng.random_range(1..=3);
    let c = groups * rng.random_range(1..=3);
    let (h, w) = (rng.random_range(1..=4), rng.random_range(2..=4));
    let inputs = [
        random_tensor(vec![c, h, w], 2.0, rng),
        random_tensor(vec![c], 1.5, rng),
        random_tensor(vec![c], 1.0, rng),
    ];
    check_graph(
        &inputs,
        move |g, v| g.group_norm(v[0], v[1], v[2], groups),
        40,
        rng,
    )
}

fn layer_norm(rng: &mut DetRng) -> CheckReport {
    let (n, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let inputs = [
        random_tensor(vec![n, d], 2.0, rng),
        random_tensor(vec![d], 1.5, rng),
        random_tensor(vec![d], 1.0, rng),
    ];
    check_graph(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2]), 40, rng)
}

fn softmax(rng: &mut DetRng) -> CheckReport {
    let group = rng.random_range(1..=6);
    let n = rng.random_range(1..=4);
    let inputs = [random_tensor(vec![n, group], 3.0, rng)];
    check_graph(&inputs, move |g, v| g.softmax_groups(v[0], group), 40, rng)
}

fn elementwise(rng: &mut DetRng) -> CheckReport {
    let (n, d) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let s = rng.random_range(-2.0..2.0);
    let cut = rng.random_range(1..d);
    let inputs = [
        random_tensor(vec![n, d], 2.0, rng),
        random_tensor(vec![n, d], 2.0, rng),
        random_tensor(vec![d], 1.0, rng),
        random_tensor(vec![d, 3], 1.0, rng),
    ];
    check_graph(
        &inputs,
        move |g, v| {
            let a = g.sigmoid(v[0]);
            let m = g.mul(a, v[1]);
            let r = g.add_row(m, v[2]);
            let r = g.scale(r, s);
            let left = g.slice_cols(r, 0, cut);
            let right = g.slice_cols(r, cut, d);
            let joined = g.concat_cols(&[right, left]);
            let both = g.add(joined, v[1]);
            let t = g.transpose(both);
            let t = g.transpose(t);
            let p = g.matmul(t, v[3]);
            let stacked = g.concat_rows(&[p, p]);
            g.reshape(stacked, vec![2 * n * 3])
        },
        40,
        rng,
    )
}

fn relu(rng: &mut DetRng) -> CheckReport {
    let n = rng.random_range(2..=12);
    // keep inputs away from the kink
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    check_graph(&[Tensor::new(vec![n], data)], |g, v| g.relu(v[0]), 40, rng)
}

fn bilinear(rng: &mut DetRng) -> CheckReport {
    let (h, w, c) = (
        rng.random_range(2..=5),
        rng.random_range(2..=5),
        rng.random_range(1..=3),
    );
    let map: Vec<f64> = (0..h * w * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let point = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
    let d_out: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = map.clone();
    x.extend_from_slice(&point);
    let (d_map, d_point) = bilinear_sample_backward(h, w, c, &map, point, &d_out);
    let mut analytic = d_map;
    analytic.extend_from_slice(&d_point);
    let n = h * w * c;
    let f = |x: &[f64]| -> f64 {
        bilinear_sample(&x[..n], h, w, c, [x[n], x[n + 1]])
            .iter()
            .zip(&d_out)
            .map(|(a, b)| a * b)
            .sum()
    };
    let idx: Vec<usize> = (0..x.len()).collect();
    check_function(&x, f, &analytic, &idx)
}

fn random_levels(rng: &mut DetRng, max_levels: usize) -> Vec<(usize, usize)> {
    (0..rng.random_range(1..=max_levels))
        .map(|_| (rng.random_range(1..=4), rng.random_range(1..=4)))
        .collect()
}

fn deform_sample(rng: &mut DetRng) -> CheckReport {
    let levels = random_levels(rng, 2);
    let heads = rng.random_range(1..=2);
    let points = rng.random_range(1..=2);
    let spec = DeformSpec {
        heads,
        points,
        levels,
    };
    let d = heads * rng.random_range(1..=2);
    let nq = rng.random_range(1..=3);
    let per = spec.samples_per_head() * heads;
    let reference = Tensor::new(
        vec![nq, 2],
        (0..nq * 2).map(|_| rng.random_range(0.05..0.95)).collect(),
    );
    let inputs = [
        random_tensor(vec![spec.total_tokens(), d], 1.0, rng),
        reference,
        random_tensor(vec![nq, per * 2], 1.5, rng),
        Tensor::new(
            vec![nq, per],
            (0..nq * per).map(|_| rng.random_range(0.0..1.0)).collect(),
        ),
    ];
    check_graph(
        &inputs,
        move |g, v| g.deform_sample(v[0], v[1], v[2], v[3], &spec),
        40,
        rng,
    )
}

fn deformable_attention(rng: &mut DetRng) -> CheckReport {
    let all = [(4, 4), (2, 2)];
    let levels: Vec<(usize, usize)> = all[..rng.random_range(1..=2)].to_vec();
    let heads = rng.random_range(1..=2);
    let points = rng.random_range(1..=2);
    let d = heads * 2;
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, "attn", d, heads, levels.len(), points, rng);
    randomize(&mut store, 0.5, rng);
    let s: usize = levels.iter().map(|&(h, w)| h * w).sum();
    let nq = rng.random_range(1..=3);
    let inputs = [
        random_tensor(vec![nq, d], 1.0, rng),
        Tensor::new(
            vec![nq, 2],
            (0..nq * 2).map(|_| rng.random_range(0.05..0.95)).collect(),
        ),
        random_tensor(vec![s, d], 1.0, rng),
    ];
    check_params(
        &store,
        &inputs,
        move |g, st, v| attn.forward(g, st, v[0], v[1], v[2], &levels),
        12,
        rng,
    )
}

fn multi_head_attention(rng: &mut DetRng) -> CheckReport {
    let heads = rng.random_range(1..=2);
    let d = heads * rng.random_range(1..=3);
    let n = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, rng);
    randomize(&mut store, 0.7, rng);
    let inputs = [
        random_tensor(vec![n, d], 1.0, rng),
        random_tensor(vec![n, d], 1.0, rng),
    ];
    check_params(
        &store,
        &inputs,
        move |g, st, v| mha.forward(g, st, v[0], v[1]),
        12,
        rng,
    )
}

fn random_box(rng: &mut DetRng) -> [f64; 4] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    ]
}

fn giou(rng: &mut DetRng) -> CheckReport {
    let a = random_box(rng);
    let b = random_box(rng);
    let (_, grad) = giou_grad(a, b);
    check_function(
        &a,
        |x| giou_grad([x[0], x[1], x[2], x[3]], b).0,
        &grad,
        &[0, 1, 2, 3],
    )
}

fn set_loss_outputs(rng: &mut DetRng) -> CheckReport {
    let nq = rng.random_range(2..=6);
    let ng = rng.random_range(0..=nq.min(3));
    let probs: Vec<f64> = (0..nq).map(|_| rng.random_range(0.05..0.95)).collect();
    let boxes: Vec<[f64; 4]> = (0..nq).map(|_| random_box(rng)).collect();
    let gts: Vec<[f64; 4]> = (0..ng).map(|_| random_box(rng)).collect();
    let focal = FocalParams::default();
    let weights = CostWeights::default();
    let unpack = |x: &[f64]| Detections {
        class_prob: x[..nq].to_vec(),
        boxes: x[nq..]
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect(),
    };
    let mut x = probs.clone();
    x.extend(boxes.iter().flatten());
    let l = set_loss(&unpack(&x), &gts, focal, weights).expect("queries cover targets");
    let mut analytic = l.d_prob.clone();
    analytic.extend(l.d_boxes.iter().flatten());
    let idx: Vec<usize> = (0..x.len()).collect();
    check_function(
        &x,
        |x| {
            set_loss(&unpack(x), &gts, focal, weights)
                .expect("queries cover targets")
                .breakdown
                .total
        },
        &analytic,
        &idx,
    )
}

/// Toy model whose zero-initialized tensors are moved off zero: exact zeros put
/// ReLU inputs on the kink, where no derivative exists.
fn perturbed_toy(rng: &mut DetRng) -> DetrModel {
    let mut model = DetrModel::new(toy_config(rng.random())).expect("toy config is valid");
    for p in model.store.iter_mut() {
        if p.value.iter().all(|&v| v == 0.0) {
            for v in &mut p.value {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    model
}

fn backbone(rng: &mut DetRng) -> CheckReport {
    let model = perturbed_toy(rng);
    let input = Tensor::new(
        vec![1, 32, 32],
        (0..1024).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let backbone = model.backbone.clone();
    let d = model.config.d_model;
    check_params(
        &model.store,
        &[input],
        move |g, st, v| {
            let p = backbone
                .forward(g, st, v[0])
                .expect("input divisible by 32");
            let flat: Vec<Var> = p
                .levels
                .iter()
                .zip(&p.dims)
                .map(|(&l, &(h, w))| g.reshape(l, vec![d, h * w]))
                .collect();
            g.concat_cols(&flat)
        },
        4,
        rng,
    )
}

fn randomized_toy(rng: &mut DetRng) -> DetrModel {
    let mut model = DetrModel::new(toy_config(rng.random())).expect("toy config is valid");
    randomize(&mut model.store, 0.5, rng);
    model
}

fn encoder(rng: &mut DetRng) -> CheckReport {
    let model = randomized_toy(rng);
    let dims = vec![(4, 4), (2, 2), (1, 1)];
    let d = model.config.d_model;
    let inputs: Vec<Tensor> = dims
        .iter()
        .map(|&(h, w)| random_tensor(vec![d, h, w], 1.0, rng))
        .collect();
    let store = model.store.clone();
    check_params(
        &store,
        &inputs,
        move |g, st, v| {
            let mut m = model.clone();
            m.store = st.clone();
            let pyramid = FeaturePyramid {
                levels: v.to_vec(),
                dims: dims.clone(),
                strides: vec![8, 16, 32],
            };
            m.encoder_forward(g, &pyramid).0
        },
        3,
        rng,
    )
}

fn decoder(rng: &mut DetRng) -> CheckReport {
    let model = randomized_toy(rng);
    let dims = vec![(4, 4), (2, 2), (1, 1)];
    let d = model.config.d_model;
    let inputs = [random_tensor(vec![21, d], 1.0, rng)];
    let store = model.store.clone();
    check_params(
        &store,
        &inputs,
        move |g, st, v| {
            let mut m = model.clone();
            m.store = st.clone();
            let (states, refs) = m.decoder_forward(g, v[0], &dims);
            g.concat_cols(&[states, refs])
        },
        3,
        rng,
    )
}

fn heads(rng: &mut DetRng) -> CheckReport {
    let model = randomized_toy(rng);
    let d = model.config.d_model;
    let nq = model.config.num_queries;
    let inputs = [
        random_tensor(vec![nq, d], 1.0, rng),
        random_tensor(vec![nq, 2], 1.0, rng),
    ];
    let heads = model.heads.clone();
    let mut store = ParamStore::new();
    // only the head parameters, under their original names
    let mut remap = |id| {
        let p = model.store.get(id);
        store.add(
            p.name.clone(),
            p.shape.clone(),
            ParamGroup::Main,
            p.value.clone(),
        )
    };
    let mut local = heads.clone();
    local.class.w = remap(heads.class.w);
    local.class.b = remap(heads.class.b);
    for (l, orig) in local.box_mlp.iter_mut().zip(&heads.box_mlp) {
        l.w = remap(orig.w);
        l.b = remap(orig.b);
    }
    check_params(
        &store,
        &inputs,
        move |g, st, v| {
            let (logits, boxes) = local.forward(g, st, v[0], v[1]);
            let probs = g.sigmoid(logits);
            g.concat_cols(&[probs, boxes])
        },
        12,
        rng,
    )
}

fn model_with_set_loss(rng: &mut DetRng) -> CheckReport {
    let model = perturbed_toy(rng);
    let image = Image::new(
        32,
        32,
        (0..1024).map(|_| rng.random_range(0.0..1.0f32)).collect(),
    );
    let boxes = (0..rng.random_range(0..=2))
        .map(|_| {
            let b = random_box(rng);
            GroundTruthBox {
                cx: b[0],
                cy: b[1],
                w: b[2],
                h: b[3],
                diameter_mm: 8.0,
            }
        })
        .collect();
    let sample = Sample {
        id: "gradcheck".into(),
        image,
        boxes,
    };
    let cfg = LossConfig::default();
    let (_, grads) = image_gradients(&model, &sample, &cfg, 1.0).expect("toy forward succeeds");

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (k, &id) in ids.iter().enumerate() {
        let len = model.store.get(id).value.len();
        for i in sample_indices(len, 1, rng) {
            let base = model.store.get(id).value.clone();
            let numeric = super::numeric_derivative(
                |x| {
                    let mut m = model.clone();
                    m.store.get_mut(id).value = x.to_vec();
                    image_loss(&m, &sample, &cfg)
                        .expect("toy forward succeeds")
                        .total
                },
                &base,
                i,
                grads[k][i],
            );
            report.record(k, i, grads[k][i], numeric);
        }
    }
    report
}
