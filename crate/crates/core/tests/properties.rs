use lung_detr::autodiff::{Graph, Tensor};
use lung_detr::dataset::{read_manifest, split, write_manifest, Role, SlabEntry};
use lung_detr::image::Image;
use lung_detr::loss::{focal_loss, hungarian_match, iou_giou, FocalParams};
use lung_detr::metaimage::{
    encode_payload, load_volume, read_mhd, write_mhd, ByteOrder, CtVolume, ElementType,
    NoduleAnnotation, VolumeMeta,
};
use lung_detr::metrics::{average_precision, match_detections, ScoredBox};
use lung_detr::model::layers::{positional_encoding_2d, token_centers, DeformAttn};
use lung_detr::model::params::ParamStore;
use lung_detr::model::{DetrModel, ModelConfig};
use lung_detr::preprocess::{connected_components, otsu_bin, BinaryMask, Connectivity};
use lung_detr::projection::{mip_range, project_annotation, slab_partition, GroundTruthBox};
use lung_detr::rng;
use lung_detr::trainer::{train, LossConfig, OptimConfig, Sample, TrainOutputs};
use proptest::prelude::*;

mod oracles;

use oracles::{brute_force_cost, exhaustive_otsu, flood_fill_labels};

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 1usize..=5)
        .prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, c), r))
}

fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    hungarian_match(cost)
        .unwrap()
        .pairs
        .iter()
        .map(|&(i, j)| cost[i][j])
        .sum()
}

fn valid_box() -> impl Strategy<Value = [f64; 4]> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.5, 0.01f64..0.5).prop_map(|(a, b, c, d)| [a, b, c, d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal(cost in cost_matrix()) {
        let got = assignment_cost(&cost);
        let best = brute_force_cost(&cost);
        prop_assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        let pairs = hungarian_match(&cost).unwrap().pairs;
        prop_assert_eq!(pairs.len(), cost.len().min(cost[0].len()));
    }

    #[test]
    fn hungarian_ignores_constant_shift(
        cost in (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-20i32..20, c), r)),
        shift in -50i32..50,
    ) {
        let a: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let b: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|&v| (v + shift) as f64).collect()).collect();
        let k = a.len().min(a[0].len()) as f64;
        prop_assert_eq!(assignment_cost(&b), assignment_cost(&a) + k * shift as f64);
    }

    #[test]
    fn giou_bounds_and_symmetry(a in valid_box(), b in valid_box()) {
        let (iou, giou) = iou_giou(a, b).unwrap();
        let (iou2, giou2) = iou_giou(b, a).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!((-1.0..=1.0).contains(&giou));
        prop_assert!(giou <= iou + 1e-12);
        prop_assert!((iou - iou2).abs() < 1e-12 && (giou - giou2).abs() < 1e-12);
        let (same, gsame) = iou_giou(a, a).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-12 && (gsame - 1.0).abs() < 1e-12);
    }

    #[test]
    fn focal_reduces_to_cross_entropy(p in 1e-6f64..(1.0 - 1e-6)) {
        let fl = focal_loss(p, FocalParams { alpha: 1.0, gamma: 0.0 });
        prop_assert!((fl + p.ln()).abs() <= 1e-12);
    }

    #[test]
    fn focal_strictly_decreasing(p in 1e-6f64..0.999, dp in 1e-4f64..1e-3) {
        let params = FocalParams::default();
        prop_assert!(focal_loss(p + dp, params) < focal_loss(p, params));
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform(
        flags in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..30),
        extra in 0usize..5,
    ) {
        let positives = flags.iter().filter(|f| f.1).count() + extra;
        prop_assume!(positives > 0);
        let squashed: Vec<(f64, bool)> = flags.iter().map(|&(s, t)| ((3.0 * s).exp() - 0.5, t)).collect();
        prop_assert_eq!(
            average_precision(&flags, positives).unwrap(),
            average_precision(&squashed, positives).unwrap()
        );
    }

    #[test]
    fn lowest_score_false_positive_leaves_ap(
        flags in prop::collection::vec((0.1f64..1.0, any::<bool>()), 1..30),
    ) {
        let positives = flags.iter().filter(|f| f.1).count().max(1);
        let mut with_fp = flags.clone();
        with_fp.push((0.01, false));
        prop_assert_eq!(
            average_precision(&flags, positives).unwrap(),
            average_precision(&with_fp, positives).unwrap()
        );
    }

    #[test]
    fn greedy_matching_is_one_to_one(
        dets in prop::collection::vec((0.0f64..1.0, valid_box()), 0..8),
        gts in prop::collection::vec(valid_box(), 0..5),
    ) {
        let dets: Vec<ScoredBox> = dets.into_iter().map(|(score, bbox)| ScoredBox { score, bbox }).collect();
        let m = match_detections(&dets, &gts, 0.5);
        let mut used: Vec<usize> = m.matched.iter().flatten().copied().collect();
        let tp = used.len();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), tp);
        prop_assert_eq!(m.false_negatives, gts.len() - tp);
        for (&d, g) in m.order.iter().zip(&m.matched) {
            if let Some(g) = g {
                prop_assert!(iou_giou(dets[d].bbox, gts[*g]).unwrap().0 >= 0.5);
            }
        }
        for w in m.order.windows(2) {
            prop_assert!(dets[w[0]].score >= dets[w[1]].score);
        }
    }

    #[test]
    fn otsu_matches_exhaustive_search(hist in prop::collection::vec(0u64..200, 2..40)) {
        prop_assume!(hist.iter().filter(|&&c| c > 0).count() >= 2);
        prop_assert_eq!(otsu_bin(&hist), Some(exhaustive_otsu(&hist)));
    }

    #[test]
    fn components_match_flood_fill(
        (h, w, bits) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w))),
        eight in any::<bool>(),
    ) {
        let mask = BinaryMask::new(h, w, bits);
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let got = connected_components(&mask, conn);
        prop_assert_eq!(got.labels, flood_fill_labels(&mask, eight));
    }

    #[test]
    fn mip_is_the_slice_maximum(
        (d, h, w, vox) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| (Just(d), Just(h), Just(w), prop::collection::vec(-1000f32..1000.0, d * h * w))),
        a in 0usize..6,
        len in 1usize..8,
    ) {
        prop_assume!(a < d);
        let meta = VolumeMeta::new([d, h, w], [1.0; 3], [0.0; 3], ElementType::F32).unwrap();
        let vol = CtVolume::new(meta, vox).unwrap();
        let img = mip_range(&vol, a..a + len).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expected = (a..(a + len).min(d)).map(|z| vol.get(z, y, x)).fold(f32::NEG_INFINITY, f32::max);
                prop_assert_eq!(img.get(y, x), expected);
            }
        }
    }

    #[test]
    fn mip_is_idempotent_and_commutes_with_increasing_maps(
        (d, h, w, vox) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| (Just(d), Just(h), Just(w), prop::collection::vec(-1000f32..1000.0, d * h * w))),
        scale in 0.1f32..4.0,
        offset in -100f32..100.0,
    ) {
        let meta = VolumeMeta::new([d, h, w], [1.0; 3], [0.0; 3], ElementType::F32).unwrap();
        let vol = CtVolume::new(meta.clone(), vox).unwrap();
        let img = mip_range(&vol, 0..d).unwrap();
        let flat = CtVolume::new(VolumeMeta::new([1, h, w], [1.0; 3], [0.0; 3], ElementType::F32).unwrap(), img.pixels.clone()).unwrap();
        prop_assert_eq!(&mip_range(&flat, 0..1).unwrap(), &img);
        let f = |v: f32| v * scale + offset;
        let mapped = CtVolume::new(meta, vol.voxels.iter().map(|&v| f(v)).collect()).unwrap();
        let lhs = mip_range(&mapped, 0..d).unwrap();
        for (a, b) in lhs.pixels.iter().zip(&img.pixels) {
            prop_assert_eq!(*a, f(*b));
        }
    }

    #[test]
    fn tiled_slabs_label_each_nodule_once(
        depth in 4usize..80,
        spacing_z in prop::sample::select(vec![0.625, 1.0, 1.25, 2.5]),
        thickness in prop::sample::select(vec![2.5, 5.0, 7.5]),
        origin_z in -400.0f64..100.0,
        t in 0.0f64..1.0,
    ) {
        let meta = VolumeMeta::new([depth, 64, 64], [spacing_z, 1.0, 1.0], [origin_z, 0.0, 0.0], ElementType::F32).unwrap();
        let slabs = slab_partition(&meta, 0..depth, thickness, thickness).unwrap();
        prop_assume!(!slabs.is_empty());
        let (lo, hi) = (slabs[0].z_range_mm.0, slabs.last().unwrap().z_range_mm.1.min(origin_z + (depth as f64 - 0.5) * spacing_z));
        let z = lo + t * (hi - lo) * 0.999;
        let nodule = NoduleAnnotation { series_id: "s".into(), center_world: [32.0, 32.0, z], diameter_mm: 6.0 };
        let hits = slabs.iter().filter(|s| project_annotation(&nodule, s.z_range_mm, &meta, (64, 64)).is_some()).count();
        prop_assert_eq!(hits, 1);
        for s in &slabs {
            prop_assert!(s.z_range_mm.1 - s.z_range_mm.0 <= thickness + spacing_z + 1e-9);
        }
    }

    #[test]
    fn payload_round_trip_is_bit_exact(
        kind in 0usize..3,
        big in any::<bool>(),
        dims in (1usize..4, 1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        let element_type = [ElementType::U8, ElementType::I16, ElementType::F32][kind];
        let mut meta = VolumeMeta::new([dims.0, dims.1, dims.2], [1.0; 3], [0.0; 3], element_type).unwrap();
        meta.byte_order = if big { ByteOrder::Big } else { ByteOrder::Little };
        let mut r = rng::seeded(seed);
        let raw: Vec<u8> = (0..meta.voxel_count() * element_type.byte_width()).map(|_| rand::Rng::random(&mut r)).collect();
        let vol = load_volume(&meta, &raw).unwrap();
        prop_assert_eq!(encode_payload(&vol), raw);
    }

    #[test]
    fn roles_never_share_a_scan(seed in any::<u64>(), scans in 3usize..25) {
        let slabs: Vec<SlabEntry> = (0..scans)
            .flat_map(|s| (0..1 + s % 4).map(move |k| slab(&format!("s{s}"), k, s % 3 == 0)))
            .collect();
        let m = split(&slabs, seed, [0.7, 0.2, 0.1]).unwrap();
        for role in Role::ALL {
            prop_assert!(m.role_entries(role).count() > 0);
        }
        for e in &m.entries {
            for f in &m.entries {
                if e.slab.scan_id == f.slab.scan_id {
                    prop_assert_eq!(e.role, f.role);
                }
            }
        }
        let again = split(&slabs, seed, [0.7, 0.2, 0.1]).unwrap();
        prop_assert_eq!(&again, &m);
        let mut bytes = Vec::new();
        write_manifest(&m, &mut bytes).unwrap();
        let back = read_manifest(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.entries, m.entries);
    }
}

fn slab(scan: &str, k: usize, positive: bool) -> SlabEntry {
    SlabEntry {
        scan_id: scan.to_string(),
        slab_index: k,
        image_path: format!("slabs/{scan}_{k}.mhd"),
        boxes: if positive && k == 0 {
            vec![GroundTruthBox {
                cx: 0.5,
                cy: 0.25,
                w: 0.125,
                h: 0.125,
                diameter_mm: 6.0,
            }]
        } else {
            vec![]
        },
    }
}

#[test]
fn volume_files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (k, element_type) in [ElementType::U8, ElementType::I16, ElementType::F32]
        .into_iter()
        .enumerate()
    {
        let meta = VolumeMeta::new(
            [3, 4, 5],
            [2.5, 0.703125, 0.703125],
            [-312.5, -180.1, 17.3],
            element_type,
        )
        .unwrap();
        let voxels: Vec<f32> = (0..60)
            .map(|i| match element_type {
                ElementType::U8 => (i * 4) as f32,
                ElementType::I16 => (i as f32 - 30.0) * 97.0,
                ElementType::F32 => (i as f32).sin() * 1e3,
            })
            .collect();
        let vol = CtVolume::new(meta, voxels).unwrap();
        let (mhd, _) = write_mhd(&vol, &dir.path().join(format!("v{k}"))).unwrap();
        let back = read_mhd(&mhd).unwrap();
        assert_eq!(back.meta, vol.meta);
        let bits = |v: &CtVolume| v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vol));
    }
}

#[test]
fn positional_encoding_is_pairwise_distinct() {
    let (h, w, c) = (8, 8, 16);
    let pe = positional_encoding_2d(h, w, c).unwrap();
    let rows: Vec<&[f64]> = pe.chunks(c).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(d > 1e-6, "positions {i} and {j} collide");
        }
    }
    assert!(positional_encoding_2d(8, 8, 6).is_none());
}

#[test]
fn deformable_attention_reduces_to_sampling() {
    let d = 4;
    let levels = [(3, 5)];
    let mut store = ParamStore::new();
    let mut r = rng::seeded(9);
    let attn = DeformAttn::new(&mut store, "a", d, 1, 1, 1, &mut r);
    for lin in [&attn.value, &attn.output] {
        let p = store.get_mut(lin.w);
        p.value = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        store.get_mut(lin.b).value.fill(0.0);
    }
    store.get_mut(attn.offsets.b).value.fill(0.0);
    let input: Vec<f64> = (0..15 * d).map(|i| (i as f64 * 0.37).sin()).collect();
    let centers = token_centers(&levels);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![15, d], input.clone()));
    let q = g.constant(Tensor::new(vec![15, d], vec![0.3; 15 * d]));
    let refs = g.constant(centers);
    let out = attn.forward(&mut g, &store, q, refs, x, &levels);
    for (a, b) in g.value(out).data.iter().zip(&input) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn accumulation_run(batch: usize, accum: usize) -> ParamStore {
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        points: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        num_queries: 4,
        ffn_dim: 8,
        backbone_channels: [4, 4, 8, 8],
        norm_groups: 2,
        ..ModelConfig::default()
    };
    let model = DetrModel::new(config).unwrap();
    let mut r = rng::seeded(4);
    let samples: Vec<Sample> = (0..12)
        .map(|i| Sample {
            id: format!("s{i}"),
            image: Image::new(
                32,
                32,
                (0..1024)
                    .map(|_| rand::Rng::random::<f32>(&mut r))
                    .collect(),
            ),
            boxes: if i % 2 == 0 {
                vec![GroundTruthBox {
                    cx: 0.3 + 0.03 * i as f64,
                    cy: 0.5,
                    w: 0.25,
                    h: 0.25,
                    diameter_mm: 8.0,
                }]
            } else {
                vec![]
            },
        })
        .collect();
    let cfg = OptimConfig {
        batch_size: batch,
        accumulation_steps: accum,
        epochs: 2,
        clip_norm: 1e6,
        lr_main: 1e-3,
        lr_backbone: 1e-3,
        ..OptimConfig::default()
    };
    train(
        model,
        &samples,
        &[],
        &LossConfig::default(),
        &cfg,
        &TrainOutputs::default(),
    )
    .unwrap()
    .final_model
    .store
}

#[test]
fn accumulation_is_a_batch_size_change() {
    let a = accumulation_run(6, 1);
    let b = accumulation_run(1, 6);
    let c = accumulation_run(2, 3);
    for ((_, pa), ((_, pb), (_, pc))) in a.iter().zip(b.iter().zip(c.iter())) {
        for ((x, y), z) in pa.value.iter().zip(&pb.value).zip(&pc.value) {
            assert!(
                (x - y).abs() < 1e-9 && (x - z).abs() < 1e-9,
                "{}: {x} {y} {z}",
                pa.name
            );
        }
    }
}
