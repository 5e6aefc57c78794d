mod criteria;

use criteria::{aggregation_oracle, jitter_biases, textured_raster, tiny_stage2_config, toy_input};
use geocontrast_core::ablation::{FeatureMask, ModalityMask};
use geocontrast_core::autograd::Tape;
use geocontrast_core::graph::{build_graph, GraphOptions};
use geocontrast_core::nn::LAYER_NORM_EPS;
use geocontrast_core::stage1::{StageOneConfig, StageOneEncoder};
use geocontrast_core::stage2::{edge_representation, StageTwoModel};
use geocontrast_core::{BBox, ImageSize, Matrix};
use proptest::prelude::*;

fn layout() -> impl Strategy<Value = (Vec<BBox>, ImageSize)> {
    (300.0..1600.0f64, 300.0..1600.0f64).prop_flat_map(|(w, h)| {
        let bx = (0.0..w - 20.0, 0.0..h - 10.0, 5.0..200.0f64, 3.0..60.0f64)
            .prop_map(move |(x, y, bw, bh)| BBox::new(x, y, (x + bw).min(w), (y + bh).min(h)));
        (prop::collection::vec(bx, 1..40), Just(ImageSize::new(w, h)))
    })
}

fn matmul(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols)
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
        .collect()
}

fn layer_norm(x: &[f64], g: &Matrix, b: &Matrix) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data[i] + b.data[i])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_is_deterministic((boxes, image) in layout(), k in 1usize..10) {
        let opts = GraphOptions { k, polar_bins: 6 };
        prop_assert_eq!(build_graph(&boxes, image, opts).unwrap(), build_graph(&boxes, image, opts).unwrap());
    }

    #[test]
    fn features_are_scale_invariant((boxes, image) in layout(), k in 1usize..10, e in -2i32..4) {
        // Powers of two keep the arithmetic exact.
        let s = 2f64.powi(e);
        let opts = GraphOptions { k, polar_bins: 6 };
        let a = build_graph(&boxes, image, opts).unwrap();
        let scaled: Vec<BBox> = boxes.iter().map(|b| b.scaled(s)).collect();
        let b = build_graph(&scaled, ImageSize::new(image.width * s, image.height * s), opts).unwrap();
        prop_assert_eq!(a.node_features(), b.node_features());
        prop_assert_eq!(a.edges.len(), b.edges.len());
        for (x, y) in a.edges.iter().zip(&b.edges) {
            prop_assert_eq!((x.src, x.dst), (y.src, y.dst));
            prop_assert_eq!(&x.geom, &y.geom);
        }
    }

    #[test]
    fn one_hot_blocks_and_out_degree((boxes, image) in layout(), k in 1usize..10, bins in 2usize..12) {
        let g = build_graph(&boxes, image, GraphOptions { k, polar_bins: bins }).unwrap();
        for e in &g.edges {
            let v = &e.geom.0;
            let polar = &v[2..2 + bins];
            let relpos = &v[2 + bins..];
            prop_assert_eq!(relpos.len(), 7);
            for block in [polar, relpos] {
                prop_assert!(block.iter().all(|&x| x == 0.0 || x == 1.0));
                prop_assert_eq!(block.iter().sum::<f64>(), 1.0);
            }
        }
        let want = k.min(boxes.len() - 1);
        prop_assert!(g.out_degrees().iter().all(|&d| d == want));
    }

    #[test]
    fn node_geometry_from_pixels((boxes, image) in layout()) {
        let g = build_graph(&boxes, image, GraphOptions::default()).unwrap();
        let s = image.width.max(image.height);
        for (n, b) in g.nodes.iter().zip(&boxes) {
            let v = n.geom.0;
            for (got, want) in v[..4].iter().zip([b.xmin / s, b.ymin / s, b.xmax / s, b.ymax / s]) {
                prop_assert!((got - want).abs() < 1e-12);
            }
            let area = (b.xmax - b.xmin) * (b.ymax - b.ymin) / (image.width * image.height);
            prop_assert!((v[4] - area).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_forward_matches_hand_computation((boxes, image) in layout(), seed in 0u64..1000, gate in 0.05..1.0f64) {
        let g = build_graph(&boxes, image, GraphOptions { k: 6, polar_bins: 6 }).unwrap();
        let config = StageOneConfig { dist_threshold: gate, seed, ..Default::default() };
        let mut enc = StageOneEncoder::new(config, 6).unwrap();
        jitter_biases(&mut enc.params, seed);
        let got = enc.encode(&g).unwrap();
        let p = &enc.params;
        let c = enc.config.scale_c;
        let x = g.node_features();
        for i in 0..g.num_nodes() {
            let m = aggregation_oracle(&g, i, gate, c);
            let mut z = [x.row(i), &m[..]].concat();
            let mut h = matmul(&z, p.value(enc.layer1.weight));
            for (v, b) in h.iter_mut().zip(&p.value(enc.layer1.bias.unwrap()).data) {
                *v += b;
            }
            let h: Vec<f64> = layer_norm(&h, p.value(enc.norm1.gamma), p.value(enc.norm1.beta)).iter().map(|v| v.max(0.0)).collect();
            z = [&h[..], &m[..]].concat();
            let mut o = matmul(&z, p.value(enc.layer2.weight));
            for (v, b) in o.iter_mut().zip(&p.value(enc.layer2.bias.unwrap()).data) {
                *v += b;
            }
            let o: Vec<f64> = layer_norm(&o, p.value(enc.norm2.gamma), p.value(enc.norm2.beta)).iter().map(|v| v.max(0.0)).collect();
            for (a, b) in got.row(i).iter().zip(&o) {
                prop_assert!((a - b).abs() < 1e-9, "node {i}: {a} vs {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stacked_edge_head_equals_split_layers(seed in 0u64..1000) {
        let mut cfg = tiny_stage2_config();
        cfg.seed = seed;
        let mut model = StageTwoModel::new(cfg).unwrap();
        jitter_biases(&mut model.params, seed);
        let input = toy_input(&model, seed);
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &input, None).unwrap();
        let h = tape.value(out.node_states).clone();
        let cls = tape.value(out.node_probs).clone();
        let head = &model.edge_head;
        let stacked = head.stacked_first_weight(&model.params);
        let bias = model.params.value(head.src_state.bias.unwrap());
        let polar = input.graph.polar_features();
        for (e, edge) in input.graph.edges.iter().enumerate() {
            let rep = edge_representation(&h, &cls, edge.src, edge.dst, polar.row(e)).unwrap();
            prop_assert_eq!(rep.len(), head.input_width());
            let joint = matmul(&rep, &stacked);
            // Split path: one block per representation segment.
            let mut split = bias.data.clone();
            let mut offset = 0;
            for lin in [&head.src_state, &head.dst_state, &head.src_class, &head.dst_class, &head.polar] {
                let part = matmul(&rep[offset..offset + lin.input], model.params.value(lin.weight));
                for (s, v) in split.iter_mut().zip(part) {
                    *s += v;
                }
                offset += lin.input;
            }
            for (a, b) in joint.iter().zip(&bias.data).map(|(j, b)| j + b).zip(&split) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn geometry_only_model_ignores_pixels(seed in 0u64..1000) {
        let mut cfg = tiny_stage2_config();
        cfg.modality = ModalityMask { geometric: true, visual: false };
        let model = StageTwoModel::new(cfg).unwrap();
        let mut input = toy_input(&model, seed);
        let a = model.predict(&input).unwrap();
        input.visual = model.visual.prepare(&textured_raster(200, 120, seed + 1), &input.graph.boxes());
        let b = model.predict(&input).unwrap();
        prop_assert_eq!(a.node_probs, b.node_probs);
        prop_assert_eq!(a.edge_probs, b.edge_probs);
    }

    #[test]
    fn same_seed_same_model(seed in 0u64..1000) {
        let mut cfg = tiny_stage2_config();
        cfg.seed = seed;
        let a = StageTwoModel::new(cfg.clone()).unwrap();
        let b = StageTwoModel::new(cfg).unwrap();
        let input = toy_input(&a, seed);
        prop_assert_eq!(a.predict(&input).unwrap().edge_probs, b.predict(&input).unwrap().edge_probs);
    }
}

#[test]
fn nodes_only_mask_silences_messages() {
    let boxes = criteria::toy_boxes();
    let g = build_graph(&boxes, ImageSize::new(200.0, 120.0), GraphOptions::default()).unwrap();
    let none = geocontrast_core::stage1::aggregate_all(&g, 1.0, 1.0, &FeatureMask::NODES_ONLY);
    assert!(none.data.iter().all(|&v| v == 0.0));
}
