//! Analytic gradients against central finite differences.

mod criteria;

use criteria::{gradient_error, jitter_biases, tiny_stage2_config, toy_boxes, toy_input};
use geocontrast_core::autograd::{ConvShape, Grads, ParamStore, Reduction, Tape};
use geocontrast_core::graph::{build_graph, GraphOptions};
use geocontrast_core::stage1::{mine_triplets, StageOneConfig, StageOneEncoder};
use geocontrast_core::stage2::StageTwoModel;
use geocontrast_core::{ImageSize, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_all(store: &mut ParamStore, grads: &Grads, loss: impl FnMut(&ParamStore) -> f64, tol: f64) {
    let (rel, name) = gradient_error(store, grads, loss);
    assert!(rel < tol, "{name}: relative error {rel:e}");
}

#[test]
fn full_losses_on_toys() {
    criteria::criterion_4().unwrap();
}

#[test]
fn stage2_gradient_with_dropout_masks() {
    let mut cfg = tiny_stage2_config();
    cfg.reduction = Reduction::Mean;
    let mut model = StageTwoModel::new(cfg).unwrap();
    jitter_biases(&mut model.params, 12);
    let input = toy_input(&model, 2);
    let (_, grads) = model.loss_and_grads(&input, Some(77)).unwrap();
    let mut store = model.params.clone();
    check_all(
        &mut store,
        &grads,
        |s| {
            let mut m = model.clone();
            m.params = s.clone();
            m.loss_value(&input, Some(77)).unwrap()
        },
        1e-4,
    );
}

#[test]
fn stage1_triplet_loss_gradient() {
    let boxes = toy_boxes();
    let g = build_graph(&boxes, ImageSize::new(200.0, 120.0), GraphOptions::default()).unwrap();
    let config = StageOneConfig {
        dist_threshold: 0.6,
        margin: 5.0,
        ..Default::default()
    };
    let enc = StageOneEncoder::new(config, 6).unwrap();
    let triples = mine_triplets(&[0, 0, 1, 1], 2, 3);
    assert!(!triples.is_empty());
    let (_, grads) = enc.loss_and_grads(&g, &triples).unwrap();
    let mut store = enc.params.clone();
    check_all(
        &mut store,
        &grads,
        |s| {
            let mut e = enc.clone();
            e.params = s.clone();
            e.loss(&g, &triples).unwrap()
        },
        1e-4,
    );
}

#[test]
fn strided_depthwise_and_pooling_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = ConvShape {
        batch: 2,
        height: 4,
        width: 4,
        channels: 3,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let mut store = ParamStore::new();
    let x = store.add(
        "x",
        Matrix::from_vec(32, 3, (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    );
    let w = store.add(
        "w",
        Matrix::from_vec(9, 3, (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    );
    let proj = Matrix::from_vec(3, 1, vec![0.3, -1.2, 0.8]);
    let loss = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let xv = t.param(x);
        let wv = t.param(w);
        let y = t.depthwise_conv(xv, wv, shape);
        let y = t.group_mean(y, 4);
        let p = t.input(proj.clone());
        let z = t.matmul(y, p);
        let sq = t.value(z).clone();
        let z2 = t.mul_const(z, sq);
        let ones = t.input(Matrix::filled(1, 2, 1.0));
        let out = t.matmul(ones, z2);
        (t.scalar(out), t.backward(out))
    };
    let (_, grads) = loss(&store);
    // mul_const treats its factor as constant, so the checked loss is the
    // same expression with that factor frozen at the base point.
    let base = {
        let mut t = Tape::new(&store);
        let xv = t.param(x);
        let wv = t.param(w);
        let y = t.depthwise_conv(xv, wv, shape);
        let y = t.group_mean(y, 4);
        let p = t.input(proj.clone());
        let z = t.matmul(y, p);
        t.value(z).clone()
    };
    check_all(
        &mut store,
        &grads,
        |s| {
            let mut t = Tape::new(s);
            let xv = t.param(x);
            let wv = t.param(w);
            let y = t.depthwise_conv(xv, wv, shape);
            let y = t.group_mean(y, 4);
            let p = t.input(proj.clone());
            let z = t.matmul(y, p);
            let z2 = t.mul_const(z, base.clone());
            let ones = t.input(Matrix::filled(1, 2, 1.0));
            let out = t.matmul(ones, z2);
            t.scalar(out)
        },
        1e-6,
    );
}

#[test]
fn weighted_mean_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let z = store.add(
        "z",
        Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()),
    );
    let labels = [0, 2, 1, 1, 2];
    let weights = [0.5, 2.0, 1.5];
    let run = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let v = t.param(z);
        let l = t.cross_entropy(v, &labels, Some(&weights), Reduction::Mean);
        (t.scalar(l), t.backward(l))
    };
    let (_, grads) = run(&store);
    check_all(&mut store, &grads, |s| run(s).0, 1e-7);
}
