use super::*;
use crate::tensor::grad_check;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi) as Real)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input: [3, 16, 16],
        widths: vec![8, 8],
        n_streams: 5,
        bottleneck: 8,
        n_classes: 4,
        caci_reduction: 4,
        caci_weight_sharing: true,
        spatial_kernel: 7,
    }
}

/// Config whose backbone output is `(3, 4, 4)`, for exercising RCA directly.
fn rca_config() -> ModelConfig {
    ModelConfig { input: [3, 8, 8], widths: vec![3], caci_reduction: 1, ..small_config() }
}

fn zero_attention(model: &mut Model, spatial_bias: Real) {
    for p in model.params.iter_mut() {
        if p.name.starts_with("caci.") {
            let fill = if p.name.ends_with("spatial.bias") { spatial_bias } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
}

#[test]
fn backbone_stride_arithmetic() {
    let cfg = ModelConfig { input: [3, 32, 32], widths: vec![4, 8, 8], caci_reduction: 2, ..small_config() };
    let model = Model::init(cfg, 1).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let x = g.constant(rand_tensor(&[1, 3, 32, 32], 2, -1.0, 1.0));
    let f = backbone_forward(x, &p, 3).unwrap();
    assert_eq!(f.shape(), vec![1, 8, 4, 4]);

    let odd = g.constant(Tensor::zeros(&[1, 3, 30, 30]));
    assert!(matches!(backbone_forward(odd, &p, 3), Err(Error::Shape(_))));
}

#[test]
fn shared_weights_give_equal_views() {
    let model = Model::init(small_config(), 3).unwrap();
    let img = rand_tensor(&[3, 16, 16], 4, -1.0, 1.0);
    let drone = model.extract_embedding(&img).unwrap();
    let satellite = model.extract_embedding(&img.clone()).unwrap();
    assert_eq!(drone, satellite);
}

#[test]
fn embedding_is_unit_norm() {
    let model = Model::init(small_config(), 5).unwrap();
    for seed in 0..10 {
        let e = model.extract_embedding(&rand_tensor(&[3, 16, 16], seed, -3.0, 3.0)).unwrap();
        assert_eq!(e.len(), 5 * 8);
        let norm: Real = e.iter().map(|v| v * v).sum::<Real>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn batch_embedding_matches_single() {
    let model = Model::init(small_config(), 6).unwrap();
    let imgs: Vec<Tensor> = (0..3).map(|s| rand_tensor(&[3, 16, 16], s, -1.0, 1.0)).collect();
    let batch = Tensor::stack(&imgs).unwrap();
    let rows = model.embed_batch(&batch).unwrap();
    for (img, row) in imgs.iter().zip(&rows) {
        assert_eq!(&model.extract_embedding(img).unwrap(), row);
    }
}

#[test]
fn zero_attention_weights_scale_by_quarter() {
    let mut model = Model::init(rca_config(), 7).unwrap();
    zero_attention(&mut model, 0.0);
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let x = g.constant(rand_tensor(&[2, 3, 4, 4], 8, -2.0, 2.0));
    let vars = CaciVars::for_branch(&p, DimOrder::CHW, true).unwrap();
    let (att, scale) = caci_forward(x, &vars, 7).unwrap();
    assert!(scale.value().data().iter().all(|&s| s == 0.25));
    for (a, v) in att.value().data().iter().zip(x.value().data()) {
        assert_eq!(*a, v / 4.0);
    }
}

#[test]
fn equal_mlp_rows_give_uniform_channel_gate() {
    let mut model = Model::init(rca_config(), 9).unwrap();
    for p in model.params.iter_mut() {
        if p.name.starts_with("caci.CHW.mlp2") {
            let cols = if p.value.rank() == 2 { p.value.shape()[1] } else { 1 };
            let first: Vec<Real> = p.value.data()[..cols].to_vec();
            for row in p.value.data_mut().chunks_mut(cols) {
                row.copy_from_slice(&first);
            }
        }
    }
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let x = g.constant(Tensor::full(&[1, 3, 4, 4], 0.7));
    let vars = CaciVars::for_branch(&p, DimOrder::CHW, true).unwrap();
    let (_, scale) = caci_forward(x, &vars, 7).unwrap();
    let s = scale.value();
    for h in 0..4 {
        for w in 0..4 {
            let v0 = s.get(&[0, 0, h, w]);
            for c in 1..3 {
                assert_eq!(s.get(&[0, c, h, w]), v0);
            }
        }
    }
}

#[test]
fn attention_scale_stays_in_open_unit_interval() {
    for seed in 0..1000u64 {
        let model = Model::init(rca_config(), seed).unwrap();
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let x = g.constant(rand_tensor(&[1, 3, 4, 4], seed + 10_000, -3.0, 3.0));
        let order = DimOrder::BRANCHES[(seed % 4) as usize];
        let xp = x.permute(&order.batched()).unwrap();
        let vars = CaciVars::for_branch(&p, order, true).unwrap();
        let (_, scale) = caci_forward(xp, &vars, 7).unwrap();
        assert!(scale.value().data().iter().all(|&s| s > 0.0 && s < 1.0), "seed {seed}");
    }
}

#[test]
fn reduction_larger_than_channels_is_config_error() {
    let model = Model::init(rca_config(), 1).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let vars = CaciVars::for_branch(&p, DimOrder::CHW, true).unwrap();
    // mlp1 expects 3 channels; feeding 2 is a shape error
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(caci_forward(x, &vars, 7).is_err());
    let cfg = ModelConfig { caci_reduction: 4, ..rca_config() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn constant_half_scale_doubles_the_map() {
    let mut model = Model::init(rca_config(), 11).unwrap();
    // sigmoid(40) rounds to exactly 1.0, the channel gate is sigmoid(0) = 0.5
    zero_attention(&mut model, 40.0);
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let f = g.constant(rand_tensor(&[1, 3, 4, 4], 12, -2.0, 2.0));
    let out = rca_forward(f, &p, true, 7).unwrap();
    for s in &out.scales {
        assert!(s.value().data().iter().all(|&v| v == 0.5));
    }
    for (a, b) in out.fused.value().data().iter().zip(f.value().data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn identity_branch_matches_plain_attention() {
    let model = Model::init(rca_config(), 13).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let f = g.constant(rand_tensor(&[2, 3, 4, 4], 14, -2.0, 2.0));
    let out = rca_forward(f, &p, true, 7).unwrap();
    let vars = CaciVars::for_branch(&p, DimOrder::CHW, true).unwrap();
    let (plain, _) = caci_forward(f, &vars, 7).unwrap();
    assert_eq!(out.branches[0].value(), plain.value());
}

#[test]
fn fused_sum_equals_sum_of_scaled_branches() {
    let model = Model::init(rca_config(), 15).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let f = g.constant(rand_tensor(&[1, 3, 4, 4], 16, -2.0, 2.0));
    let out = rca_forward(f, &p, true, 7).unwrap();
    let mut expect = 0.0;
    for (order, scale) in DimOrder::BRANCHES.iter().zip(&out.scales) {
        let pf = f.value().permute(&order.batched()).unwrap();
        expect += scale.value().data().iter().zip(pf.data()).map(|(s, v)| s * v).sum::<Real>();
    }
    assert!((out.fused.value().sum() - expect).abs() < 1e-12);
}

#[test]
fn rca_gradient_matches_finite_differences() {
    let model = Model::init(rca_config(), 17).unwrap();
    let f0 = rand_tensor(&[1, 3, 4, 4], 18, -2.0, 2.0);
    let err = grad_check(
        |g, x| {
            let p = model.params.bind(g, false);
            rca_forward(x, &p, true, 7)?.fused.sum()
        },
        &f0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn head_shapes() {
    let model = Model::init(small_config(), 19).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let x = g.constant(rand_tensor(&[2, 3, 16, 16], 20, -1.0, 1.0));
    let out = model.forward(x, &p).unwrap();
    assert_eq!(out.bottlenecks.len(), 5);
    assert_eq!(out.logits.len(), 5);
    for (b, l) in out.bottlenecks.iter().zip(&out.logits) {
        assert_eq!(b.shape(), vec![2, 8]);
        assert_eq!(l.shape(), vec![2, 4]);
    }
}

#[test]
fn zero_classifier_gives_uniform_softmax() {
    let mut model = Model::init(small_config(), 21).unwrap();
    for p in model.params.iter_mut() {
        if p.name.contains("classifier") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let x = g.constant(rand_tensor(&[1, 3, 16, 16], 22, -1.0, 1.0));
    let out = model.forward(x, &p).unwrap();
    for l in &out.logits {
        assert!(l.value().data().iter().all(|&v| v == 0.0));
        assert!(l.softmax().unwrap().value().data().iter().all(|&v| v == 0.25));
    }
}

#[test]
fn streams_have_distinct_logits() {
    for seed in 0..5 {
        let model = Model::init(small_config(), seed).unwrap();
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let x = g.constant(rand_tensor(&[1, 3, 16, 16], 100 + seed, -1.0, 1.0));
        let out = model.forward(x, &p).unwrap();
        let vals: Vec<Tensor> = out.logits.iter().map(|l| l.value()).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(vals[i], vals[j], "streams {i} and {j} (seed {seed})");
            }
        }
    }
}

#[test]
fn weight_sharing_saves_three_spatial_blocks() {
    let shared = Model::init(small_config(), 1).unwrap();
    let separate = Model::init(ModelConfig { caci_weight_sharing: false, ..small_config() }, 1).unwrap();
    assert_eq!(separate.params.count() - shared.params.count(), 3 * shared.spatial_block_size());
}

#[test]
fn forward_backward_is_finite() {
    let model = Model::init(small_config(), 23).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g, true);
    let x = g.constant(rand_tensor(&[4, 3, 16, 16], 24, -3.0, 3.0));
    let out = model.forward(x, &p).unwrap();
    let loss = out.logits[0].log_softmax().unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(loss.item().is_finite());
    for v in p.vars() {
        assert!(grads.wrt_or_zero(*v).is_finite());
    }
}

#[test]
fn group_assignment() {
    let model = Model::init(small_config(), 1).unwrap();
    for p in model.params.iter() {
        let expect = if p.name.starts_with("backbone.") { ParamGroup::Backbone } else { ParamGroup::Head };
        assert_eq!(p.group, expect, "{}", p.name);
    }
}
