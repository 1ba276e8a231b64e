mod common;

use dspert_core::encoder::{self, BlockParams, BlockSettings, EmbeddingParams, LAYER_NORM_EPS};
use dspert_core::gradcheck::check_param_gradients;
use dspert_core::{Error, Graph, ParamGroup, ParamStore, SplitMix64, Tensor};

fn eval(heads: usize) -> BlockSettings {
    BlockSettings {
        heads,
        dropout: 0.1,
    }
}

fn block(store: &mut ParamStore, d: usize, seed: u64) -> BlockParams {
    let mut rng = SplitMix64::new(seed);
    BlockParams::init(store, &format!("b{seed}"), d, 4 * d, 0.3, &mut rng)
}

#[test]
fn uniform_attention_averages_values() {
    let mut store = ParamStore::new();
    let bp = block(&mut store, 1, 0);
    for id in [bp.wq, bp.wk, bp.wv, bp.wo] {
        store.get_mut(id).value = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    }
    let mut g = Graph::with_params(&store);
    let q = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let kv = g.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
    let vals = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
    let out = encoder::multi_head_attention(&mut g, &bp, 1, q, kv, vals).unwrap();
    assert_eq!(g.value(out).data(), &[2.0]);
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let mut rng = SplitMix64::new(11);
    let mut g = Graph::new();
    let q = g.constant(Tensor::randn(&[3, 4], 2.0, &mut rng));
    let k = g.constant(Tensor::randn(&[5, 4], 2.0, &mut rng));
    let v = g.constant(Tensor::randn(&[5, 4], 2.0, &mut rng));
    let out = g
        .window_attention(q, k, v, 2, encoder::full_windows(3, 5))
        .unwrap();
    let w = g.attention_weights(out).unwrap();
    assert_eq!(w.len(), 3 * 2);
    for row in w {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn multi_head_attention_matches_naive_loops() {
    let mut rng = SplitMix64::new(5);
    for case in 0..50 {
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(3));
        let (m, n) = (1 + rng.below(4), 1 + rng.below(5));
        let mut store = ParamStore::new();
        let bp = block(&mut store, d, case);
        common::perturb_all(&mut store, case + 100, 0.2);
        let qt = Tensor::randn(&[m, d], 1.0, &mut rng);
        let kt = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut g = Graph::with_params(&store);
        let q = g.constant(qt.clone());
        let k = g.constant(kt.clone());
        let out = encoder::multi_head_attention(&mut g, &bp, heads, q, k, k).unwrap();
        let expected = common::mha(
            &store,
            &bp,
            heads,
            &common::rows(&qt),
            &common::rows(&kt),
            &common::full_windows(m, n),
        );
        let err = common::max_abs_diff(&common::rows(g.value(out)), &expected);
        assert!(
            err < 1e-10,
            "case {case}: m={m} n={n} d={d} h={heads}: {err}"
        );
    }
}

#[test]
fn block_output_shape_and_reference() {
    let mut rng = SplitMix64::new(8);
    let mut store = ParamStore::new();
    let bp = block(&mut store, 4, 1);
    common::perturb_all(&mut store, 2, 0.2);
    let qt = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let kt = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut g = Graph::with_params(&store);
    let (q, k) = (g.constant(qt.clone()), g.constant(kt.clone()));
    let out = encoder::transformer_block(&mut g, &bp, eval(2), q, k, k).unwrap();
    assert_eq!(g.shape(out), &[2, 4]);
    let expected = common::block(
        &store,
        &bp,
        2,
        &common::rows(&qt),
        &common::rows(&kt),
        &common::full_windows(2, 3),
    );
    assert!(common::max_abs_diff(&common::rows(g.value(out)), &expected) < 1e-10);
}

#[test]
fn zeroed_value_and_ffn_outputs_reduce_to_double_layer_norm() {
    let mut rng = SplitMix64::new(9);
    let mut store = ParamStore::new();
    let bp = block(&mut store, 6, 3);
    for id in [bp.wv, bp.bv, bp.ffn_w2, bp.ffn_b2] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(&shape);
    }
    let qt = Tensor::randn(&[3, 6], 1.5, &mut rng);
    let kt = Tensor::randn(&[4, 6], 1.5, &mut rng);
    let mut g = Graph::with_params(&store);
    let (q, k) = (g.constant(qt.clone()), g.constant(kt));
    let out = encoder::transformer_block(&mut g, &bp, eval(2), q, k, k).unwrap();
    // Hand evaluation: the attention branch yields b_o = 0 and the FFN
    // branch yields 0, so each residual is just the layer-norm input.
    let ones = vec![1.0; 6];
    let zeros = vec![0.0; 6];
    let once = common::layer_norm(&common::rows(&qt), &ones, &zeros, LAYER_NORM_EPS);
    let twice = common::layer_norm(&once, &ones, &zeros, LAYER_NORM_EPS);
    assert!(common::max_abs_diff(&common::rows(g.value(out)), &twice) < 1e-12);
}

fn embedding(store: &mut ParamStore, v: usize, t_max: usize, d: usize) -> EmbeddingParams {
    let mut rng = SplitMix64::new(4);
    EmbeddingParams::init(store, v, t_max, d, 0.5, &mut rng)
}

#[test]
fn embed_examples() {
    let mut store = ParamStore::new();
    let e = embedding(&mut store, 10, 8, 8);
    for id in [e.token_table, e.position_table] {
        let s = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(&s);
    }
    let mut g = Graph::with_params(&store);
    let h = encoder::embed(&mut g, &e, &[3], 0.1).unwrap();
    assert_eq!(g.value(h).data(), &[0.0; 8]);

    let mut store = ParamStore::new();
    let e = embedding(&mut store, 10, 8, 8);
    let mut g = Graph::with_params(&store);
    let h = encoder::embed(&mut g, &e, &[3, 3], 0.1).unwrap();
    assert_ne!(g.value(h).row(0), g.value(h).row(1));
    let h = encoder::embed(&mut g, &e, &[1, 2, 3, 4, 5, 6, 7], 0.1).unwrap();
    assert_eq!(g.shape(h), &[7, 8]);

    assert!(matches!(
        encoder::embed(&mut g, &e, &[10], 0.1),
        Err(Error::Bounds { .. })
    ));
    assert!(matches!(
        encoder::embed(&mut g, &e, &[0; 9], 0.1),
        Err(Error::Bounds { .. })
    ));
}

fn stack(store: &mut ParamStore, layers: usize, d: usize) -> Vec<BlockParams> {
    (0..layers)
        .map(|l| block(store, d, 40 + l as u64))
        .collect()
}

#[test]
fn encode_trace_lengths_and_shapes() {
    let mut store = ParamStore::new();
    let e = embedding(&mut store, 10, 8, 8);
    let blocks = stack(&mut store, 2, 8);
    let mut g = Graph::with_params(&store);
    let h0 = encoder::embed(&mut g, &e, &[1, 2, 3, 4, 5], 0.0).unwrap();
    let trace = encoder::encode(&mut g, h0, &[], eval(2)).unwrap();
    assert_eq!(trace.layers.len(), 1);
    assert_eq!(trace.layers[0], h0);
    let trace = encoder::encode(&mut g, h0, &blocks, eval(2)).unwrap();
    assert_eq!(trace.layers.len(), 3);
    for &l in &trace.layers {
        assert_eq!(g.shape(l), &[5, 8]);
    }
}

#[test]
fn retained_trace_top_equals_last_only_computation() {
    let mut store = ParamStore::new();
    let e = embedding(&mut store, 10, 8, 8);
    let blocks = stack(&mut store, 3, 8);
    common::perturb_all(&mut store, 6, 0.1);
    let ids = [4, 2, 9, 1, 0, 7];
    let mut g = Graph::with_params(&store);
    let h0 = encoder::embed(&mut g, &e, &ids, 0.0).unwrap();
    let trace = encoder::encode(&mut g, h0, &blocks, eval(2)).unwrap();

    // Last-only reference: plain loops, keeping nothing but the current layer.
    let mut h = common::rows(g.value(h0));
    for bp in &blocks {
        h = common::block(
            &store,
            bp,
            2,
            &h,
            &h,
            &common::full_windows(ids.len(), ids.len()),
        );
    }
    assert!(common::max_abs_diff(&common::rows(g.value(trace.top())), &h) < 1e-10);

    // And the engine's own last-only chain is bitwise identical.
    let mut g2 = Graph::with_params(&store);
    let mut x = encoder::embed(&mut g2, &e, &ids, 0.0).unwrap();
    for bp in &blocks {
        x = encoder::transformer_block(&mut g2, bp, eval(2), x, x, x).unwrap();
    }
    assert_eq!(g2.value(x), g.value(trace.top()));
}

#[test]
fn evaluation_mode_is_deterministic() {
    let mut store = ParamStore::new();
    let e = embedding(&mut store, 10, 8, 8);
    let blocks = stack(&mut store, 2, 8);
    let run = || {
        let mut g = Graph::with_params(&store);
        let h0 = encoder::embed(&mut g, &e, &[5, 6, 7], 0.3).unwrap();
        let t = encoder::encode(
            &mut g,
            h0,
            &blocks,
            BlockSettings {
                heads: 2,
                dropout: 0.3,
            },
        )
        .unwrap();
        t.layers
            .iter()
            .map(|&l| g.value(l).clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn token_table_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let e = embedding(&mut store, 6, 5, 4);
    let blocks = stack(&mut store, 2, 4);
    let mut rng = SplitMix64::new(77);
    let r = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let checks = check_param_gradients(&store, &[e.token_table], 1e-5, Some(3), |g| {
        let h0 = encoder::embed(g, &e, &[0, 3, 5, 3], 0.1)?;
        let t = encoder::encode(g, h0, &blocks, eval(2))?;
        let rv = g.constant(r.clone());
        let y = g.mul(t.top(), rv)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(checks[0].max_rel_error < 1e-3, "{checks:?}");
    assert_eq!(store.get(e.token_table).group, ParamGroup::Pretrained);
}
