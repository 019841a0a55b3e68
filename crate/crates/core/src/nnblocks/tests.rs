use std::rc::Rc;

use super::*;
use crate::error::Error;
use crate::numcore::{grad_check, Graph, Mask, Rng, Tensor};

fn block(store: &mut ParamStore<f64>, heads: usize, causal: bool, rng: &mut Rng) -> AttentionBlock {
    AttentionBlock::new(store, "attn", 4, heads, causal, rng).unwrap()
}

fn run_attend(store: &ParamStore<f64>, b: &AttentionBlock, q: &Tensor<f64>, kv: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let out = b.attend(&mut g, &p, qv, kvv, None).unwrap();
    g.value(out).clone()
}

#[test]
fn single_key_attention_ignores_queries() {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::new();
    let b = block(&mut store, 2, false, &mut rng);
    let kv = rng.normal_tensor::<f64>(vec![1, 4], 1.0);
    let q1 = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    let q2 = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    let a = run_attend(&store, &b, &q1, &kv);
    let c = run_attend(&store, &b, &q2, &kv);
    assert_eq!(a, c);
    // each row is W_o·(V·kv)
    let vkv = crate::numcore::matmul(&kv, store.get(b.w_v.weight)).unwrap();
    let expect = crate::numcore::matmul(&vkv, store.get(b.w_o.weight)).unwrap();
    for r in 0..3 {
        for (x, y) in a.row(r).iter().zip(expect.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_logits_average_values() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    let b = block(&mut store, 2, false, &mut rng);
    store.set(b.w_q.weight, Tensor::zeros(vec![4, 4])).unwrap();
    let kv = rng.normal_tensor::<f64>(vec![5, 4], 1.0);
    let q = rng.normal_tensor::<f64>(vec![2, 4], 1.0);
    let out = run_attend(&store, &b, &q, &kv);
    let vkv = crate::numcore::matmul(&kv, store.get(b.w_v.weight)).unwrap();
    let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|r| vkv.at(r, c)).sum::<f64>() / 5.0).collect();
    let mean = Tensor::new(vec![1, 4], mean).unwrap();
    let expect = crate::numcore::matmul(&mean, store.get(b.w_o.weight)).unwrap();
    for r in 0..2 {
        for (x, y) in out.row(r).iter().zip(expect.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn two_by_three_single_head_matches_formula() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let b = block(&mut store, 1, false, &mut rng);
    let q = rng.normal_tensor::<f64>(vec![2, 4], 1.0);
    let kv = rng.normal_tensor::<f64>(vec![3, 4], 1.0);
    let out = run_attend(&store, &b, &q, &kv);

    // explicit loops
    let proj = |x: &Tensor<f64>, w: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| (0..4).map(|j| (0..4).map(|p| x.at(i, p) * w.at(p, j)).sum()).collect())
            .collect()
    };
    let qq = proj(&q, store.get(b.w_q.weight));
    let kk = proj(&kv, store.get(b.w_k.weight));
    let vv = proj(&kv, store.get(b.w_v.weight));
    for i in 0..2 {
        let logits: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| qq[i][c] * kk[j][c]).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mixed: Vec<f64> = (0..4)
            .map(|c| (0..3).map(|j| logits[j].exp() / z * vv[j][c]).sum())
            .collect();
        let wo = store.get(b.w_o.weight);
        for c in 0..4 {
            let e: f64 = (0..4).map(|p| mixed[p] * wo.at(p, c)).sum();
            assert!((out.at(i, c) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn attend_rejects_bad_shapes() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let b = block(&mut store, 2, false, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let q = g.constant(Tensor::zeros(vec![2, 4]));
    let bad = g.constant(Tensor::zeros(vec![3, 5]));
    assert!(matches!(b.attend(&mut g, &p, q, bad, None), Err(Error::Dimension(_))));
    let kv = g.constant(Tensor::zeros(vec![3, 4]));
    let mask = Rc::new(Mask::causal(2));
    assert!(matches!(b.attend(&mut g, &p, q, kv, Some(mask)), Err(Error::Dimension(_))));
}

#[test]
fn width_must_divide_heads() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(0);
    assert!(matches!(
        AttentionBlock::new(&mut store, "a", 6, 4, false, &mut rng),
        Err(Error::Config(_))
    ));
}

fn spec(cross: bool, causal: bool) -> LayerSpec {
    LayerSpec {
        width: 8,
        heads: 2,
        ffn_hidden: 16,
        causal,
        cross,
    }
}

#[test]
fn zeroed_output_projections_make_identity() {
    let mut rng = Rng::new(4);
    let mut store = ParamStore::<f64>::new();
    let layers = build_stack(&mut store, "l", 2, spec(true, true), &mut rng).unwrap();
    for l in &layers {
        store.set(l.self_attn.w_o.weight, Tensor::zeros(vec![8, 8])).unwrap();
        let cross = l.cross.as_ref().unwrap();
        store.set(cross.attn.w_o.weight, Tensor::zeros(vec![8, 8])).unwrap();
        store.set(l.ffn.fc2.weight, Tensor::zeros(vec![16, 8])).unwrap();
    }
    let x = rng.normal_tensor::<f64>(vec![5, 8], 1.0);
    let kv = rng.normal_tensor::<f64>(vec![3, 8], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let kvv = g.constant(kv);
    let y = run_stack(&layers, &mut g, &p, xv, Some(kvv)).unwrap();
    assert_eq!(g.value(y).shape(), &[5, 8]);
    assert!(g.value(y).max_abs_diff(&x) < 1e-6);
}

#[test]
fn cross_kv_mismatch_is_usage_error() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f64>::new();
    let plain = TransformerLayer::new(&mut store, "p", spec(false, false), &mut rng).unwrap();
    let crossed = TransformerLayer::new(&mut store, "c", spec(true, false), &mut rng).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(vec![2, 8]));
    assert!(matches!(plain.forward(&mut g, &p, x, Some(x)), Err(Error::Usage(_))));
    assert!(matches!(crossed.forward(&mut g, &p, x, None), Err(Error::Usage(_))));
}

#[test]
fn causal_layers_only_propagate_forward() {
    let mut rng = Rng::new(6);
    let mut store = ParamStore::<f64>::new();
    let layers = build_stack(&mut store, "l", 2, spec(false, true), &mut rng).unwrap();
    let x = rng.normal_tensor::<f64>(vec![6, 8], 1.0);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = run_stack(&layers, &mut g, &p, xv, None).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for j in 0..6 {
        let mut xp = x.clone();
        for (k, v) in xp.row_mut(j).iter_mut().enumerate() {
            *v += 0.3 * (k as f64 - 3.0);
        }
        let out = run(&xp);
        for i in 0..6 {
            let same = out.row(i) == base.row(i);
            assert_eq!(same, i < j, "position {i} after perturbing {j}");
        }
    }
}

#[test]
fn two_layer_stack_passes_grad_check() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::<f64>::new();
    let layers = build_stack(&mut store, "l", 2, spec(true, true), &mut rng).unwrap();
    let x = rng.normal_tensor::<f64>(vec![4, 8], 1.0);
    let kv = rng.normal_tensor::<f64>(vec![3, 8], 1.0);
    let w = rng.normal_tensor::<f64>(vec![4, 8], 1.0);
    let f = |g: &mut Graph<f64>, v| {
        let p = store.bind(g, false);
        let kvv = g.constant(kv.clone());
        let y = run_stack(&layers, g, &p, v, Some(kvv))?;
        let wv = g.constant(w.clone());
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    let r = grad_check(f, &x, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    // with respect to the cross-attention memory
    let f = |g: &mut Graph<f64>, kvv| {
        let p = store.bind(g, false);
        let xv = g.constant(x.clone());
        let y = run_stack(&layers, g, &p, xv, Some(kvv))?;
        let wv = g.constant(w.clone());
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    let r = grad_check(f, &kv, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn sinusoidal_table() {
    let t = sinusoidal_positions::<f64>(5, 6).unwrap();
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    let t = sinusoidal_positions::<f64>(2, 2).unwrap();
    assert_eq!(t.row(1), &[1f64.sin(), 1f64.cos()]);
    assert!(matches!(sinusoidal_positions::<f64>(2, 3), Err(Error::Config(_))));
}

#[test]
fn param_store_names_and_checksum() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::<f32>::new();
    store.add_normal("a", vec![2, 2], 1.0, &mut rng).unwrap();
    assert!(store.add_full("a", vec![1], 0.0).is_err());
    let c1 = store.checksum();
    assert_eq!(c1, store.clone().checksum());
    let id = store.id("a").unwrap();
    store.get_mut(id).data_mut()[0] += 1.0;
    assert_ne!(c1, store.checksum());
}
