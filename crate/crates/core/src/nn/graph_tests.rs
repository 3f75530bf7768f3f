use rand::Rng as _;

use super::*;
use crate::nn::params::ParamGroupTag;
use crate::seed::rng_from_seed;

fn random(shape: &[usize], rng: &mut crate::seed::Rng) -> Tensor {
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks analytic gradients of `build` against central differences for
/// every input tensor. `build` maps bound inputs to a scalar.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> =
        inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("p{i}"), ParamGroupTag::Other, t)).collect();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id, true)).collect();
        let root = build(&mut g, &vars);
        (g, vars, root)
    };
    let (mut g, vars, root) = eval(&store);
    g.backward(root);
    let eps = 1e-6;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let (gp, _, rp) = eval(&store);
            let fp = gp.value(rp).item();
            store.value_mut(id).data_mut()[j] = orig - eps;
            let (gm, _, rm) = eval(&store);
            let fm = gm.value(rm).item();
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!((a - numeric).abs() / denom < 1e-4, "input {k} element {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    random(shape, &mut rng_from_seed(seed))
}

#[test]
fn linear_grad() {
    let mut rng = rng_from_seed(1);
    check(vec![random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        g.dot_const(y, projection(&[3, 5], 9))
    });
}

#[test]
fn conv2d_grad_with_stride_and_padding() {
    let mut rng = rng_from_seed(2);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
        check(vec![random(&[2, 3, 5, 6], &mut rng), random(&[4, 3, k, k], &mut rng), random(&[4], &mut rng)], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            let n = g.value(y).len();
            let shape = g.value(y).shape().to_vec();
            assert_eq!(n, shape.iter().product::<usize>());
            g.dot_const(y, projection(&shape, 10))
        });
    }
}

#[test]
fn norm_grads() {
    let mut rng = rng_from_seed(3);
    let kinds = [
        NormKind::BatchStats,
        NormKind::Group(2),
        NormKind::Running { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![1.0, 0.5, 2.0, 0.1] },
    ];
    for kind in kinds {
        check(vec![random(&[3, 4, 2, 3], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)], |g, v| {
            let (y, _) = g.norm(v[0], v[1], v[2], kind.clone());
            g.dot_const(y, projection(&[3, 4, 2, 3], 11))
        });
    }
    check(vec![random(&[2, 3, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)], |g, v| {
        let (y, _) = g.norm(v[0], v[1], v[2], NormKind::Layer);
        g.dot_const(y, projection(&[2, 3, 5], 12))
    });
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let mut rng = rng_from_seed(4);
    let mut store = ParamStore::new();
    let x = store.add("x", ParamGroupTag::Other, random(&[6, 3, 4, 4], &mut rng));
    let gamma = store.add("g", ParamGroupTag::BnAffine, Tensor::full(&[3], 1.0));
    let beta = store.add("b", ParamGroupTag::BnAffine, Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.param(&store, x, false), g.param(&store, gamma, false), g.param(&store, beta, false));
    let (y, stats) = g.norm(xv, gv, bv, NormKind::BatchStats);
    let stats = stats.unwrap();
    assert_eq!(stats.count, 6 * 16);
    let yv = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..6).flat_map(|n| yv[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn elementwise_and_reshaping_grads() {
    let mut rng = rng_from_seed(5);
    check(vec![random(&[2, 3, 2, 2], &mut rng), random(&[2, 3, 2, 2], &mut rng)], |g, v| {
        let s = g.add(v[0], v[1]);
        let r = g.relu(s);
        let sc = g.scale(r, 0.7);
        let p = g.global_avg_pool(sc);
        g.dot_const(p, projection(&[2, 3], 13))
    });
    check(vec![random(&[2, 3, 2, 2], &mut rng), random(&[4, 3], &mut rng)], |g, v| {
        let t = g.to_tokens(v[0]);
        let t = g.add_broadcast(t, v[1]);
        let m = g.mean_tokens(t);
        g.dot_const(m, projection(&[2, 3], 14))
    });
}

#[test]
fn attention_grad() {
    let mut rng = rng_from_seed(6);
    check(vec![random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng)], |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2);
        g.dot_const(y, projection(&[2, 3, 4], 15))
    });
}

#[test]
fn loss_op_grads() {
    let mut rng = rng_from_seed(7);
    let targets = crate::nn::softmax(&random(&[4, 3], &mut rng));
    check(vec![random(&[4, 3], &mut rng)], |g, v| g.soft_cross_entropy(v[0], targets.clone()));
    check(vec![random(&[4, 3], &mut rng)], |g, v| g.entropy_sum(v[0]));
    check(vec![random(&[4, 3], &mut rng)], |g, v| g.frobenius_norm(v[0], true));
    check(vec![random(&[4, 3], &mut rng)], |g, v| g.frobenius_norm(v[0], false));
    check(vec![random(&[4, 3], &mut rng)], |g, v| {
        let lp = g.log_softmax(v[0]);
        g.nll(lp, &[0, 2, 1, 2], &[1.0, 0.5, 2.0])
    });
    check(vec![random(&[4, 3], &mut rng)], |g, v| {
        let a = g.entropy_sum(v[0]);
        let b = g.frobenius_norm(v[0], true);
        g.weighted_sum(&[(a, 0.3), (b, -1.2)])
    });
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroupTag::ClassHead, Tensor::full(&[2, 2], 0.5));
    let x = store.add("x", ParamGroupTag::Other, Tensor::full(&[1, 2], 1.0));
    let mut g = Graph::new();
    let wv = g.param(&store, w, false);
    let xv = g.param(&store, x, true);
    let y = g.linear(xv, wv, None);
    let l = g.entropy_sum(y);
    g.backward(l);
    assert!(g.grad(wv).is_none());
    assert_eq!(g.param_grads().len(), 1);
}
