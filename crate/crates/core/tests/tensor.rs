use std::rc::Rc;

use hetgrow::tensor::{gelu, gelu_grad, gelu_second, hvp, Graph, Var};
use hetgrow::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Leaves = Vec<(Vec<usize>, Vec<f64>)>;

fn random_leaves(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Leaves {
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            (s.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect()
}

/// Compares backward against central differences (step 1e-3) for every leaf
/// entry: relative error ≤ 1e-3, or absolute ≤ 1e-5 for small gradients.
fn check_gradients<F>(leaves: &Leaves, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &Leaves| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|(s, d)| g.leaf(s.clone(), d.clone()).unwrap()).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(s, d)| g.leaf(s.clone(), d.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let h = 1e-3;
    for (li, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        for i in 0..leaves[li].1.len() {
            let mut plus = leaves.clone();
            plus[li].1[i] += h;
            let mut minus = leaves.clone();
            minus[li].1[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let ok = if fd.abs() < 1e-2 {
                (a - fd).abs() <= 1e-5
            } else {
                (a - fd).abs() <= 1e-3 * fd.abs()
            };
            assert!(ok, "leaf {li} entry {i}: analytic {a} vs finite difference {fd}");
        }
    }
}

#[test]
fn gelu_second_derivative_matches_finite_differences() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu_second(0.0) - 0.797885).abs() < 1e-6);
    let h = 1e-4;
    for z in [-3.0, -1.2, 0.0, 0.4, 2.0, 2.5] {
        let fd = (gelu_grad(z + h) - gelu_grad(z - h)) / (2.0 * h);
        assert!((fd - gelu_second(z)).abs() < 1e-5, "z = {z}");
        let fd1 = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
        assert!((fd1 - gelu_grad(z)).abs() < 1e-6, "z = {z}");
    }
}

#[test]
fn two_layer_gelu_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let leaves = random_leaves(&mut rng, &[vec![5, 4], vec![6, 4], vec![6], vec![3, 6], vec![3]]);
    check_gradients(&leaves, |g, v| {
        let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
        let a = g.gelu(h);
        let out = g.linear(a, v[3], Some(v[4])).unwrap();
        g.cross_entropy(out, &[0, 2, 1, 1, 0]).unwrap()
    });
}

#[test]
fn normalization_and_attention_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let leaves = random_leaves(&mut rng, &[vec![2, 3, 4], vec![4], vec![4], vec![2, 3, 4], vec![3, 4]]);
    check_gradients(&leaves, |g, v| {
        let x = g.reshape(v[0], vec![6, 4]).unwrap();
        let n = g.layer_norm(x, v[1], v[2], 1e-6).unwrap();
        let n = g.reshape(n, vec![2, 3, 4]).unwrap();
        let s = g.bmm(n, v[3], true).unwrap();
        let s = g.scale(s, 0.5);
        let p = g.softmax(s).unwrap();
        let ctx = g.bmm(p, v[3], false).unwrap();
        let ctx = g.reshape(ctx, vec![6, 4]).unwrap();
        let y = g.add_broadcast(ctx, v[4]).unwrap();
        let y = g.mul(y, y).unwrap();
        g.mean(y)
    });
}

#[test]
fn indexing_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let leaves = random_leaves(&mut rng, &[vec![1, 3], vec![2, 3], vec![3, 2], vec![3, 3]]);
    check_gradients(&leaves, |g, v| {
        let c = g.concat(&[v[0], v[1]]).unwrap();
        let idx: Rc<[usize]> = vec![0, 4, 8, 1, 1, 7].into();
        let t = g.gather(c, idx, vec![3, 2]).unwrap();
        let d = g.add(t, v[2]).unwrap();
        let out = g.index_add_cols(v[3], d, vec![2, 0].into()).unwrap();
        let a = g.gelu(out);
        let sq = g.mul(a, out).unwrap();
        g.sum(sq)
    });
}

#[test]
fn duplicated_leaf_matches_two_separate_leaves() {
    let x = vec![0.3, -1.1, 2.0];
    let w = vec![0.5, -0.25, 1.5, 0.1, 0.2, -0.7];
    // f(x, x) with one leaf used twice
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(vec![1, 3], x.clone()).unwrap();
    let wv = g.leaf(vec![2, 3], w.clone()).unwrap();
    let a = g.linear(xv, wv, None).unwrap();
    let b = g.gelu(xv);
    let b = g.sum(b);
    let a = g.sum(a);
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    let shared = g.grad(xv).unwrap().to_vec();
    // the same function with two distinct leaves holding equal values
    let mut g = Graph::<f64>::new();
    let x1 = g.leaf(vec![1, 3], x.clone()).unwrap();
    let x2 = g.leaf(vec![1, 3], x).unwrap();
    let wv = g.leaf(vec![2, 3], w).unwrap();
    let a = g.linear(x1, wv, None).unwrap();
    let b = g.gelu(x2);
    let b = g.sum(b);
    let a = g.sum(a);
    let l = g.add(a, b).unwrap();
    g.backward(l).unwrap();
    for i in 0..3 {
        let sum = g.grad(x1).unwrap()[i] + g.grad(x2).unwrap()[i];
        assert!((shared[i] - sum).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardConsumed)));
}

/// Gradient of a single GeLU neuron's squared output, `p = (w₁..w₆, b, a)`,
/// loss `½(a·gelu(wᵀx + b))²` summed over fixed samples.
fn neuron_grad(xs: &[[f64; 6]]) -> impl Fn(&[f64]) -> hetgrow::Result<Vec<f64>> + '_ {
    move |p: &[f64]| {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(vec![1, 6], p[..6].to_vec())?;
        let b = g.leaf(vec![1], vec![p[6]])?;
        let a = g.leaf(vec![1, 1], vec![p[7]])?;
        let x = g.constant(vec![xs.len(), 6], xs.iter().flatten().copied().collect())?;
        let z = g.linear(x, w, Some(b))?;
        let s = g.gelu(z);
        let o = g.linear(s, a, None)?;
        let sq = g.mul(o, o)?;
        let l = g.sum(sq);
        let l = g.scale(l, 0.5);
        g.backward(l)?;
        let mut out = g.grad(w).unwrap().to_vec();
        out.push(g.grad(b).unwrap()[0]);
        out.push(g.grad(a).unwrap()[0]);
        Ok(out)
    }
}

#[test]
fn hvp_columns_assemble_a_symmetric_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<[f64; 6]> = (0..7).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let p: Vec<f64> = (0..8).map(|_| rng.random_range(-0.8..0.8)).collect();
    let grad = neuron_grad(&xs);
    let mut h = vec![0.0; 64];
    for k in 0..8 {
        let mut e = vec![0.0; 8];
        e[k] = 1.0;
        for (i, v) in hvp(&grad, &p, &e).unwrap().into_iter().enumerate() {
            h[i * 8 + k] = v;
        }
    }
    let asym: f64 = (0..8)
        .flat_map(|i| (0..8).map(move |j| (i, j)))
        .map(|(i, j)| (h[i * 8 + j] - h[j * 8 + i]).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(asym <= 1e-4, "asymmetry {asym}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_symmetric_bilinear(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<[f64; 6]> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(-0.8..0.8)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = neuron_grad(&xs);
        let hw = hvp(&grad, &p, &w).unwrap();
        let hv = hvp(&grad, &p, &v).unwrap();
        let vhw: f64 = v.iter().zip(&hw).map(|(a, b)| a * b).sum();
        let whv: f64 = w.iter().zip(&hv).map(|(a, b)| a * b).sum();
        prop_assert!((vhw - whv).abs() <= 1e-3 * vhw.abs().max(whv.abs()).max(1e-3));
    }

    #[test]
    fn gradients_of_random_mlps(seed in 0u64..10_000, hidden in 1usize..6, batch in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = random_leaves(&mut rng, &[vec![batch, 3], vec![hidden, 3], vec![hidden], vec![2, hidden]]);
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        check_gradients(&leaves, |g, v| {
            let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let a = g.gelu(h);
            let o = g.linear(a, v[3], None).unwrap();
            g.cross_entropy(o, &labels).unwrap()
        });
    }
}

/// Twelve linear layers reading one input: with the cache one saved copy,
/// without it twelve, and bitwise-identical gradients either way.
fn twelve_consumers(graph: Graph<f32>) -> (usize, Vec<Vec<f32>>) {
    let mut g = graph;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.constant(vec![4, 8], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ws: Vec<Var> = (0..12)
        .map(|_| g.leaf(vec![5, 8], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let mut acc = None;
    for &w in &ws {
        let y = g.linear(x, w, None).unwrap();
        let y = g.gelu(y);
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y).unwrap(),
        });
    }
    let loss = g.mean(acc.unwrap());
    let saved = g.saved_input_buffers();
    g.backward(loss).unwrap();
    assert_eq!(g.saved_input_buffers(), 0);
    assert!(g.input_cache().is_none_or(|c| c.is_empty()));
    (saved, ws.iter().map(|w| g.grad(*w).unwrap().to_vec()).collect())
}

#[test]
fn shared_input_cache_census() {
    let (with, grads_with) = twelve_consumers(Graph::new());
    let (without, grads_without) = twelve_consumers(Graph::without_input_cache());
    assert_eq!(with, 1);
    assert_eq!(without, 12);
    for (a, b) in grads_with.iter().zip(&grads_without) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
