//! Every differentiable op against central finite differences, 20 seeds each.

use langdet::tensor::{
    check_gradients, cosine_similarity, kl_divergence, softmax, Conv2dSpec, Graph, Result, Tensor, Var,
    DEFAULT_FD_STEP,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Entries bounded away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = random(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let report = check_gradients(
            |g, v| {
                let out = f(g, v)?;
                weighted_sum(g, out, seed)
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "{name} seed {seed}: rel err {}", report.max_rel_error);
    }
}

#[test]
fn elementwise_binary_ops() {
    let two = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4]), random(r, &[3, 4])];
    check("add", two, |g, v| g.add(v[0], v[1]));
    check("sub", two, |g, v| g.sub(v[0], v[1]));
    check("mul", two, |g, v| g.mul(v[0], v[1]));
    check("div", |r| vec![random(r, &[3, 4]), away_from_zero(r, &[3, 4]).map(|x| x.abs() + 0.5)], |g, v| {
        g.div(v[0], v[1])
    });
    check("minimum", two, |g, v| g.minimum(v[0], v[1]));
    check("maximum", two, |g, v| g.maximum(v[0], v[1]));
    check("elementwise_sum", |r| vec![random(r, &[5]), random(r, &[5]), random(r, &[5])], |g, v| {
        g.elementwise_sum(v)
    });
}

#[test]
fn elementwise_unary_ops() {
    let one = |r: &mut ChaCha8Rng| vec![away_from_zero(r, &[2, 5])];
    check("scale", one, |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", one, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("abs", one, |g, v| Ok(g.abs(v[0])));
    check("relu", one, |g, v| Ok(g.relu(v[0])));
    check("gelu", one, |g, v| Ok(g.gelu(v[0])));
    check("sigmoid", one, |g, v| Ok(g.sigmoid(v[0])));
    check("exp", one, |g, v| Ok(g.exp(v[0])));
}

#[test]
fn linear_algebra_ops() {
    check("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], |g, v| g.matmul(v[0], v[1]));
    check("transpose", |r| vec![random(r, &[3, 4])], |g, v| g.transpose(v[0]));
    check("add_bias", |r| vec![random(r, &[3, 4]), random(r, &[4])], |g, v| g.add_bias(v[0], v[1]));
}

#[test]
fn structural_ops() {
    check("concat0", |r| vec![random(r, &[2, 3]), random(r, &[1, 3])], |g, v| g.concat(v, 0));
    check("concat1", |r| vec![random(r, &[2, 3]), random(r, &[2, 2])], |g, v| g.concat(v, 1));
    check("slice", |r| vec![random(r, &[4, 5])], |g, v| g.slice(v[0], 1, 1, 3));
    check("reshape", |r| vec![random(r, &[4, 3])], |g, v| g.reshape(v[0], &[2, 6]));
    check("sum", |r| vec![random(r, &[3, 3])], |g, v| Ok(g.sum(v[0])));
    check("mean", |r| vec![random(r, &[3, 3])], |g, v| Ok(g.mean(v[0])));
    check("mean_rows", |r| vec![random(r, &[4, 3])], |g, v| g.mean_rows(v[0]));
    check("gather_rows", |r| vec![random(r, &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2]));
}

#[test]
fn normalization_ops() {
    check("layer_norm", |r| vec![random(r, &[3, 6]), random(r, &[6]), random(r, &[6])], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check("softmax", |r| vec![random(r, &[2, 5])], |g, v| g.softmax(v[0], 0.7));
    check("log_softmax", |r| vec![random(r, &[2, 5])], |g, v| g.log_softmax(v[0], 1.3));
    check("normalize_rows", |r| vec![away_from_zero(r, &[3, 4])], |g, v| g.normalize_rows(v[0]));
    check("cosine_similarity", |r| vec![away_from_zero(r, &[6]), away_from_zero(r, &[6])], |g, v| {
        g.cosine_similarity(v[0], v[1])
    });
}

#[test]
fn loss_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = softmax(&random(&mut rng, &[7]), 1.0).unwrap();
        let logits = random(&mut rng, &[7]);
        // softmax + KL composite
        let report = check_gradients(
            |g, v| {
                let q = g.softmax(v[0], 0.5)?;
                g.kl_divergence(&target, q)
            },
            &[logits],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "softmax+kl seed {seed}: {}", report.max_rel_error);

        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let logits = random(&mut rng, &[4, 5]);
        let report = check_gradients(
            |g, v| g.cross_entropy(v[0], &targets, Some(&weights)),
            &[logits],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "cross_entropy seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn conv2d_op() {
    check(
        "conv2d",
        |r| vec![random(r, &[2, 6, 6]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
        |g, v| g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride: 2, pad: 1 }),
    );
    check(
        "conv2d_5x5",
        |r| vec![random(r, &[2, 4, 4]), random(r, &[2, 2, 5, 5]), random(r, &[2])],
        |g, v| g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride: 2, pad: 2 }),
    );
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, &[4, 6]));
        let b = g.param(random(&mut rng, &[6, 3]));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 0.3).unwrap();
        let l = weighted_sum(&mut g, s, 5).unwrap();
        let grads = g.backward(l).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in vec_strategy(9), t in 0.05f64..5.0) {
        let s = softmax(&Tensor::vector(x).unwrap(), t).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-9);
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(a in vec_strategy(6), b in vec_strategy(6)) {
        let p = softmax(&Tensor::vector(a).unwrap(), 1.0).unwrap();
        let q = softmax(&Tensor::vector(b).unwrap(), 1.0).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), lambda in 0.01f64..100.0) {
        let ta = Tensor::vector(a).unwrap();
        let tb = Tensor::vector(b).unwrap();
        prop_assume!(ta.norm() > 1e-3 && tb.norm() > 1e-3);
        let ab = cosine_similarity(&ta, &tb).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&tb, &ta).unwrap());
        let scaled = cosine_similarity(&ta.map(|v| v * lambda), &tb).unwrap();
        prop_assert!((scaled - ab).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
