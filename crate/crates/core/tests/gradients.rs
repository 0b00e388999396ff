//! Analytic gradients of randomly shaped compositions against central differences.

use graphten::ndtensor::{grad_check, ConvSpec, Graph, PadMode, Tensor, Var};
use graphten::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut r));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_softmax_chain(n in 1usize..5, m in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[n, m], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[m, k], -1.0, 1.0, &mut r);
        let rep = grad_check(|g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul(x, bv)?;
            let s = g.softmax(y, 1)?;
            weighted_sum(g, s, seed)
        }, &x, STEP).unwrap();
        prop_assert!(rep.max_rel_error <= TOL, "{}", rep.max_rel_error);
    }

    #[test]
    fn dilated_replicate_conv(
        h in 2usize..6, w in 2usize..6, c in 1usize..3, o in 1usize..3,
        dilation in 1usize..3, seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[3, 3, c, o], -1.0, 1.0, &mut r);
        let spec = ConvSpec { stride: 1, pad: dilation, dilation, pad_mode: PadMode::Replicate };
        let rep = grad_check(|g, x| {
            let kv = g.constant(k.clone());
            let y = g.conv2d(x, kv, spec)?;
            let y = g.sigmoid(y);
            weighted_sum(g, y, seed)
        }, &x, STEP).unwrap();
        prop_assert!(rep.max_rel_error <= TOL, "{}", rep.max_rel_error);
    }

    #[test]
    fn distance_and_residual_aggregate(n in 1usize..6, k in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::uniform(&[n, d], -1.0, 1.0, &mut r);
        let c = Tensor::uniform(&[k, d], -1.0, 1.0, &mut r);
        let rep = grad_check(|g, v| {
            let cv = g.constant(c.clone());
            let dist = g.pairwise_sq_dist(v, cv)?;
            let neg = g.scale(dist, -1.0);
            let a = g.softmax(neg, 1)?;
            let h = g.residual_aggregate(a, v, cv)?;
            weighted_sum(g, h, seed)
        }, &v, STEP).unwrap();
        prop_assert!(rep.max_rel_error <= TOL, "{}", rep.max_rel_error);
    }
}
