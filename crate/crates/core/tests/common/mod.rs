//! Independent oracles and invariant measurements shared by the integration
//! tests and the acceptance runner. Each measurement builds its own random
//! instance from the given dimensions and seed and returns the largest
//! deviation it observed.
#![allow(dead_code)]

use graphten::graphmod::{dilated_context, topn_neighbors, Affinity, ContextGraph, ContextGraphConfig};
use graphten::layers::Linear;
use graphten::ndtensor::{Graph, ParamStore, Tensor};
use graphten::patchenc::{
    aggregate_multiscale, encode_descriptors, encode_patch, extract_patches, patch_count, patch_origins, Codebook,
    PatchConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::uniform(&[h, w, c], -1.0, 1.0, rng)
}

/// Features on a coarse lattice so that equal distances, and therefore ties, are common.
pub fn lattice_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, c], |_| f64::from(rng.gen_range(0..3u8)) * 0.5)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row_sum_error(data: &[f64], cols: usize) -> f64 {
    data.chunks(cols)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Full sort of every target by `(distance, index)`, keeping the first `n`.
pub fn topn_brute_force(fc0: &Tensor<f64>, fc1: &Tensor<f64>, n: usize) -> Vec<Vec<usize>> {
    let (h0, w0, c) = (fc0.shape()[0], fc0.shape()[1], fc0.shape()[2]);
    let (h1, w1) = (fc1.shape()[0], fc1.shape()[1]);
    let mut out = Vec::new();
    for y0 in 0..h0 {
        for x0 in 0..w0 {
            let mut all = Vec::new();
            for y1 in 0..h1 {
                for x1 in 0..w1 {
                    let mut d = 0.0;
                    for ch in 0..c {
                        let diff = fc0.at(&[y0, x0, ch]) - fc1.at(&[y1, x1, ch]);
                        d += diff * diff;
                    }
                    all.push((d, y1 * w1 + x1));
                }
            }
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.push(all[..n].iter().map(|p| p.1).collect());
        }
    }
    out
}

/// One random top-n instance (maps up to 8×8, n ≤ 4). Returns whether the
/// fast selection equals the brute-force order exactly.
pub fn topn_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let c = r.gen_range(1..=4);
    let (h0, w0) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let (h1, w1) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let n = r.gen_range(1..=4usize.min(h1 * w1));
    let (a, b) = if seed.is_multiple_of(2) {
        (random_map(&mut r, h0, w0, c), random_map(&mut r, h1, w1, c))
    } else {
        (lattice_map(&mut r, h0, w0, c), lattice_map(&mut r, h1, w1, c))
    };
    let fast = topn_neighbors(&a, &b, n).map_err(|e| e.to_string())?;
    let slow = topn_brute_force(&a, &b, n);
    for (s, want) in slow.iter().enumerate() {
        if fast.neighbors(s) != want.as_slice() {
            return Err(format!(
                "seed {seed}: source {s} of {h0}×{w0}→{h1}×{w1}, n={n}: got {:?}, want {want:?}",
                fast.neighbors(s)
            ));
        }
    }
    Ok(())
}

/// Residual histogram by explicit loops over descriptors and codewords.
pub fn encode_patch_loop(patch: &Tensor<f64>, centers: &Tensor<f64>, smoothing: &[f64]) -> Vec<f64> {
    let d = patch.shape()[2];
    let k = smoothing.len();
    let pixels = patch.data().chunks(d).collect::<Vec<_>>();
    let mut hist = vec![0.0; k * d];
    for x in pixels {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let cj = &centers.data()[j * d..(j + 1) * d];
                -smoothing[j] * x.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        for j in 0..k {
            let a = weights[j] / total;
            for t in 0..d {
                hist[j * d + t] += a * (x[t] - centers.data()[j * d + t]);
            }
        }
    }
    hist
}

fn random_codebook(r: &mut ChaCha8Rng, store: &mut ParamStore<f64>, k: usize, dim: usize) -> Codebook {
    let cb = Codebook::new(store, "cb", k, dim, r);
    store.get_mut(cb.smoothing).value = Tensor::uniform(&[k], 0.2, 2.0, r);
    cb
}

/// One random instance (K ≤ 4, D ≤ 4, d ≤ 5); returns the max absolute
/// difference between the graph encoding and the loop oracle.
pub fn encode_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, dim, d) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=5));
    let mut store = ParamStore::new();
    let cb = random_codebook(&mut r, &mut store, k, dim);
    let patch = random_map(&mut r, d, d, dim);
    let mut g = Graph::new();
    let p = g.input(patch.clone());
    let enc = encode_patch(&mut g, &store, p, &cb).unwrap();
    let want = encode_patch_loop(
        &patch,
        &store.get(cb.centers).value,
        store.get(cb.smoothing).value.data(),
    );
    max_abs_diff(g.value(enc.hist).data(), &want)
}

/// Attention rows of the context graph summed, worst deviation from one.
pub fn attention_row_error(h: usize, w: usize, c: usize, affinity: Affinity, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut cfg = ContextGraphConfig::for_channels(c);
    cfg.affinity = affinity;
    let cag = ContextGraph::new(&mut store, "cag", cfg, &mut r);
    let mut g = Graph::new();
    let f = g.input(random_map(&mut r, h, w, c));
    let out = cag.forward(&mut g, &store, f).unwrap();
    row_sum_error(g.value(out.attention).data(), h * w)
}

fn permute_pixels(f: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = f.shape()[2];
    Tensor::from_fn(f.shape(), |i| f.data()[perm[i / c] * c + i % c])
}

/// Permuting the pixels of the input permutes the output identically.
pub fn cag_equivariance_error(h: usize, w: usize, c: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cag = ContextGraph::new(&mut store, "cag", ContextGraphConfig::for_channels(c), &mut r);
    let f = random_map(&mut r, h, w, c);
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(&mut r);
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(x);
        let o = cag.forward(&mut g, &store, v).unwrap();
        g.value(o.out).clone()
    };
    let base = run(f.clone());
    let moved = run(permute_pixels(&f, &perm));
    max_abs_diff(permute_pixels(&base, &perm).data(), moved.data())
}

/// Context features of a per-channel constant map equal the constants.
pub fn dilated_constant_error(h: usize, w: usize, c: usize, dilation: usize, k: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let consts: Vec<f64> = (0..c).map(|_| r.gen_range(-3.0..3.0)).collect();
    let f = Tensor::from_fn(&[h, w, c], |i| consts[i % c]);
    let out = dilated_context(&f, dilation, k).unwrap();
    max_abs_diff(out.data(), f.data())
}

/// Soft-assignment rows of random descriptors, worst deviation from one.
pub fn assignment_row_error(n: usize, k: usize, dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cb = random_codebook(&mut r, &mut store, k, dim);
    let mut g = Graph::new();
    let v = g.input(Tensor::uniform(&[n, dim], -2.0, 2.0, &mut r));
    let enc = encode_descriptors(&mut g, &store, v, &cb, None).unwrap();
    row_sum_error(g.value(enc.assignment).data(), k)
}

/// Shuffling the descriptors of one patch leaves its histogram unchanged.
pub fn hist_permutation_error(d: usize, k: usize, dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cb = random_codebook(&mut r, &mut store, k, dim);
    let patch = random_map(&mut r, d, d, dim);
    let mut perm: Vec<usize> = (0..d * d).collect();
    perm.shuffle(&mut r);
    let hist = |p: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.input(p);
        let e = encode_patch(&mut g, &store, v, &cb).unwrap();
        g.value(e.hist).data().to_vec()
    };
    max_abs_diff(&hist(patch.clone()), &hist(permute_pixels(&patch, &perm)))
}

/// `U` summed patch by patch in a shuffled order against the library's
/// multi-scale aggregate (unnormalised), relative to `max(1, ‖U‖∞)`.
pub fn aggregate_permutation_error(h: usize, w: usize, c: usize, cfg: &PatchConfig, k: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut cfg = cfg.clone();
    cfg.normalize = false;
    let mut store = ParamStore::new();
    let proj = Linear::new(&mut store, "proj", c, cfg.embed_dim, false, &mut r);
    let cb = random_codebook(&mut r, &mut store, k, cfg.embed_dim);
    let q = random_map(&mut r, h, w, c);

    let mut g = Graph::new();
    let qv = g.input(q);
    let agg = aggregate_multiscale(&mut g, &store, qv, &cfg, &cb, &proj).unwrap();
    let want = g.value(agg.u).data().to_vec();

    let projected = proj.forward_map(&mut g, &store, qv).unwrap();
    let mut jobs = Vec::new();
    for (&d, &wj) in cfg.windows.iter().zip(&cfg.weights) {
        for p in extract_patches(&mut g, projected, d, cfg.stride).unwrap() {
            jobs.push((wj, p));
        }
    }
    jobs.shuffle(&mut r);
    let mut total = vec![0.0; k * cfg.embed_dim];
    for (wj, p) in jobs {
        let e = encode_patch(&mut g, &store, p, &cb).unwrap();
        for (t, v) in total.iter_mut().zip(g.value(e.hist).data()) {
            *t += wj * v;
        }
    }
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(&want, &total) / scale
}

/// Enumerates every `(H, W, d, s)` with `H, W ≤ max` and `d ≤ min(H, W)`,
/// `s ≤ max`, counting windows by brute force. Returns the mismatches.
pub fn patch_count_mismatches(max: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut bad = Vec::new();
    for h in 1..=max {
        for w in 1..=max {
            for d in 1..=h.min(w) {
                for s in 1..=max {
                    let mut count = 0;
                    for y in 0..h {
                        for x in 0..w {
                            if y % s == 0 && x % s == 0 && y + d <= h && x + d <= w {
                                count += 1;
                            }
                        }
                    }
                    let law = patch_count(h, w, d, s).ok();
                    let listed = patch_origins(h, w, d, s).map(|o| o.len()).ok();
                    if law != Some(count) || listed != Some(count) {
                        bad.push((h, w, d, s));
                    }
                }
            }
            if patch_count(h, w, h.min(w) + 1, 1).is_ok() {
                bad.push((h, w, h.min(w) + 1, 1));
            }
        }
    }
    bad
}

/// Patch configuration with `windows` that all fit an `h×w` map.
pub fn patch_config(windows: Vec<usize>, stride: usize, embed_dim: usize) -> PatchConfig {
    let n = windows.len();
    PatchConfig {
        windows,
        stride,
        weights: vec![1.0 / n as f64; n],
        embed_dim,
        normalize: false,
    }
}
