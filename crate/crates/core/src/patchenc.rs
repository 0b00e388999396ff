//! Multi-scale patch encoding with a learnable codebook.
//!
//! A patch of side `d` contributes its `d²` pixels as descriptors in `R^D`.
//! Each descriptor is softly assigned to the `K` codebook centres with
//! weights `softmax_k(−s_k·‖V_i − c_k‖²)` and the patch histogram is
//! `H_k = Σ_i a_ik (V_i − c_k)`.
//!
//! Since a descriptor's assignment does not depend on which patch it belongs
//! to, the weighted sum over all scales and placements equals a single pass
//! over pixels with each residual weighted by `Σ_j w_j · cover_j(pixel)`,
//! where `cover_j` counts the scale-`j` windows containing the pixel. The
//! aggregate is computed that way.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::ndtensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub windows: Vec<usize>,
    pub stride: usize,
    pub weights: Vec<f64>,
    /// Channel width descriptors are projected to before encoding.
    pub embed_dim: usize,
    /// L2-normalise the flattened aggregate.
    pub normalize: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            windows: vec![3, 5, 7],
            stride: 1,
            weights: vec![0.35, 0.45, 0.2],
            embed_dim: 8,
            normalize: true,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(format!(
                "patch windows must be positive, got {:?}",
                self.windows
            )));
        }
        if self.weights.len() != self.windows.len() {
            return Err(Error::Config(format!(
                "{} patch weights for {} window sizes",
                self.weights.len(),
                self.windows.len()
            )));
        }
        if self.stride == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch stride and embedding width must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Checks every window fits an `h×w` map.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        for &d in &self.windows {
            patch_count(h, w, d, self.stride)?;
        }
        Ok(())
    }
}

/// Number of `d×d` windows at stride `s`: `⌊(H−d)/s+1⌋·⌊(W−d)/s+1⌋`.
pub fn patch_count(h: usize, w: usize, d: usize, s: usize) -> Result<usize> {
    if d == 0 || s == 0 {
        return Err(Error::contract("extract_patches", "window size and stride must be ≥ 1"));
    }
    if d > h || d > w {
        return Err(Error::contract(
            "extract_patches",
            format!("window {d} exceeds map extent {h}×{w}; requires d ≤ H and d ≤ W"),
        ));
    }
    Ok(((h - d) / s + 1) * ((w - d) / s + 1))
}

/// Top-left corners of all windows, row-major.
pub fn patch_origins(h: usize, w: usize, d: usize, s: usize) -> Result<Vec<(usize, usize)>> {
    patch_count(h, w, d, s)?;
    let mut out = Vec::new();
    for y in (0..=h - d).step_by(s) {
        for x in (0..=w - d).step_by(s) {
            out.push((y, x));
        }
    }
    Ok(out)
}

/// Dense sliding-window patches of `q`, each `d×d×C`, in row-major window order.
pub fn extract_patches(g: &mut Graph<f64>, q: Var, d: usize, s: usize) -> Result<Vec<Var>> {
    let (h, w, c) = g.value(q).hwc("extract_patches")?;
    let origins = patch_origins(h, w, d, s)?;
    let flat = g.reshape(q, &[h * w, c])?;
    origins
        .into_iter()
        .map(|(y0, x0)| {
            let rows = (0..d)
                .flat_map(|dy| (0..d).map(move |dx| (y0 + dy) * w + x0 + dx))
                .collect();
            let p = g.gather_rows(flat, rows)?;
            g.reshape(p, &[d, d, c])
        })
        .collect()
}

/// Per-pixel weight `Σ_j w_j · cover_j(pixel)` over all configured scales.
pub fn coverage_weights(h: usize, w: usize, cfg: &PatchConfig) -> Result<Vec<f64>> {
    let mut weights = vec![0.0; h * w];
    for (&d, &wj) in cfg.windows.iter().zip(&cfg.weights) {
        let mut cover = vec![0u32; h * w];
        for (y0, x0) in patch_origins(h, w, d, cfg.stride)? {
            for y in y0..y0 + d {
                for x in x0..x0 + d {
                    cover[y * w + x] += 1;
                }
            }
        }
        for (acc, &n) in weights.iter_mut().zip(&cover) {
            *acc += wj * f64::from(n);
        }
    }
    Ok(weights)
}

/// `K` learnable centres in `R^D` with positive smoothing factors.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub centers: ParamId,
    pub smoothing: ParamId,
    pub size: usize,
    pub dim: usize,
}

/// Smallest smoothing factor kept after an optimizer step.
pub const MIN_SMOOTHING: f64 = 1e-4;

impl Codebook {
    /// Centres uniform in `[−1, 1]^D`, smoothing factors 1.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f64>, name: &str, size: usize, dim: usize, rng: &mut R) -> Self {
        let centers = store.add(format!("{name}.centers"), Tensor::uniform(&[size, dim], -1.0, 1.0, rng));
        let smoothing = store.add_bounded(format!("{name}.smoothing"), Tensor::ones(&[size]), MIN_SMOOTHING);
        Self {
            centers,
            smoothing,
            size,
            dim,
        }
    }
}

pub struct Encoding {
    /// `K×D` residual aggregate.
    pub hist: Var,
    /// `N×K` soft assignment, rows sum to one.
    pub assignment: Var,
}

/// Soft-assignment residual encoding of the rows of `v` (`N×D`), each row's
/// residual scaled by `row_weights` when given.
pub fn encode_descriptors(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    v: Var,
    cb: &Codebook,
    row_weights: Option<Vec<f64>>,
) -> Result<Encoding> {
    let shape = g.shape(v).to_vec();
    if shape.len() != 2 || shape[1] != cb.dim {
        return Err(Error::contract(
            "encode_patch",
            format!("descriptors {shape:?} do not match codebook dimension {}", cb.dim),
        ));
    }
    let centers = g.param(store, cb.centers);
    let smoothing = g.param(store, cb.smoothing);
    let dist = g.pairwise_sq_dist(v, centers)?;
    let scaled = g.mul_along(dist, smoothing, 1)?;
    let logits = g.scale(scaled, -1.0);
    let assignment = g.softmax(logits, 1)?;
    let weighted = match row_weights {
        Some(w) => {
            let n = shape[0];
            let w = g.constant(Tensor::new(&[n], w)?);
            g.mul_along(assignment, w, 0)?
        }
        None => assignment,
    };
    let hist = g.residual_aggregate(weighted, v, centers)?;
    Ok(Encoding { hist, assignment })
}

/// Residual histogram of one `d×d×D` patch.
pub fn encode_patch(g: &mut Graph<f64>, store: &ParamStore<f64>, p: Var, cb: &Codebook) -> Result<Encoding> {
    let (h, w, c) = g.value(p).hwc("encode_patch")?;
    let v = g.reshape(p, &[h * w, c])?;
    encode_descriptors(g, store, v, cb, None)
}

pub struct Aggregate {
    /// Flattened `K·D` aggregate (normalised when configured).
    pub u: Var,
    /// Per-pixel assignment of the projected map, `H·W × K`.
    pub assignment: Var,
}

/// `U = Σ_j w_j Σ_i Ψ(P_i)` over every scale and window of `q`.
pub fn aggregate_multiscale(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    q: Var,
    cfg: &PatchConfig,
    cb: &Codebook,
    proj: &Linear,
) -> Result<Aggregate> {
    let (h, w, _) = g.value(q).hwc("aggregate_multiscale")?;
    cfg.check_extent(h, w)?;
    let projected = proj.forward_map(g, store, q)?;
    let descriptors = g.reshape(projected, &[h * w, proj.outputs])?;
    let weights = coverage_weights(h, w, cfg)?;
    let enc = encode_descriptors(g, store, descriptors, cb, Some(weights))?;
    let flat = g.reshape(enc.hist, &[cb.size * cb.dim])?;
    let u = if cfg.normalize {
        g.l2_normalize(flat, 1e-12)
    } else {
        flat
    };
    Ok(Aggregate {
        u,
        assignment: enc.assignment,
    })
}

/// Projection plus codebook: the learnable part of the patch encoder.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub cfg: PatchConfig,
    pub proj: Linear,
    pub codebook: Codebook,
}

impl PatchEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        cfg: PatchConfig,
        channels: usize,
        codebook_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = Linear::new(store, &format!("{name}.proj"), channels, cfg.embed_dim, false, rng);
        let codebook = Codebook::new(store, &format!("{name}.codebook"), codebook_size, cfg.embed_dim, rng);
        Ok(Self { cfg, proj, codebook })
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, q: Var) -> Result<Aggregate> {
        aggregate_multiscale(g, store, q, &self.cfg, &self.codebook, &self.proj)
    }
}

/// `Z = [GAP(Q); U]`.
pub fn fuse_global(g: &mut Graph<f64>, q: Var, u: Option<Var>) -> Result<Var> {
    let pooled = g.global_avg_pool(q)?;
    match u {
        Some(u) => {
            if g.value(u).rank() != 1 {
                return Err(Error::shape("fuse_global", g.shape(u), "expected a flat encoding"));
            }
            g.concat(&[pooled, u], 0)
        }
        None => Ok(pooled),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_from_closed_form() {
        assert_eq!(patch_count(8, 8, 3, 1).unwrap(), 36);
        assert_eq!(patch_count(5, 5, 5, 1).unwrap(), 1);
        assert_eq!(patch_count(7, 5, 3, 2).unwrap(), 6);
        assert_eq!(
            patch_origins(7, 5, 3, 2).unwrap(),
            vec![(0, 0), (0, 2), (2, 0), (2, 2), (4, 0), (4, 2)]
        );
        let err = patch_count(4, 8, 5, 1).unwrap_err().to_string();
        assert!(err.contains("d ≤ H"), "{err}");
    }

    #[test]
    fn degenerate_window_is_whole_map() {
        let mut g = Graph::new();
        let q = Tensor::<f64>::from_fn(&[3, 3, 2], |i| i as f64);
        let qv = g.constant(q.clone());
        let ps = extract_patches(&mut g, qv, 3, 1).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(g.value(ps[0]), &q);
    }

    #[test]
    fn single_centre_residual_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, "cb", 1, 2, &mut r);
        let p = Tensor::<f64>::uniform(&[2, 2, 2], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let enc = encode_patch(&mut g, &store, pv, &cb).unwrap();
        assert!(g.value(enc.assignment).data().iter().all(|&a| a == 1.0));
        let c = store.get(cb.centers).value.data().to_vec();
        for t in 0..2 {
            let expect: f64 = p.data().chunks(2).map(|v| v[t] - c[t]).sum();
            assert!((g.value(enc.hist).data()[t] - expect).abs() <= 1e-14);
        }
    }

    #[test]
    fn equidistant_descriptor_gets_uniform_row() {
        let mut store = ParamStore::new();
        let centers = store.add(
            "cb.centers",
            Tensor::matrix(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]),
        );
        let smoothing = store.add("cb.smoothing", Tensor::full(&[4], 0.7));
        let cb = Codebook {
            centers,
            smoothing,
            size: 4,
            dim: 2,
        };
        let mut g = Graph::new();
        let pv = g.constant(Tensor::zeros(&[1, 1, 2]));
        let enc = encode_patch(&mut g, &store, pv, &cb).unwrap();
        assert_eq!(g.value(enc.assignment).data(), &[0.25; 4]);
    }

    #[test]
    fn descriptors_at_centre_leave_zero_residual_row() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, "cb", 3, 2, &mut r);
        let cm = store.get(cb.centers).value.data()[2..4].to_vec();
        let mut g = Graph::new();
        let pv = g.constant(Tensor::new(&[2, 2, 2], cm.repeat(4)).unwrap());
        let enc = encode_patch(&mut g, &store, pv, &cb).unwrap();
        assert_eq!(&g.value(enc.hist).data()[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn coverage_counts_sum_to_window_area() {
        let cfg = PatchConfig {
            windows: vec![3],
            weights: vec![1.0],
            ..PatchConfig::default()
        };
        let w = coverage_weights(8, 8, &cfg).unwrap();
        assert_eq!(w.iter().sum::<f64>(), 36.0 * 9.0);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[3 * 8 + 3], 9.0);
    }

    #[test]
    fn fuse_global_layout() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::full(&[3, 3, 4], 0.25));
        let u = g.constant(Tensor::from_fn(&[6], |i| i as f64));
        let z = fuse_global(&mut g, q, Some(u)).unwrap();
        assert_eq!(
            g.value(z).data(),
            &[0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        );
    }
}
