//! Graph-enhanced primitive correlation.
//!
//! * [`ContextGraph`]: fully-connected graph over the pixels of one stage,
//!   propagated with an embedded-Gaussian affinity normalised per node.
//! * [`MultiStageGraph`]: bipartite graph from a shallower stage to a deeper
//!   one. Edges join each source pixel to the `n` target pixels whose
//!   parameter-free dilated context features are closest.
//! * [`Fusion`]: merges both graph outputs into a sigmoid gate applied to the
//!   final backbone stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::ndtensor::{self, ConvSpec, Graph, PadMode, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Pairwise affinity used by the context-aware graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Affinity {
    /// `exp(θ(x_i)·φ(x_j))` with learned 1×1 query/key projections.
    #[default]
    EmbeddedGaussian,
    /// `exp(x_i·x_j)` on the raw features.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextGraphConfig {
    pub channels: usize,
    pub attn_channels: usize,
    pub affinity: Affinity,
    pub residual: bool,
}

impl ContextGraphConfig {
    /// Defaults for a stage with `channels` channels (`attn = ceil(C/2)`).
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            attn_channels: channels.div_ceil(2),
            affinity: Affinity::EmbeddedGaussian,
            residual: true,
        }
    }
}

/// Learned projections of the context-aware graph layer.
#[derive(Clone, Debug)]
pub struct ContextGraph {
    pub cfg: ContextGraphConfig,
    query: Option<Linear>,
    key: Option<Linear>,
    value: Linear,
    out: Linear,
}

pub struct ContextGraphOutput {
    pub out: Var,
    /// Row-stochastic `N×N` attention matrix, row = receiving node.
    pub attention: Var,
}

impl ContextGraph {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f64>, name: &str, cfg: ContextGraphConfig, rng: &mut R) -> Self {
        let (c, a) = (cfg.channels, cfg.attn_channels);
        let (query, key) = match cfg.affinity {
            Affinity::EmbeddedGaussian => (
                Some(Linear::new(store, &format!("{name}.query"), c, a, true, rng)),
                // A key bias only shifts each attention row by a constant,
                // which the row softmax cancels, so the key has none.
                Some(Linear::new(store, &format!("{name}.key"), c, a, false, rng)),
            ),
            Affinity::Gaussian => (None, None),
        };
        let value = Linear::new(store, &format!("{name}.value"), c, a, true, rng);
        let out = Linear::new(store, &format!("{name}.out"), a, c, true, rng);
        Self {
            cfg,
            query,
            key,
            value,
            out,
        }
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, f: Var) -> Result<ContextGraphOutput> {
        let (h, w, c) = g.value(f).hwc("context_aware_graph")?;
        if c != self.cfg.channels {
            return Err(Error::dim(
                "context_aware_graph",
                &[h, w, c],
                &[h, w, self.cfg.channels],
            ));
        }
        let x = g.reshape(f, &[h * w, c])?;
        let (theta, phi) = match (&self.query, &self.key) {
            (Some(q), Some(k)) => (q.forward(g, store, x)?, k.forward(g, store, x)?),
            _ => (x, x),
        };
        let phi_t = g.transpose(phi)?;
        let scores = g.matmul(theta, phi_t)?;
        let attention = g.softmax(scores, 1)?;
        let values = self.value.forward(g, store, x)?;
        let mixed = g.matmul(attention, values)?;
        let projected = self.out.forward(g, store, mixed)?;
        let projected = g.reshape(projected, &[h, w, c])?;
        let out = if self.cfg.residual {
            g.add(f, projected)?
        } else {
            projected
        };
        Ok(ContextGraphOutput { out, attention })
    }
}

/// Fixed `k×k×C×C` kernel averaging the `k²−1` off-centre taps channel by channel.
pub fn context_kernel<T: Scalar>(channels: usize, k: usize) -> Tensor<T> {
    let centre = k / 2;
    let weight = T::one() / T::lit((k * k - 1) as f64);
    let mut kernel = Tensor::zeros(&[k, k, channels, channels]);
    let data = kernel.data_mut();
    for ky in 0..k {
        for kx in 0..k {
            if ky == centre && kx == centre {
                continue;
            }
            for c in 0..channels {
                data[((ky * k + kx) * channels + c) * channels + c] = weight;
            }
        }
    }
    kernel
}

fn context_spec(k: usize, dilation: usize) -> Result<ConvSpec> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::contract(
            "dilated_context",
            format!("kernel size must be odd and ≥ 3, got {k}"),
        ));
    }
    if dilation == 0 {
        return Err(Error::contract("dilated_context", "dilation must be ≥ 1"));
    }
    Ok(ConvSpec {
        stride: 1,
        pad: dilation * (k / 2),
        dilation,
        pad_mode: PadMode::Replicate,
    })
}

/// Parameter-free context feature: mean of the `k²−1` dilated neighbours of
/// each pixel (centre excluded), edges replicated.
pub fn dilated_context<T: Scalar>(f: &Tensor<T>, dilation: usize, k: usize) -> Result<Tensor<T>> {
    let (_, _, c) = f.hwc("dilated_context")?;
    let spec = context_spec(k, dilation)?;
    ndtensor::conv2d(f, &context_kernel(c, k), &spec)
}

/// Differentiable form of [`dilated_context`].
pub fn dilated_context_var(g: &mut Graph<f64>, f: Var, dilation: usize, k: usize) -> Result<Var> {
    let (_, _, c) = g.value(f).hwc("dilated_context")?;
    let spec = context_spec(k, dilation)?;
    let kernel = g.constant(context_kernel(c, k));
    g.conv2d(f, kernel, spec)
}

/// Sparse bipartite adjacency: each source pixel lists exactly `n` target
/// pixels (row-major indices), nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteAdjacency {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub n: usize,
    targets: Vec<usize>,
    distances: Vec<f64>,
}

impl BipartiteAdjacency {
    pub fn sources(&self) -> usize {
        self.source.0 * self.source.1
    }

    pub fn neighbors(&self, src: usize) -> &[usize] {
        &self.targets[src * self.n..(src + 1) * self.n]
    }

    /// Squared context distances matching [`Self::neighbors`].
    pub fn distances(&self, src: usize) -> &[f64] {
        &self.distances[src * self.n..(src + 1) * self.n]
    }

    /// All neighbour lists concatenated in source order.
    pub fn flat_targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn target_coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.target.1, idx % self.target.1)
    }

    /// Dense 0/1 adjacency, `sources × targets`, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        let nt = self.target.0 * self.target.1;
        let mut dense = vec![0u8; self.sources() * nt];
        for s in 0..self.sources() {
            for &t in self.neighbors(s) {
                dense[s * nt + t] = 1;
            }
        }
        dense
    }
}

/// For every pixel of `fc0`, the `n` pixels of `fc1` with the smallest
/// squared Euclidean distance. Ties go to the smaller row-major target index.
pub fn topn_neighbors(fc0: &Tensor<f64>, fc1: &Tensor<f64>, n: usize) -> Result<BipartiteAdjacency> {
    let (h0, w0, c0) = fc0.hwc("topn_neighbors")?;
    let (h1, w1, c1) = fc1.hwc("topn_neighbors")?;
    if c0 != c1 {
        return Err(Error::dim("topn_neighbors", fc0.shape(), fc1.shape()));
    }
    let nt = h1 * w1;
    if n == 0 || n > nt {
        return Err(Error::contract(
            "topn_neighbors",
            format!("neighbour count {n} must lie in 1..={nt}"),
        ));
    }
    let a = fc0.reshape(&[h0 * w0, c0])?;
    let b = fc1.reshape(&[nt, c1])?;
    let dist = ndtensor::pairwise_sq_dist(&a, &b)?;
    let mut targets = Vec::with_capacity(h0 * w0 * n);
    let mut distances = Vec::with_capacity(h0 * w0 * n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(nt);
    for row in dist.data().chunks(nt) {
        order.clear();
        order.extend(row.iter().copied().zip(0..));
        let cmp = |p: &(f64, usize), q: &(f64, usize)| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1));
        if n < nt {
            order.select_nth_unstable_by(n - 1, cmp);
        }
        let best = &mut order[..n];
        best.sort_unstable_by(cmp);
        targets.extend(best.iter().map(|p| p.1));
        distances.extend(best.iter().map(|p| p.0));
    }
    Ok(BipartiteAdjacency {
        source: (h0, w0),
        target: (h1, w1),
        n,
        targets,
        distances,
    })
}

/// Mean of each source pixel's neighbour features in `f1`, projected to the
/// source stage's channel count; output has the source stage's extent.
pub fn bipartite_propagate(
    g: &mut Graph<f64>,
    store: &ParamStore<f64>,
    f1: Var,
    adj: &BipartiteAdjacency,
    proj: &Linear,
) -> Result<Var> {
    let (h1, w1, c1) = g.value(f1).hwc("bipartite_propagate")?;
    if (h1, w1) != adj.target || c1 != proj.inputs {
        return Err(Error::contract(
            "bipartite_propagate",
            format!(
                "features {h1}×{w1}×{c1} do not match adjacency target {:?} / projection input {}",
                adj.target, proj.inputs
            ),
        ));
    }
    let ns = adj.sources();
    let flat = g.reshape(f1, &[h1 * w1, c1])?;
    let gathered = g.gather_rows(flat, adj.flat_targets().to_vec())?;
    let grouped = g.reshape(gathered, &[ns, adj.n, c1])?;
    let mean = g.mean(grouped, &[1])?;
    let projected = proj.forward(g, store, mean)?;
    g.reshape(projected, &[adj.source.0, adj.source.1, proj.outputs])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiStageGraphConfig {
    pub source_stage: usize,
    pub target_stage: usize,
    pub dilation: usize,
    pub kernel: usize,
    pub neighbors: usize,
}

impl Default for MultiStageGraphConfig {
    fn default() -> Self {
        Self {
            source_stage: 2,
            target_stage: 3,
            dilation: 2,
            kernel: 3,
            neighbors: 4,
        }
    }
}

/// Bipartite graph layer between two stages.
#[derive(Clone, Debug)]
pub struct MultiStageGraph {
    pub cfg: MultiStageGraphConfig,
    pub proj: Linear,
}

pub struct MultiStageGraphOutput {
    pub out: Var,
    pub adjacency: BipartiteAdjacency,
}

impl MultiStageGraph {
    /// `source_channels`/`target_channels` are the channel counts of the two stages.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        cfg: MultiStageGraphConfig,
        source_channels: usize,
        target_channels: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            target_channels,
            source_channels,
            false,
            rng,
        );
        Self { cfg, proj }
    }

    /// Builds the adjacency from context features and propagates along it.
    ///
    /// Target features are compared after projection into the source
    /// channel space; the adjacency itself carries no gradient.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        f0: Var,
        f1: Var,
    ) -> Result<MultiStageGraphOutput> {
        let (h1, w1, c1) = g.value(f1).hwc("multi_stage_graph")?;
        let w = &store.get(self.proj.weight).value;
        let projected =
            ndtensor::matmul(&g.value(f1).reshape(&[h1 * w1, c1])?, w)?.reshape(&[h1, w1, self.proj.outputs])?;
        let fc0 = dilated_context(g.value(f0), self.cfg.dilation, self.cfg.kernel)?;
        let fc1 = dilated_context(&projected, self.cfg.dilation, self.cfg.kernel)?;
        let adjacency = topn_neighbors(&fc0, &fc1, self.cfg.neighbors)?;
        let out = bipartite_propagate(g, store, f1, &adjacency, &self.proj)?;
        Ok(MultiStageGraphOutput { out, adjacency })
    }
}

/// `1×1` convolution + sigmoid producing the texture-aware gate.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub conv: Linear,
}

pub struct FusionOutput {
    pub q: Var,
    pub gate: Var,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f64>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Linear::new(store, &format!("{name}.conv"), in_channels, out_channels, true, rng),
        }
    }

    /// Resizes the present graph outputs to `f_last`'s extent, concatenates
    /// them along channels, and returns `Q = F ⊙ V + F` with
    /// `V = sigmoid(conv(concat))`.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        inputs: &[Var],
        f_last: Var,
    ) -> Result<FusionOutput> {
        let (h, w, c) = g.value(f_last).hwc("fuse")?;
        if inputs.is_empty() {
            return Err(Error::contract("fuse", "no graph features to fuse"));
        }
        let mut resized = Vec::with_capacity(inputs.len());
        for &x in inputs {
            g.value(x).hwc("fuse")?;
            resized.push(g.resize_nearest(x, h, w)?);
        }
        let cat = g.concat(&resized, 2)?;
        let cin = g.shape(cat)[2];
        if cin != self.conv.inputs || c != self.conv.outputs {
            return Err(Error::dim("fuse", &[cin, c], &[self.conv.inputs, self.conv.outputs]));
        }
        let logits = self.conv.forward_map(g, store, cat)?;
        let gate = g.sigmoid(logits);
        let gated = g.mul(f_last, gate)?;
        let q = g.add(gated, f_last)?;
        Ok(FusionOutput { q, gate })
    }
}
