//! Dense row-major tensors and the raw numeric kernels behind every
//! differentiable operation.
//!
//! Feature maps use the layout `H × W × C` (channels fastest). Kernels here
//! are plain functions over [`Tensor`] values; [`Graph`](super::Graph) records
//! them and pairs each forward kernel with its adjoint.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", shape, "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                shape,
                format!("expected {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `rows × cols` matrix from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(op, &self.shape, "expected H×W×C feature map")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

fn mat_dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, &t.shape, "expected a matrix")),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = mat_dims(a, "matmul")?;
    let (k2, n) = mat_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = mat_dims(a, "transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Out-of-range taps read the nearest edge pixel.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub pad_mode: PadMode,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
            pad_mode: PadMode::Zero,
        }
    }
}

impl ConvSpec {
    /// Output extent along one axis, or `None` when no window fits.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Source coordinate of a tap, `None` for a zero-padded tap.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap * self.dilation) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, extent as isize - 1) as usize),
            }
        }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<ConvGeom> {
    let (h, wd, cin) = x.hwc("conv2d")?;
    let (k, k2, wcin, cout) = match w.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d", &w.shape, "expected k×k×Cin×Cout kernel")),
    };
    if k != k2 || wcin != cin {
        return Err(Error::dim("conv2d", &x.shape, &w.shape));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::contract("conv2d", "stride and dilation must be ≥ 1"));
    }
    match (spec.out_extent(h, k), spec.out_extent(wd, k)) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            h,
            w: wd,
            cin,
            k,
            cout,
            oh,
            ow,
        }),
        _ => Err(Error::shape(
            "conv2d",
            &x.shape,
            format!(
                "output extent < 1 for kernel {k}, pad {}, dilation {}",
                spec.pad, spec.dilation
            ),
        )),
    }
}

/// 2-D convolution of an `H×W×Cin` map with a `k×k×Cin×Cout` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, spec)?;
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = spec.source(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = spec.source(ox, kx, g.w) else { continue };
                    let xs = &x.data[(iy * g.w + ix) * g.cin..][..g.cin];
                    let ws = &w.data[(ky * g.k + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        for (ov, &wv) in o.iter_mut().zip(&ws[ci * g.cout..(ci + 1) * g.cout]) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.oh, g.ow, g.cout], out)
}

/// Input and kernel gradients of a convolution, each only when requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Adjoint of [`conv2d`]: gradients w.r.t. the input map and the kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x, w, spec)?;
    if grad_out.shape != [g.oh, g.ow, g.cout] {
        return Err(Error::dim("conv2d_backward", &grad_out.shape, &[g.oh, g.ow, g.cout]));
    }
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &grad_out.data[(oy * g.ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = spec.source(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = spec.source(ox, kx, g.w) else { continue };
                    let xoff = (iy * g.w + ix) * g.cin;
                    let woff = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = &w.data[woff + ci * g.cout..][..g.cout];
                        if let Some(gx) = gx.as_mut() {
                            let mut acc = T::zero();
                            for (&gv, &wv) in go.iter().zip(wrow) {
                                acc = acc + gv * wv;
                            }
                            gx[xoff + ci] = gx[xoff + ci] + acc;
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xv = x.data[xoff + ci];
                            for (gwv, &gv) in gw[woff + ci * g.cout..][..g.cout].iter_mut().zip(go) {
                                *gwv = *gwv + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::new(&x.shape, d)).transpose()?,
        gw.map(|d| Tensor::new(&w.shape, d)).transpose()?,
    ))
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, format!("axis {axis} out of range")));
    }
    Ok(())
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", &x.shape, axis)?;
    let (outer, n, inner) = axis_split(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x.data[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (x.data[idx(j)] - m).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(&y.shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| y.data[idx(j)] * gy.data[idx(j)]).sum();
            for j in 0..n {
                gx[idx(j)] = y.data[idx(j)] * (gy.data[idx(j)] - dot);
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: gx,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Maps each input flat index to its output flat index after dropping `axes`.
pub(crate) fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for &a in &keep {
            o = o * shape[a] + idx[a];
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
        return Err(Error::shape("reduce", shape, format!("invalid axes {axes:?}")));
    }
    Ok(sorted)
}

/// Sum or mean over `axes`; the reduced axes are removed from the shape.
pub fn reduce<T: Scalar>(x: &Tensor<T>, axes: &[usize], kind: ReduceKind) -> Result<Tensor<T>> {
    let axes = validate_axes(&x.shape, axes)?;
    let (out_shape, map) = reduce_index_map(&x.shape, &axes);
    let out_len: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); out_len];
    for (&v, &o) in x.data.iter().zip(&map) {
        out[o] = out[o] + v;
    }
    if kind == ReduceKind::Mean {
        let count = T::lit((x.len() / out_len) as f64);
        out.iter_mut().for_each(|v| *v = *v / count);
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
    check_axis("concat", &first.shape, axis)?;
    for x in &xs[1..] {
        let compatible = x.rank() == first.rank()
            && x.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(a, (p, q))| a == axis || p == q);
        if !compatible {
            return Err(Error::dim("concat", &first.shape, &x.shape));
        }
    }
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let mut shape = first.shape.clone();
    shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape[axis] * inner;
            data.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// Source row/column of a nearest-neighbour resize from `src` to `dst` extent.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc("resize_nearest")?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            "resize_nearest",
            &[oh, ow, c],
            "target extent must be positive",
        ));
    }
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = nearest_source(y, h, oh);
        for xo in 0..ow {
            let sx = nearest_source(xo, w, ow);
            data.extend_from_slice(&x.data[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(&[oh, ow, c], data)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.hwc("global_avg_pool")?;
    reduce(x, &[0, 1], ReduceKind::Mean)
}

/// `(i, j) ↦ Σ_d (a_id − b_jd)²`, computed directly so entries are never negative.
pub fn pairwise_sq_dist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, d) = mat_dims(a, "pairwise_sq_dist")?;
    let (nb, d2) = mat_dims(b, "pairwise_sq_dist")?;
    if d != d2 {
        return Err(Error::dim("pairwise_sq_dist", &a.shape, &b.shape));
    }
    let mut out = Vec::with_capacity(na * nb);
    for i in 0..na {
        let ar = &a.data[i * d..(i + 1) * d];
        for j in 0..nb {
            let br = &b.data[j * d..(j + 1) * d];
            out.push(ar.iter().zip(br).map(|(&p, &q)| (p - q) * (p - q)).sum());
        }
    }
    Tensor::new(&[na, nb], out)
}

pub fn gather_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = mat_dims(x, "gather_rows")?;
    if rows.is_empty() {
        return Err(Error::contract("gather_rows", "empty index list"));
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= n {
            return Err(Error::contract(
                "gather_rows",
                format!("row {r} out of range for {n} rows"),
            ));
        }
        data.extend_from_slice(&x.data[r * d..(r + 1) * d]);
    }
    Tensor::new(&[rows.len(), d], data)
}

/// `H[k,t] = Σ_i a[i,k]·(v[i,t] − c[k,t])`, residuals formed explicitly.
pub fn residual_aggregate<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, kk) = mat_dims(a, "residual_aggregate")?;
    let (n2, d) = mat_dims(v, "residual_aggregate")?;
    let (k2, d2) = mat_dims(c, "residual_aggregate")?;
    if n != n2 {
        return Err(Error::dim("residual_aggregate", &a.shape, &v.shape));
    }
    if kk != k2 || d != d2 {
        return Err(Error::dim("residual_aggregate", &c.shape, &[kk, d]));
    }
    let mut out = vec![T::zero(); kk * d];
    for i in 0..n {
        let vi = &v.data[i * d..(i + 1) * d];
        for q in 0..kk {
            let aik = a.data[i * kk + q];
            let row = &mut out[q * d..(q + 1) * d];
            for ((o, &x), &cq) in row.iter_mut().zip(vi).zip(&c.data[q * d..(q + 1) * d]) {
                *o = *o + aik * (x - cq);
            }
        }
    }
    Tensor::new(&[kk, d], out)
}

/// Multiplies (or adds) `v` along `axis` of `x`; `v.len() == x.shape[axis]`.
pub fn broadcast_along<T: Scalar>(
    x: &Tensor<T>,
    v: &Tensor<T>,
    axis: usize,
    f: impl Fn(T, T) -> T,
    op: &'static str,
) -> Result<Tensor<T>> {
    check_axis(op, &x.shape, axis)?;
    if v.rank() != 1 || v.len() != x.shape[axis] {
        return Err(Error::dim(op, &x.shape, &v.shape));
    }
    let (outer, n, inner) = axis_split(&x.shape, axis);
    let mut data = x.data.clone();
    for o in 0..outer {
        for j in 0..n {
            let s = v.data[j];
            for e in &mut data[(o * n + j) * inner..][..inner] {
                *e = f(*e, s);
            }
        }
    }
    Tensor::new(&x.shape, data)
}

/// Sums `x` over every axis except `axis`.
pub(crate) fn sum_except<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(&x.shape, axis);
    let mut out = vec![T::zero(); n];
    for o in 0..outer {
        for (j, acc) in out.iter_mut().enumerate() {
            for &e in &x.data[(o * n + j) * inner..][..inner] {
                *acc = *acc + e;
            }
        }
    }
    Tensor {
        shape: vec![n],
        data: out,
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log Σ exp(x)` over a slice, stabilised by the maximum.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}
